"""Experiment configuration: a strict JSON schema and dotted overrides.

Validation is deliberately fussy: unknown keys are rejected and every
message names the offending dotted path, so a typo fails loudly instead
of silently running a different experiment.
"""

import json
import math
from dataclasses import dataclass, field

from .aggregate import StrategySpec
from .data import BlobSpec, DirichletSpec, ToySpec
from .nn import MlpSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    num_clients: int
    rounds: int
    participation: float = 1.0
    lr: float = 0.05
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    probe_lemma: bool = False


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    write_gc_trace: bool = True
    write_cosines: bool = False


@dataclass(frozen=True)
class DataConfig:
    kind: str
    test_fraction: float = 0.2
    toy: ToySpec = None
    toy_iid: bool = False
    blobs: BlobSpec = None
    idx_images: str = None
    idx_labels: str = None
    partition: DirichletSpec = None


@dataclass(frozen=True)
class RunConfig:
    model: MlpSpec
    data: DataConfig
    strategy: StrategySpec
    train: TrainConfig
    output: OutputConfig
    echo: dict = field(repr=False, default=None)


def _expect_dict(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
    return value


def _take(block, path, key, kind, default=..., low=None, high=None, choices=None):
    """Pop block[key], checking type and range; `...` means required."""
    if key not in block:
        if default is ...:
            raise ConfigError(f"{path}.{key}: required")
        return default
    value = block.pop(key)
    where = f"{path}.{key}"
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    if low is not None and value < low:
        raise ConfigError(f"{where}: must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ConfigError(f"{where}: must be <= {high}, got {value}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{where}: must be one of {list(choices)}, got {value!r}")
    return value


def _reject_unknown(block, path):
    if block:
        key = sorted(block)[0]
        raise ConfigError(f"{path}.{key}: unknown key")


def _parse_model(raw):
    block = dict(_expect_dict(raw, "model"))
    input_dim = _take(block, "model", "input_dim", int, low=1)
    hidden = _take(block, "model", "hidden", list)
    if not isinstance(hidden, list) or not all(
        isinstance(h, int) and not isinstance(h, bool) for h in hidden
    ):
        raise ConfigError(f"model.hidden: expected a list of integers, got {hidden!r}")
    num_classes = _take(block, "model", "num_classes", int, low=2)
    activation = _take(block, "model", "activation", str, default="relu",
                       choices=("relu", "tanh"))
    _reject_unknown(block, "model")
    try:
        return MlpSpec(input_dim, tuple(hidden), num_classes, activation)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _parse_data(raw, num_clients):
    block = dict(_expect_dict(raw, "data"))
    kind = _take(block, "data", "kind", str, choices=("toy", "blobs", "idx"))
    test_fraction = _take(block, "data", "test_fraction", float, default=0.2)
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"data.test_fraction: must be in (0, 1), got {test_fraction}")
    toy = toy_iid = blobs = partition = None
    idx_images = idx_labels = None
    if "toy" in block:
        sub = dict(_expect_dict(block.pop("toy"), "data.toy"))
        n_per_domain = _take(sub, "data.toy", "n_per_domain", int, default=200, low=2)
        noise_fraction = _take(sub, "data.toy", "noise_fraction", float, default=0.1)
        toy_iid = _take(sub, "data.toy", "iid", bool, default=False)
        _reject_unknown(sub, "data.toy")
        try:
            toy = ToySpec(n_per_domain, noise_fraction)
        except ValueError as exc:
            raise ConfigError(f"data.toy: {exc}") from exc
    if "blobs" in block:
        sub = dict(_expect_dict(block.pop("blobs"), "data.blobs"))
        try:
            blobs = BlobSpec(
                num_classes=_take(sub, "data.blobs", "num_classes", int, low=2),
                dim=_take(sub, "data.blobs", "dim", int, low=1),
                n_per_class=_take(sub, "data.blobs", "n_per_class", int, default=200, low=1),
                spread=_take(sub, "data.blobs", "spread", float, default=1.0),
                scale=_take(sub, "data.blobs", "scale", float, default=1.0),
            )
        except ValueError as exc:
            raise ConfigError(f"data.blobs: {exc}") from exc
        _reject_unknown(sub, "data.blobs")
    if "idx" in block:
        sub = dict(_expect_dict(block.pop("idx"), "data.idx"))
        idx_images = _take(sub, "data.idx", "images", str)
        idx_labels = _take(sub, "data.idx", "labels", str)
        _reject_unknown(sub, "data.idx")
    if "partition" in block:
        sub = dict(_expect_dict(block.pop("partition"), "data.partition"))
        alpha = _take(sub, "data.partition", "alpha", float)
        with_replacement = _take(sub, "data.partition", "with_replacement", bool,
                                 default=True)
        _reject_unknown(sub, "data.partition")
        try:
            partition = DirichletSpec(num_clients, alpha, with_replacement)
        except ValueError as exc:
            raise ConfigError(f"data.partition: {exc}") from exc
    _reject_unknown(block, "data")
    if kind == "toy":
        if toy is None:
            toy = ToySpec()
            toy_iid = False
    elif kind == "blobs":
        if blobs is None:
            raise ConfigError("data.blobs: required when data.kind is 'blobs'")
        if partition is None:
            raise ConfigError("data.partition: required when data.kind is 'blobs'")
    else:
        if idx_images is None:
            raise ConfigError("data.idx: required when data.kind is 'idx'")
        if partition is None:
            raise ConfigError("data.partition: required when data.kind is 'idx'")
    return DataConfig(
        kind=kind,
        test_fraction=test_fraction,
        toy=toy,
        toy_iid=bool(toy_iid),
        blobs=blobs,
        idx_images=idx_images,
        idx_labels=idx_labels,
        partition=partition,
    )


def _parse_strategy(raw):
    block = dict(_expect_dict(raw, "strategy"))
    try:
        spec = StrategySpec(
            name=_take(block, "strategy", "name", str,
                       choices=("fedavg", "fedlag", "fixed")),
            k=_take(block, "strategy", "k", int, default=0),
            xi=_take(block, "strategy", "xi", float, default=0.0),
            warmup_rounds=_take(block, "strategy", "warmup_rounds", int, default=30),
            position=_take(block, "strategy", "position", str, default="last",
                           choices=("first", "middle", "last")),
            weighted_mean=_take(block, "strategy", "weighted_mean", bool, default=False),
        )
    except ValueError as exc:
        raise ConfigError(f"strategy: {exc}") from exc
    _reject_unknown(block, "strategy")
    return spec


def _parse_train(raw):
    block = dict(_expect_dict(raw, "run"))
    cfg = TrainConfig(
        num_clients=_take(block, "run", "num_clients", int, low=1),
        rounds=_take(block, "run", "rounds", int, low=1),
        participation=_take(block, "run", "participation", float, default=1.0),
        lr=_take(block, "run", "lr", float, default=0.05),
        epochs=_take(block, "run", "epochs", int, default=1, low=1),
        batch_size=_take(block, "run", "batch_size", int, default=32, low=1),
        seed=_take(block, "run", "seed", int, default=0),
        eval_every=_take(block, "run", "eval_every", int, default=1, low=1),
        probe_lemma=_take(block, "run", "probe_lemma", bool, default=False),
    )
    _reject_unknown(block, "run")
    if not -(2**63) <= cfg.seed < 2**63:
        raise ConfigError(f"run.seed: must fit in 64 bits, got {cfg.seed}")
    if not 0.0 < cfg.participation <= 1.0:
        raise ConfigError(f"run.participation: must be in (0, 1], got {cfg.participation}")
    if not cfg.lr > 0:
        raise ConfigError(f"run.lr: must be > 0, got {cfg.lr}")
    return cfg


def _parse_output(raw):
    block = dict(_expect_dict(raw, "output"))
    cfg = OutputConfig(
        dir=_take(block, "output", "dir", str, default="out"),
        write_gc_trace=_take(block, "output", "write_gc_trace", bool, default=True),
        write_cosines=_take(block, "output", "write_cosines", bool, default=False),
    )
    _reject_unknown(block, "output")
    return cfg


def sampled_count(participation, num_clients):
    """ceil(participation * U), robust to float fuzz on exact products."""
    return max(1, min(num_clients, math.ceil(participation * num_clients - 1e-12)))


def validate_config(raw):
    """Raw JSON dict -> RunConfig, or ConfigError naming the bad path."""
    raw = dict(_expect_dict(raw, "config"))
    for key in ("model", "data", "strategy", "run"):
        if key not in raw:
            raise ConfigError(f"{key}: required")
    train = _parse_train(raw.pop("run"))
    model = _parse_model(raw.pop("model"))
    data = _parse_data(raw.pop("data"), train.num_clients)
    strategy = _parse_strategy(raw.pop("strategy"))
    output = _parse_output(raw.pop("output")) if "output" in raw else OutputConfig()
    raw.pop("output", None)
    _reject_unknown(raw, "config")

    if data.kind == "toy":
        if model.input_dim != 2:
            raise ConfigError(
                f"model.input_dim: toy data is 2-D, got {model.input_dim}"
            )
        if model.num_classes != 2:
            raise ConfigError(
                f"model.num_classes: toy data has 2 classes, got {model.num_classes}"
            )
    if data.kind == "blobs":
        if model.input_dim != data.blobs.dim:
            raise ConfigError(
                f"model.input_dim: must equal data.blobs.dim "
                f"({data.blobs.dim}), got {model.input_dim}"
            )
        if model.num_classes != data.blobs.num_classes:
            raise ConfigError(
                f"model.num_classes: must equal data.blobs.num_classes "
                f"({data.blobs.num_classes}), got {model.num_classes}"
            )
    if strategy.name == "fedlag" and sampled_count(
        train.participation, train.num_clients
    ) < 2:
        raise ConfigError(
            "run.participation: fedlag needs at least 2 sampled clients per round"
        )
    if strategy.name == "fixed" and strategy.k > model.num_slots:
        raise ConfigError(
            f"strategy.k: fixed split wants {strategy.k} layers, "
            f"model has {model.num_slots}"
        )
    if train.probe_lemma and strategy.name != "fedlag":
        raise ConfigError("run.probe_lemma: only meaningful with strategy.name 'fedlag'")

    cfg = RunConfig(model, data, strategy, train, output)
    return RunConfig(model, data, strategy, train, output, echo=config_echo(cfg))


def config_echo(cfg):
    """Normalized dict with every default filled in; stable key order."""
    data = {"kind": cfg.data.kind, "test_fraction": cfg.data.test_fraction}
    if cfg.data.toy is not None:
        data["toy"] = {
            "n_per_domain": cfg.data.toy.n_per_domain,
            "noise_fraction": cfg.data.toy.noise_fraction,
            "iid": cfg.data.toy_iid,
        }
    if cfg.data.blobs is not None:
        b = cfg.data.blobs
        data["blobs"] = {
            "num_classes": b.num_classes, "dim": b.dim,
            "n_per_class": b.n_per_class, "spread": b.spread, "scale": b.scale,
        }
    if cfg.data.idx_images is not None:
        data["idx"] = {"images": cfg.data.idx_images, "labels": cfg.data.idx_labels}
    if cfg.data.partition is not None:
        data["partition"] = {
            "alpha": cfg.data.partition.alpha,
            "with_replacement": cfg.data.partition.with_replacement,
        }
    return {
        "model": {
            "input_dim": cfg.model.input_dim,
            "hidden": list(cfg.model.hidden),
            "num_classes": cfg.model.num_classes,
            "activation": cfg.model.activation,
        },
        "data": data,
        "strategy": {
            "name": cfg.strategy.name,
            "k": cfg.strategy.k,
            "xi": cfg.strategy.xi,
            "warmup_rounds": cfg.strategy.warmup_rounds,
            "position": cfg.strategy.position,
            "weighted_mean": cfg.strategy.weighted_mean,
        },
        "run": {
            "num_clients": cfg.train.num_clients,
            "rounds": cfg.train.rounds,
            "participation": cfg.train.participation,
            "lr": cfg.train.lr,
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "seed": cfg.train.seed,
            "eval_every": cfg.train.eval_every,
            "probe_lemma": cfg.train.probe_lemma,
        },
        "output": {
            "dir": cfg.output.dir,
            "write_gc_trace": cfg.output.write_gc_trace,
            "write_cosines": cfg.output.write_cosines,
        },
    }


def load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def apply_overrides(raw, overrides):
    """Apply KEY=VALUE entries with dotted paths onto the raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected KEY=VALUE")
        path, text = item.split("=", 1)
        keys = path.split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r}: bad key path {path!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        for key in keys[:-1]:
            if key not in node:
                node[key] = {}
            node = node[key]
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {key} is not an object")
        node[keys[-1]] = value
    return raw
