"""The round loop: sample clients, train locally, analyze, aggregate, score.

Every source of randomness is a keyed stream, so a round's outcome depends
only on (config, seed, round index), never on scheduling. Worker threads
only parallelize client training; results are reduced in ascending client
order, which makes 1 worker and 8 workers bit-identical.
"""

import os
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .aggregate import strategy_step
from .config import sampled_count
from .conflict import compute_trajectory, layer_cosines, run_gda
from .data import (
    TOY_NUM_DOMAINS,
    ClientDataset,
    load_idx,
    make_blobs,
    make_toy_domain,
    partition_dirichlet,
    split_train_test,
)
from .kernels import active as K
from .nn import evaluate, forward_loss, init_model, local_train

CHECKPOINT_MAGIC = b"FLSIM1"
CHECKPOINT_VERSION = 1

PROBE_LR_WARN = 1e-2
_SIGN_TOL = 1e-15


def resolve_workers(explicit=None):
    """Worker count: explicit arg, else FLSIM_THREADS (0 = auto), else 1."""
    value = explicit
    if value is None:
        raw = os.environ.get("FLSIM_THREADS", "")
        if raw == "":
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ValueError(f"FLSIM_THREADS must be an integer, got {raw!r}") from None
    if value < 0:
        raise ValueError(f"worker count must be >= 0, got {value}")
    if value == 0:
        return os.cpu_count() or 1
    return value


def sample_clients(num_clients, participation, round_index, seed):
    """Ascending ids of this round's participants, keyed on (seed, round)."""
    m = sampled_count(participation, num_clients)
    g = rng.stream(seed, rng.SAMPLE, a=round_index)
    return np.sort(g.choice(num_clients, size=m, replace=False))


def build_clients(cfg):
    """Materialize every client's shard for this config, deterministically."""
    seed = cfg.train.seed
    u = cfg.train.num_clients
    if cfg.data.kind == "toy":
        pools = [
            make_toy_domain(cid % TOY_NUM_DOMAINS, cfg.data.toy,
                            rng.derive_seed(seed, rng.DOMAIN, a=cid))
            for cid in range(u)
        ]
        if cfg.data.toy_iid:
            # same points as the domain-per-client split, redealt uniformly
            all_x = np.concatenate([p[0] for p in pools])
            all_y = np.concatenate([p[1] for p in pools])
            order = rng.stream(seed, rng.SPLIT, a=u).permutation(len(all_y))
            pools = [(all_x[order[cid::u]], all_y[order[cid::u]]) for cid in range(u)]
        clients = []
        for cid, (x, y) in enumerate(pools):
            g = rng.stream(seed, rng.SPLIT, a=cid)
            tr_x, tr_y, te_x, te_y = split_train_test(x, y, cfg.data.test_fraction, g)
            clients.append(ClientDataset(cid, tr_x, tr_y, te_x, te_y, 2))
        return clients
    if cfg.data.kind == "blobs":
        x, y = make_blobs(cfg.data.blobs, seed)
        return partition_dirichlet(
            x, y, cfg.data.partition, cfg.data.blobs.num_classes,
            cfg.data.test_fraction, seed,
        )
    x, y = load_idx(cfg.data.idx_images, cfg.data.idx_labels)
    if cfg.model.input_dim != x.shape[1]:
        raise ValueError(
            f"model.input_dim {cfg.model.input_dim} does not match "
            f"IDX feature size {x.shape[1]}"
        )
    if int(y.max()) >= cfg.model.num_classes:
        raise ValueError(
            f"IDX labels reach {int(y.max())}, model has {cfg.model.num_classes} classes"
        )
    return partition_dirichlet(
        x, y, cfg.data.partition, cfg.model.num_classes, cfg.data.test_fraction, seed
    )


@dataclass(frozen=True, eq=False)
class RoundRecord:
    round_index: int
    participants: tuple
    mean_acc: float
    std_acc: float
    mean_loss: float
    global_loss: float
    selected: tuple
    report: object        # ConflictReport, or None with fewer than 2 participants
    wall_ms: float
    evaluated: bool


@dataclass(frozen=True, eq=False)
class LemmaProbeRecord:
    """Observed vs first-order predicted per-client loss change.

    observed[i]: client i's train loss under its split broadcast minus under
    the full-mean broadcast. predicted[i]: the linearized bound computed from
    trajectory norms and cosines over the personalized set. The lemma-2 pair
    aggregates both across clients.
    """

    round_index: int
    client_ids: tuple
    observed: tuple
    predicted: tuple
    agreements: tuple
    personalized: tuple
    lemma2_observed: float
    lemma2_predicted: float

    @property
    def agree_fraction(self):
        return sum(self.agreements) / len(self.agreements)


def _sign(value):
    if abs(value) < _SIGN_TOL:
        return 0
    return 1 if value > 0 else -1


def probe_lemma1(spec, clients, receiveds, broadcast, trajectories, lr):
    """Compare both broadcast rules on each client's train loss.

    The engine calls this only on conflict-driven rounds; the split and the
    full mean are built from the same received models, so the difference is
    purely the personalized layers.
    """
    if lr > PROBE_LR_WARN:
        warnings.warn(
            f"probe linearization is unreliable at lr={lr} (> {PROBE_LR_WARN})",
            stacklevel=2,
        )
    ids = sorted(receiveds)
    u = len(ids)
    personalized = tuple(broadcast.personalized)
    trajs = [trajectories[cid] for cid in ids]
    norms = {
        lid: np.array([float(np.sqrt(np.dot(t.layer(lid), t.layer(lid)))) for t in trajs])
        for lid in personalized
    }
    cosines = {lid: layer_cosines(trajs, lid) for lid in personalized}
    observed, predicted, agreements = [], [], []
    for i, cid in enumerate(ids):
        data = clients[cid]
        split_loss = forward_loss(broadcast.per_client[cid], spec, data.train_x, data.train_y)
        mean_loss = forward_loss(broadcast.global_model, spec, data.train_x, data.train_y)
        obs = split_loss - mean_loss
        pred = 0.0
        for lid in personalized:
            n = norms[lid]
            c = cosines[lid]
            for j in range(u):
                pred += n[i] * (n[i] - c[i, j] * n[j])
        pred *= -lr / u
        observed.append(obs)
        predicted.append(pred)
        agreements.append(_sign(obs) == _sign(pred))
    lemma2_observed = float(np.mean(observed)) if observed else 0.0
    lemma2_predicted = float(np.mean(predicted)) if predicted else 0.0
    return LemmaProbeRecord(
        broadcast.round_index,
        tuple(ids),
        tuple(observed),
        tuple(predicted),
        tuple(agreements),
        personalized,
        lemma2_observed,
        lemma2_predicted,
    )


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    cfg: object
    records: list
    probes: list
    models: dict
    global_model: object
    clients: list
    total_wall_s: float
    backend: str

    @property
    def final(self):
        return self.records[-1]


class Engine:
    """Mutable run state: per-client broadcast models plus the mean model."""

    def __init__(self, cfg, workers=None):
        self.cfg = cfg
        self.workers = resolve_workers(workers)
        self.clients = build_clients(cfg)
        start = init_model(cfg.model, cfg.train.seed)
        self.models = {c.client_id: start for c in self.clients}
        self.global_model = start
        self.next_round = 0
        self.records = []
        self.probes = []
        self._carry = None
        self._pool_x = np.concatenate([c.test_x for c in self.clients])
        self._pool_y = np.concatenate([c.test_y for c in self.clients])
        self._sizes = {c.client_id: c.num_train for c in self.clients}

    def _train_participants(self, participants, round_index):
        cfg = self.cfg

        def job(cid):
            c = self.clients[cid]
            return local_train(
                self.models[cid], cfg.model, c.train_x, c.train_y,
                cfg.train.lr, cfg.train.epochs, cfg.train.batch_size,
                rng.derive_seed(cfg.train.seed, rng.CLIENT, a=cid, b=round_index),
            )

        ids = [int(cid) for cid in participants]
        if self.workers == 1 or len(ids) == 1:
            return {cid: job(cid) for cid in ids}
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = {cid: pool.submit(job, cid) for cid in ids}
            return {cid: futures[cid].result() for cid in ids}

    def run_round(self, round_index):
        cfg = self.cfg
        strategy = cfg.strategy
        started = time.perf_counter()
        participants = sample_clients(
            cfg.train.num_clients, cfg.train.participation, round_index, cfg.train.seed
        )
        received = self._train_participants(participants, round_index)
        ids = sorted(received)

        report = None
        if len(ids) >= 2:
            trace_k = strategy.k if strategy.conflict_driven(round_index) else 0
            trace_xi = strategy.xi if strategy.name == "fedlag" else 0.0
            report = run_gda(
                {cid: self.models[cid] for cid in ids}, received,
                trace_xi, trace_k, round_index,
            )
        trajectories = {
            cid: compute_trajectory(cid, self.models[cid], received[cid])
            for cid in ids
        }

        broadcast = strategy_step(
            strategy, round_index, received, report, weights=self._sizes
        )
        if cfg.train.probe_lemma and strategy.conflict_driven(round_index):
            self.probes.append(
                probe_lemma1(
                    cfg.model, self.clients, received, broadcast,
                    trajectories, cfg.train.lr,
                )
            )

        for cid in ids:
            self.models[cid] = broadcast.per_client[cid]
        self.global_model = broadcast.global_model

        do_eval = (
            (round_index % cfg.train.eval_every == 0)
            or (round_index == cfg.train.rounds - 1)
            or self._carry is None
        )
        if do_eval:
            losses, accs = [], []
            for cid in ids:
                c = self.clients[cid]
                loss, acc = evaluate(self.models[cid], cfg.model, c.test_x, c.test_y)
                losses.append(loss)
                accs.append(acc)
            global_loss, _ = evaluate(
                self.global_model, cfg.model, self._pool_x, self._pool_y
            )
            self._carry = (
                float(np.mean(accs)),
                float(np.std(accs)),
                float(np.mean(losses)),
                float(global_loss),
            )
        mean_acc, std_acc, mean_loss, global_loss = self._carry

        record = RoundRecord(
            round_index=round_index,
            participants=tuple(ids),
            mean_acc=mean_acc,
            std_acc=std_acc,
            mean_loss=mean_loss,
            global_loss=global_loss,
            selected=tuple(broadcast.personalized),
            report=report,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            evaluated=do_eval,
        )
        self.records.append(record)
        self.next_round = round_index + 1
        return record


def run_experiment(cfg, workers=None, resume=None):
    """Run all rounds (or the remainder, when resuming from a checkpoint)."""
    started = time.perf_counter()
    engine = Engine(cfg, workers)
    if resume is not None:
        restore_engine(engine, resume)
    for round_index in range(engine.next_round, cfg.train.rounds):
        engine.run_round(round_index)
    if not engine.records:
        raise ValueError("nothing to run: checkpoint already covers every round")
    return ExperimentResult(
        cfg=cfg,
        records=engine.records,
        probes=engine.probes,
        models=dict(engine.models),
        global_model=engine.global_model,
        clients=engine.clients,
        total_wall_s=time.perf_counter() - started,
        backend=K.BACKEND,
    )


def _pack_model(model):
    parts = [struct.pack("<I", len(model))]
    for slot in model:
        parts.append(struct.pack("<BB", int(slot.trainable), len(slot.shape)))
        for dim in slot.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(slot.values.astype("<f8").tobytes())
    return b"".join(parts)


def _unpack_model(buf, offset):
    from .nn import LayeredParams, LayerSlot

    (num_slots,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    slots = []
    for lid in range(num_slots):
        trainable, ndim = struct.unpack_from("<BB", buf, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        count = 1
        for dim in shape:
            count *= dim
        values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        slots.append(LayerSlot(lid, tuple(shape), bool(trainable), values))
    return LayeredParams(slots), offset


@dataclass(frozen=True)
class CheckpointState:
    next_round: int
    seed: int
    global_model: object
    models: dict


def save_checkpoint(path, next_round, seed, global_model, models):
    """Binary snapshot: magic FLSIM1, version, round cursor, all models."""
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<BQqI", CHECKPOINT_VERSION, next_round, seed, len(models)),
        _pack_model(global_model),
    ]
    for cid in sorted(models):
        parts.append(struct.pack("<I", cid))
        parts.append(_pack_model(models[cid]))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic mismatch)")
    offset = len(CHECKPOINT_MAGIC)
    version, next_round, seed, num_models = struct.unpack_from("<BQqI", buf, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset += struct.calcsize("<BQqI")
    global_model, offset = _unpack_model(buf, offset)
    models = {}
    for _ in range(num_models):
        (cid,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        models[cid], offset = _unpack_model(buf, offset)
    return CheckpointState(next_round, seed, global_model, models)


def restore_engine(engine, state):
    from .nn import check_congruent

    if state.seed != engine.cfg.train.seed:
        raise ValueError(
            f"checkpoint seed {state.seed} does not match config seed "
            f"{engine.cfg.train.seed}"
        )
    if set(state.models) != set(engine.models):
        raise ValueError("checkpoint client set does not match config")
    check_congruent(engine.global_model, state.global_model)
    for cid, model in state.models.items():
        check_congruent(engine.models[cid], model)
    engine.models = dict(state.models)
    engine.global_model = state.global_model
    engine.next_round = state.next_round
