"""Aggregation rules: plain averaging, split broadcast, fixed splits.

The split broadcast is the core move: globally shared layers get the
cross-client mean while personalized layers keep each client's own values.
With an empty personalized set every client receives the same mean model,
which is exactly federated averaging.
"""

from dataclasses import dataclass

import numpy as np

from .nn import check_congruent

STRATEGIES = ("fedavg", "fedlag", "fixed")
FIXED_POSITIONS = ("first", "middle", "last")


@dataclass(frozen=True)
class StrategySpec:
    """What the server does each round.

    fedavg: mean everything. fedlag: mean for warmup_rounds rounds, then
    personalize the k most conflicted layers at threshold xi. fixed:
    personalize a fixed window of k trainable layers at `position`.
    """

    name: str
    k: int = 0
    xi: float = 0.0
    warmup_rounds: int = 30
    position: str = "last"
    weighted_mean: bool = False

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.name!r}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.name == "fedlag":
            if not -1.0 < self.xi <= 0.0:
                raise ValueError(f"xi must satisfy -1 < xi <= 0, got {self.xi}")
            if self.warmup_rounds < 0:
                raise ValueError(f"warmup_rounds must be >= 0, got {self.warmup_rounds}")
        if self.name == "fixed":
            if self.position not in FIXED_POSITIONS:
                raise ValueError(
                    f"position must be one of {FIXED_POSITIONS}, got {self.position!r}"
                )
            if self.k < 1:
                raise ValueError(f"fixed split needs k >= 1, got {self.k}")

    def conflict_driven(self, round_index):
        """True when this round's selection comes from conflict analysis."""
        return self.name == "fedlag" and round_index >= self.warmup_rounds


@dataclass(frozen=True, eq=False)
class BroadcastSet:
    """What goes back to each participant, plus the retained mean model."""

    round_index: int
    global_model: object            # LayeredParams: full mean, all layers
    per_client: dict                # client_id -> LayeredParams
    personalized: tuple             # layer ids kept client-local, ascending

    def __post_init__(self):
        for model in self.per_client.values():
            check_congruent(self.global_model, model)


def aggregate_mean(models, weights=None):
    """Layer-wise mean over clients, summed in ascending client order.

    weights=None gives the plain 1/U mean. Otherwise weights maps
    client_id -> nonnegative mass (normalized internally).
    """
    if not models:
        raise ValueError("nothing to aggregate")
    ids = sorted(models)
    first = models[ids[0]]
    for cid in ids[1:]:
        check_congruent(first, models[cid])
    if weights is None:
        w = {cid: 1.0 / len(ids) for cid in ids}
    else:
        if set(weights) != set(models):
            raise ValueError("weights must cover exactly the aggregated clients")
        total = float(sum(weights[cid] for cid in ids))
        if not total > 0 or any(weights[cid] < 0 for cid in ids):
            raise ValueError("weights must be nonnegative with positive total")
        w = {cid: float(weights[cid]) / total for cid in ids}
    out = []
    for lid in range(len(first)):
        acc = np.zeros(first[lid].size)
        for cid in ids:
            acc += w[cid] * models[cid][lid].values
        out.append(acc)
    return first.with_values(out)


def split_broadcast(receiveds, personalized, round_index, weights=None):
    """Mean on shared layers, keep-own on personalized layers.

    The retained global model is the full mean (personalized layers
    included), matching what a plain averaging server would have kept.
    """
    ids = sorted(receiveds)
    mean = aggregate_mean(receiveds, weights)
    selectable = set(receiveds[ids[0]].selectable_ids())
    personalized = tuple(sorted(int(l) for l in personalized))
    for lid in personalized:
        if lid not in selectable:
            raise ValueError(
                f"layer {lid} cannot be personalized (not trainable or empty)"
            )
    keep = set(personalized)
    per_client = {}
    for cid in ids:
        vals = [
            receiveds[cid][lid].values if lid in keep else mean[lid].values
            for lid in range(len(mean))
        ]
        per_client[cid] = mean.with_values(vals)
    return BroadcastSet(round_index, mean, per_client, personalized)


def fixed_selection(position, k, selectable_ids):
    """A window of k layer ids out of the trainable sequence.

    first/last take the ends; middle centers the window, sitting one step
    left when it cannot be exactly centered.
    """
    if position not in FIXED_POSITIONS:
        raise ValueError(f"position must be one of {FIXED_POSITIONS}, got {position!r}")
    ids = tuple(selectable_ids)
    if not 1 <= k <= len(ids):
        raise ValueError(f"k must be in [1, {len(ids)}], got {k}")
    if position == "first":
        return ids[:k]
    if position == "last":
        return ids[len(ids) - k:]
    start = (len(ids) - k) // 2
    return ids[start:start + k]


def strategy_step(strategy, round_index, receiveds, report=None, weights=None):
    """One server step: pick the personalized set per strategy, then split.

    fedlag needs a ConflictReport once warm-up is over; fedavg and warm-up
    rounds personalize nothing; fixed ignores conflicts entirely.
    """
    if not isinstance(round_index, int) or round_index < 0:
        raise ValueError(f"round_index must be a nonnegative int, got {round_index}")
    ids = sorted(receiveds)
    if not ids:
        raise ValueError("no received models")
    mean_weights = weights if strategy.weighted_mean else None
    if strategy.name == "fedavg":
        personalized = ()
    elif strategy.name == "fixed":
        personalized = fixed_selection(
            strategy.position, strategy.k, receiveds[ids[0]].selectable_ids()
        )
    elif not strategy.conflict_driven(round_index):
        personalized = ()
    else:
        if report is None:
            raise ValueError(
                f"fedlag at round {round_index} needs a conflict report "
                f"(warm-up ended at round {strategy.warmup_rounds})"
            )
        personalized = report.selected
    return split_broadcast(receiveds, personalized, round_index, mean_weights)
