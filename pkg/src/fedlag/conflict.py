"""Server-side layer-wise gradient conflict analysis.

A client's trajectory for a round is simply (received - broadcast), layer
by layer, so the server learns everything it needs from the parameters it
already ships and collects; no extra communication happens. Per layer, the
pairwise cosines of those trajectories are thresholded to a conflict count,
and the k most conflicted layers are proposed for personalization.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import active as K
from .nn import check_congruent

ZERO_NORM_TOL = K.ZERO_NORM_TOL


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-layer parameter movement of one client over one round."""

    client_id: int
    deltas: tuple  # flat float64 array per layer, model order

    def layer(self, layer_id):
        return self.deltas[layer_id]


def compute_trajectory(client_id, broadcast, received):
    """received - broadcast, layer-wise; models must be congruent."""
    check_congruent(broadcast, received)
    deltas = tuple(r.values - b.values for b, r in zip(broadcast, received))
    return Trajectory(client_id, deltas)


def _check_xi(xi):
    if not -1.0 < xi <= 0.0:
        raise ValueError(f"xi must satisfy -1 < xi <= 0, got {xi}")


def layer_cosine(tu, tv, layer_id):
    """Cosine between two clients' movement of one layer; 0 if either is dead."""
    a = tu.layer(layer_id)
    b = tv.layer(layer_id)
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        return 0.0
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def layer_cosines(trajectories, layer_id):
    """Pairwise cosine matrix for one layer, rows in trajectory order."""
    m = np.stack([t.layer(layer_id) for t in trajectories])
    return K.cosine_matrix(m)


def gc_score(trajectories, layer_id, xi):
    """Number of distinct client pairs whose cosine is strictly below xi."""
    _check_xi(xi)
    if len(trajectories) < 2:
        raise ValueError(f"need at least 2 trajectories, got {len(trajectories)}")
    c = layer_cosines(trajectories, layer_id)
    iu = np.triu_indices(len(trajectories), k=1)
    return int(np.count_nonzero(c[iu] < xi))


def select_layers(scores, k):
    """Ids of the k highest-scoring layers; ties go to the lower id.

    Returns the chosen ids sorted ascending. k larger than the number of
    scored layers selects them all.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return tuple(sorted(lid for lid, _ in ranked[:k]))


@dataclass(frozen=True, eq=False)
class ConflictReport:
    """One round's analysis: scores, selection, and (optionally) cosines."""

    round_index: int
    xi: float
    k: int
    scores: dict            # layer_id -> conflict count, selectable layers only
    selected: tuple         # chosen layer ids, ascending
    cosines: dict           # layer_id -> (U, U) matrix, client order

    def max_pairs(self, num_clients):
        return num_clients * (num_clients - 1) // 2

    def to_json(self, include_cosines=False):
        out = {
            "round": self.round_index,
            "xi": self.xi,
            "k": self.k,
            "layers": [
                {
                    "layer_id": lid,
                    "gc": int(self.scores[lid]),
                    "selected": lid in self.selected,
                }
                for lid in sorted(self.scores)
            ],
        }
        if include_cosines:
            out["cosines"] = {
                str(lid): np.asarray(self.cosines[lid]).tolist()
                for lid in sorted(self.cosines)
            }
        return out


def run_gda(broadcasts, receiveds, xi, k, round_index):
    """Analyze one round: trajectories, per-layer conflict counts, top-k pick.

    `broadcasts` and `receiveds` map client_id -> model for the same set of
    at least two participants. Only trainable layers that actually carry
    parameters are scored or selectable.
    """
    _check_xi(xi)
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if set(broadcasts) != set(receiveds):
        raise ValueError(
            f"client sets differ: {sorted(broadcasts)} vs {sorted(receiveds)}"
        )
    ids = sorted(broadcasts)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 participants, got {len(ids)}")
    trajectories = [
        compute_trajectory(cid, broadcasts[cid], receiveds[cid]) for cid in ids
    ]
    selectable = broadcasts[ids[0]].selectable_ids()
    scores = {}
    cosines = {}
    iu = np.triu_indices(len(ids), k=1)
    for lid in selectable:
        c = layer_cosines(trajectories, lid)
        cosines[lid] = c
        scores[lid] = int(np.count_nonzero(c[iu] < xi))
    selected = select_layers(scores, k)
    return ConflictReport(round_index, float(xi), int(k), scores, selected, cosines)
