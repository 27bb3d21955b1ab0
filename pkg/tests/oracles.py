"""Independent reference implementations the test suite checks against.

Everything here is deliberately naive: straight loops, textbook formulas,
no code shared with the package. Slow is fine; wrong is not.
"""

import math
import struct

import numpy as np

# Phi(4), frozen from math.erf; the dim-1 two-blob Bayes accuracy at
# centers +/-1 and sigma 0.25.
NORMAL_CDF_AT_4 = 0.9999683287581669


def finite_difference_grads(f, vectors, eps=1e-5):
    """Central differences of scalar f(list of 1-D arrays) per coordinate."""
    out = []
    for i in range(len(vectors)):
        g = np.zeros_like(vectors[i])
        for j in range(vectors[i].size):
            hi = [v.copy() for v in vectors]
            hi[i][j] += eps
            lo = [v.copy() for v in vectors]
            lo[i][j] -= eps
            g[j] = (f(hi) - f(lo)) / (2.0 * eps)
        out.append(g)
    return out


def reference_mlp_loss(weight_mats, bias_vecs, activation, x, y):
    """Mean softmax cross-entropy, one sample at a time, math module only."""
    total = 0.0
    for i in range(x.shape[0]):
        h = [float(v) for v in x[i]]
        for li in range(len(weight_mats)):
            w, b = weight_mats[li], bias_vecs[li]
            h = [
                sum(h[r] * float(w[r, c]) for r in range(len(h))) + float(b[c])
                for c in range(w.shape[1])
            ]
            if li < len(weight_mats) - 1:
                if activation == "relu":
                    h = [max(v, 0.0) for v in h]
                else:
                    h = [math.tanh(v) for v in h]
        m = max(h)
        exps = [math.exp(v - m) for v in h]
        total += -math.log(exps[int(y[i])] / sum(exps))
    return total / x.shape[0]


def cosine_ref(a, b, zero_tol=1e-12):
    na = math.sqrt(sum(float(v) ** 2 for v in a))
    nb = math.sqrt(sum(float(v) ** 2 for v in b))
    if na < zero_tol or nb < zero_tol:
        return 0.0
    dot = sum(float(p) * float(q) for p, q in zip(a, b))
    return max(-1.0, min(1.0, dot / (na * nb)))


def gc_brute(layer_deltas, xi):
    """Conflict count for one layer: layer_deltas is a list of 1-D arrays,
    one per client, in client order. Strict < per the definition."""
    n = len(layer_deltas)
    count = 0
    for u in range(n):
        for v in range(u + 1, n):
            if cosine_ref(layer_deltas[u], layer_deltas[v]) < xi:
                count += 1
    return count


def mean_ref(vectors):
    """Arithmetic mean of equally weighted vectors, transposed order."""
    n = len(vectors)
    out = np.zeros_like(vectors[0])
    for j in range(out.size):
        out[j] = sum(float(v[j]) for v in vectors) / n
    return out


def normal_cdf(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def middle_window(ids, k):
    """The k-window of ids whose center sits nearest the sequence center,
    ties resolved to the left."""
    target = (len(ids) - 1) / 2.0
    best_start, best_d = 0, None
    for start in range(len(ids) - k + 1):
        d = abs(start + (k - 1) / 2.0 - target)
        if best_d is None or d < best_d - 1e-12:
            best_start, best_d = start, d
    return tuple(ids[best_start:best_start + k])


def write_idx(images_path, labels_path, images, labels):
    """Big-endian IDX pair in the layout the loader expects."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, labels.shape[0]))
        fh.write(labels.tobytes())
