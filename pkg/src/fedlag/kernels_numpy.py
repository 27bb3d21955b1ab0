"""Reference numpy kernels.

These define the numerical contracts; the compiled module in _kernels.pyx
mirrors them. All inputs are float64 and are never mutated. Within one
backend every reduction runs in a fixed order, so repeated calls on the
same inputs are bit-identical.
"""

import numpy as np

BACKEND = "numpy"

RELU = 0
TANH = 1

# below this, a trajectory is treated as dead and its cosines are 0
ZERO_NORM_TOL = 1e-12


def forward_logits(x, weights, biases, act):
    """Logits of an MLP: affine maps with `act` between them, linear output."""
    a = x
    last = len(weights) - 1
    for j, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        if j == last:
            a = z
        elif act == RELU:
            a = np.maximum(z, 0.0)
        else:
            a = np.tanh(z)
    return a


def loss_from_logits(logits, y):
    """Mean softmax cross-entropy, log-sum-exp stabilized."""
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def grads(x, y, weights, biases, act):
    """Mean cross-entropy and its exact gradients for every affine map.

    Returns (loss, [dW...], [db...]) with dW[j] shaped like weights[j].
    """
    n = len(weights)
    acts = [x]
    zs = []
    a = x
    for j in range(n):
        z = a @ weights[j] + biases[j]
        zs.append(z)
        if j < n - 1:
            a = np.maximum(z, 0.0) if act == RELU else np.tanh(z)
            acts.append(a)
    logits = zs[-1]
    bsz = x.shape[0]
    m = logits.max(axis=1)
    ex = np.exp(logits - m[:, None])
    sums = ex.sum(axis=1)
    loss = float(np.mean(m + np.log(sums) - logits[np.arange(bsz), y]))
    delta = ex / sums[:, None]
    delta[np.arange(bsz), y] -= 1.0
    delta /= bsz
    gw = [None] * n
    gb = [None] * n
    for j in range(n - 1, -1, -1):
        gw[j] = acts[j].T @ delta
        gb[j] = delta.sum(axis=0)
        if j > 0:
            da = delta @ weights[j].T
            if act == RELU:
                delta = da * (zs[j - 1] > 0.0)
            else:
                t = np.tanh(zs[j - 1])
                delta = da * (1.0 - t * t)
    return loss, gw, gb


def cosine_matrix(rows):
    """Pairwise cosines of the rows of a (U, D) matrix.

    Rows with norm below ZERO_NORM_TOL get cosine 0 against everything,
    themselves included. Values are clipped to [-1, 1].
    """
    m = np.asarray(rows, dtype=np.float64)
    norms = np.sqrt((m * m).sum(axis=1))
    safe = norms >= ZERO_NORM_TOL
    mn = np.zeros_like(m)
    if safe.any():
        mn[safe] = m[safe] / norms[safe, None]
    out = mn @ mn.T
    np.clip(out, -1.0, 1.0, out=out)
    return out
