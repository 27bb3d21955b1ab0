"""Models as flat layered parameter lists, plus exact-gradient MLP ops.

A model is a LayeredParams: an ordered tuple of LayerSlots, one per weight
matrix and one per bias vector, ids 0..L-1. Keeping weights and biases in
separate slots means aggregation and conflict analysis see the network at
the granularity the split-broadcast rule operates on.

Slot values are flat float64 arrays and are frozen (read-only) once built,
so every op here is pure: new parameters come back as new objects.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .kernels import active as K

ACTIVATIONS = {"relu": K.RELU, "tanh": K.TANH}


class CongruenceError(ValueError):
    """Two models do not share layer count, shapes, or trainable flags."""


@dataclass(frozen=True, eq=False)
class LayerSlot:
    """One parameter block: flat values plus its logical shape."""

    layer_id: int
    shape: tuple
    trainable: bool
    values: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        v = np.array(self.values, dtype=np.float64, copy=True).ravel()
        expected = 1
        for s in shape:
            if s < 0:
                raise ValueError(f"layer {self.layer_id}: negative dim in {shape}")
            expected *= s
        if v.size != expected:
            raise ValueError(
                f"layer {self.layer_id}: {v.size} values for shape {shape}"
            )
        if not np.isfinite(v).all():
            raise ValueError(f"layer {self.layer_id}: non-finite parameter values")
        v.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", v)

    @property
    def size(self):
        return self.values.size


class LayeredParams:
    """Ordered layer slots with ids 0..L-1."""

    __slots__ = ("slots",)

    def __init__(self, slots):
        slots = tuple(slots)
        for i, s in enumerate(slots):
            if s.layer_id != i:
                raise ValueError(f"slot {i} carries layer_id {s.layer_id}")
        self.slots = slots

    def __len__(self):
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, layer_id):
        return self.slots[layer_id]

    def signature(self):
        return tuple((s.shape, s.trainable) for s in self.slots)

    def selectable_ids(self):
        """Layers eligible for personalization: trainable with parameters."""
        return tuple(s.layer_id for s in self.slots if s.trainable and s.size > 0)

    def with_values(self, values):
        """Same structure, new values (sequence ordered by layer_id)."""
        if len(values) != len(self.slots):
            raise ValueError(f"expected {len(self.slots)} value arrays")
        return LayeredParams(
            LayerSlot(s.layer_id, s.shape, s.trainable, v)
            for s, v in zip(self.slots, values)
        )


def congruent(a, b):
    return len(a) == len(b) and a.signature() == b.signature()


def check_congruent(a, b):
    if not congruent(a, b):
        raise CongruenceError(
            f"models differ in structure: {a.signature()} vs {b.signature()}"
        )


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: input_dim -> hidden... -> num_classes, shared activation."""

    input_dim: int
    hidden: tuple
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden dims must be >= 1, got {self.hidden}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}"
            )

    def dims(self):
        return (self.input_dim, *self.hidden, self.num_classes)

    def slot_shapes(self):
        """(fan_in, fan_out) then (fan_out,) per affine map, in depth order."""
        d = self.dims()
        shapes = []
        for j in range(len(d) - 1):
            shapes.append((d[j], d[j + 1]))
            shapes.append((d[j + 1],))
        return shapes

    @property
    def num_slots(self):
        return 2 * (len(self.hidden) + 1)


@dataclass(frozen=True)
class Batch:
    """Features (n, d) float64 and labels (n,) int64."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"bad batch shapes: x {x.shape}, y {y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]


def init_model(spec, seed):
    """Fresh model: weights uniform in +-1/sqrt(fan_in), keyed per layer; biases 0.

    The draw for layer l comes from the counter-based stream (seed, l), so
    layers are independent and any one layer can be re-derived in isolation.
    """
    slots = []
    for layer_id, shape in enumerate(spec.slot_shapes()):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            g = rng.stream(seed, rng.INIT, a=layer_id)
            vals = g.uniform(-bound, bound, size=shape[0] * shape[1])
        else:
            vals = np.zeros(shape[0])
        slots.append(LayerSlot(layer_id, shape, True, vals))
    return LayeredParams(slots)


def _check_model(spec, params):
    shapes = [s.shape for s in params]
    if shapes != spec.slot_shapes():
        raise ValueError(
            f"model does not fit spec: slots {shapes} vs expected {spec.slot_shapes()}"
        )


def _matrices(spec, params):
    ws, bs = [], []
    for j in range(0, len(params), 2):
        ws.append(params[j].values.reshape(params[j].shape))
        bs.append(params[j + 1].values)
    return ws, bs


def _check_inputs(spec, x, y):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must be (n, {spec.input_dim}), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels must be ({x.shape[0]},), got {y.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input features")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(
            f"labels out of range [0, {spec.num_classes}): {int(y.min())}..{int(y.max())}"
        )
    return x, y


def forward_loss(params, spec, x, y):
    """Mean cross-entropy of the model on (x, y)."""
    _check_model(spec, params)
    x, y = _check_inputs(spec, x, y)
    ws, bs = _matrices(spec, params)
    logits = K.forward_logits(x, ws, bs, ACTIVATIONS[spec.activation])
    return K.loss_from_logits(logits, y)


def evaluate(params, spec, x, y):
    """(mean loss, accuracy) on (x, y); argmax ties go to the lowest class."""
    _check_model(spec, params)
    x, y = _check_inputs(spec, x, y)
    ws, bs = _matrices(spec, params)
    logits = K.forward_logits(x, ws, bs, ACTIVATIONS[spec.activation])
    loss = K.loss_from_logits(logits, y)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


def backward(params, spec, x, y):
    """Exact mean-loss gradient as a model congruent with `params`.

    Frozen slots carry zero gradients.
    """
    _check_model(spec, params)
    x, y = _check_inputs(spec, x, y)
    ws, bs = _matrices(spec, params)
    _, gw, gb = K.grads(x, y, ws, bs, ACTIVATIONS[spec.activation])
    out = []
    for j in range(len(gw)):
        for g, slot in ((gw[j], params[2 * j]), (gb[j], params[2 * j + 1])):
            if slot.trainable:
                out.append(np.asarray(g, dtype=np.float64).ravel())
            else:
                out.append(np.zeros(slot.size))
    return params.with_values(out)


def local_train(params, spec, x, y, lr, epochs, batch_size, seed):
    """Plain SGD for `epochs` passes; returns the trained model.

    Each epoch visits every sample once: membership of minibatches comes
    from a permutation keyed on (seed, epoch), and indices inside a batch
    are applied in ascending order, so one full-size batch reduces exactly
    to a single `backward` step on the raw data.
    """
    _check_model(spec, params)
    x, y = _check_inputs(spec, x, y)
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if epochs < 1 or batch_size < 1:
        raise ValueError(f"epochs and batch_size must be >= 1, got {epochs}, {batch_size}")
    act = ACTIVATIONS[spec.activation]
    vals = [s.values.copy() for s in params]
    train_flags = [s.trainable for s in params]
    n = x.shape[0]
    for epoch in range(epochs):
        perm = rng.stream(seed, rng.SHUFFLE, a=epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(perm[start:start + batch_size])
            ws = [vals[2 * j].reshape(params[2 * j].shape) for j in range(len(vals) // 2)]
            bs = [vals[2 * j + 1] for j in range(len(vals) // 2)]
            _, gw, gb = K.grads(x[idx], y[idx], ws, bs, act)
            for j in range(len(gw)):
                if train_flags[2 * j]:
                    vals[2 * j] -= lr * np.asarray(gw[j]).ravel()
                if train_flags[2 * j + 1]:
                    vals[2 * j + 1] -= lr * np.asarray(gb[j])
    return params.with_values(vals)
