"""Dense tensors with reverse-mode autodiff and per-sample gradient extraction.

Tensors wrap float64 numpy arrays and record the operation tape as they are
combined; ``backward`` replays the tape for ordinary gradients. Tensors
created from a batch of samples carry ``batched=True``, meaning axis 0 indexes
samples. Kernels propagate that flag and mark the output ``sample_mixed``
whenever an operation lets information cross the sample axis (reducing over
it, reshaping through it, contracting it, ...).

``per_sample_backward`` exploits separability: for a sample-separable graph,
the cotangent of every batched intermediate under the summed loss already
equals its per-sample cotangent, so one backward pass yields all per-sample
parameter gradients by keeping the sample axis where ordinary backward would
sum it away. Graphs that mixed samples anywhere are rejected, which is
exactly why batch-statistics layers are unusable under per-sample clipping.

Tensors are immutable once published: kernels never write to their inputs,
and a fixed input always produces bit-identical forward and backward results
on a single thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


class ShapeError(ValueError):
    """Operands with incompatible shapes, naming both."""


class NonSeparableGraphError(RuntimeError):
    """Per-sample gradients requested from a graph that mixed samples."""


class Tensor:
    __slots__ = ("data", "requires_grad", "batched", "sample_mixed", "name",
                 "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, batched=False,
                 sample_mixed=False, name=None, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.batched = batched
        self.sample_mixed = sample_mixed
        self.name = name
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = "param " if self.name else ""
        return f"Tensor({tag}shape={self.shape}, batched={self.batched})"


def tensor(data, batched=False) -> Tensor:
    """Constant input tensor (no gradient)."""
    return Tensor(data, batched=batched)


def parameter(data, name: str) -> Tensor:
    """Named trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class PerSampleGrads:
    """One flattened gradient row per sample, plus the parameter offset table.

    ``offsets`` maps parameter name to (start, stop, shape); the slices
    partition every row.
    """

    batch_size: int
    grads: np.ndarray  # (batch_size, total parameter count), float64
    offsets: dict

    def row_norms(self) -> np.ndarray:
        # einsum avoids materializing the squared (B, P) temporary
        return np.sqrt(np.einsum("ij,ij->i", self.grads, self.grads))

    def unflatten(self, name: str) -> np.ndarray:
        start, stop, shape = self.offsets[name]
        return self.grads[:, start:stop].reshape((self.batch_size,) + shape)


# ---------------------------------------------------------------------------
# backward machinery


def _toposort(root: Tensor):
    order, state = [], {}
    stack = [root]
    while stack:
        node = stack[-1]
        st = state.get(id(node))
        if st is None:
            state[id(node)] = 0
            for p in node._parents:
                if id(p) not in state:
                    stack.append(p)
        else:
            stack.pop()
            if st == 0:
                state[id(node)] = 1
                order.append(node)
    return order  # every node appears after its parents


def _accumulate(root: Tensor, seed: np.ndarray, per_sample: bool) -> dict:
    """Flow cotangents from root to leaves; returns id(node) -> cotangent.

    In per-sample mode every cotangent carries the sample axis first: batched
    nodes use their own axis 0, unbatched nodes get an extra leading axis.
    """
    grads = {id(root): seed}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            if node._vjp is None and g is not None and node.requires_grad:
                grads[id(node)] = g  # leaf: keep
            continue
        for parent, pg in zip(node._parents, node._vjp(g, per_sample)):
            if pg is None:
                continue
            if not (parent.requires_grad or parent._vjp is not None):
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return grads


def backward(loss: Tensor, params) -> dict:
    """Gradients of a scalar loss for every tensor in `params`.

    Returns a name -> ndarray map; parameters the loss does not depend on get
    zero gradients. Parameter data is never touched.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    leaf = _accumulate(loss, np.ones(()), per_sample=False)
    out = {}
    for p in params:
        g = leaf.get(id(p))
        out[p.name] = np.zeros_like(p.data) if g is None else g
    return out


def per_sample_backward(losses: Tensor, params) -> PerSampleGrads:
    """Per-sample parameter gradients of a vector of per-sample losses.

    Row i equals the gradient of losses[i] alone; summing rows reproduces
    ``backward`` of the summed loss. Raises NonSeparableGraphError if any
    ancestor operation mixed information across samples.
    """
    if not losses.batched or losses.data.ndim != 1:
        raise ValueError(
            f"per-sample losses must be a batched vector, got shape {losses.shape}"
        )
    if losses.sample_mixed:
        raise NonSeparableGraphError(
            "graph mixes information across samples; per-sample gradients "
            "would be incorrect (batch-statistics style operations are not "
            "sample-separable)"
        )
    b = losses.shape[0]
    leaf = _accumulate(losses, np.ones(b), per_sample=True)

    offsets, total = {}, 0
    for p in params:
        n = p.data.size
        offsets[p.name] = (total, total + n, p.data.shape)
        total += n
    rows = np.zeros((b, total))
    for p in params:
        g = leaf.get(id(p))
        if g is None:
            continue
        start, stop, _ = offsets[p.name]
        rows[:, start:stop] = g.reshape(b, -1)
    return PerSampleGrads(batch_size=b, grads=rows, offsets=offsets)


# ---------------------------------------------------------------------------
# kernel helpers


def _out_flags(*parents: Tensor, mixes=False):
    batched = any(p.batched for p in parents)
    mixed = mixes or any(p.sample_mixed for p in parents)
    return batched, mixed


def _needs_tape(*parents: Tensor) -> bool:
    return any(p.requires_grad or p._vjp is not None for p in parents)


def _result(data, parents, vjp, mixes=False) -> Tensor:
    batched, mixed = _out_flags(*parents, mixes=mixes)
    if not _needs_tape(*parents):
        return Tensor(data, batched=batched, sample_mixed=mixed)
    return Tensor(data, batched=batched, sample_mixed=mixed,
                  _parents=tuple(parents), _vjp=vjp)


def _unbroadcast(grad: np.ndarray, target: Tensor, per_sample: bool) -> np.ndarray:
    """Sum a broadcast cotangent down to the target's shape.

    In per-sample mode, unbatched targets keep the leading sample axis, so
    the result is (B,) + target.shape.
    """
    shape = target.data.shape
    keep = 1 if (per_sample and not target.batched) else 0
    lead = grad.ndim - len(shape) - keep
    if lead:
        grad = grad.sum(axis=tuple(range(keep, keep + lead)))
    axes = tuple(
        i + keep
        for i, (g, w) in enumerate(zip(grad.shape[keep:], shape))
        if w == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul of {a.shape} with {b.shape}")
    mixes = b.batched and b.ndim == 2  # would contract the sample axis
    out = a.data @ b.data

    def vjp(g, per_sample):
        da = db = None
        if _needs_tape(a):
            da = _unbroadcast(g @ _swap_last(b.data), a, per_sample)
        if _needs_tape(b):
            if b.ndim == 2 and a.batched and a.ndim == g.ndim:
                # batched activations @ unbatched weight; contract every
                # activation axis through BLAS, keeping the sample axis only
                # when per-sample rows are wanted (a plain a^T @ g would fold
                # the sample axis into the contraction for 2-D activations)
                if per_sample:
                    if a.ndim == 2:
                        db = a.data[:, :, None] @ g[:, None, :]
                    else:
                        folded = a.data.reshape(a.shape[0], -1, a.shape[-1])
                        db = _swap_last(folded) @ g.reshape(g.shape[0], -1, g.shape[-1])
                else:
                    db = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                db = _unbroadcast(_swap_last(a.data) @ g, b, per_sample)
        return da, db

    return _result(out, (a, b), vjp, mixes=mixes)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add of {a.shape} with {b.shape}") from None

    def vjp(g, per_sample):
        return (_unbroadcast(g, a, per_sample) if _needs_tape(a) else None,
                _unbroadcast(g, b, per_sample) if _needs_tape(b) else None)

    return _result(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul of {a.shape} with {b.shape}") from None

    def vjp(g, per_sample):
        return (_unbroadcast(g * b.data, a, per_sample) if _needs_tape(a) else None,
                _unbroadcast(g * a.data, b, per_sample) if _needs_tape(b) else None)

    return _result(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g, per_sample):
        return (g * c,)

    return _result(a.data * c, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    mixes = a.batched and (not shape or shape[0] != a.shape[0])

    def vjp(g, per_sample):
        if g.ndim == len(shape) + 1:  # leading sample axis on unbatched chain
            return (g.reshape((g.shape[0],) + a.data.shape),)
        return (g.reshape(a.data.shape),)

    return _result(a.data.reshape(shape), (a,), vjp, mixes=mixes)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {a.shape}")
    mixes = a.batched and axes[0] != 0
    inv = tuple(np.argsort(axes))

    def vjp(g, per_sample):
        if g.ndim == len(axes) + 1:
            return (g.transpose((0,) + tuple(i + 1 for i in inv)),)
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), vjp, mixes=mixes)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows: batched (B,L,...) with (B,K) indices, or (L,...) with (K,).

    Indices must be unique within each row so the backward scatter is exact.
    """
    idx = np.asarray(indices)
    if a.batched:
        if idx.ndim != 2 or idx.shape[0] != a.shape[0] or a.ndim < 2:
            raise ShapeError(f"gather_rows of batched {a.shape} with indices {idx.shape}")
        if np.any(np.diff(np.sort(idx, axis=1), axis=1) == 0):
            raise ValueError("gather_rows indices must be unique per sample")
        expand = idx.reshape(idx.shape + (1,) * (a.ndim - 2))
        out = np.take_along_axis(a.data, expand, axis=1)

        def vjp(g, per_sample):
            full = np.zeros_like(a.data)
            np.put_along_axis(full, expand, g, axis=1)
            return (full,)

    else:
        if idx.ndim != 1 or a.ndim < 1:
            raise ShapeError(f"gather_rows of {a.shape} with indices {idx.shape}")
        if idx.size != np.unique(idx).size:
            raise ValueError("gather_rows indices must be unique")
        out = a.data[idx]

        def vjp(g, per_sample):
            if per_sample:
                raise NonSeparableGraphError(
                    "per-sample gradients through an unbatched gather are not supported"
                )
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

    return _result(out, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of no tensors")
    axis = int(axis) % tensors[0].ndim
    batched = tensors[0].batched
    if any(t.batched != batched for t in tensors):
        raise ShapeError("concat cannot mix batched and unbatched tensors")
    mixes = batched and axis == 0
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, per_sample):
        ax = axis + 1 if g.ndim == out.ndim + 1 else axis
        return tuple(np.split(g, splits, axis=ax))

    return _result(out, tensors, vjp, mixes=mixes)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g, per_sample):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-function gelu."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    out = x * cdf

    def vjp(g, per_sample):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _result(out, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, per_sample):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    out = np.log(a.data)

    def vjp(g, per_sample):
        return (g / a.data,)

    return _result(out, (a,), vjp)


def _normalize_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _expand_reduced(g, in_shape, axes, per_sample_shift):
    for ax in axes:
        g = np.expand_dims(g, ax + per_sample_shift)
    target = in_shape if not per_sample_shift else (g.shape[0],) + in_shape
    return np.broadcast_to(g, target)


def mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    mixes = a.batched and 0 in axes
    count = math.prod(a.shape[ax] for ax in axes)
    out = a.data.mean(axis=axes)

    def vjp(g, per_sample):
        shift = 1 if g.ndim > out.ndim else 0
        return (_expand_reduced(g, a.data.shape, axes, shift) / count,)

    return _result(out, (a,), vjp, mixes=mixes)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.ndim)
    mixes = a.batched and 0 in axes
    out = a.data.sum(axis=axes)

    def vjp(g, per_sample):
        shift = 1 if g.ndim > out.ndim else 0
        return (np.ascontiguousarray(_expand_reduced(g, a.data.shape, axes, shift)),)

    return _result(out, (a,), vjp, mixes=mixes)


def sum_sq(a: Tensor, axes=None) -> Tensor:
    """Sum of squared entries over `axes` (all axes by default)."""
    axes = _normalize_axes(axes, a.ndim)
    mixes = a.batched and 0 in axes
    out = (a.data * a.data).sum(axis=axes)

    def vjp(g, per_sample):
        shift = 1 if g.ndim > out.ndim else 0
        return (2.0 * a.data * _expand_reduced(g, a.data.shape, axes, shift),)

    return _result(out, (a,), vjp, mixes=mixes)
