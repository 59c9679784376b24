"""Dense tensors and tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array (float32 by default;
float64 is supported so finite-difference oracles can run at full
precision). Operations executed while a ``Tape`` is active record their
backward closures; ``backward`` replays the records in exact reverse order
and returns per-parameter gradients.

All operations are deterministic: reductions and GEMM calls are issued the
same way for identical inputs, so repeated single-threaded runs are
bit-identical.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "conv3d_shape",
    "conv3d_forward",
    "linear_forward",
    "add",
    "mul",
    "scale",
    "sum_all",
    "reshape",
    "slice_rows",
    "concat_rows",
    "relu",
    "sigmoid",
    "tanh",
]


class Tensor:
    """Dense N-dimensional value node.

    ``data`` is always a C-contiguous numpy float array; ``product(shape)``
    equals its element count by construction and indexing is the usual
    bounds-checked row-major numpy indexing.
    """

    __slots__ = ("data", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"tensor of shape {self.shape} is not a scalar")

    def __getitem__(self, idx):
        return self.data[idx]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._records: list[tuple] = []
        self._consumed = False
        self._leaves: set[int] = set()
        self._leaf_tensors: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPES:
            raise RuntimeError("a Tape is already active; nested tapes are not supported")
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, outputs, inputs, need, bwd):
        self._records.append((outputs, inputs, need, bwd))
        for t in inputs:
            if t.is_leaf and id(t) not in self._leaves:
                self._leaves.add(id(t))
                self._leaf_tensors.append(t)


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _maybe_record(outputs: tuple[Tensor, ...], inputs: tuple[Tensor, ...],
                  bwd: Callable) -> None:
    """Record an op if a tape is active and any input leads back to a leaf.

    ``bwd(gouts, need)`` receives one (possibly None) output gradient per
    output and must return one freshly allocated gradient array (or None)
    per input, in order.
    """
    tape = _active_tape()
    if tape is None:
        return
    need = tuple(t.requires_grad for t in inputs)
    if not any(need):
        return
    for out in outputs:
        out.requires_grad = True
    tape._record(outputs, inputs, need, bwd)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse from scalar ``loss``.

    Returns a map from parameter tensor to its gradient array. Parameters
    passed explicitly but never used get an all-zeros gradient of matching
    shape. The tape is single-use.
    """
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for outputs, inputs, need, bwd in reversed(tape._records):
        gouts = [grads.pop(id(o), None) for o in outputs]
        if all(g is None for g in gouts):
            continue
        gins = bwd(gouts, need)
        for t, g, n in zip(inputs, gins, need):
            if not n or g is None:
                continue
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = g
            else:
                acc += g

    targets = list(params) if params is not None else tape._leaf_tensors
    out: dict[Tensor, np.ndarray] = {}
    for p in targets:
        g = grads.get(id(p))
        out[p] = g if g is not None else np.zeros_like(p.data)
    return out


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-4,
               max_elements: int | None = None, rng: np.random.Generator | None = None,
               atol: float = 1e-8) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` takes no arguments, closes over ``params`` and returns a scalar
    Tensor. Returns the max over checked elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. With
    ``max_elements`` set, a seeded random subset of each parameter's
    elements is checked instead of the full sweep. Elements agreeing
    within ``atol`` absolutely count as exact, so structurally-zero
    gradients are not penalized for finite-difference rounding noise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tape = Tape()
    with tape:
        loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("function value is not finite")
    analytic = backward(tape, loss, params)

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            picker = rng if rng is not None else np.random.default_rng(0)
            idxs = picker.choice(n, size=max_elements, replace=False)
        else:
            idxs = range(n)
        ga = analytic[p].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn().item()
            flat[i] = orig - epsilon
            down = fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("function value is not finite at perturbed point")
            numeric = (up - down) / (2.0 * epsilon)
            gap = abs(ga[i] - numeric)
            if gap <= atol:
                continue
            worst = max(worst, gap / max(abs(ga[i]), abs(numeric), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# shape algebra

def conv3d_shape(in_dim: int, kernel: int, stride: int, pad: int) -> int:
    """Output size of a padded strided convolution along one dimension."""
    if in_dim < 1 or kernel < 1 or stride < 1 or pad < 0:
        raise ValueError(
            f"invalid convolution geometry in={in_dim} k={kernel} s={stride} p={pad}")
    if in_dim + 2 * pad < kernel:
        raise ValueError(
            f"kernel {kernel} exceeds padded input {in_dim + 2 * pad}")
    out = (in_dim + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ValueError(
            f"convolution in={in_dim} k={kernel} s={stride} p={pad} yields empty output")
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives

def _unary(x: Tensor, out_data: np.ndarray, bwd_one: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    out = Tensor(out_data)
    _maybe_record((out,), (x,), lambda gouts, need: (bwd_one(gouts[0]),))
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0).astype(x.dtype, copy=False),
                  lambda g: g * mask)


def stable_sigmoid(v: np.ndarray) -> np.ndarray:
    """Logistic function computed piecewise so exp never overflows."""
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return _unary(x, s, lambda g: g * (s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary(x, t, lambda g: g * (1.0 - t * t))


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)
    _maybe_record((out,), (x, y), lambda gouts, need: (
        gouts[0].copy() if need[0] else None,
        gouts[0].copy() if need[1] else None,
    ))
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"mul shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data * y.data)
    _maybe_record((out,), (x, y), lambda gouts, need: (
        gouts[0] * y.data if need[0] else None,
        gouts[0] * x.data if need[1] else None,
    ))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data * c, lambda g: g * c)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    _maybe_record((out,), (x,),
                  lambda gouts, need: (np.full_like(x.data, gouts[0]),))
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    _maybe_record((out,), (x,),
                  lambda gouts, need: (gouts[0].reshape(x.shape),))
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor; gradient scatters back."""
    if x.ndim != 2:
        raise ValueError(f"slice_rows expects a 2-D tensor, got shape {x.shape}")
    if not (0 <= start <= stop <= x.shape[0]):
        raise ValueError(f"row range [{start}, {stop}) out of bounds for {x.shape}")
    out = Tensor(x.data[start:stop])

    def bwd(gouts, need):
        g = np.zeros_like(x.data)
        g[start:stop] = gouts[0]
        return (g,)

    _maybe_record((out,), (x,), bwd)
    return out


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0; gradient splits by row offsets."""
    if not xs:
        raise ValueError("concat_rows needs at least one tensor")
    parts = [t.data for t in xs]
    out = Tensor(np.concatenate(parts, axis=0))
    sizes = [p.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(gouts, need):
        g = gouts[0]
        return tuple(
            g[offsets[i]:offsets[i + 1]].copy() if need[i] else None
            for i in range(len(xs)))

    _maybe_record((out,), tuple(xs), bwd)
    return out


# ---------------------------------------------------------------------------
# linear

def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for a vector, row-batched for a matrix input."""
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
        raise ValueError(
            f"inconsistent linear parameters weight={weight.shape} bias={bias.shape}")
    if x.shape[-1] != weight.shape[1] or x.ndim not in (1, 2):
        raise ValueError(
            f"linear input {x.shape} incompatible with weight {weight.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def bwd(gouts, need):
        g = gouts[0]
        if x.ndim == 1:
            gx = g @ weight.data if need[0] else None
            gw = np.outer(g, x.data) if need[1] else None
            gb = g.copy() if need[2] else None
        else:
            gx = g @ weight.data if need[0] else None
            gw = g.T @ x.data if need[1] else None
            gb = g.sum(axis=0) if need[2] else None
        return gx, gw, gb

    _maybe_record((out,), (x, weight, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# 3-D convolution (im2col + GEMM)

def _pad_tchw(x: np.ndarray, pads: tuple[int, int, int]) -> np.ndarray:
    pt, ph, pw = pads
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kernel, strides, out_dims) -> np.ndarray:
    """Gather padded input windows into a (positions, patch) matrix."""
    n = xp.shape[0]
    kt, kh, kw = kernel
    st, sh, sw = strides
    to, ho, wo = out_dims
    sn, sc, stt, shh, sww = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, to, ho, wo, xp.shape[1], kt, kh, kw),
        strides=(sn, stt * st, shh * sh, sww * sw, sc, stt, shh, sww),
        writeable=False,
    )
    return view.reshape(n * to * ho * wo, -1)


def _col2im(gcols: np.ndarray, padded_shape, kernel, strides, out_dims) -> np.ndarray:
    n, c, tp, hp, wp = padded_shape
    kt, kh, kw = kernel
    st, sh, sw = strides
    to, ho, wo = out_dims
    gx = np.zeros(padded_shape, dtype=gcols.dtype)
    gview = gcols.reshape(n, to, ho, wo, c, kt, kh, kw)
    for it, ih, iw in itertools.product(range(kt), range(kh), range(kw)):
        gx[:, :,
           it:it + st * (to - 1) + 1:st,
           ih:ih + sh * (ho - 1) + 1:sh,
           iw:iw + sw * (wo - 1) + 1:sw] += gview[:, :, :, :, :, it, ih, iw].transpose(0, 4, 1, 2, 3)
    return gx


def conv3d_forward(x: Tensor, weight: Tensor, bias: Tensor,
                   strides: tuple[int, int, int] = (1, 1, 1),
                   pads: tuple[int, int, int] = (0, 0, 0)) -> Tensor:
    """Zero-padded strided 3-D convolution.

    ``x`` is (C_in, T, H, W) or batched (N, C_in, T, H, W); ``weight`` is
    (C_out, C_in, k_t, k_h, k_w). Each output element is the inner product
    of the kernel with the padded input window plus the channel bias.
    """
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be 5-D, got {weight.shape}")
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ValueError(f"conv3d input must be 4-D or 5-D, got {x.shape}")
    xb = x.data if batched else x.data[None]
    c_out, c_in, kt, kh, kw = weight.shape
    if xb.shape[1] != c_in:
        raise ValueError(
            f"input channels {xb.shape[1]} do not match weight channels {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} must be ({c_out},)")
    strides = tuple(int(s) for s in strides)
    pads = tuple(int(p) for p in pads)
    out_dims = tuple(
        conv3d_shape(xb.shape[2 + i], (kt, kh, kw)[i], strides[i], pads[i])
        for i in range(3))

    xp = _pad_tchw(xb, pads)
    cols = _im2col(xp, (kt, kh, kw), strides, out_dims)
    wmat = weight.data.reshape(c_out, -1)
    y = cols @ wmat.T
    y += bias.data
    y = np.ascontiguousarray(
        y.reshape(xb.shape[0], *out_dims, c_out).transpose(0, 4, 1, 2, 3))
    out = Tensor(y if batched else y[0])

    padded_shape = xp.shape
    in_shape = xb.shape
    del xp, cols  # recomputed in backward to bound peak memory

    def bwd(gouts, need):
        g = gouts[0] if batched else gouts[0][None]
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
        gw = gb = gx = None
        if need[1]:
            cols2 = _im2col(_pad_tchw(xb, pads), (kt, kh, kw), strides, out_dims)
            gw = (gmat.T @ cols2).reshape(weight.shape)
            del cols2
        if need[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        if need[0]:
            gcols = gmat @ wmat
            gxp = _col2im(gcols, padded_shape, (kt, kh, kw), strides, out_dims)
            pt, ph, pw = pads
            gx = np.ascontiguousarray(
                gxp[:, :, pt:pt + in_shape[2], ph:ph + in_shape[3], pw:pw + in_shape[4]])
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    _maybe_record((out,), (x, weight, bias), bwd)
    return out
