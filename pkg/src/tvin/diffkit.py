"""Small reverse-mode autodiff kernel covering the VIN computation graph.

Every op accepts an optional leading batch axis.  Ops record themselves on
the innermost active :class:`Tape`; ``Tape.backward`` replays the record in
reverse, accumulating gradients additively into shared inputs.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []
_DEBUG = [False]


def dtype() -> type:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dt):
    """Temporarily change the working float type (e.g. float64 for grad checks)."""
    _DTYPE.append(dt)
    try:
        yield
    finally:
        _DTYPE.pop()


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    _DEBUG[0] = flag


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Param(Tensor):
    __slots__ = ("name", "frozen")

    def __init__(self, value, name: str = "", frozen: bool = False):
        super().__init__(value, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.frozen = frozen

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Param({self.name!r}, shape={self.shape}{flag})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed ops."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, loss.data.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype)
                else:
                    inp.grad += gi
            if not isinstance(node.out, Param):
                node.out.grad = None
        self.nodes.clear()


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _DEBUG[0] and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by op")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad and _TAPES:
        _TAPES[-1].nodes.append(_Node(out, inputs, backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# ops


def _im2col(xp: np.ndarray, F: int, H: int, W: int) -> np.ndarray:
    win = sliding_window_view(xp, (F, F), axis=(2, 3))  # (N, C, H, W, F, F)
    N, C = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * F * F)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size cross-correlation with zero padding.

    ``x``: (C_in, H, W) or (N, C_in, H, W); ``kernel``: (C_out, C_in, F, F).
    """
    xd, squeeze = _batched(x.data, 3)
    w = kernel.data
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"kernel must be (C_out, C_in, F, F) with odd F, got {w.shape}")
    N, C, H, W = xd.shape
    O, Ck, F, _ = w.shape
    if Ck != C:
        raise ValueError(f"input has {C} channels, kernel expects {Ck}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"bias shape {bias.shape} != ({O},)")
    p = F // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, F, H, W)
    wmat = w.reshape(O, C * F * F)
    out = cols @ wmat.T  # (N*H*W, O)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(N, H, W, O).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb, _ = _batched(g, 3)
        gmat = gb.transpose(0, 2, 3, 1).reshape(N * H * W, O)
        gw = (gmat.T @ cols).reshape(w.shape) if kernel.requires_grad else None
        gbias = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(N, H, W, C, F, F)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for u in range(F):
                for v in range(F):
                    gxp[:, :, u:u + H, v:v + W] += gcols[..., u, v].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            if squeeze:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gbias)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, backward)


def channel_group_max(x: Tensor, groups: int) -> tuple[Tensor, np.ndarray]:
    """Max over the channels of each group.

    Channels are laid out action-major: channel ``a*G + g`` is member ``a``
    of group ``g``.  Ties go to the lowest channel index.  Returns the max
    tensor (G, H, W) and the winning member index per group and pixel.
    """
    xd, squeeze = _batched(x.data, 3)
    N, CA, H, W = xd.shape
    if groups < 1 or CA % groups:
        raise ValueError(f"{CA} channels not divisible into {groups} groups")
    A = CA // groups
    xg = xd.reshape(N, A, groups, H, W)
    idx = xg.argmax(axis=1)  # first maximum on ties
    out = np.take_along_axis(xg, idx[:, None], axis=1)[:, 0]

    def backward(g):
        gb, _ = _batched(g, 3)
        gx = np.zeros(xg.shape, dtype=gb.dtype)
        np.put_along_axis(gx, idx[:, None], gb[:, None], axis=1)
        gx = gx.reshape(N, CA, H, W)
        return (gx[0] if squeeze else gx,)

    result = _emit(out[0] if squeeze else out, (x,), backward)
    return result, (idx[0] if squeeze else idx)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``x`` is (D_in,) or (S, D_in)."""
    xd, squeeze = _batched(x.data, 1)
    D_out, D_in = weight.shape
    if xd.shape[1] != D_in:
        raise ValueError(f"input width {xd.shape[1]} != weight D_in {D_in}")
    if bias is not None and bias.shape != (D_out,):
        raise ValueError(f"bias shape {bias.shape} != ({D_out},)")
    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def backward(g):
        gb, _ = _batched(g, 1)
        gx = gb @ weight.data
        grads = [gx[0] if squeeze else gx, gb.T @ xd]
        if bias is not None:
            grads.append(gb.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, backward)


def scalar_scale(x: Tensor, s: Tensor) -> Tensor:
    """Elementwise ``s * x`` with scalar ``s``."""
    sv = s.data.reshape(())
    out = sv * x.data

    def backward(g):
        gs = np.asarray(np.sum(x.data * g, dtype=np.float64), dtype=s.data.dtype).reshape(s.shape)
        return sv * g, gs

    return _emit(out, (x, s), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        return [np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(xs))]

    return _emit(out, tuple(xs), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping it with size 1."""
    xd, squeeze = _batched(x.data, 3)
    C = xd.shape[1]
    out = xd.mean(axis=1, keepdims=True)

    def backward(g):
        gb, _ = _batched(g, 3)
        gx = np.repeat(gb / C, C, axis=1)
        return (gx[0] if squeeze else gx,)

    return _emit(out[0] if squeeze else out, (x,), backward)


def repeat_channels(x: Tensor, n: int) -> Tensor:
    """Tile a single-channel image across ``n`` channels."""
    xd, squeeze = _batched(x.data, 3)
    if xd.shape[1] != 1:
        raise ValueError("repeat_channels expects one input channel")
    out = np.repeat(xd, n, axis=1)

    def backward(g):
        gb, _ = _batched(g, 3)
        gx = gb.sum(axis=1, keepdims=True)
        return (gx[0] if squeeze else gx,)

    return _emit(out[0] if squeeze else out, (x,), backward)


def gather_pixels(x: Tensor, batch: np.ndarray, chan0: np.ndarray, width: int,
                  i: np.ndarray, j: np.ndarray, stride: int = 1) -> Tensor:
    """``out[s, k] = x[batch[s], chan0[s] + k*stride, i[s], j[s]]`` for k < width."""
    xd = x.data
    ch = chan0[:, None] + stride * np.arange(width)[None, :]
    b, ii, jj = batch[:, None], i[:, None], j[:, None]
    out = xd[b, ch, ii, jj]

    def backward(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, (b, ch, ii, jj), g)
        return (gx,)

    return _emit(out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> tuple[Tensor, np.ndarray]:
    """Mean of ``-log softmax(logits)[target]`` over the batch.

    ``logits`` is (A,) with an int target or (S, A) with an int array.
    """
    ld, squeeze = _batched(logits.data, 1)
    S, A = ld.shape
    if A < 2:
        raise ValueError("need at least two classes")
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (S,):
        raise ValueError(f"target shape {t.shape} != ({S},)")
    if np.any((t < 0) | (t >= A)):
        raise IndexError("target out of range")
    with np.errstate(invalid="ignore"):  # non-finite logits surface as a NaN loss
        z = ld.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        logp = z - lse[:, None]
        probs = np.exp(logp)
    loss = -logp[np.arange(S), t].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(S), t] -= 1.0
        d = (d * (float(g) / S)).astype(ld.dtype)
        return (d[0] if squeeze else d,)

    out = _emit(np.asarray(loss), (logits,), backward)
    probs = probs.astype(ld.dtype)
    return out, probs[0] if squeeze else probs


# ---------------------------------------------------------------------------
# optimisation and checking


def sgd_step(params: Iterable[Param], lr: float) -> None:
    for p in params:
        if not p.frozen and lr:
            p.data -= (lr * p.grad).astype(p.data.dtype)
        p.zero_grad()


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype())


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    eps: float = 1e-3,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    backward: Callable[[Tensor, Tape], None] | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Central finite differences against the tape gradient.

    ``loss_fn`` rebuilds the graph from the current param values and returns
    a scalar tensor.  Per coordinate the error is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps coordinates whose true
    gradient is ~0 from dividing by noise.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the check point")
    (backward or (lambda l, t: t.backward(l)))(loss, tape)
    per_param: dict[str, float] = {}
    for k, p in enumerate(params):
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        worst = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            up = float(loss_fn().data)
            flat[c] = old - eps
            down = float(loss_fn().data)
            flat[c] = old
            num = (up - down) / (2 * eps)
            ana = float(analytic.reshape(-1)[c])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        per_param[p.name or f"param{k}"] = worst
        p.zero_grad()
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tol)


# ---------------------------------------------------------------------------
# checkpoints

_CK_MAGIC = b"TVCK"
_CK_VERSION = 1


def checkpoint_bytes(params: Sequence[Param]) -> bytes:
    parts = [struct.pack("<4sHI", _CK_MAGIC, _CK_VERSION, len(params))]
    for p in params:
        name = p.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(struct.pack("<B", int(p.frozen)))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> list[Param]:
    magic, version, count = struct.unpack_from("<4sHI", buf, 0)
    if magic != _CK_MAGIC:
        raise ValueError("not a TVCK checkpoint")
    if version != _CK_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = struct.calcsize("<4sHI")
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        (frozen,) = struct.unpack_from("<B", buf, off)
        off += 1
        size = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(buf, "<f4", size, off).reshape(dims)
        off += 4 * size
        out.append(Param(vals.copy(), name, bool(frozen)))
    return out


def save_checkpoint(params: Sequence[Param], path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> list[Param]:
    return params_from_bytes(Path(path).read_bytes())
