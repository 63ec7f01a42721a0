"""Dense float64 tensors with a reverse-mode gradient tape.

Deliberately small: scalars, vectors and 2-D matrices cover every shape the
rest of the package needs, so there is no general broadcasting. Each public
operation computes its forward value eagerly with numpy and, when an input
requires gradients and a tape is active, records a node holding the exact
backward rule. Backward closures are only built while recording, which keeps
the plain forward path cheap enough for exhaustive finite-difference sweeps.
All math is 64-bit and single-threaded so results are bit-reproducible
across runs.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

ROPE_BASE = 10000.0
LOG_FLOOR = 1e-12
_SQRT1_2 = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operands disagree with an operation's shape contract."""


class NonFiniteError(ValueError):
    """A NaN or infinity tried to enter a tensor."""


class AllBlockedError(ValueError):
    """An attention query row had every key masked out."""


class DeterminismError(RuntimeError):
    """Two evaluations of a supposedly deterministic function differed."""


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    ``grad`` is lazily allocated the first time ``backward`` reaches the
    tensor and keeps accumulating across backward passes until it is reset
    with ``zero_grad``. Values are validated to be finite on construction
    from external data.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs; skips the finiteness scan.
        out = object.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp", "forward")

    def __init__(self, op, inputs, output, vjp, forward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.forward = forward


class Tape:
    """Linear record of primitive operations in execution order.

    Entering the tape as a context manager makes it the active recorder;
    tapes nest, with the innermost one receiving new nodes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _add(self, node: _Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def replay(self) -> bool:
        """Re-run every node forward; True iff all outputs match bit-exactly."""
        for node in self.nodes:
            if node.forward().tobytes() != node.output.data.tobytes():
                return False
        return True


_TAPE_STACK: list[Tape] = []


def _recording(inputs) -> bool:
    if not _TAPE_STACK:
        return False
    for t in inputs:
        if t.requires_grad:
            return True
    return False


def _any_grad(inputs) -> bool:
    for t in inputs:
        if t.requires_grad:
            return True
    return False


def _as_2d(t: Tensor, op: str) -> np.ndarray:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {t.shape}")
    return t.data


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "add", (a, b), out,
            lambda g: (g, g),
            lambda: a.data + b.data))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data - b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "sub", (a, b), out,
            lambda g: (g, -g),
            lambda: a.data - b.data))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        ad, bd = a.data, b.data
        _TAPE_STACK[-1]._add(_Node(
            "mul", (a, b), out,
            lambda g: (g * bd, g * ad),
            lambda: a.data * b.data))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError(f"scale factor {c!r} is not finite")
    out = Tensor._wrap(a.data * c, a.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "scale", (a,), out,
            lambda g: (g * c,),
            lambda: a.data * c))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad = _as_2d(a, "matmul")
    bd = _as_2d(b, "matmul")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor._wrap(ad @ bd, a.requires_grad or b.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "matmul", (a, b), out,
            lambda g: (g @ bd.T, ad.T @ g),
            lambda: a.data @ b.data))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows; one fused node."""
    xd = _as_2d(x, "linear")
    wd = _as_2d(w, "linear")
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"linear inner dimensions disagree: {x.shape} x {w.shape}")
    if b.data.shape != (wd.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape}, want ({wd.shape[1]},)")
    out_arr = xd @ wd
    out_arr += b.data
    out = Tensor._wrap(out_arr, x.requires_grad or w.requires_grad or b.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "linear", (x, w, b), out,
            lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
            lambda: x.data @ w.data + b.data))
    return out


def transpose(a: Tensor) -> Tensor:
    _as_2d(a, "transpose")
    out = Tensor._wrap(a.data.T, a.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "transpose", (a,), out,
            lambda g: (g.T,),
            lambda: a.data.T))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    out = Tensor._wrap(a.data.reshape(shape), a.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "reshape", (a,), out,
            lambda g: (np.ascontiguousarray(g).reshape(old),),
            lambda: a.data.reshape(shape)))
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    ad = _as_2d(a, "slice_rows")
    if not (0 <= start < stop <= ad.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    out = Tensor._wrap(ad[start:stop], a.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        def vjp(g):
            z = np.zeros_like(ad)
            z[start:stop] = g
            return (z,)
        _TAPE_STACK[-1]._add(_Node("slice_rows", (a,), out, vjp,
                                   lambda: a.data[start:stop]))
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    ad = _as_2d(a, "slice_cols")
    if not (0 <= start < stop <= ad.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    out = Tensor._wrap(ad[:, start:stop], a.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        def vjp(g):
            z = np.zeros_like(ad)
            z[:, start:stop] = g
            return (z,)
        _TAPE_STACK[-1]._add(_Node("slice_cols", (a,), out, vjp,
                                   lambda: a.data[:, start:stop]))
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows of zero tensors")
    datas = [_as_2d(p, "concat_rows") for p in parts]
    out = Tensor._wrap(np.concatenate(datas, axis=0), _any_grad(parts))
    if out.requires_grad and _TAPE_STACK:
        offsets = np.cumsum([0] + [d.shape[0] for d in datas])
        def vjp(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))
        _TAPE_STACK[-1]._add(_Node(
            "concat_rows", parts, out, vjp,
            lambda: np.concatenate([p.data for p in parts], axis=0)))
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_cols of zero tensors")
    datas = [_as_2d(p, "concat_cols") for p in parts]
    out = Tensor._wrap(np.concatenate(datas, axis=1), _any_grad(parts))
    if out.requires_grad and _TAPE_STACK:
        offsets = np.cumsum([0] + [d.shape[1] for d in datas])
        def vjp(g):
            return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))
        _TAPE_STACK[-1]._add(_Node(
            "concat_cols", parts, out, vjp,
            lambda: np.concatenate([p.data for p in parts], axis=1)))
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias vector to every row of an n x d matrix."""
    xd = _as_2d(x, "add_bias")
    if b.data.ndim != 1 or b.data.shape[0] != xd.shape[1]:
        raise ShapeError(f"add_bias shapes {x.shape} + {b.shape}")
    out = Tensor._wrap(xd + b.data, x.requires_grad or b.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "add_bias", (x, b), out,
            lambda g: (g, g.sum(axis=0)),
            lambda: x.data + b.data))
    return out


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of an n x d matrix by s[i, 0]."""
    xd = _as_2d(x, "mul_rows")
    sd = s.data
    if sd.shape != (xd.shape[0], 1):
        raise ShapeError(f"mul_rows scale shape {s.shape}, want ({xd.shape[0]}, 1)")
    out = Tensor._wrap(xd * sd, x.requires_grad or s.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "mul_rows", (x, s), out,
            lambda g: (g * sd, (g * xd).sum(axis=1, keepdims=True)),
            lambda: x.data * s.data))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum()), x.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        shape = x.shape
        _TAPE_STACK[-1]._add(_Node(
            "sum_all", (x,), out,
            lambda g: (np.full(shape, float(g)),),
            lambda: np.asarray(x.data.sum())))
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.mean()), x.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        shape, n = x.shape, x.data.size
        _TAPE_STACK[-1]._add(_Node(
            "mean_all", (x,), out,
            lambda g: (np.full(shape, float(g) / n),),
            lambda: np.asarray(x.data.mean())))
    return out


def log_clamped(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); the clamp keeps zero probabilities finite."""
    xd = x.data
    out = Tensor._wrap(np.log(np.maximum(xd, floor)), x.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1]._add(_Node(
            "log_clamped", (x,), out,
            lambda g: (np.where(xd > floor, g, 0.0) / np.maximum(xd, floor),),
            lambda: np.log(np.maximum(x.data, floor))))
    return out


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = Tensor._wrap(xd * cdf, x.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        def vjp(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)
        _TAPE_STACK[-1]._add(_Node(
            "gelu", (x,), out, vjp,
            lambda: x.data * 0.5 * (1.0 + erf(x.data * _SQRT1_2))))
    return out


# ---------------------------------------------------------------------------
# normalization, softmax, attention, rotary embeddings


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not (-xd.ndim <= axis < xd.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")

    def fwd(arr):
        e = arr - arr.max(axis=axis, keepdims=True)
        np.exp(e, out=e)
        e /= e.sum(axis=axis, keepdims=True)
        return e

    out_arr = fwd(xd)
    out = Tensor._wrap(out_arr, x.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        def vjp(g):
            dot = (g * out_arr).sum(axis=axis, keepdims=True)
            return (out_arr * (g - dot),)
        _TAPE_STACK[-1]._add(_Node("softmax", (x,), out, vjp,
                                   lambda: fwd(x.data)))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization to zero mean and unit population variance."""
    xd = _as_2d(x, "layer_norm")
    d = xd.shape[1]
    if d < 2:
        raise ShapeError(f"layer_norm row length {d} is degenerate (need d >= 2)")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias shapes {gain.shape}/{bias.shape}, want ({d},)")
    gd, bd = gain.data, bias.data

    inv_d = 1.0 / d
    mu = xd.sum(axis=1, keepdims=True) * inv_d
    xc = xd - mu
    var = (xc * xc).sum(axis=1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gd + bd,
                       x.requires_grad or gain.requires_grad or bias.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        def vjp(g):
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
            dxhat = g * gd
            dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv ** 3
            dmu = -dxhat.sum(axis=1, keepdims=True) * inv \
                + dvar * (-2.0 * inv_d) * xc.sum(axis=1, keepdims=True)
            dx = dxhat * inv + dvar * (2.0 / d) * xc + dmu / d
            return (dx, dgain, dbias)

        def fwd():
            m = x.data.sum(axis=1, keepdims=True) * inv_d
            c = x.data - m
            v = (c * c).sum(axis=1, keepdims=True) * inv_d
            return (c / np.sqrt(v + eps)) * gain.data + bias.data

        _TAPE_STACK[-1]._add(_Node("layer_norm", (x, gain, bias), out, vjp, fwd))
    return out


class AttentionMask:
    """Either no masking or frame-causal masking of key tokens.

    Under ``causal-by-frame``, query token i may attend key token j only when
    frame_of_token[j] <= frame_of_token[i]; the map covers both the query and
    key token lists, so causal masks apply to self-attention.
    """

    __slots__ = ("kind", "frame_of_token", "_blocked", "_bias", "_has_blocked_row")

    def __init__(self, kind: str, frame_of_token=None):
        if kind not in ("none", "causal-by-frame"):
            raise ValueError(f"unknown mask kind {kind!r}")
        if kind == "causal-by-frame":
            if frame_of_token is None:
                raise ValueError("causal-by-frame mask needs frame_of_token")
            frame_of_token = np.asarray(frame_of_token, dtype=np.int64)
        self.kind = kind
        self.frame_of_token = frame_of_token
        self._blocked = None
        self._bias = None
        self._has_blocked_row = None

    def blocked(self) -> Optional[np.ndarray]:
        """Boolean (i, j) matrix of forbidden pairs, or None when unmasked."""
        if self.kind == "none":
            return None
        if self._blocked is None:
            f = self.frame_of_token
            self._blocked = f[None, :] > f[:, None]
        return self._blocked

    def bias(self) -> Optional[np.ndarray]:
        """Additive score bias: -inf at forbidden pairs, 0 elsewhere."""
        if self.kind == "none":
            return None
        if self._bias is None:
            self._bias = np.where(self.blocked(), -np.inf, 0.0)
        return self._bias

    def has_fully_blocked_row(self) -> bool:
        if self.kind == "none":
            return False
        if self._has_blocked_row is None:
            self._has_blocked_row = bool(self.blocked().all(axis=1).any())
        return self._has_blocked_row


MASK_NONE = AttentionMask("none")


def causal_by_frame(frame_of_token) -> AttentionMask:
    return AttentionMask("causal-by-frame", frame_of_token)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: AttentionMask = MASK_NONE) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with optional frame-causal masking.

    Blocked pairs get a -inf score before the stabilized softmax, so their
    probability is exactly zero and later-frame keys can never leak into a
    query's output. A query with every key blocked raises AllBlockedError
    rather than emitting NaN.
    """
    qd = _as_2d(q, "attention")
    kd = _as_2d(k, "attention")
    vd = _as_2d(v, "attention")
    if qd.shape[1] != kd.shape[1]:
        raise ShapeError(f"attention head dims disagree: q {q.shape} vs k {k.shape}")
    if kd.shape[0] != vd.shape[0]:
        raise ShapeError(f"attention key/value counts disagree: {k.shape} vs {v.shape}")

    bias = None
    if mask.kind == "causal-by-frame":
        frames = mask.frame_of_token
        if frames.shape[0] != qd.shape[0] or frames.shape[0] != kd.shape[0]:
            raise ShapeError(
                f"causal mask covers {frames.shape[0]} tokens, "
                f"attention has {qd.shape[0]} queries / {kd.shape[0]} keys")
        if mask.has_fully_blocked_row():
            raise AllBlockedError("a query row has every key blocked")
        bias = mask.bias()

    inv_sqrt_d = 1.0 / math.sqrt(qd.shape[1])

    def fwd_probs(qa, ka):
        scores = (qa @ ka.T) * inv_sqrt_d
        if bias is not None:
            scores += bias
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        return scores

    probs = fwd_probs(qd, kd)
    out = Tensor._wrap(probs @ vd,
                       q.requires_grad or k.requires_grad or v.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        def vjp(g):
            dv = probs.T @ g
            dp = g @ vd.T
            ds = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
            dq = (ds @ kd) * inv_sqrt_d
            dk = (ds.T @ qd) * inv_sqrt_d
            return (dq, dk, dv)
        _TAPE_STACK[-1]._add(_Node(
            "attention", (q, k, v), out, vjp,
            lambda: fwd_probs(q.data, k.data) @ v.data))
    return out


_ROPE_CACHE: dict = {}


def _rope_rotors(d: int, pos: np.ndarray) -> np.ndarray:
    """Unit complex rotors exp(i * position * theta_pair), cached per layout."""
    key = (d, pos.tobytes())
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        half = d // 2
        theta = ROPE_BASE ** (-2.0 * np.arange(half) / d)
        ang = pos[:, None].astype(np.float64) * theta[None, :]
        hit = np.cos(ang) + 1j * np.sin(ang)
        if len(_ROPE_CACHE) > 256:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = hit
    return hit


def rope_apply(x: Tensor, positions) -> Tensor:
    """Rotate consecutive channel pairs of each token by position-scaled angles.

    Pair i of a d-channel token is rotated by position * base^(-2i/d); the
    rotation is an isometry per pair and position 0 is the identity. Each
    pair is treated as one complex number and multiplied by a unit rotor,
    which is the same arithmetic as the explicit 2x2 rotation.
    """
    xd = _as_2d(x, "rope_apply")
    n, d = xd.shape
    if d % 2 != 0:
        raise ShapeError(f"rope_apply needs an even channel count, got {d}")
    pos = np.asarray(positions, dtype=np.int64)
    if pos.shape != (n,):
        raise ShapeError(f"rope_apply positions shape {pos.shape}, want ({n},)")
    if pos.size and pos.min() < 0:
        raise ShapeError("rope_apply positions must be non-negative")

    rot = _rope_rotors(d, pos)

    def rotate(arr, r):
        pairs = np.ascontiguousarray(arr).view(np.complex128)
        return (pairs * r).view(np.float64)

    out = Tensor._wrap(rotate(xd, rot), x.requires_grad)
    if out.requires_grad and _TAPE_STACK:
        conj = rot.conj()
        _TAPE_STACK[-1]._add(_Node(
            "rope", (x,), out,
            lambda g: (rotate(g, conj),),
            lambda: rotate(x.data, rot)))
    return out


# ---------------------------------------------------------------------------
# reverse pass and verification


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every requires_grad leaf on the tape.

    Gradients add onto existing ``grad`` buffers; call ``zero_grad`` between
    optimization steps. Repeating backward on the same tape doubles the
    accumulated leaf gradients, as expected for additive accumulation.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("loss tensor was not produced on this tape")

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = tape._produced
    for node in reversed(tape.nodes):
        g = flow.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None:
                continue
            ti = id(t)
            if ti in produced:
                acc = flow.get(ti)
                flow[ti] = gt if acc is None else acc + gt
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gt


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor],
               params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns the worst relative error |analytic - fd| / max(1, |analytic|,
    |fd|) over every coordinate of every parameter. The function must be
    deterministic; it is evaluated twice up front and a bitwise mismatch
    raises DeterminismError.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"grad_check eps {eps} outside (0, 1e-3]")
    params = list(params)

    first = fn(params)
    second = fn(params)
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("function returned different values on repeat evaluation")
    if first.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {first.shape}")

    zero_grads(params)
    tape = Tape()
    with tape:
        out = fn(params)
    if id(out) in tape._produced:
        backward(tape, out)
    # else: no differentiable path from the params; analytic gradient is zero.
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    zero_grads(params)

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(params).data.reshape(()))
            flat[i] = orig - eps
            fm = float(fn(params).data.reshape(()))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if err > worst:
                worst = err
    return worst
