"""Differentiable operations used by the transformer nodes and the graph.

Every op here is a tape primitive (single record, hand-written adjoint)
except :func:`multi_head_attention`, which is composed from primitives so
its per-head attention weights stay first-class tensors for routing
diagnostics. All adjoints are checked against central finite differences
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    InvalidInputError,
    NumericError,
)
from .tensor import Tensor, _apply, _as_tensor, add, matmul, transpose

NORMALIZE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)


def affine(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """w @ x + b for a vector x; gradient flows to w, b and x."""
    w, b, x = _as_tensor(w), _as_tensor(b), _as_tensor(x)
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise DimensionError(
            f"affine expects matrix, bias vector, input vector; got {w.shape}, {b.shape}, {x.shape}"
        )
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise DimensionError(
            f"affine: weight {w.shape} does not conform with bias {b.shape} and input {x.shape}"
        )
    wd, xd = w.data, x.data

    def backward_fn(g):
        return np.outer(g, xd), g, wd.T @ g

    return _apply(wd @ xd + b.data, (w, b, x), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU, elementwise."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner),)

    return _apply(0.5 * xd * (1.0 + t), (x,), backward_fn)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stable softmax along the last axis of a vector or matrix.

    ``mask`` is an optional constant additive array (e.g. causal -inf mask)
    applied before normalization.
    """
    x = _as_tensor(x)
    if x.ndim not in (1, 2):
        raise DimensionError(f"softmax expects a vector or matrix, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _apply(s, (x,), backward_fn)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean unit-variance normalization along the last axis, then scale and shift."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} do not match input {x.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    sd = scale.data

    def backward_fn(g):
        gs = g * sd
        gx = inv * (
            gs - gs.mean(axis=-1, keepdims=True) - xhat * (gs * xhat).mean(axis=-1, keepdims=True)
        )
        if xd.ndim == 1:
            return gx, g * xhat, g
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _apply(xhat * sd + shift.data, (x, scale, shift), backward_fn)


def l2_normalize(x: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """x / ||x||_2 for a vector; raises on near-zero input."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"l2_normalize expects a vector, got shape {x.shape}")
    n = float(np.linalg.norm(x.data))
    if n <= eps:
        raise DegenerateInputError(f"l2_normalize: input norm {n:.3e} below {eps:.0e}")
    y = x.data / n

    def backward_fn(g):
        return ((g - y * (y @ g)) / n,)

    return _apply(y, (x,), backward_fn)


def vector_norm(x: Tensor) -> Tensor:
    """Euclidean norm of a vector as a scalar tensor."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"vector_norm expects a vector, got shape {x.shape}")
    n = float(np.linalg.norm(x.data))
    xd = x.data

    def backward_fn(g):
        return (float(g) * xd / max(n, NORMALIZE_EPS),)

    return _apply(np.asarray(n), (x,), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; adjoint scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be a matrix, got {table.shape}")
    if ids.size == 0:
        raise InvalidInputError("embedding: empty id sequence")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise InvalidInputError(
            f"embedding: id outside vocabulary [0, {table.shape[0]})"
        )
    vshape = table.shape

    def backward_fn(g):
        gt = np.zeros(vshape, dtype=np.float64)
        np.add.at(gt, ids, g)
        return (gt,)

    return _apply(table.data[ids], (table,), backward_fn)


def take_row(x: Tensor, i: int) -> Tensor:
    """Select row ``i`` (negative indices allowed) of a matrix."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"take_row expects a matrix, got shape {x.shape}")
    i = int(i)
    if i < 0:
        i += x.shape[0]
    if not 0 <= i < x.shape[0]:
        raise InvalidInputError(f"take_row: row {i} outside matrix with {x.shape[0]} rows")
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[i] = g
        return (gx,)

    return _apply(x.data[i].copy(), (x,), backward_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"slice_rows expects a matrix, got shape {x.shape}")
    if not 0 <= start < stop <= x.shape[0]:
        raise InvalidInputError(f"slice_rows: [{start}:{stop}] outside {x.shape[0]} rows")
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[start:stop] = g
        return (gx,)

    return _apply(x.data[start:stop].copy(), (x,), backward_fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice the last axis of a vector or matrix."""
    x = _as_tensor(x)
    if x.ndim not in (1, 2):
        raise DimensionError(f"slice_cols expects a vector or matrix, got shape {x.shape}")
    width = x.shape[-1]
    if not 0 <= start < stop <= width:
        raise InvalidInputError(f"slice_cols: [{start}:{stop}] outside width {width}")
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[..., start:stop] = g
        return (gx,)

    return _apply(x.data[..., start:stop].copy(), (x,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InvalidInputError("concat: empty input list")
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _apply(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward_fn)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack vectors of equal length into a matrix, one per row."""
    vectors = [_as_tensor(v) for v in vectors]
    if not vectors:
        raise InvalidInputError("stack_rows: empty input list")
    d = vectors[0].shape
    for v in vectors:
        if v.ndim != 1 or v.shape != d:
            raise DimensionError(f"stack_rows: mixed shapes {d} and {v.shape}")

    def backward_fn(g):
        return tuple(g[i] for i in range(len(vectors)))

    return _apply(np.stack([v.data for v in vectors]), tuple(vectors), backward_fn)


def resample_linear(x: Tensor, target_len: int) -> Tensor:
    """Resample a vector to ``target_len`` by linear interpolation.

    Output j reads the input at position j*(m-1)/(n-1); for n == 1 the single
    output is the midpoint value. Adjoints distribute to the two neighboring
    source entries by interpolation weight. Identity when m == n.
    """
    x = _as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"resample_linear expects a vector, got shape {x.shape}")
    m = x.shape[0]
    n = int(target_len)
    if m < 2:
        raise InvalidInputError(f"resample_linear: source length {m} < 2")
    if n < 1:
        raise InvalidInputError(f"resample_linear: target length {n} < 1")
    if n == 1:
        pos = np.array([(m - 1) / 2.0])
    else:
        pos = np.arange(n, dtype=np.float64) * (m - 1) / (n - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, m - 2)
    hi = lo + 1
    w = pos - lo

    def backward_fn(g):
        gx = np.zeros(m, dtype=np.float64)
        np.add.at(gx, lo, (1.0 - w) * g)
        np.add.at(gx, hi, w * g)
        return (gx,)

    return _apply((1.0 - w) * x.data[lo] + w * x.data[hi], (x,), backward_fn)


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """-log(probs[target]) for an explicit probability vector.

    Prefer :func:`cross_entropy_with_logits` in training code; this variant
    exists for consumers that already hold normalized probabilities.
    """
    probs = _as_tensor(probs)
    if probs.ndim != 1:
        raise DimensionError(f"cross_entropy expects a probability vector, got {probs.shape}")
    if np.isnan(probs.data).any():
        raise NumericError("cross_entropy: NaN in probability vector")
    target = int(target)
    if not 0 <= target < probs.shape[0]:
        raise IndexError(f"cross_entropy: class {target} outside [0, {probs.shape[0]})")
    if probs.data.min() < -1e-9 or abs(probs.data.sum() - 1.0) > 1e-6:
        raise InvalidInputError("cross_entropy: input is not a probability vector")
    p = float(probs.data[target])
    k = probs.shape[0]

    def backward_fn(g):
        gp = np.zeros(k, dtype=np.float64)
        gp[target] = -float(g) / p
        return (gp,)

    return _apply(np.asarray(-math.log(p) if p > 0 else math.inf), (probs,), backward_fn)


def cross_entropy_with_logits(logits: Tensor, target: int) -> Tensor:
    """Fused log-softmax cross-entropy for one logit vector."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy_with_logits expects a vector, got {logits.shape}")
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy_with_logits: NaN in logits")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"cross_entropy_with_logits: class {target} outside [0, {logits.shape[0]})")
    z = logits.data - logits.data.max()
    lse = math.log(np.exp(z).sum())
    p = np.exp(z - lse)

    def backward_fn(g):
        gl = p.copy()
        gl[target] -= 1.0
        return (gl * float(g),)

    return _apply(np.asarray(lse - z[target]), (logits,), backward_fn)


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean fused cross-entropy over rows of a logit matrix."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows expects a matrix, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy_rows: {targets.shape} targets for {logits.shape[0]} rows"
        )
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy_rows: NaN in logits")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("cross_entropy_rows: target class out of range")
    t, k = logits.shape
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    p = np.exp(z - lse[:, None])
    rows = np.arange(t)
    losses = lse - z[rows, targets]

    def backward_fn(g):
        gl = p.copy()
        gl[rows, targets] -= 1.0
        return (gl * (float(g) / t),)

    return _apply(np.asarray(losses.mean()), (logits,), backward_fn)


def inject_blend(h: Tensor, z: Tensor, alpha: float, positions: str = "all") -> Tensor:
    """Blend vector ``z`` into the rows of residual-stream matrix ``h``.

    Each affected row p becomes (1-alpha)*h_p + alpha*z*||h_p||, i.e. the
    injected direction is rescaled to the local residual magnitude.
    ``positions`` selects every row ("all") or only the final row ("last").
    """
    h, z = _as_tensor(h), _as_tensor(z)
    if h.ndim != 2 or z.ndim != 1:
        raise DimensionError(f"inject_blend expects matrix and vector, got {h.shape}, {z.shape}")
    if z.shape[0] != h.shape[1]:
        raise DimensionError(
            f"inject_blend: vector dim {z.shape[0]} does not match stream width {h.shape[1]}"
        )
    if positions not in ("all", "last"):
        raise InvalidInputError(f"inject_blend: unknown positions mode {positions!r}")
    alpha = float(alpha)
    hd, zd = h.data, z.data
    t = hd.shape[0]
    rows = np.arange(t) if positions == "all" else np.array([t - 1])
    norms = np.linalg.norm(hd[rows], axis=1)
    out = hd.copy()
    out[rows] = (1.0 - alpha) * hd[rows] + alpha * norms[:, None] * zd

    def backward_fn(g):
        gh = g.copy()
        gr = g[rows]
        dots = gr @ zd
        unit = hd[rows] / np.maximum(norms, NORMALIZE_EPS)[:, None]
        gh[rows] = (1.0 - alpha) * gr + alpha * dots[:, None] * unit
        gz = alpha * (norms[:, None] * gr).sum(axis=0)
        return gh, gz

    return _apply(out, (h, z), backward_fn)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

_ROPE_CACHE: dict[tuple[int, int, float], tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(t: int, dh: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    key = (t, dh, base)
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    half = dh // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    ang = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
    tables = (np.cos(ang), np.sin(ang))
    _ROPE_CACHE[key] = tables
    return tables


def _rope_rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    # x: (heads, t, dh); even/odd interleaved pairs rotated by position angle
    s = -sin if inverse else sin
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * s
    out[..., 1::2] = x1 * s + x2 * cos
    return out


def causal_self_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal self-attention with rotary position encoding.

    Inputs are post-projection (t, d) matrices. Fused into one tape record:
    the adjoint runs the standard attention backward per head batch.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(
            f"causal_self_attention: q {q.shape}, k {k.shape}, v {v.shape} must match"
        )
    t, d = q.shape
    if d % n_heads:
        raise DimensionError(f"causal_self_attention: {n_heads} heads do not divide width {d}")
    dh = d // n_heads
    if dh % 2:
        raise DimensionError(f"causal_self_attention: head width {dh} must be even for rotation")
    cos, sin = _rope_tables(t, dh)
    inv_scale = 1.0 / math.sqrt(dh)

    def split(x):
        return x.reshape(t, n_heads, dh).transpose(1, 0, 2)

    qh = _rope_rotate(split(q.data), cos, sin)
    kh = _rope_rotate(split(k.data), cos, sin)
    vh = split(v.data)
    scores = qh @ kh.transpose(0, 2, 1) * inv_scale
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    scores = scores + mask[None]
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = (attn @ vh).transpose(1, 0, 2).reshape(t, d)

    def backward_fn(g):
        gh = g.reshape(t, n_heads, dh).transpose(1, 0, 2)
        gv = attn.transpose(0, 2, 1) @ gh
        ga = gh @ vh.transpose(0, 2, 1)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True))
        gq = (gs @ kh) * inv_scale
        gk = (gs.transpose(0, 2, 1) @ qh) * inv_scale
        gq = _rope_rotate(gq, cos, sin, inverse=True)
        gk = _rope_rotate(gk, cos, sin, inverse=True)

        def join(x):
            return x.transpose(1, 0, 2).reshape(t, d)

        return join(gq), join(gk), join(gv)

    return _apply(out, (q, k, v), backward_fn)


@dataclass
class MhaParams:
    """Projection weights for a query-vector cross-attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, init_scale: float = 0.01,
             trainable: bool = True) -> "MhaParams":
        def w():
            return Tensor(rng.normal(0.0, 1.0, (d, d)) * init_scale, requires_grad=trainable)

        def b():
            return Tensor(np.zeros(d), requires_grad=trainable)

        return cls(wq=w(), wk=w(), wv=w(), wo=w(), bq=b(), bk=b(), bv=b(), bo=b())

    def tensors(self) -> dict[str, Tensor]:
        return {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "bq": self.bq, "bk": self.bk, "bv": self.bv, "bo": self.bo,
        }


def multi_head_attention(
    query: Tensor,
    keys: Sequence[Tensor],
    values: Sequence[Tensor],
    params: MhaParams,
    n_heads: int,
) -> tuple[Tensor, list[Tensor]]:
    """Scaled dot-product cross-attention of one query vector over a small entry list.

    Returns the output-projected context vector and the per-head attention
    weight vectors (each sums to 1), kept as live tensors so both gradient
    flow and routing diagnostics can read them.
    """
    if len(keys) == 0 or len(values) == 0:
        raise InvalidInputError("multi_head_attention: empty key/value list")
    if len(keys) != len(values):
        raise InvalidInputError(
            f"multi_head_attention: {len(keys)} keys vs {len(values)} values"
        )
    query = _as_tensor(query)
    d = query.shape[0]
    if d % n_heads:
        raise DimensionError(f"multi_head_attention: {n_heads} heads do not divide width {d}")
    dh = d // n_heads

    kmat = stack_rows(keys)
    vmat = stack_rows(values)
    qp = affine(params.wq, params.bq, query)
    kp = add(matmul(kmat, transpose(params.wk)), params.bk)
    vp = add(matmul(vmat, transpose(params.wv)), params.bv)

    head_outs = []
    head_weights = []
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        qh = slice_cols(qp, lo, hi)
        kh = slice_cols(kp, lo, hi)
        vh = slice_cols(vp, lo, hi)
        scores = matmul(kh, qh) * (1.0 / math.sqrt(dh))
        w = softmax(scores)
        head_weights.append(w)
        head_outs.append(matmul(w, vh))
    ctx = concat(head_outs, axis=0)
    out = affine(params.wo, params.bo, ctx)
    return out, head_weights
