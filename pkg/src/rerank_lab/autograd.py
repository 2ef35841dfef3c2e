"""Minimal reverse-mode differentiation substrate for the rankers.

One Tensor class over numpy arrays (up to 4 axes, float32 by default) and a
small fixed set of ops, each with an explicit hand-written backward rule.
There is no graph compiler: every op builds a closure that scatters its
upstream gradient into its parents, and `Tensor.backward()` replays them in
reverse topological order. Every rule is verified against central finite
differences (see `gradient_check`).

Ops raise `NonFiniteError` as soon as they produce a NaN/Inf value; masked
(PAD) positions receive zero gradient everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_MAX_AXES = 4


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > _MAX_AXES:
            raise ValueError(f"tensors support up to {_MAX_AXES} axes, got {arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: float = 1.0) -> None:
        """Backpropagate from this (scalar) tensor with upstream value `seed`."""
        if self.data.size != 1:
            raise ValueError("backward() must start from a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.full_like(self.data, seed))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _grad_of(out: Tensor) -> np.ndarray:
    assert out.grad is not None
    return out.grad


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError("add requires identical shapes")
    out_data = a.data + b.data

    def backward() -> None:
        g = _grad_of(out)
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out = _result(out_data, (a, b), backward, "add")
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out_data = x.data * c

    def backward() -> None:
        if x.requires_grad:
            x._accumulate(_grad_of(out) * c)

    out = _result(out_data, (x,), backward, "scale")
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward() -> None:
        if x.requires_grad:
            x._accumulate(_grad_of(out) * (x.data > 0))

    out = _result(out_data, (x,), backward, "relu")
    return out


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward() -> None:
        if x.requires_grad:
            x._accumulate(_grad_of(out) * (1.0 - out_data * out_data))

    out = _result(out_data, (x,), backward, "tanh")
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward() -> None:
        if x.requires_grad:
            x._accumulate(_grad_of(out).reshape(x.shape))

    out = _result(out_data, (x,), backward, "reshape")
    return out


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward() -> None:
        g = _grad_of(out)
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                x._accumulate(g[tuple(index)])

    out = _result(out_data, tuple(xs), backward, "concat")
    return out


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w (+ b). x may be (in,) or (n, in); w is (in, out)."""
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def backward() -> None:
        g = _grad_of(out)
        x2 = x.data.reshape(-1, w.shape[0])
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    out = _result(out_data, parents, backward, "linear")
    return out


def embedding_lookup(table: Tensor, ids: Sequence[int], frozen=(0,)) -> Tensor:
    """Gather rows of `table` for `ids`. Rows in `frozen` get no gradient."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    if ids_arr.ndim != 1:
        raise ValueError("ids must be a flat sequence")
    out_data = table.data[ids_arr]
    frozen_set = frozenset(frozen)

    def backward() -> None:
        if not table.requires_grad:
            return
        g = _grad_of(out)
        keep = np.asarray([i not in frozen_set for i in ids_arr.tolist()], dtype=bool)
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids_arr[keep], g[keep])

    out = _result(out_data, (table,), backward, "embedding_lookup")
    return out


# ---------------------------------------------------------------------------
# Matching and kernel pooling
# ---------------------------------------------------------------------------


def cosine_match_matrix(
    q: Tensor,
    d: Tensor,
    q_mask: np.ndarray | None = None,
    d_mask: np.ndarray | None = None,
) -> Tensor:
    """M[i, j] = cos(q_i, d_j); masked or zero-norm positions give exactly 0."""
    if q.data.ndim != 2 or d.data.ndim != 2 or q.shape[1] != d.shape[1]:
        raise ValueError("cosine_match_matrix needs (n, dim) and (m, dim) inputs")
    q_mask = np.ones(q.shape[0], dtype=bool) if q_mask is None else np.asarray(q_mask, bool)
    d_mask = np.ones(d.shape[0], dtype=bool) if d_mask is None else np.asarray(d_mask, bool)

    qn = np.linalg.norm(q.data, axis=1)
    dn = np.linalg.norm(d.data, axis=1)
    q_valid = q_mask & (qn > 0)
    d_valid = d_mask & (dn > 0)
    qu = np.divide(q.data, np.where(qn > 0, qn, 1.0)[:, None])
    du = np.divide(d.data, np.where(dn > 0, dn, 1.0)[:, None])
    qu[~q_valid] = 0.0
    du[~d_valid] = 0.0
    out_data = qu @ du.T

    def backward() -> None:
        g = _grad_of(out) * np.outer(q_valid, d_valid)
        if q.requires_grad:
            gq = (g @ du - (g * out_data).sum(axis=1, keepdims=True) * qu)
            gq /= np.where(qn > 0, qn, 1.0)[:, None]
            gq[~q_valid] = 0.0
            q._accumulate(gq)
        if d.requires_grad:
            gd = (g.T @ qu - (g * out_data).sum(axis=0)[:, None] * du)
            gd /= np.where(dn > 0, dn, 1.0)[:, None]
            gd[~d_valid] = 0.0
            d._accumulate(gd)

    out = _result(out_data, (q, d), backward, "cosine_match_matrix")
    return out


@dataclass
class KernelBank:
    """Gaussian kernel means and widths for match-matrix pooling."""

    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.means.shape != self.sigmas.shape or self.means.ndim != 1:
            raise ValueError("means and sigmas must be 1-D and the same length")
        if np.any(self.sigmas <= 0):
            raise ValueError("kernel widths must be positive")
        if int(np.sum(self.means == 1.0)) != 1:
            raise ValueError("expected exactly one exact-match kernel (mean 1.0)")

    @property
    def count(self) -> int:
        return len(self.means)

    @classmethod
    def default(cls, exact_sigma: float = 0.1) -> "KernelBank":
        """Ten soft kernels at -0.9, -0.7, ..., 0.9 plus the exact-match kernel."""
        means = [k / 10.0 for k in range(-9, 10, 2)] + [1.0]
        sigmas = [0.1] * 10 + [exact_sigma]
        return cls(np.array(means), np.array(sigmas))


KERNEL_POOL_EPS = 1e-10


def gaussian_kernel_pool(
    m: Tensor,
    bank: KernelBank,
    q_mask: np.ndarray | None = None,
    d_mask: np.ndarray | None = None,
    eps: float = KERNEL_POOL_EPS,
) -> Tensor:
    """Soft-histogram the match matrix into one feature per kernel.

    Per unmasked query row i and kernel k, K_k(i) sums the Gaussian response
    over unmasked document columns; the feature is sum_i ln(K_k(i) + eps).
    """
    if m.data.ndim != 2:
        raise ValueError("kernel pooling expects an (n, m) match matrix")
    n, cols = m.shape
    q_mask = np.ones(n, dtype=bool) if q_mask is None else np.asarray(q_mask, bool)
    d_mask = np.ones(cols, dtype=bool) if d_mask is None else np.asarray(d_mask, bool)
    if not q_mask.any():
        raise ValueError("all query positions are masked")

    dtype = m.data.dtype
    mu = bank.means.astype(dtype)
    inv_two_sigma_sq = (1.0 / (2.0 * bank.sigmas**2)).astype(dtype)
    diff = m.data[:, :, None] - mu[None, None, :]
    responses = np.exp(-(diff**2) * inv_two_sigma_sq)
    responses *= d_mask[None, :, None]
    per_query = responses.sum(axis=1)  # (n, kernels)
    logs = np.log(per_query + dtype.type(eps))
    out_data = (logs * q_mask[:, None]).sum(axis=0)

    def backward() -> None:
        if not m.requires_grad:
            return
        g = _grad_of(out)  # (kernels,)
        inner = responses * (-2.0 * diff * inv_two_sigma_sq)
        weights = (g / (per_query + eps)) * q_mask[:, None]  # (n, kernels)
        m._accumulate((inner * weights[:, None, :]).sum(axis=2))

    out = _result(out_data, (m,), backward, "gaussian_kernel_pool")
    return out


# ---------------------------------------------------------------------------
# Convolutions and pooling
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-length 1-D convolution with start-aligned windows.

    Output position i sees input rows i .. i+width-1 (zero padding on the
    right), so out[i] is the representation of the n-gram starting at i.
    x: (length, in_channels), w: (width, in_channels, out_channels).
    """
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ValueError("conv1d expects (L, Cin) input and (width, Cin, Cout) filters")
    length = x.shape[0]
    width, c_in, c_out = w.shape
    xp = np.concatenate([x.data, np.zeros((width - 1, c_in), dtype=x.data.dtype)], axis=0)
    cols = np.concatenate([xp[k : k + length] for k in range(width)], axis=1)
    w_mat = w.data.reshape(width * c_in, c_out)
    out_data = cols @ w_mat
    if b is not None:
        out_data = out_data + b.data

    def backward() -> None:
        g = _grad_of(out)
        if x.requires_grad:
            g_cols = g @ w_mat.T
            gxp = np.zeros_like(xp)
            for k in range(width):
                gxp[k : k + length] += g_cols[:, k * c_in : (k + 1) * c_in]
            x._accumulate(gxp[:length])
        if w.requires_grad:
            w._accumulate((cols.T @ g).reshape(width, c_in, c_out))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    out = _result(out_data, parents, backward, "conv1d")
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-size 2-D convolution with centered zero padding.

    x: (h, w, in_channels), w: (kh, kw, in_channels, out_channels).
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ValueError("conv2d expects (H, W, Cin) input and (kh, kw, Cin, Cout) filters")
    height, width = x.shape[0], x.shape[1]
    kh, kw, c_in, c_out = w.shape
    pad_top, pad_left = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((height + kh - 1, width + kw - 1, c_in), dtype=x.data.dtype)
    xp[pad_top : pad_top + height, pad_left : pad_left + width] = x.data
    blocks = [
        xp[di : di + height, dj : dj + width].reshape(height * width, c_in)
        for di in range(kh)
        for dj in range(kw)
    ]
    cols = np.concatenate(blocks, axis=1)
    w_mat = w.data.reshape(kh * kw * c_in, c_out)
    out_data = (cols @ w_mat).reshape(height, width, c_out)
    if b is not None:
        out_data = out_data + b.data

    def backward() -> None:
        g = _grad_of(out).reshape(height * width, c_out)
        if x.requires_grad:
            g_cols = g @ w_mat.T
            gxp = np.zeros_like(xp)
            for idx, (di, dj) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                gxp[di : di + height, dj : dj + width] += g_cols[
                    :, idx * c_in : (idx + 1) * c_in
                ].reshape(height, width, c_in)
            x._accumulate(gxp[pad_top : pad_top + height, pad_left : pad_left + width])
        if w.requires_grad:
            w._accumulate((cols.T @ g).reshape(kh, kw, c_in, c_out))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    out = _result(out_data, parents, backward, "conv2d")
    return out


def _pool_regions(size: int, out_size: int) -> list[tuple[int, int]]:
    """Near-equal regions with boundaries at round-half-up of i*size/out_size.

    When size < out_size some boundaries collide; those regions fall back to
    the single row at the clamped boundary index, duplicating input rows.
    """
    bounds = [(2 * i * size + out_size) // (2 * out_size) for i in range(out_size + 1)]
    regions = []
    for i in range(out_size):
        lo, hi = bounds[i], bounds[i + 1]
        if hi <= lo:
            lo = min(lo, size - 1)
            hi = lo + 1
        regions.append((lo, hi))
    return regions


def dynamic_max_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Per-region, per-channel max over an out_h x out_w partition of x."""
    if out_h < 1 or out_w < 1:
        raise ValueError("pooled sizes must be >= 1")
    if x.data.ndim != 3:
        raise ValueError("dynamic_max_pool expects (H, W, C) input")
    height, width, channels = x.shape
    row_regions = _pool_regions(height, out_h)
    col_regions = _pool_regions(width, out_w)

    out_data = np.empty((out_h, out_w, channels), dtype=x.data.dtype)
    argmax_rows = np.empty((out_h, out_w, channels), dtype=np.int64)
    argmax_cols = np.empty((out_h, out_w, channels), dtype=np.int64)
    for i, (r0, r1) in enumerate(row_regions):
        for j, (c0, c1) in enumerate(col_regions):
            region = x.data[r0:r1, c0:c1, :].reshape(-1, channels)
            flat = region.argmax(axis=0)
            out_data[i, j] = region[flat, np.arange(channels)]
            argmax_rows[i, j] = r0 + flat // (c1 - c0)
            argmax_cols[i, j] = c0 + flat % (c1 - c0)

    def backward() -> None:
        if not x.requires_grad:
            return
        g = _grad_of(out)
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        chan = np.broadcast_to(np.arange(channels), g.shape)
        np.add.at(x.grad, (argmax_rows.ravel(), argmax_cols.ravel(), chan.ravel()), g.ravel())

    out = _result(out_data, (x,), backward, "dynamic_max_pool")
    return out


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def margin_ranking_loss(s_pos: Tensor, s_neg: Tensor, margin: float = 1.0) -> Tensor:
    """max(0, margin - (s_pos - s_neg)) over scalar scores."""
    if s_pos.data.size != 1 or s_neg.data.size != 1:
        raise ValueError("margin_ranking_loss expects scalar scores")
    raw = margin - (s_pos.data.reshape(()) - s_neg.data.reshape(()))
    out_data = np.maximum(raw, 0)
    inside = bool(raw > 0)

    def backward() -> None:
        g = float(_grad_of(out))
        if inside:
            if s_pos.requires_grad:
                s_pos._accumulate(np.full_like(s_pos.data, -g))
            if s_neg.requires_grad:
                s_neg._accumulate(np.full_like(s_neg.data, g))

    out = _result(out_data, (s_pos, s_neg), backward, "margin_ranking_loss")
    return out


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckResult:
    max_relative_error: float
    per_parameter: list[float]


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
) -> GradientCheckResult:
    """Compare analytic gradients of `fn()` against central finite differences.

    `fn` must rebuild its graph from the given parameter tensors on every
    call. Parameters are probed in float64 (and restored afterwards) so the
    difference quotient is not drowned in float32 rounding noise. The error
    for one entry is |a - n| / max(1e-8, |a| + |n|).
    """
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        for p in params:
            p.zero_grad()
        fn().backward()
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
        ]
        per_parameter = []
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            grad_flat = grad.reshape(-1)
            worst = 0.0
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + h
                f_plus = fn().item()
                flat[idx] = original - h
                f_minus = fn().item()
                flat[idx] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = float(grad_flat[idx])
                worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
            per_parameter.append(worst)
    finally:
        for p, original in zip(params, originals):
            p.data = original
            p.zero_grad()
    return GradientCheckResult(max(per_parameter, default=0.0), per_parameter)
