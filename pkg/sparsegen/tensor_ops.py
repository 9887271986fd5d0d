"""
Dense tensor primitives for the sparse generator.

Every primitive is a pure function on numpy arrays and comes with a backward
function implementing its exact vector-Jacobian product. Spatial tensors are laid
out as (width, height, channels); any number of leading batch axes is allowed so
that independent chains can be evaluated together.

Kernels for both directions are stored as (c_in, k, k, c_out).
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError

Tensor = np.ndarray

logger = logging.getLogger(__name__)

_SUPPORTED_PRECISIONS = ("float32", "float64")
_precision = np.dtype(os.environ.get("SPARSEGEN_PRECISION", "float64"))


def get_dtype() -> np.dtype:
    """Build-wide compute precision."""
    return _precision


def set_precision(name: str) -> None:
    """Switch the compute precision for the whole process."""
    global _precision
    if str(name) not in _SUPPORTED_PRECISIONS:
        raise ConfigurationError(
            f"Unsupported precision: {name} (use one of {_SUPPORTED_PRECISIONS})"
        )
    _precision = np.dtype(name)


def as_tensor(x) -> Tensor:
    """Convert to an array in the compute precision."""
    return np.asarray(x, dtype=_precision)


def check_finite(t: Tensor, name: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return t


# ---------------------------------------------------------------------------
# affine


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """out[..., j] = sum_i x[..., i] * W[i, j] + b[j]."""
    if W.ndim != 2:
        raise DimensionError(f"weight must be rank 2, got shape {W.shape}", axis="W")
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"input length {x.shape[-1]} does not match weight rows {W.shape[0]}",
            axis="d",
        )
    if b.shape != (W.shape[1],):
        raise DimensionError(
            f"bias shape {b.shape} does not match weight columns {W.shape[1]}",
            axis="m",
        )
    return x @ W + b


def affine_backward(g: Tensor, x: Tensor, W: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """(d/dx, d/dW, d/db) for upstream gradient g; W and b sum over batch axes."""
    dx = g @ W.T
    m = W.shape[1]
    x2 = x.reshape(-1, W.shape[0])
    g2 = g.reshape(-1, m)
    dW = x2.T @ g2
    db = g2.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------------------
# strided window helpers shared by deconv2d and conv2d


def _scatter(cols: Tensor, stride: int) -> Tensor:
    """Add (..., w, h, k, k, c) windows into a (..., (w-1)s+k, (h-1)s+k, c) canvas."""
    *lead, w, h, k, _, c = cols.shape
    canvas = (*lead, (w - 1) * stride + k, (h - 1) * stride + k, c)
    full = np.zeros(canvas, dtype=cols.dtype)
    xs = (w - 1) * stride + 1
    ys = (h - 1) * stride + 1
    for a in range(k):
        for b in range(k):
            full[..., a:a + xs:stride, b:b + ys:stride, :] += cols[..., :, :, a, b, :]
    return full


def _gather(full: Tensor, k: int, stride: int, w: int, h: int) -> Tensor:
    """Inverse access pattern of _scatter: read (..., w, h, k, k, c) canvas windows."""
    lead = full.shape[:-3]
    c = full.shape[-1]
    cols = np.empty((*lead, w, h, k, k, c), dtype=full.dtype)
    xs = (w - 1) * stride + 1
    ys = (h - 1) * stride + 1
    for a in range(k):
        for b in range(k):
            cols[..., :, :, a, b, :] = full[..., a:a + xs:stride, b:b + ys:stride, :]
    return cols


def _check_kernel(
    ker: Tensor, bias: Optional[Tensor], c_in: int, stride: int, pad: int
) -> int:
    if ker.ndim != 4 or ker.shape[1] != ker.shape[2]:
        raise DimensionError(
            f"kernel must be (c_in, k, k, c_out), got {ker.shape}", axis="kernel"
        )
    if ker.shape[0] != c_in:
        raise DimensionError(
            f"input has {c_in} channels but kernel expects {ker.shape[0]}",
            axis="channel",
        )
    if bias is not None and bias.shape != (ker.shape[3],):
        raise DimensionError(
            f"bias shape {bias.shape} does not match {ker.shape[3]} output channels",
            axis="channel",
        )
    if stride < 1 or pad < 0:
        raise ConfigurationError(
            f"stride must be >= 1 and pad >= 0 (got stride={stride}, pad={pad})"
        )
    return ker.shape[1]


# ---------------------------------------------------------------------------
# transposed convolution


def deconv_output_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n - 1) * stride + kernel - 2 * pad


def deconv2d(fm: Tensor, ker: Tensor, bias: Tensor, stride: int, pad: int) -> Tensor:
    """
    Transposed convolution.

    Each activation fm[x, y, c] adds fm[x, y, c] * ker[c, :, :, o] into the output
    window anchored at (x*stride - pad, y*stride - pad), clipped to the output
    bounds; bias[o] is added once per output element.
    """
    if fm.ndim < 3:
        raise DimensionError(
            f"feature map must be (..., w, h, c), got {fm.shape}", axis="fm"
        )
    k = _check_kernel(ker, bias, fm.shape[-1], stride, pad)
    w, h = fm.shape[-3], fm.shape[-2]
    out_w = deconv_output_size(w, k, stride, pad)
    out_h = deconv_output_size(h, k, stride, pad)
    if out_w < 1 or out_h < 1:
        raise ConfigurationError(
            f"deconv output extent {out_w}x{out_h} is not positive"
        )
    cols = np.tensordot(fm, ker, axes=([-1], [0]))
    full = _scatter(cols, stride)
    return full[..., pad:pad + out_w, pad:pad + out_h, :] + bias


def deconv2d_backward(
    g: Tensor, fm: Tensor, ker: Tensor, stride: int, pad: int, need_params: bool = True
) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
    """
    Vector-Jacobian product of deconv2d.

    d/dfm is the strided correlation of g with ker; d/dker and d/dbias sum over
    every leading axis. Parameter gradients are skipped when need_params is False.
    """
    k = ker.shape[1]
    w, h = fm.shape[-3], fm.shape[-2]
    canvas = ((w - 1) * stride + k, (h - 1) * stride + k, g.shape[-1])
    full = np.zeros(g.shape[:-3] + canvas, dtype=g.dtype)
    full[..., pad:pad + g.shape[-3], pad:pad + g.shape[-2], :] = g
    cols = _gather(full, k, stride, w, h)
    d_fm = np.tensordot(cols, ker, axes=([-3, -2, -1], [1, 2, 3]))
    if not need_params:
        return d_fm, None, None
    lead = list(range(fm.ndim - 1))
    d_ker = np.tensordot(fm, cols, axes=(lead, lead))
    d_bias = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return d_fm, d_ker, d_bias


# ---------------------------------------------------------------------------
# forward convolution (descriptor only)


def conv_output_size(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def _pad_canvas(
    x: Tensor, k: int, stride: int, pad: int, u: int, v: int
) -> Tuple[Tensor, int, int]:
    full_w = (u - 1) * stride + k
    full_h = (v - 1) * stride + k
    wx = min(x.shape[-3], full_w - pad)
    wy = min(x.shape[-2], full_h - pad)
    full = np.zeros(x.shape[:-3] + (full_w, full_h, x.shape[-1]), dtype=x.dtype)
    full[..., pad:pad + wx, pad:pad + wy, :] = x[..., :wx, :wy, :]
    return full, wx, wy


def conv2d(x: Tensor, ker: Tensor, bias: Tensor, stride: int, pad: int) -> Tensor:
    """
    Strided cross-correlation:

        out[u, v, o] = sum_{a,b,c} x[u*s - pad + a, v*s - pad + b, c] * ker[c, a, b, o]
                       + bias[o]
    """
    if x.ndim < 3:
        raise DimensionError(f"input must be (..., w, h, c), got {x.shape}", axis="x")
    k = _check_kernel(ker, bias, x.shape[-1], stride, pad)
    u = conv_output_size(x.shape[-3], k, stride, pad)
    v = conv_output_size(x.shape[-2], k, stride, pad)
    if u < 1 or v < 1:
        raise ConfigurationError(f"conv output extent {u}x{v} is not positive")
    full, _, _ = _pad_canvas(x, k, stride, pad, u, v)
    cols = _gather(full, k, stride, u, v)
    return np.tensordot(cols, ker, axes=([-3, -2, -1], [1, 2, 0])) + bias


def conv2d_backward(
    g: Tensor, x: Tensor, ker: Tensor, stride: int, pad: int, need_params: bool = True
) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
    k = ker.shape[1]
    u, v = g.shape[-3], g.shape[-2]
    d_cols = np.moveaxis(np.tensordot(g, ker, axes=([-1], [3])), -3, -1)
    d_full = _scatter(d_cols, stride)
    full, wx, wy = _pad_canvas(x, k, stride, pad, u, v)
    d_x = np.zeros_like(x)
    d_x[..., :wx, :wy, :] = d_full[..., pad:pad + wx, pad:pad + wy, :]
    if not need_params:
        return d_x, None, None
    cols = _gather(full, k, stride, u, v)
    lead = list(range(g.ndim - 1))
    d_ker = np.transpose(np.tensordot(cols, g, axes=(lead, lead)), (2, 0, 1, 3))
    d_bias = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return d_x, d_ker, d_bias


# ---------------------------------------------------------------------------
# Top-K, ReLU, tanh


@dataclass(frozen=True)
class TopKResult:
    values: Tensor
    mask: Tensor
    k_effective: int


@dataclass(frozen=True)
class ReluResult:
    values: Tensor
    mask: Tensor


def topk(t: Tensor, K: int, batch_ndim: int = 0) -> TopKResult:
    """
    Keep the K largest elements of t, selected jointly over all non-batch axes.

    Ties are broken by lowest row-major index. K larger than the element count
    clamps to the element count.
    """
    if K < 1:
        raise ConfigurationError(f"Top-K requires K >= 1, got {K}")
    lead = t.shape[:batch_ndim]
    flat = t.reshape((int(np.prod(lead, dtype=np.int64)), -1))
    k_eff = min(int(K), flat.shape[1])
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k_eff]
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, order, 1.0, axis=1)
    mask = mask.reshape(t.shape)
    return TopKResult(values=t * mask, mask=mask, k_effective=k_eff)


def topk_backward(g: Tensor, mask: Tensor) -> Tensor:
    return g * mask


def relu(t: Tensor) -> ReluResult:
    mask = (t > 0).astype(t.dtype)
    return ReluResult(values=t * mask, mask=mask)


def relu_backward(g: Tensor, mask: Tensor) -> Tensor:
    return g * mask


def tanh_map(t: Tensor) -> Tensor:
    return np.tanh(t)


def tanh_backward(g: Tensor, out: Tensor) -> Tensor:
    return g * (1.0 - out * out)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Outcome of a central-difference comparison."""

    max_rel_error: float
    checked: int
    skipped: List[Tuple[int, ...]] = field(default_factory=list)

    @property
    def inconclusive(self) -> bool:
        return self.checked == 0

    @property
    def stable_fraction(self) -> float:
        total = self.checked + len(self.skipped)
        return self.checked / total if total else 0.0

    def passed(self, tolerance: float) -> bool:
        return not self.inconclusive and self.max_rel_error < tolerance

    def __str__(self) -> str:
        if self.inconclusive:
            return f"inconclusive: all {len(self.skipped)} coordinates skipped"
        return (
            f"max rel. error {self.max_rel_error:.3e} over {self.checked} coordinates "
            f"({len(self.skipped)} skipped)"
        )


def _same_masks(a: Sequence[Tensor], b: Sequence[Tensor]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def sample_coords(
    shape: Tuple[int, ...], n: int, rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    """Pick up to n distinct coordinates of a tensor with the given shape."""
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(n, total), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in sorted(flat)]


def grad_check(
    f: Callable[[Tensor], float],
    grad: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    masks: Optional[Callable[[Tensor], Sequence[Tensor]]] = None,
    coords: Optional[Sequence[Tuple[int, ...]]] = None,
) -> GradCheckReport:
    """
    Compare grad(x) against central differences of f.

    Args:
        f: scalar function of x
        grad: its analytic gradient
        x: evaluation point
        h: finite-difference step
        masks: for piecewise-linear f, returns the masks selected at a point;
            coordinates whose x +/- h evaluations change any mask are skipped
        coords: coordinates to check (all by default)

    Returns:
        GradCheckReport with max |analytic - numeric| / max(1, |analytic|)
    """
    x = np.array(x, dtype=get_dtype())
    analytic = np.asarray(grad(x))
    if analytic.shape != x.shape:
        raise DimensionError(
            f"gradient shape {analytic.shape} differs from input {x.shape}",
            axis="grad",
        )
    base = masks(x) if masks is not None else None
    if coords is None:
        coords = list(np.ndindex(*x.shape))

    worst = 0.0
    checked = 0
    skipped: List[Tuple[int, ...]] = []
    for idx in coords:
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        stable = masks is None or (
            _same_masks(masks(xp), base) and _same_masks(masks(xm), base)
        )
        if not stable:
            skipped.append(tuple(idx))
            continue
        numeric = (float(f(xp)) - float(f(xm))) / (2.0 * h)
        a = float(analytic[idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        checked += 1

    report = GradCheckReport(max_rel_error=worst, checked=checked, skipped=skipped)
    logger.debug(f"grad_check: {report}")
    return report
