"""
Top-down sparse generator g(Z; θ).

FC -> reshape -> (Top-K -> ReLU -> transposed conv) per layer -> tanh.
The Top-K and ReLU masks of a forward pass can be recorded in a ForwardTrace;
holding them fixed makes the network linear in its feature maps, which is what
the gradient code and the grammar decomposition rely on.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import DimensionError, MissingTraceError
from .models import GeneratorConfig
from .tensor_ops import (
    Tensor,
    affine,
    affine_backward,
    as_tensor,
    check_finite,
    deconv2d,
    deconv2d_backward,
    get_dtype,
    relu,
    tanh_map,
    topk,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass
class GeneratorParams:
    """θ: FC weights plus one (kernel, bias) pair per deconv layer."""

    W_fc: Tensor
    b_fc: Tensor
    kernels: List[Tensor]
    biases: List[Tensor]

    def named_tensors(self, prefix: str = "theta") -> Dict[str, Tensor]:
        tensors = {f"{prefix}/fc/W": self.W_fc, f"{prefix}/fc/b": self.b_fc}
        for i, (ker, bias) in enumerate(zip(self.kernels, self.biases), start=1):
            tensors[f"{prefix}/deconv{i}/ker"] = ker
            tensors[f"{prefix}/deconv{i}/bias"] = bias
        return tensors

    @classmethod
    def from_named(
        cls, tensors: Dict[str, Tensor], prefix: str = "theta"
    ) -> "GeneratorParams":
        n = 0
        while f"{prefix}/deconv{n + 1}/ker" in tensors:
            n += 1
        return cls(
            W_fc=tensors[f"{prefix}/fc/W"],
            b_fc=tensors[f"{prefix}/fc/b"],
            kernels=[tensors[f"{prefix}/deconv{i}/ker"] for i in range(1, n + 1)],
            biases=[tensors[f"{prefix}/deconv{i}/bias"] for i in range(1, n + 1)],
        )

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(
            W_fc=self.W_fc.copy(),
            b_fc=self.b_fc.copy(),
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
        )

    def validate(self, config: GeneratorConfig) -> None:
        shapes = config.feature_shapes()
        fc_len = int(np.prod(config.fc_shape))
        if self.W_fc.shape != (config.d, fc_len) or self.b_fc.shape != (fc_len,):
            raise DimensionError(
                f"FC parameters {self.W_fc.shape}/{self.b_fc.shape} "
                "do not match config",
                axis="fc",
            )
        L = config.num_layers
        if len(self.kernels) != L or len(self.biases) != L:
            raise DimensionError(
                f"expected {L} deconv layers, got {len(self.kernels)}", axis="layers"
            )
        for i, spec in enumerate(config.layers):
            expected = (shapes[i][2], spec.kernel, spec.kernel, shapes[i + 1][2])
            if self.kernels[i].shape != expected:
                raise DimensionError(
                    f"deconv{i + 1} kernel {self.kernels[i].shape} != {expected}",
                    axis="kernel",
                )
            if self.biases[i].shape != (expected[3],):
                raise DimensionError(
                    f"deconv{i + 1} bias {self.biases[i].shape} != ({expected[3]},)",
                    axis="bias",
                )


def init_params(config: GeneratorConfig, seed: int) -> GeneratorParams:
    """Weights i.i.d. N(0, 0.02²), biases zero, deterministic in seed."""
    shapes = config.feature_shapes()
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    fc_len = int(np.prod(config.fc_shape))
    W_fc = rng.normal(0.0, INIT_STD, size=(config.d, fc_len)).astype(dtype)
    kernels = []
    for i, spec in enumerate(config.layers):
        c_in, c_out = shapes[i][2], shapes[i + 1][2]
        size = (c_in, spec.kernel, spec.kernel, c_out)
        kernels.append(rng.normal(0.0, INIT_STD, size=size).astype(dtype))
    biases = [np.zeros(shapes[i + 1][2], dtype=dtype) for i in range(config.num_layers)]
    return GeneratorParams(
        W_fc=W_fc,
        b_fc=np.zeros(fc_len, dtype=dtype),
        kernels=kernels,
        biases=biases,
    )


@dataclass
class LayerTrace:
    """Recorded state of feature map fmⁱ."""

    fm: Tensor
    fm_s: Tensor
    mask_t: Optional[Tensor] = None
    mask_r: Optional[Tensor] = None

    @property
    def mask(self) -> Tensor:
        return self.mask_t * self.mask_r


@dataclass
class ForwardTrace:
    Z: Tensor
    layers: List[LayerTrace]
    P: Tensor
    Y: Tensor
    config: GeneratorConfig = field(repr=False)

    @property
    def batched(self) -> bool:
        return self.Z.ndim > 1

    def require_masks(self) -> None:
        missing = any(lt.mask_t is None or lt.mask_r is None for lt in self.layers)
        if not self.layers or missing:
            raise MissingTraceError("trace was recorded without masks")

    def layer(self, i: int) -> LayerTrace:
        """Feature map i, counted from 1 like fm¹..fm^L."""
        if not 1 <= i <= len(self.layers):
            raise IndexError(f"layer {i} outside 1..{len(self.layers)}")
        return self.layers[i - 1]

    def example(self, n: int) -> "ForwardTrace":
        """Slice one example out of a batched trace."""
        if not self.batched:
            return self
        return ForwardTrace(
            Z=self.Z[n],
            layers=[
                LayerTrace(
                    fm=lt.fm[n],
                    fm_s=lt.fm_s[n],
                    mask_t=None if lt.mask_t is None else lt.mask_t[n],
                    mask_r=None if lt.mask_r is None else lt.mask_r[n],
                )
                for lt in self.layers
            ],
            P=self.P[n],
            Y=self.Y[n],
            config=self.config,
        )


def _check_latent(Z: Tensor, config: GeneratorConfig) -> Tensor:
    Z = as_tensor(Z)
    if Z.ndim not in (1, 2) or Z.shape[-1] != config.d:
        raise DimensionError(
            f"latent must have trailing length {config.d}, got shape {Z.shape}",
            axis="d",
        )
    return check_finite(Z, "Z")


def forward(
    params: GeneratorParams, Z: Tensor, config: GeneratorConfig, record: bool = False
) -> Tuple[Tensor, Optional[ForwardTrace]]:
    """
    Evaluate g(Z).

    Args:
        params: generator parameters θ
        Z: latent vector (d,) or batch (n, d)
        config: architecture
        record: keep preactivations and masks

    Returns:
        (Y, trace) where trace is None unless record is set
    """
    Z = _check_latent(Z, config)
    lead = Z.shape[:-1]
    fm = affine(Z, params.W_fc, params.b_fc).reshape(lead + tuple(config.fc_shape))
    layers: List[LayerTrace] = []
    for i, spec in enumerate(config.layers):
        if config.sparse:
            top = topk(fm, config.t_k[i], batch_ndim=len(lead))
            selected, mask_t = top.values, top.mask
        else:
            mask_t = np.ones_like(fm)
            selected = fm * mask_t
        rel = relu(selected)
        if record:
            layer = LayerTrace(fm=fm, fm_s=rel.values, mask_t=mask_t, mask_r=rel.mask)
            layers.append(layer)
        ker, bias = params.kernels[i], params.biases[i]
        fm = deconv2d(rel.values, ker, bias, spec.stride, spec.pad)
    Y = tanh_map(fm)
    if not record:
        return Y, None
    return Y, ForwardTrace(Z=Z, layers=layers, P=fm, Y=Y, config=config)


def propagate_frozen(
    params: GeneratorParams,
    trace: ForwardTrace,
    start: int,
    fm_s: Tensor,
    bias_divisor: float = 1.0,
) -> Tensor:
    """
    Push a sparse map at feature-map index `start` (1-based) down to the
    pre-tanh image with every downstream mask frozen from `trace`.

    Each layer's bias is divided by `bias_divisor`. Extra leading axes on fm_s
    are carried through, so several maps can be propagated at once.
    """
    trace.require_masks()
    config = trace.config
    x = fm_s
    out = x
    for i in range(start - 1, config.num_layers):
        spec = config.layers[i]
        bias = params.biases[i]
        if bias_divisor != 1.0:
            bias = bias / bias_divisor
        out = deconv2d(x, params.kernels[i], bias, spec.stride, spec.pad)
        if i + 1 < config.num_layers:
            nxt = trace.layers[i + 1]
            x = out * nxt.mask_t * nxt.mask_r
    return out


def replay(params: GeneratorParams, trace: ForwardTrace) -> Tensor:
    """Re-evaluate the network at trace.Z with every mask frozen; reproduces trace.Y."""
    trace.require_masks()
    config = trace.config
    lead = trace.Z.shape[:-1]
    fm = affine(trace.Z, params.W_fc, params.b_fc)
    fm = fm.reshape(lead + tuple(config.fc_shape))
    first = trace.layers[0]
    fm_s = fm * first.mask_t * first.mask_r
    return tanh_map(propagate_frozen(params, trace, 1, fm_s))


def _sq_norm(t: Tensor, event_ndim: int) -> Tensor:
    axes = tuple(range(t.ndim - event_ndim, t.ndim))
    return np.sum(t * t, axis=axes)


def log_joint(params: GeneratorParams, Z: Tensor, Y: Tensor, config: GeneratorConfig):
    """−‖Y − g(Z)‖²/(2σ²) − ‖Z‖²/2 without the constant; one value per row of Z."""
    G, _ = forward(params, Z, config)
    Y = as_tensor(Y)
    if Y.shape != G.shape:
        raise DimensionError(
            f"image shape {Y.shape} does not match generator output {G.shape}",
            axis="Y",
        )
    Z = as_tensor(Z)
    value = -_sq_norm(Y - G, 3) / (2.0 * config.sigma ** 2) - _sq_norm(Z, 1) / 2.0
    return float(value) if np.ndim(value) == 0 else value


@dataclass
class GeneratorGrads:
    dZ: Tensor
    params: Optional[GeneratorParams] = None


def backward(
    params: GeneratorParams,
    trace: ForwardTrace,
    grad_P: Tensor,
    need_params: bool = True,
) -> GeneratorGrads:
    """
    Reverse pass from the pre-tanh image through the frozen masks.

    θ gradients sum over the batch.
    """
    config = trace.config
    L = config.num_layers
    ker_grads: List[Optional[Tensor]] = [None] * L
    bias_grads: List[Optional[Tensor]] = [None] * L
    g = grad_P
    for i in reversed(range(L)):
        spec = config.layers[i]
        lt = trace.layers[i]
        d_fm_s, d_ker, d_bias = deconv2d_backward(
            g,
            lt.fm_s,
            params.kernels[i],
            spec.stride,
            spec.pad,
            need_params=need_params,
        )
        ker_grads[i], bias_grads[i] = d_ker, d_bias
        g = d_fm_s * lt.mask_r * lt.mask_t
    lead = trace.Z.shape[:-1]
    dZ, dW, db = affine_backward(g.reshape(lead + (-1,)), trace.Z, params.W_fc)
    if not need_params:
        return GeneratorGrads(dZ=dZ)
    grads = GeneratorParams(W_fc=dW, b_fc=db, kernels=ker_grads, biases=bias_grads)
    return GeneratorGrads(dZ=dZ, params=grads)


def _residual_grad(trace: ForwardTrace, Y: Tensor, sigma: float) -> Tensor:
    Y = as_tensor(Y)
    if Y.shape != trace.Y.shape:
        raise DimensionError(
            f"image shape {Y.shape} does not match generator output {trace.Y.shape}",
            axis="Y",
        )
    return (Y - trace.Y) / (sigma * sigma) * (1.0 - trace.Y * trace.Y)


def grad_z_log_joint(
    params: GeneratorParams, Z: Tensor, Y: Tensor, config: GeneratorConfig
) -> Tensor:
    """∂/∂Z log_joint with masks frozen at the forward pass."""
    _, trace = forward(params, Z, config, record=True)
    residual = _residual_grad(trace, Y, config.sigma)
    grads = backward(params, trace, residual, need_params=False)
    return grads.dZ - trace.Z


def grad_theta_from_trace(
    params: GeneratorParams, trace: ForwardTrace, Y_target: Tensor, sigma: float
) -> GeneratorParams:
    return backward(params, trace, _residual_grad(trace, Y_target, sigma)).params


def grad_theta(
    params: GeneratorParams, Z: Tensor, Y_target: Tensor, config: GeneratorConfig
) -> GeneratorParams:
    """(1/σ²)(Y_target − g(Z))·∂g/∂θ, summed over rows of a batched Z."""
    _, trace = forward(params, Z, config, record=True)
    return grad_theta_from_trace(params, trace, Y_target, config.sigma)


def kernel_structure(params: GeneratorParams, layer: int) -> float:
    """Mean absolute lag-1 spatial autocorrelation of the kernels of deconv `layer`."""
    ker = params.kernels[layer - 1]
    scores = []
    for c in range(ker.shape[0]):
        k = ker[c] - ker[c].mean()
        energy = float(np.sum(k * k))
        if energy == 0.0:
            continue
        rho_x = float(np.sum(k[:-1] * k[1:])) / energy
        rho_y = float(np.sum(k[:, :-1] * k[:, 1:])) / energy
        scores.append((abs(rho_x) + abs(rho_y)) / 2.0)
    return float(np.mean(scores)) if scores else 0.0
