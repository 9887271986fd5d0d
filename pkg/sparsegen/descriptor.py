"""
Descriptor (energy-based model) P(Y; φ) ∝ exp[f(Y; φ)]·q(Y) with Gaussian
white-noise reference q, and cooperative training with the generator.

The normalizer of the descriptor is never computed: sampling and learning
only use f and its gradients.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DimensionError, SparseGenError, StageError
from .generator import forward, init_params
from .inference import StreamId, langevin_infer
from .learning import (
    LatentBank,
    TrainResult,
    check_dataset,
    effective_config,
    epoch_seed,
    generator_update,
    infer_latents,
    make_optimizer,
    snapshot_checkpoint,
)
from .metrics_sink import EpochMetrics, MetricsSink
from .models import (
    ConvSpec,
    DescriptorConfig,
    GeneratorConfig,
    LangevinConfig,
    TrainConfig,
)
from .sources.folder import Dataset
from .tensor_ops import (
    Tensor,
    as_tensor,
    conv2d,
    conv2d_backward,
    conv_output_size,
    get_dtype,
    relu,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02
_DESCRIPTOR_STREAM = 201


class EnergyModel(Protocol):
    """f(Y) with its image and parameter gradients, row-wise over a batch."""

    def score(self, Y: Tensor) -> Tensor: ...

    def grad_y(self, Y: Tensor) -> Tensor: ...

    def grad_phi(self, Y: Tensor) -> Dict[str, Tensor]: ...

    def parameters(self) -> Dict[str, Tensor]: ...

    def replace(self, tensors: Dict[str, Tensor]) -> "EnergyModel": ...


@dataclass
class DescriptorParams:
    """φ: strided conv layers with ReLU and an affine head to a scalar."""

    specs: List[ConvSpec]
    kernels: List[Tensor]
    biases: List[Tensor]
    head_W: Tensor
    head_b: Tensor

    def named_tensors(self, prefix: str = "phi") -> Dict[str, Tensor]:
        tensors = {}
        for i, (ker, bias) in enumerate(zip(self.kernels, self.biases), start=1):
            tensors[f"{prefix}/conv{i}/ker"] = ker
            tensors[f"{prefix}/conv{i}/bias"] = bias
        tensors[f"{prefix}/head/W"] = self.head_W
        tensors[f"{prefix}/head/b"] = self.head_b
        return tensors

    @classmethod
    def from_named(
        cls, tensors: Dict[str, Tensor], dcfg: DescriptorConfig, prefix: str = "phi"
    ) -> "DescriptorParams":
        n = len(dcfg.convs)
        return cls(
            specs=list(dcfg.convs),
            kernels=[tensors[f"{prefix}/conv{i}/ker"] for i in range(1, n + 1)],
            biases=[tensors[f"{prefix}/conv{i}/bias"] for i in range(1, n + 1)],
            head_W=tensors[f"{prefix}/head/W"],
            head_b=tensors[f"{prefix}/head/b"],
        )


def descriptor_feature_shapes(
    dcfg: DescriptorConfig, image_shape: Tuple[int, int, int]
) -> List[Tuple[int, int, int]]:
    shapes = [tuple(image_shape)]
    w, h, _ = image_shape
    for n, spec in enumerate(dcfg.convs, start=1):
        w = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        h = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        if w < 1 or h < 1:
            raise ConfigurationError(
                f"descriptor conv layer {n} output extent {w}x{h} is not positive"
            )
        shapes.append((w, h, spec.out_channels))
    return shapes


def init_descriptor(
    dcfg: DescriptorConfig, image_shape: Tuple[int, int, int], seed: int
) -> DescriptorParams:
    """Weights i.i.d. N(0, 0.02²), biases zero."""
    shapes = descriptor_feature_shapes(dcfg, image_shape)
    rng = np.random.default_rng([seed, _DESCRIPTOR_STREAM])
    dtype = get_dtype()
    kernels = [
        rng.normal(
            0.0,
            INIT_STD,
            size=(shapes[i][2], spec.kernel, spec.kernel, spec.out_channels),
        ).astype(dtype)
        for i, spec in enumerate(dcfg.convs)
    ]
    w, h, c = shapes[-1]
    return DescriptorParams(
        specs=list(dcfg.convs),
        kernels=kernels,
        biases=[np.zeros(spec.out_channels, dtype=dtype) for spec in dcfg.convs],
        head_W=rng.normal(0.0, INIT_STD, size=w * h * c).astype(dtype),
        head_b=np.zeros(1, dtype=dtype),
    )


class ConvEnergy:
    """The bottom-up ConvNet f(Y; φ)."""

    def __init__(self, phi: DescriptorParams):
        self.phi = phi

    def _forward(self, Y: Tensor):
        Y = as_tensor(Y)
        if Y.ndim < 3:
            raise DimensionError(
                f"descriptor input must be (..., w, h, c), got {Y.shape}", axis="Y"
            )
        lead = Y.shape[:-3]
        inputs, masks = [], []
        x = Y
        for spec, ker, bias in zip(self.phi.specs, self.phi.kernels, self.phi.biases):
            inputs.append(x)
            r = relu(conv2d(x, ker, bias, spec.stride, spec.pad))
            masks.append(r.mask)
            x = r.values
        flat = x.reshape(lead + (-1,))
        if flat.shape[-1] != self.phi.head_W.shape[0]:
            raise DimensionError(
                f"descriptor features have length {flat.shape[-1]}, "
                f"head expects {self.phi.head_W.shape[0]}",
                axis="Y",
            )
        f = flat @ self.phi.head_W + self.phi.head_b[0]
        return f, (inputs, masks, flat, x.shape)

    def _backward(self, cache, g: Tensor, need_params: bool):
        inputs, masks, flat, top_shape = cache
        F = self.phi.head_W.shape[0]
        grads: Dict[str, Tensor] = {}
        if need_params:
            grads["phi/head/W"] = flat.reshape(-1, F).T @ np.reshape(g, -1)
            grads["phi/head/b"] = np.array([np.sum(g)], dtype=self.phi.head_b.dtype)
        dx = (np.asarray(g)[..., None] * self.phi.head_W).reshape(top_shape)
        for n in reversed(range(len(self.phi.specs))):
            spec = self.phi.specs[n]
            dx, d_ker, d_bias = conv2d_backward(
                dx * masks[n],
                inputs[n],
                self.phi.kernels[n],
                spec.stride,
                spec.pad,
                need_params=need_params,
            )
            if need_params:
                grads[f"phi/conv{n + 1}/ker"] = d_ker
                grads[f"phi/conv{n + 1}/bias"] = d_bias
        return dx, grads

    def score(self, Y: Tensor) -> Tensor:
        return self._forward(Y)[0]

    def grad_y(self, Y: Tensor) -> Tensor:
        f, cache = self._forward(Y)
        return self._backward(cache, np.ones_like(f), need_params=False)[0]

    def grad_phi(self, Y: Tensor) -> Dict[str, Tensor]:
        """Mean over the batch of ∂f/∂φ."""
        f, cache = self._forward(Y)
        g = np.full_like(f, 1.0 / max(1, np.size(f)))
        return self._backward(cache, g, need_params=True)[1]

    def parameters(self) -> Dict[str, Tensor]:
        return self.phi.named_tensors()

    def replace(self, tensors: Dict[str, Tensor]) -> "ConvEnergy":
        specs = self.phi.specs
        n = len(specs)
        return ConvEnergy(
            DescriptorParams(
                specs=specs,
                kernels=[tensors[f"phi/conv{i}/ker"] for i in range(1, n + 1)],
                biases=[tensors[f"phi/conv{i}/bias"] for i in range(1, n + 1)],
                head_W=tensors["phi/head/W"],
                head_b=tensors["phi/head/b"],
            )
        )


def _image_sums(Y: Tensor, power: int = 1) -> Tensor:
    return np.sum(Y ** power, axis=(-3, -2, -1))


class QuadraticEnergy:
    """f(Y) = −‖Y − μ‖²/2."""

    def __init__(self, mu: Tensor):
        self.mu = as_tensor(mu)

    def score(self, Y: Tensor) -> Tensor:
        return -_image_sums(as_tensor(Y) - self.mu, 2) / 2

    def grad_y(self, Y: Tensor) -> Tensor:
        return self.mu - as_tensor(Y)

    def grad_phi(self, Y: Tensor) -> Dict[str, Tensor]:
        diff = as_tensor(Y) - self.mu
        return {"mu": diff.reshape((-1,) + self.mu.shape).mean(axis=0)}

    def parameters(self) -> Dict[str, Tensor]:
        return {"mu": self.mu}

    def replace(self, tensors: Dict[str, Tensor]) -> "QuadraticEnergy":
        return QuadraticEnergy(tensors["mu"])


class LinearSumEnergy:
    """f(Y) = w·ΣY."""

    def __init__(self, w: float):
        self.w = as_tensor(w)

    def score(self, Y: Tensor) -> Tensor:
        return self.w * _image_sums(as_tensor(Y))

    def grad_y(self, Y: Tensor) -> Tensor:
        return np.full_like(as_tensor(Y), self.w)

    def grad_phi(self, Y: Tensor) -> Dict[str, Tensor]:
        return {"w": np.mean(_image_sums(as_tensor(Y)))}

    def parameters(self) -> Dict[str, Tensor]:
        return {"w": self.w}

    def replace(self, tensors: Dict[str, Tensor]) -> "LinearSumEnergy":
        return LinearSumEnergy(tensors["w"])


class PixelQuadraticEnergy:
    """f(Y) = a·ΣY + b·ΣY², a Gaussian tilt with two parameters."""

    def __init__(self, a: float, b: float):
        self.a = as_tensor(a)
        self.b = as_tensor(b)

    def score(self, Y: Tensor) -> Tensor:
        Y = as_tensor(Y)
        return self.a * _image_sums(Y) + self.b * _image_sums(Y, 2)

    def grad_y(self, Y: Tensor) -> Tensor:
        return self.a + 2 * self.b * as_tensor(Y)

    def grad_phi(self, Y: Tensor) -> Dict[str, Tensor]:
        Y = as_tensor(Y)
        return {"a": np.mean(_image_sums(Y)), "b": np.mean(_image_sums(Y, 2))}

    def parameters(self) -> Dict[str, Tensor]:
        return {"a": self.a, "b": self.b}

    def replace(self, tensors: Dict[str, Tensor]) -> "PixelQuadraticEnergy":
        return PixelQuadraticEnergy(tensors["a"], tensors["b"])

    def model_mean(self, sigma_q: float) -> float:
        """Mean of exp(f)·q per pixel; requires 1/σ_q² − 2b > 0."""
        precision = 1.0 / sigma_q ** 2 - 2.0 * float(self.b)
        if precision <= 0:
            raise ValueError("the tilted density is not normalizable")
        return float(self.a) / precision

    def model_std(self, sigma_q: float) -> float:
        return float(np.sqrt(1.0 / (1.0 / sigma_q ** 2 - 2.0 * float(self.b))))


EnergyLike = Union[DescriptorParams, EnergyModel]


def as_energy(phi: EnergyLike) -> EnergyModel:
    return ConvEnergy(phi) if isinstance(phi, DescriptorParams) else phi


def energy_score(phi: EnergyLike, Y: Tensor):
    """f(Y; φ); one value per image for a batch."""
    f = as_energy(phi).score(Y)
    return float(f) if np.ndim(f) == 0 else f


def energy_grad_y(phi: EnergyLike, Y: Tensor) -> Tensor:
    return as_energy(phi).grad_y(Y)


def energy_grad_phi(phi: EnergyLike, Y: Tensor) -> Dict[str, Tensor]:
    return as_energy(phi).grad_phi(Y)


class _ImageTarget:
    """log[exp(f)·q] over flattened images, shaped for the latent Langevin sampler."""

    def __init__(
        self, energy: EnergyModel, sigma_q: float, image_shape: Tuple[int, ...]
    ):
        self.energy = energy
        self.sigma_q = sigma_q
        self.image_shape = image_shape

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.image_shape))

    def grad_z(self, Z: Tensor, _Y) -> Tensor:
        Y = Z.reshape((-1,) + self.image_shape)
        g = self.energy.grad_y(Y) - Y / self.sigma_q ** 2
        return g.reshape(Z.shape)


def langevin_sample_images(
    phi: EnergyLike,
    Y_init: Tensor,
    dcfg: DescriptorConfig,
    seed: int,
    stream_ids: Optional[Sequence[StreamId]] = None,
) -> Tensor:
    """
    Y ← Y + (δ²/2)(∂f/∂Y − Y/σ_q²) + δ·ε for dcfg.steps steps.

    Every image draws its own noise.

    Y_init is one image (w, h, c) or a batch (n, w, h, c).
    """
    Y0 = as_tensor(Y_init)
    single = Y0.ndim == 3
    batch = Y0[None] if single else Y0
    shape = batch.shape[1:]
    lcfg = LangevinConfig(
        delta=dcfg.delta,
        steps=dcfg.steps,
        noise_enabled=dcfg.noise_enabled,
        seed=seed,
        divergence_bound=dcfg.divergence_bound,
        halve_on_divergence=dcfg.halve_on_divergence,
    )
    target = _ImageTarget(as_energy(phi), dcfg.sigma_q, shape)
    start = batch.reshape(batch.shape[0], -1)
    flat = langevin_infer(target, None, start, lcfg, stream_ids=stream_ids)
    out = flat.reshape(batch.shape)
    return out[0] if single else out


def descriptor_step(
    phi: EnergyLike, Y_data: Tensor, Y_synth: Tensor, lr: float
) -> EnergyLike:
    """φ ← φ + lr·(mean over data of ∂f/∂φ − mean over synthesized of ∂f/∂φ)."""
    if np.shape(Y_data) != np.shape(Y_synth):
        raise DimensionError(
            f"data batch {np.shape(Y_data)} and synthesized batch "
            f"{np.shape(Y_synth)} differ",
            axis="batch",
        )
    energy = as_energy(phi)
    g_data = energy.grad_phi(Y_data)
    g_synth = energy.grad_phi(Y_synth)
    updated = energy.replace(
        {
            name: p + lr * (g_data[name] - g_synth[name])
            for name, p in energy.parameters().items()
        }
    )
    return updated.phi if isinstance(phi, DescriptorParams) else updated


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except (SparseGenError, ValueError, ArithmeticError) as e:
        raise StageError(name, e) from e


def coop_train(
    dataset: Dataset,
    gcfg: GeneratorConfig,
    tcfg: TrainConfig,
    dcfg: DescriptorConfig,
    seed: int,
    sink: Optional[MetricsSink] = None,
    phi_init: Optional[DescriptorParams] = None,
) -> TrainResult:
    """
    Cooperative training. Per batch: infer Z against the true images, generate
    Ŷ = g(Z), revise Ŷ into Ỹ by descriptor Langevin, update φ on (Y, Ỹ), then
    update θ with Ỹ as the target.
    """
    config = effective_config(gcfg, tcfg)
    images = check_dataset(dataset, config)
    n = images.shape[0]
    langevin = tcfg.langevin.model_copy(update={"seed": seed})
    tcfg = tcfg.model_copy(update={"langevin": langevin})
    optimizer = make_optimizer(tcfg)
    params = init_params(config, seed)
    if phi_init is not None:
        phi = phi_init
    else:
        phi = init_descriptor(dcfg, config.image_shape(), seed)
    bank = LatentBank.initialize(n, config.d, seed)
    epoch_seeds: List[int] = []

    metrics: List[EpochMetrics] = []
    for epoch in range(tcfg.epochs):
        es = epoch_seed(seed, epoch)
        epoch_seeds.append(es)
        order = np.random.default_rng(es).permutation(n)
        t0 = time.perf_counter()
        sums = np.zeros(4)
        for b in range(0, n, tcfg.batch_size):
            idx = order[b:b + tcfg.batch_size]
            Y = images[idx]
            with _stage("infer"):
                Z = infer_latents(params, config, Y, idx, bank, tcfg, epoch)
            with _stage("generate"):
                Y_hat, _ = forward(params, Z, config)
            with _stage("sample"):
                streams = [(_DESCRIPTOR_STREAM, epoch, int(i)) for i in idx]
                Y_syn = langevin_sample_images(
                    phi, Y_hat, dcfg, seed, stream_ids=streams
                )
            with _stage("descriptor"):
                f_data = energy_score(phi, Y)
                f_syn = energy_score(phi, Y_syn)
                phi = descriptor_step(phi, Y, Y_syn, dcfg.learning_rate)
            with _stage("generator"):
                params, _ = generator_update(params, config, Z, Y_syn, optimizer)
            sums += [
                float(np.sum((Y - Y_hat) ** 2)) / config.D,
                float(np.sum(Z * Z)),
                float(np.sum(f_data)),
                float(np.sum(f_syn)),
            ]

        row = EpochMetrics(
            epoch=epoch + 1,
            mse=sums[0] / n,
            mean_z_norm2=sums[1] / n,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
            mean_f_data=sums[2] / n,
            mean_f_synth=sums[3] / n,
        )
        logger.info(
            f"🤝 epoch {row.epoch}/{tcfg.epochs} mse={row.mse:.5f} "
            f"f(data)={row.mean_f_data:.4f} f(synth)={row.mean_f_synth:.4f} "
            f"({row.wall_ms:.0f} ms)"
        )
        if sink is not None:
            sink.append_row(row)
        metrics.append(row)

    checkpoint = snapshot_checkpoint(
        params, bank, optimizer, gcfg, tcfg, tcfg.epochs, seed, epoch_seeds,
        extra=phi.named_tensors(), descriptor_config=dcfg,
    )
    return TrainResult(checkpoint=checkpoint, metrics=metrics)
