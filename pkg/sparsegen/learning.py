"""
Monte-Carlo maximum-likelihood learning of the generator.

Each step infers Z for a minibatch by Langevin dynamics (warm-started from the
latent bank), then moves θ along the mean over the batch of
(1/σ²)(Y − g(Z))·∂g/∂θ.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint, to_stored_precision
from .errors import DatasetError, DivergenceError
from .generator import (
    ForwardTrace,
    GeneratorParams,
    forward,
    grad_theta_from_trace,
    init_params,
)
from .inference import GeneratorPosterior, langevin_infer
from .metrics_sink import EpochMetrics, MetricsSink
from .models import GeneratorConfig, TrainConfig
from .sources.folder import Dataset
from .tensor_ops import Tensor, as_tensor, get_dtype

logger = logging.getLogger(__name__)

# stream labels keep the bank init and fresh draws apart from Langevin noise
_BANK_STREAM = 101
_FRESH_STREAM = 102


class SGD:
    """Plain gradient ascent."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(
        self, params: Dict[str, Tensor], grads: Dict[str, Tensor]
    ) -> Dict[str, Tensor]:
        self.t += 1
        return {name: p + self.lr * grads[name] for name, p in params.items()}

    def state_tensors(self) -> Dict[str, Tensor]:
        return {}

    def load_state(self, tensors: Dict[str, Tensor], t: int) -> None:
        self.t = t


class Adam:
    """Adam in the ascent direction; moments are kept per named tensor."""

    def __init__(
        self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, Tensor] = {}
        self.v: Dict[str, Tensor] = {}
        self.t = 0

    def step(
        self, params: Dict[str, Tensor], grads: Dict[str, Tensor]
    ) -> Dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            updated[name] = p + self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return updated

    def state_tensors(self) -> Dict[str, Tensor]:
        tensors = {f"optim/m/{name}": m for name, m in self.m.items()}
        tensors.update({f"optim/v/{name}": v for name, v in self.v.items()})
        return tensors

    def load_state(self, tensors: Dict[str, Tensor], t: int) -> None:
        self.t = t
        for key, value in tensors.items():
            _, moment, name = key.split("/", 2)
            (self.m if moment == "m" else self.v)[name] = value


def make_optimizer(tcfg: TrainConfig):
    opt = tcfg.optimizer
    if opt.kind == "sgd":
        return SGD(tcfg.learning_rate)
    return Adam(tcfg.learning_rate, opt.beta1, opt.beta2, opt.eps)


@dataclass
class LatentBank:
    """Persistent posterior sample Zᵢ per training example."""

    Z: Tensor

    @classmethod
    def initialize(cls, n: int, d: int, seed: int) -> "LatentBank":
        rng = np.random.default_rng([seed, _BANK_STREAM])
        return cls(Z=rng.standard_normal((n, d), dtype=get_dtype()))

    def __len__(self) -> int:
        return self.Z.shape[0]

    def rows(self, indices: Sequence[int]) -> Tensor:
        return self.Z[np.asarray(indices)].copy()

    def update(self, indices: Sequence[int], Z: Tensor) -> None:
        self.Z[np.asarray(indices)] = Z


def round_to_stored(
    params: GeneratorParams, bank: LatentBank, optimizer
) -> GeneratorParams:
    """
    Round θ, the latent bank and optimizer moments to checkpoint precision.

    The bank and optimizer are updated in place; the rounded θ is returned.
    """
    bank.Z = to_stored_precision(bank.Z)
    moments = {
        name: to_stored_precision(t) for name, t in optimizer.state_tensors().items()
    }
    optimizer.load_state(moments, optimizer.t)
    rounded = {
        name: to_stored_precision(t) for name, t in params.named_tensors().items()
    }
    return GeneratorParams.from_named(rounded)


def effective_config(gcfg: GeneratorConfig, tcfg: TrainConfig) -> GeneratorConfig:
    if tcfg.sigma is None or tcfg.sigma == gcfg.sigma:
        return gcfg
    return gcfg.model_copy(update={"sigma": tcfg.sigma})


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def infer_latents(
    params: GeneratorParams,
    config: GeneratorConfig,
    Y: Tensor,
    indices: Sequence[int],
    bank: LatentBank,
    tcfg: TrainConfig,
    epoch: int = 0,
) -> Tensor:
    """Langevin inference for a batch; results are written back to the bank."""
    indices = [int(i) for i in indices]
    lcfg = tcfg.langevin
    if tcfg.warm_start:
        Z0 = bank.rows(indices)
    else:
        rngs = [
            np.random.default_rng([lcfg.seed, _FRESH_STREAM, epoch, i])
            for i in indices
        ]
        dtype = get_dtype()
        Z0 = np.stack([rng.standard_normal(config.d, dtype=dtype) for rng in rngs])
    try:
        Z = langevin_infer(
            GeneratorPosterior(params, config),
            Y,
            Z0,
            lcfg,
            stream_ids=[(epoch, i) for i in indices],
        )
    except DivergenceError as e:
        if e.example_index is None:
            raise
        raise e.with_example(indices[e.example_index]) from e
    bank.update(indices, Z)
    return Z


def generator_update(
    params: GeneratorParams,
    config: GeneratorConfig,
    Z: Tensor,
    Y_target: Tensor,
    optimizer,
) -> Tuple[GeneratorParams, ForwardTrace]:
    """One ascent step on θ with the batch-mean gradient, plus the pre-update trace."""
    _, trace = forward(params, Z, config, record=True)
    grads = grad_theta_from_trace(params, trace, Y_target, config.sigma)
    n = Z.shape[0]
    mean_grads = {name: g / n for name, g in grads.named_tensors().items()}
    updated = optimizer.step(params.named_tensors(), mean_grads)
    return GeneratorParams.from_named(updated), trace


@dataclass
class MLEStepResult:
    params: GeneratorParams
    Z: Tensor
    residual: Tensor  # ‖Y − g(Z)‖²/D per example, before the update
    z_norm2: Tensor


def mle_step(
    params: GeneratorParams,
    images: Tensor,
    indices: Sequence[int],
    bank: LatentBank,
    tcfg: TrainConfig,
    config: GeneratorConfig,
    optimizer=None,
    epoch: int = 0,
) -> MLEStepResult:
    """
    Infer Z for a batch, update the bank and take one optimizer step on θ.

    Args:
        params: current θ
        images: batch of targets (B, w, h, c)
        indices: dataset indices of the batch (bank rows)
        bank: latent bank, updated in place
        tcfg: training config (Langevin, warm start, optimizer)
        config: generator architecture
        optimizer: optimizer carrying state across steps; a fresh one from tcfg if None
        epoch: epoch number, used to label noise streams

    Returns:
        MLEStepResult with updated params and per-example statistics
    """
    if len(indices) != images.shape[0]:
        raise DatasetError(
            f"{len(indices)} indices for a batch of {images.shape[0]} images"
        )
    if optimizer is None:
        optimizer = make_optimizer(tcfg)
    Y = as_tensor(images)
    Z = infer_latents(params, config, Y, indices, bank, tcfg, epoch)
    new_params, trace = generator_update(params, config, Z, Y, optimizer)
    residual = np.sum((Y - trace.Y) ** 2, axis=(1, 2, 3)) / config.D
    return MLEStepResult(
        params=new_params, Z=Z, residual=residual, z_norm2=np.sum(Z * Z, axis=1)
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: List[EpochMetrics] = field(default_factory=list)

    @property
    def params(self) -> GeneratorParams:
        return self.checkpoint.generator_params()


def check_dataset(dataset: Dataset, config: GeneratorConfig) -> Tensor:
    if len(dataset) == 0:
        raise DatasetError("dataset is empty")
    if tuple(dataset.image_shape) != tuple(config.image_shape()):
        raise DatasetError(
            f"dataset images are {dataset.image_shape} "
            f"but the generator produces {config.image_shape()}"
        )
    return as_tensor(dataset.images)


def snapshot_checkpoint(
    params: GeneratorParams,
    bank: LatentBank,
    optimizer,
    gcfg: GeneratorConfig,
    tcfg: TrainConfig,
    epoch: int,
    seed: int,
    epoch_seeds: List[int],
    extra: Optional[Dict[str, Tensor]] = None,
    descriptor_config=None,
) -> Checkpoint:
    tensors = dict(params.named_tensors())
    tensors["bank/Z"] = bank.Z.copy()
    tensors.update(optimizer.state_tensors())
    if extra:
        tensors.update(extra)
    return Checkpoint(
        generator_config=gcfg,
        tensors=tensors,
        train_config=tcfg,
        descriptor_config=descriptor_config,
        epoch=epoch,
        seed=seed,
        epoch_seeds=list(epoch_seeds),
        state={"optimizer_step": optimizer.t},
    )


def train(
    dataset: Dataset,
    gcfg: GeneratorConfig,
    tcfg: TrainConfig,
    seed: int,
    resume: Optional[Checkpoint] = None,
    sink: Optional[MetricsSink] = None,
    failure_checkpoint: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Run tcfg.epochs epochs of shuffled minibatch mle_step.

    With `resume`, θ, the latent bank, optimizer moments and the epoch counter
    are restored and training continues to tcfg.epochs; the trajectory then
    matches an uninterrupted run with the same seed. Both runs round their state
    to checkpoint precision at the end of every epoch (round_to_stored).
    """
    if resume is not None:
        gcfg = resume.generator_config
    config = effective_config(gcfg, tcfg)
    images = check_dataset(dataset, config)
    n = images.shape[0]
    langevin = tcfg.langevin.model_copy(update={"seed": seed})
    tcfg = tcfg.model_copy(update={"langevin": langevin})
    optimizer = make_optimizer(tcfg)

    if resume is None:
        params = init_params(config, seed)
        bank = LatentBank.initialize(n, config.d, seed)
        start, epoch_seeds = 0, []
    else:
        params = resume.generator_params()
        stored_bank = resume.tensors.get("bank/Z")
        if stored_bank is None or stored_bank.shape != (n, config.d):
            raise DatasetError(
                f"checkpoint latent bank does not match a dataset of {n} images"
            )
        bank = LatentBank(Z=stored_bank.copy())
        optimizer_step = int(resume.state.get("optimizer_step", 0))
        optimizer.load_state(resume.group("optim"), optimizer_step)
        start, epoch_seeds = resume.epoch, list(resume.epoch_seeds)
        if resume.seed != seed:
            logger.warning(
                f"⚠️ Resuming a run started with seed {resume.seed} using seed {seed}"
            )
        logger.info(f"🔁 Resuming at epoch {start + 1}/{tcfg.epochs}")

    metrics: List[EpochMetrics] = []
    for epoch in range(start, tcfg.epochs):
        es = epoch_seed(seed, epoch)
        epoch_seeds.append(es)
        order = np.random.default_rng(es).permutation(n)
        t0 = time.perf_counter()
        residual_sum = 0.0
        z_sum = 0.0
        for b in range(0, n, tcfg.batch_size):
            idx = order[b:b + tcfg.batch_size]
            try:
                step = mle_step(
                    params, images[idx], idx, bank, tcfg, config, optimizer, epoch
                )
            except DivergenceError:
                if failure_checkpoint is not None:
                    snapshot = snapshot_checkpoint(
                        params, bank, optimizer, gcfg, tcfg, epoch, seed, epoch_seeds
                    )
                    save_checkpoint(failure_checkpoint, snapshot)
                    logger.error(
                        f"❌ Divergence in epoch {epoch + 1}; "
                        f"state saved to {failure_checkpoint}"
                    )
                raise
            params = step.params
            residual_sum += float(step.residual.sum())
            z_sum += float(step.z_norm2.sum())
        # every epoch ends on values a checkpoint holds exactly
        params = round_to_stored(params, bank, optimizer)

        row = EpochMetrics(
            epoch=epoch + 1,
            mse=residual_sum / n,
            mean_z_norm2=z_sum / n,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )
        logger.info(
            f"📈 epoch {row.epoch}/{tcfg.epochs} mse={row.mse:.5f} "
            f"mean|Z|²={row.mean_z_norm2:.3f} ({row.wall_ms:.0f} ms)"
        )
        if sink is not None:
            sink.append_row(row)
        metrics.append(row)

    checkpoint = snapshot_checkpoint(
        params, bank, optimizer, gcfg, tcfg, tcfg.epochs, seed, epoch_seeds
    )
    return TrainResult(checkpoint=checkpoint, metrics=metrics)


def sample_prior(
    params: GeneratorParams, n: int, seed: int, config: GeneratorConfig
) -> Tensor:
    """
    Draw Z ~ N(0, I) and return g(Z) for each row, shape (n, w, h, c).

    Rows are generated one at a time so that a prefix of the stream gives
    bit-identical images regardless of n.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    Z = np.random.default_rng(seed).standard_normal((n, config.d), dtype=get_dtype())
    return np.stack([forward(params, z, config)[0] for z in Z])
