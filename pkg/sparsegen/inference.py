"""
Langevin posterior inference over the latent Z, plus the closed-form and
quadrature oracles the sampler is validated against.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, DivergenceError
from .generator import GeneratorParams, grad_z_log_joint, log_joint
from .models import GeneratorConfig, LangevinConfig
from .tensor_ops import Tensor, as_tensor, check_finite, get_dtype

logger = logging.getLogger(__name__)

StreamId = Tuple[int, ...]


class LatentModel(Protocol):
    """Anything with a row-wise log-joint over (Z, Y) and its Z-gradient."""

    @property
    def latent_dim(self) -> int: ...

    def log_joint(self, Z: Tensor, Y: Tensor) -> Tensor: ...

    def grad_z(self, Z: Tensor, Y: Tensor) -> Tensor: ...


class GeneratorPosterior:
    def __init__(self, params: GeneratorParams, config: GeneratorConfig):
        self.params = params
        self.config = config

    @property
    def latent_dim(self) -> int:
        return self.config.d

    def log_joint(self, Z: Tensor, Y: Tensor) -> Tensor:
        return log_joint(self.params, Z, Y, self.config)

    def grad_z(self, Z: Tensor, Y: Tensor) -> Tensor:
        return grad_z_log_joint(self.params, Z, Y, self.config)


class LinearGaussianModel:
    """g(Z) = A Z with Gaussian noise; the posterior is Gaussian in closed form."""

    def __init__(self, A: Tensor, sigma: float):
        self.A = as_tensor(A)
        if self.A.ndim != 2:
            raise DimensionError(
                f"A must be a matrix, got shape {self.A.shape}", axis="A"
            )
        self.sigma = float(sigma)

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    def log_joint(self, Z: Tensor, Y: Tensor) -> Tensor:
        r = Y - Z @ self.A.T
        fit = -np.sum(r * r, axis=-1) / (2 * self.sigma ** 2)
        return fit - np.sum(Z * Z, axis=-1) / 2

    def grad_z(self, Z: Tensor, Y: Tensor) -> Tensor:
        return (Y - Z @ self.A.T) @ self.A / self.sigma ** 2 - Z

    def posterior_cov(self) -> Tensor:
        d = self.latent_dim
        return np.linalg.inv(self.A.T @ self.A / self.sigma ** 2 + np.eye(d))

    def posterior_mean(self, Y: Tensor) -> Tensor:
        """Also the posterior mode: the ridge solution (AᵀA/σ² + I)⁻¹AᵀY/σ²."""
        return self.posterior_cov() @ (self.A.T @ as_tensor(Y)) / self.sigma ** 2


class ScalarTanhModel:
    """One-parameter toy: d = 1, D = 1, g(z) = tanh(θ z)."""

    def __init__(self, theta: float, sigma: float):
        self.theta = float(theta)
        self.sigma = float(sigma)

    @property
    def latent_dim(self) -> int:
        return 1

    def g(self, z: Tensor) -> Tensor:
        return np.tanh(self.theta * z)

    def log_joint(self, Z: Tensor, Y: Tensor) -> Tensor:
        r = Y - self.g(Z)
        return (-(r * r) / (2 * self.sigma ** 2) - Z * Z / 2)[..., 0]

    def grad_z(self, Z: Tensor, Y: Tensor) -> Tensor:
        out = self.g(Z)
        return (Y - out) / self.sigma ** 2 * (1 - out * out) * self.theta - Z

    def grad_theta(self, Z: Tensor, Y: Tensor) -> Tensor:
        out = self.g(Z)
        return ((Y - out) / self.sigma ** 2 * (1 - out * out) * Z)[..., 0]


def _as_model(model, config: Optional[GeneratorConfig]):
    if isinstance(model, GeneratorParams):
        if config is None:
            raise ValueError(
                "a GeneratorConfig is required when passing GeneratorParams"
            )
        return GeneratorPosterior(model, config)
    return model


def iter_langevin(
    model: LatentModel,
    Y: Tensor,
    Z_init: Tensor,
    lcfg: LangevinConfig,
    stream_ids: Optional[Sequence[StreamId]] = None,
    steps: Optional[int] = None,
) -> Iterator[Tensor]:
    """
    Yield the batch of chains after every Langevin step.

    Z_init is (n, d); row r draws its noise from default_rng([seed, *stream_ids[r]]),
    so a chain's trajectory does not depend on which other chains share the batch.
    """
    Z = np.array(Z_init, dtype=get_dtype())
    n, d = Z.shape
    if stream_ids is None:
        stream_ids = [(r,) for r in range(n)]
    if len(stream_ids) != n:
        raise DimensionError(
            f"{len(stream_ids)} stream ids for {n} chains", axis="batch"
        )
    rngs = [np.random.default_rng([lcfg.seed, *sid]) for sid in stream_ids]
    delta = np.full(n, lcfg.delta, dtype=Z.dtype)
    halved = np.zeros(n, dtype=bool)
    total = lcfg.steps if steps is None else steps

    for step in range(total):
        grad = model.grad_z(Z, Y)
        proposal = Z + (delta * delta / 2)[:, None] * grad
        if lcfg.noise_enabled:
            eps = np.stack([rng.standard_normal(d, dtype=Z.dtype) for rng in rngs])
            proposal = proposal + delta[:, None] * eps
        norms = np.linalg.norm(proposal, axis=1)
        bad = ~np.isfinite(norms) | (norms > lcfg.divergence_bound)
        for r in np.flatnonzero(bad):
            if lcfg.halve_on_divergence and not halved[r]:
                halved[r] = True
                delta[r] = delta[r] / 2
                proposal[r] = Z[r]
                logger.warning(
                    f"⚠️ chain {r} left the norm bound at step {step}; "
                    f"halving its step size to {delta[r]:.4g}"
                )
            else:
                raise DivergenceError(step, float(norms[r]), example_index=int(r))
        Z = proposal
        yield Z


def langevin_infer(
    model: Union[LatentModel, GeneratorParams],
    Y: Tensor,
    Z_init: Tensor,
    lcfg: LangevinConfig,
    config: Optional[GeneratorConfig] = None,
    stream_ids: Optional[Sequence[StreamId]] = None,
) -> Tensor:
    """
    Run Z ← Z + (δ²/2)·∂log P/∂Z + δ·ε for lcfg.steps steps.

    Args:
        model: a LatentModel, or GeneratorParams together with `config`
        Y: target image (or batch of targets matching Z_init rows)
        Z_init: starting latent, (d,) or (n, d)
        lcfg: step size, step count, noise switch and seed
        config: generator architecture when model is GeneratorParams
        stream_ids: per-chain noise stream labels

    Returns:
        Z after the last step, same shape as Z_init

    Raises:
        DivergenceError: a chain exceeded the norm bound and could not be rescued
    """
    model = _as_model(model, config)
    Z0 = check_finite(as_tensor(Z_init), "Z_init")
    single = Z0.ndim == 1
    Zb = Z0[None] if single else Z0
    Y = None if Y is None else as_tensor(Y)
    Yb = Y[None] if single and Y is not None else Y
    Z = Zb.copy()
    try:
        for Z in iter_langevin(model, Yb, Zb, lcfg, stream_ids):
            pass
    except DivergenceError as e:
        if single:
            raise DivergenceError(e.step, e.norm) from None
        raise
    return Z[0] if single else Z


@dataclass
class MomentCheckReport:
    mean: Tensor
    cov: Tensor
    standard_error: Tensor
    expected_mean: Tensor
    expected_cov: Tensor
    n_samples: int
    mean_tolerance_se: float = 4.0
    var_tolerance: float = 0.25

    @property
    def mean_z_scores(self) -> Tensor:
        return np.abs(self.mean - self.expected_mean) / self.standard_error

    @property
    def var_rel_errors(self) -> Tensor:
        expected = np.diag(self.expected_cov)
        return np.abs(np.diag(self.cov) - expected) / expected

    @property
    def passed(self) -> bool:
        means_ok = np.all(self.mean_z_scores <= self.mean_tolerance_se)
        return bool(means_ok and np.all(self.var_rel_errors <= self.var_tolerance))


def posterior_moment_check(
    model: LinearGaussianModel,
    Y: Tensor,
    lcfg: LangevinConfig,
    burn_in: int,
    n_samples: int,
    n_chains: int = 16,
) -> MomentCheckReport:
    """
    Compare the stationary moments of noisy Langevin chains with the Gaussian posterior.

    n_samples post-burn-in draws are split across n_chains independent chains;
    the standard error of the mean uses the spread of per-chain means.
    """
    Y = as_tensor(Y)
    d = model.latent_dim
    per_chain = max(1, math.ceil(n_samples / n_chains))
    Yb = np.broadcast_to(Y, (n_chains,) + Y.shape)
    samples = np.empty((per_chain, n_chains, d), dtype=get_dtype())
    kept = 0
    Z0 = np.zeros((n_chains, d))
    chain = iter_langevin(model, Yb, Z0, lcfg, steps=burn_in + per_chain)
    for step, Z in enumerate(chain):
        if step >= burn_in:
            samples[kept] = Z
            kept += 1

    chain_means = samples.mean(axis=0)
    flat = samples.reshape(-1, d)
    return MomentCheckReport(
        mean=chain_means.mean(axis=0),
        cov=np.atleast_2d(np.cov(flat, rowvar=False)),
        standard_error=chain_means.std(axis=0, ddof=1) / math.sqrt(n_chains),
        expected_mean=model.posterior_mean(Y),
        expected_cov=model.posterior_cov(),
        n_samples=flat.shape[0],
    )


@dataclass
class ScoreCheckReport:
    quadrature: float
    estimate: float
    standard_error: float
    tolerance_se: float = 3.0

    @property
    def passed(self) -> bool:
        gap = abs(self.estimate - self.quadrature)
        return gap <= self.tolerance_se * self.standard_error


def quadrature_score(model: ScalarTanhModel, y: float, n_nodes: int = 21) -> float:
    """∂/∂θ log P(y; θ) by Gauss-Hermite quadrature over z ~ N(0, 1)."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    out = model.g(nodes)
    lik = weights * np.exp(-((y - out) ** 2) / (2 * model.sigma ** 2))
    dlog = (y - out) / model.sigma ** 2 * (1 - out * out) * nodes
    return float(np.sum(lik * dlog) / np.sum(lik))


def likelihood_gradient_check(
    model: ScalarTanhModel,
    y: float,
    lcfg: LangevinConfig,
    n_chains: int = 2000,
    n_nodes: int = 21,
) -> ScoreCheckReport:
    """
    Monte-Carlo estimate of the likelihood gradient, averaging ∂/∂θ log P(y, z)
    over posterior draws from independent Langevin chains, against quadrature.
    """
    Y = np.full((n_chains, 1), y, dtype=get_dtype())
    Z = langevin_infer(model, Y, np.zeros((n_chains, 1)), lcfg)
    terms = model.grad_theta(Z, Y)
    return ScoreCheckReport(
        quadrature=quadrature_score(model, y, n_nodes),
        estimate=float(terms.mean()),
        standard_error=float(terms.std(ddof=1) / math.sqrt(n_chains)),
    )
