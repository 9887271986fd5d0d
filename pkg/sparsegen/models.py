# sparsegen/models.py
from typing import ClassVar, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigurationError

Shape3 = Tuple[int, int, int]


class DeconvSpec(BaseModel):
    kernel: int = Field(..., ge=1)
    stride: int = Field(..., ge=1)
    pad: int = Field(0, ge=0)
    out_channels: int = Field(..., ge=1)


def _default_layers() -> List[DeconvSpec]:
    return [
        DeconvSpec(kernel=6, stride=2, pad=2, out_channels=128),
        DeconvSpec(kernel=6, stride=4, pad=1, out_channels=3),
    ]


class GeneratorConfig(BaseModel):
    """
    Architecture of the top-down generator.

    fm¹ is the reshaped FC output; every feature map fm¹..fm^L goes through
    Top-K then ReLU before the next transposed convolution. The last layer
    produces the pre-tanh image.
    """

    MAX_LAYERS: ClassVar[int] = 4

    d: int = Field(20, ge=1, description="Latent dimension")
    fc_shape: Shape3 = (2, 2, 64)
    layers: List[DeconvSpec] = Field(default_factory=_default_layers)
    t_k: List[int] = Field(
        default_factory=lambda: [4, 32], description="Top-K count per feature map"
    )
    sigma: float = Field(
        0.3, gt=0.0, allow_inf_nan=False, description="Observation noise std"
    )
    sparse: bool = Field(True, description="False skips Top-K (dense baseline)")

    @field_validator("fc_shape")
    @classmethod
    def _positive_fc_shape(cls, v: Shape3) -> Shape3:
        if any(n < 1 for n in v):
            raise ConfigurationError(f"fc_shape extents must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "GeneratorConfig":
        self.feature_shapes()
        return self

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def feature_shapes(self) -> List[Shape3]:
        """Shapes of fm¹..fm^L followed by the image shape."""
        if not 1 <= len(self.layers) <= self.MAX_LAYERS:
            raise ConfigurationError(
                f"between 1 and {self.MAX_LAYERS} deconv layers supported, "
                f"got {len(self.layers)}"
            )
        if len(self.t_k) != len(self.layers):
            raise ConfigurationError(
                f"t_k needs one entry per feature map ({len(self.layers)}), "
                f"got {len(self.t_k)}"
            )
        if any(k < 1 for k in self.t_k):
            raise ConfigurationError(f"every Top-K count must be >= 1, got {self.t_k}")

        shapes: List[Shape3] = [tuple(self.fc_shape)]
        w, h, _ = self.fc_shape
        for n, spec in enumerate(self.layers, start=1):
            w = (w - 1) * spec.stride + spec.kernel - 2 * spec.pad
            h = (h - 1) * spec.stride + spec.kernel - 2 * spec.pad
            if w < 1 or h < 1:
                raise ConfigurationError(
                    f"deconv layer {n} output extent {w}x{h} is not positive"
                )
            shapes.append((w, h, spec.out_channels))
        return shapes

    def image_shape(self) -> Shape3:
        return self.feature_shapes()[-1]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def D(self) -> int:
        w, h, c = self.image_shape()
        return w * h * c

    def layer_channels(self, layer: int) -> Tuple[int, int]:
        """(c_in, c_out) of deconv layer `layer` (0-based)."""
        shapes = self.feature_shapes()
        return shapes[layer][2], shapes[layer + 1][2]


class LangevinConfig(BaseModel):
    delta: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    steps: int = Field(20, ge=0)
    noise_enabled: bool = True
    seed: int = 0
    divergence_bound: float = Field(1e3, gt=0.0)
    halve_on_divergence: bool = True


class OptimizerConfig(BaseModel):
    kind: Literal["sgd", "adam"] = "adam"
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class TrainConfig(BaseModel):
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(20, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0, allow_inf_nan=False)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    langevin: LangevinConfig = Field(default_factory=LangevinConfig)
    warm_start: bool = True
    sigma: Optional[float] = Field(
        None, gt=0.0, description="Overrides the generator's sigma when set"
    )


class ConvSpec(BaseModel):
    kernel: int = Field(4, ge=1)
    stride: int = Field(2, ge=1)
    pad: int = Field(1, ge=0)
    out_channels: int = Field(..., ge=1)


def _default_convs() -> List[ConvSpec]:
    return [ConvSpec(out_channels=32), ConvSpec(out_channels=64)]


class DescriptorConfig(BaseModel):
    convs: List[ConvSpec] = Field(default_factory=_default_convs)
    sigma_q: float = Field(
        1.0, gt=0.0, allow_inf_nan=False, description="Reference white-noise std"
    )
    delta: float = Field(0.02, gt=0.0, allow_inf_nan=False)
    steps: int = Field(10, ge=0)
    learning_rate: float = Field(0.01, ge=0.0, allow_inf_nan=False)
    noise_enabled: bool = True
    divergence_bound: float = Field(1e3, gt=0.0)
    halve_on_divergence: bool = True


class RunConfig(BaseModel):
    """Flat mirror of every config type, as read from a config file."""

    model_config = ConfigDict(extra="forbid")

    # generator
    d: int = 20
    fc_shape: Shape3 = (2, 2, 64)
    layers: List[DeconvSpec] = Field(default_factory=_default_layers)
    t_k: List[int] = Field(default_factory=lambda: [4, 32])
    sigma: float = 0.3
    sparse: bool = True

    # training
    epochs: int = 100
    batch_size: int = 20
    learning_rate: float = 1e-3
    optimizer: Literal["sgd", "adam"] = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warm_start: bool = True

    # latent Langevin
    langevin_delta: float = 0.1
    langevin_steps: int = 20
    langevin_noise: bool = True
    halve_on_divergence: bool = True

    # descriptor
    descriptor_convs: List[ConvSpec] = Field(default_factory=_default_convs)
    descriptor_sigma_q: float = 1.0
    descriptor_delta: float = 0.02
    descriptor_steps: int = 10
    descriptor_learning_rate: float = 0.01

    # data
    image_size: int = 16
    limit: Optional[int] = None
    seed: int = 0

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            d=self.d,
            fc_shape=self.fc_shape,
            layers=self.layers,
            t_k=self.t_k,
            sigma=self.sigma,
            sparse=self.sparse,
        )

    def langevin_config(self) -> LangevinConfig:
        return LangevinConfig(
            delta=self.langevin_delta,
            steps=self.langevin_steps,
            noise_enabled=self.langevin_noise,
            seed=self.seed,
            halve_on_divergence=self.halve_on_divergence,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=OptimizerConfig(
                kind=self.optimizer,
                beta1=self.adam_beta1,
                beta2=self.adam_beta2,
                eps=self.adam_eps,
            ),
            langevin=self.langevin_config(),
            warm_start=self.warm_start,
        )

    def descriptor_config(self) -> DescriptorConfig:
        return DescriptorConfig(
            convs=self.descriptor_convs,
            sigma_q=self.descriptor_sigma_q,
            delta=self.descriptor_delta,
            steps=self.descriptor_steps,
            learning_rate=self.descriptor_learning_rate,
            halve_on_divergence=self.halve_on_divergence,
        )


# Parse graphs


class OrNode(BaseModel):
    """A surviving channel at a location; `j` is its rank in the layer."""

    channel: int = Field(..., ge=0)
    coeff: float = Field(..., gt=0.0)
    j: int = Field(0, ge=0, exclude=True)


class AndNode(BaseModel):
    x: int = Field(..., ge=0)
    y: int = Field(..., ge=0)
    or_nodes: List[OrNode] = Field(..., min_length=1)
    layer: int = Field(1, ge=1, exclude=True)


class LayerGraph(BaseModel):
    layer: int = Field(..., ge=1)
    k_total: int = Field(..., ge=0)
    and_nodes: List[AndNode] = []

    @model_validator(mode="after")
    def _accounting(self) -> "LayerGraph":
        counted = sum(len(node.or_nodes) for node in self.and_nodes)
        if counted != self.k_total:
            raise ValueError(
                f"layer {self.layer}: k_total {self.k_total} != {counted} OR nodes"
            )
        return self


class ParseGraph(BaseModel):
    layers: List[LayerGraph] = []

    def layer(self, i: int) -> LayerGraph:
        for graph in self.layers:
            if graph.layer == i:
                return graph
        raise KeyError(f"no layer {i} in parse graph")
