"""
sparsegen - a sparse-activation generator network.

A top-down ConvNet whose feature maps keep only their K strongest activations,
trained by Langevin posterior inference and maximum likelihood. Freezing the
masks of a forward pass turns each generated image into an exact sparse-coding
decomposition and an AND-OR parse graph.
"""

__version__ = "0.1.0"

# Configuration
from .models import (
    DeconvSpec,
    GeneratorConfig,
    LangevinConfig,
    OptimizerConfig,
    TrainConfig,
    ConvSpec,
    DescriptorConfig,
    RunConfig,
    OrNode,
    AndNode,
    LayerGraph,
    ParseGraph,
)
from .config import load_run_config

# Generator
from .generator import (
    GeneratorParams,
    ForwardTrace,
    init_params,
    forward,
    log_joint,
    grad_z_log_joint,
    grad_theta,
)

# Inference and learning
from .inference import (
    langevin_infer,
    posterior_moment_check,
    likelihood_gradient_check,
)
from .learning import mle_step, train, sample_prior

# Grammar
from .grammar import (
    parse_graph,
    single_activation_map,
    basis_H,
    synthesis_basis_B,
    reconstruct_from_layer,
    ablate,
    export_parse_graph,
    import_parse_graph,
)

# Descriptor
from .descriptor import (
    DescriptorParams,
    energy_score,
    langevin_sample_images,
    descriptor_step,
    coop_train,
)

# IO
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .render import ImageGrid, render_grid
from .sources import Dataset, load_dataset

from .errors import SparseGenError

from . import sources

__all__ = [
    "__version__",

    # Configuration
    "DeconvSpec",
    "GeneratorConfig",
    "LangevinConfig",
    "OptimizerConfig",
    "TrainConfig",
    "ConvSpec",
    "DescriptorConfig",
    "RunConfig",
    "load_run_config",

    # Parse graphs
    "OrNode",
    "AndNode",
    "LayerGraph",
    "ParseGraph",

    # Generator
    "GeneratorParams",
    "ForwardTrace",
    "init_params",
    "forward",
    "log_joint",
    "grad_z_log_joint",
    "grad_theta",

    # Inference and learning
    "langevin_infer",
    "posterior_moment_check",
    "likelihood_gradient_check",
    "mle_step",
    "train",
    "sample_prior",

    # Grammar
    "parse_graph",
    "single_activation_map",
    "basis_H",
    "synthesis_basis_B",
    "reconstruct_from_layer",
    "ablate",
    "export_parse_graph",
    "import_parse_graph",

    # Descriptor
    "DescriptorParams",
    "energy_score",
    "langevin_sample_images",
    "descriptor_step",
    "coop_train",

    # IO
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "ImageGrid",
    "render_grid",
    "Dataset",
    "load_dataset",

    "SparseGenError",
    "sources",
]
