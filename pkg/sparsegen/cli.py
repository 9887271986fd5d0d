"""
Command-line interface for sparsegen.

Every subcommand shares --seed, --config and --out. Exit codes: 0 on success,
1 on a usage error, 2 on a runtime error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import apply_env_settings, get_env_settings, load_run_config
from .descriptor import coop_train
from .errors import ConfigurationError, SparseGenError
from .generator import GeneratorParams, forward
from .grammar import basis_atlas, export_parse_graph, parse_graph, project_kernels
from .inference import langevin_infer
from .learning import sample_prior, train
from .metrics_sink import MetricsSink
from .models import GeneratorConfig, RunConfig
from .render import ImageGrid, render_grid, render_images
from .sources.folder import load_dataset, load_image
from .sources.toy import make_texture_corpus, make_toy_corpus, write_corpus
from .tensor_ops import Tensor, as_tensor, get_dtype

CHECKPOINT_NAME = "checkpoint.sgao"


class _UsageError(Exception):
    pass


class SparseGenArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--seed", type=int, default=None, help="Run seed (overrides the config file)"
    )
    common.add_argument(
        "--config", type=Path, default=None, help="Flat YAML/JSON run configuration"
    )
    common.add_argument(
        "--out", type=Path, default=Path("out"), help="Output directory"
    )
    common.add_argument(
        "--format", choices=["ppm", "png"], default="ppm", help="Image output format"
    )
    return common


def _add_latent_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument(
        "--z", type=str, default=None, help="Comma-separated latent vector"
    )
    src.add_argument(
        "--image",
        type=Path,
        default=None,
        help="Infer Z for this image by Langevin dynamics",
    )


TRAIN_COMMANDS = (
    ("train", "Maximum-likelihood training"),
    ("coop-train", "Cooperative training with a descriptor"),
)


def build_parser() -> SparseGenArgumentParser:
    parser = SparseGenArgumentParser(
        prog="sparsegen",
        description=(
            "Sparse-activation generator network: "
            "train, sample, reconstruct and decompose images"
        ),
    )
    common = _common_parser()
    sub = parser.add_subparsers(
        dest="command", parser_class=SparseGenArgumentParser, metavar="command"
    )

    for name, help_text in TRAIN_COMMANDS:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument(
            "--data", type=Path, required=True, help="Directory of training images"
        )
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None, help="Generator learning rate")
        p.add_argument(
            "--limit", type=int, default=None, help="Use at most this many images"
        )
        if name == "train":
            p.add_argument(
                "--resume", type=Path, default=None, help="Continue from a checkpoint"
            )

    p = sub.add_parser("sample", parents=[common], help="Draw images from the prior")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("-n", type=int, default=16, help="Number of samples")

    p = sub.add_parser(
        "reconstruct", parents=[common], help="Infer Z per image, then render g(Z)"
    )
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="Langevin steps per image")

    p = sub.add_parser(
        "parse", parents=[common], help="Emit the AND-OR parse graph as JSON"
    )
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_latent_source(p)

    p = sub.add_parser(
        "bases", parents=[common], help="Render the H and B bases of a layer"
    )
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layer", type=int, default=1, help="Feature map index, from 1")
    _add_latent_source(p)

    p = sub.add_parser("kernels", parents=[common], help="Render deconvolution kernels")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument(
        "--layer", type=int, default=None, help="Deconv layer, from 1 (default: all)"
    )
    p.add_argument(
        "--hierarchical",
        action="store_true",
        help="Project kernels through the lower layers",
    )

    p = sub.add_parser("info", parents=[common], help="Print checkpoint metadata")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic image corpus")
    p.add_argument("--kind", choices=["toy", "texture"], default="toy")
    p.add_argument("-n", type=int, default=64)
    p.add_argument(
        "--size",
        type=int,
        default=None,
        help="Image side (default: image_size from config)",
    )

    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "limit": getattr(args, "limit", None),
        "langevin_steps": getattr(args, "steps", None),
    }
    return load_run_config(args.config, overrides)


def _image_path(args: argparse.Namespace, stem: str) -> Path:
    return args.out / f"{stem}.{args.format}"


def _latent(
    args: argparse.Namespace,
    run: RunConfig,
    params: GeneratorParams,
    config: GeneratorConfig,
) -> Tensor:
    """Z from --z, from Langevin inference on --image, else a prior draw."""
    if args.z is not None:
        try:
            values = [float(v) for v in args.z.split(",")]
        except ValueError as e:
            raise ConfigurationError(f"--z must be comma-separated numbers: {e}") from e
        if len(values) != config.d:
            raise ConfigurationError(
                f"--z has {len(values)} values "
                f"but the latent dimension is {config.d}"
            )
        return as_tensor(values)
    if args.image is not None:
        w, _, c = config.image_shape()
        Y = load_image(args.image, w, c)
        logging.info(f"🔎 Inferring Z for {args.image}")
        Z0 = np.zeros(config.d)
        return langevin_infer(params, Y, Z0, run.langevin_config(), config)
    return np.random.default_rng(run.seed).standard_normal(config.d, dtype=get_dtype())


def _load_params(path: Path):
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.generator_params(), ckpt.generator_config


def cmd_train(args: argparse.Namespace, run: RunConfig) -> None:
    gcfg = run.generator_config()
    tcfg = run.train_config()
    dataset = load_dataset(
        args.data, run.image_size, run.limit, channels=gcfg.out_channels
    )
    resume: Optional[Checkpoint] = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
    sink = MetricsSink(args.out / "metrics.csv", append=resume is not None)
    result = train(
        dataset,
        gcfg,
        tcfg,
        run.seed,
        resume=resume,
        sink=sink,
        failure_checkpoint=args.out / "failure.sgao",
    )
    save_checkpoint(args.out / CHECKPOINT_NAME, result.checkpoint)


def cmd_coop_train(args: argparse.Namespace, run: RunConfig) -> None:
    gcfg = run.generator_config()
    dataset = load_dataset(
        args.data, run.image_size, run.limit, channels=gcfg.out_channels
    )
    sink = MetricsSink(args.out / "metrics.csv", cooperative=True)
    result = coop_train(
        dataset,
        gcfg,
        run.train_config(),
        run.descriptor_config(),
        run.seed,
        sink=sink,
    )
    save_checkpoint(args.out / CHECKPOINT_NAME, result.checkpoint)


def cmd_sample(args: argparse.Namespace, run: RunConfig) -> None:
    _, params, config = _load_params(args.checkpoint)
    images = sample_prior(params, args.n, run.seed, config)
    render_images(list(images), _image_path(args, "samples"))


def cmd_reconstruct(args: argparse.Namespace, run: RunConfig) -> None:
    _, params, config = _load_params(args.checkpoint)
    w, _, c = config.image_shape()
    dataset = load_dataset(args.data, w, run.limit, channels=c)
    n = len(dataset)
    Y = as_tensor(dataset.images)
    Z0 = np.zeros((n, config.d))
    Z = langevin_infer(params, Y, Z0, run.langevin_config(), config)
    Y_rec, _ = forward(params, Z, config)
    mse = float(np.mean((Y - Y_rec) ** 2))
    logging.info(f"🔁 Reconstructed {n} images, mse={mse:.5f}")
    # originals and reconstructions in alternating columns
    cells: List[np.ndarray] = []
    for original, rec in zip(Y, Y_rec):
        cells.extend([original, rec])
    render_images(cells, _image_path(args, "reconstruct"), cols=2)


def cmd_parse(args: argparse.Namespace, run: RunConfig) -> None:
    _, params, config = _load_params(args.checkpoint)
    Z = _latent(args, run, params, config)
    _, trace = forward(params, Z, config, record=True)
    export_parse_graph(parse_graph(trace), path=args.out / "parse_graph.json")


def cmd_bases(args: argparse.Namespace, run: RunConfig) -> None:
    _, params, config = _load_params(args.checkpoint)
    Z = _latent(args, run, params, config)
    _, trace = forward(params, Z, config, record=True)
    atlas = basis_atlas(params, trace, args.layer)
    if len(atlas) == 0:
        logging.warning(
            f"⚠️ Layer {args.layer} has no surviving activations for this Z"
        )
        return
    stem = f"bases_layer{args.layer}"
    H_grid = ImageGrid.auto([e.H for e in atlas.entries])
    B_grid = ImageGrid.auto([e.B for e in atlas.entries])
    render_grid(H_grid, _image_path(args, f"{stem}_H"))
    render_grid(B_grid, _image_path(args, f"{stem}_B"))
    export_parse_graph(
        parse_graph(trace), atlas=atlas, path=args.out / f"{stem}.json"
    )


def cmd_kernels(args: argparse.Namespace, run: RunConfig) -> None:
    _, params, config = _load_params(args.checkpoint)
    if args.layer is not None:
        layers = [args.layer]
    else:
        layers = list(range(1, config.num_layers + 1))
    for layer in layers:
        if args.hierarchical:
            cells = project_kernels(params, config, layer)
            stem = f"kernels_layer{layer}_projected"
        else:
            if not 1 <= layer <= config.num_layers:
                raise ConfigurationError(
                    f"layer {layer} outside 1..{config.num_layers}"
                )
            ker = params.kernels[layer - 1]
            cells = [ker[c] for c in range(ker.shape[0])]
            stem = f"kernels_layer{layer}"
        render_grid(ImageGrid.auto(cells), _image_path(args, stem))


def describe_checkpoint(ckpt: Checkpoint) -> List[str]:
    config = ckpt.generator_config
    shapes = config.feature_shapes()
    lines = [
        f"d: {config.d}",
        f"sigma: {config.sigma}",
        f"sparse: {config.sparse}",
        f"t_k: {list(config.t_k)}",
    ]
    for i, shape in enumerate(shapes[:-1], start=1):
        lines.append(f"fm{i}: {'x'.join(str(n) for n in shape)}")
    lines.append(f"image: {'x'.join(str(n) for n in shapes[-1])}")
    for i, spec in enumerate(config.layers, start=1):
        lines.append(
            f"deconv{i}: kernel={spec.kernel} stride={spec.stride} "
            f"pad={spec.pad} out={spec.out_channels}"
        )
    lines.append(f"epoch: {ckpt.epoch}")
    lines.append(f"seed: {ckpt.seed}")
    lines.append(f"descriptor: {'yes' if ckpt.has_descriptor else 'no'}")
    lines.append(f"tensors: {len(ckpt.tensors)}")
    return lines


def cmd_info(args: argparse.Namespace, run: RunConfig) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    for line in describe_checkpoint(ckpt):
        print(line)


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> None:
    make = make_toy_corpus if args.kind == "toy" else make_texture_corpus
    size = args.size if args.size is not None else run.image_size
    channels = run.generator_config().out_channels
    write_corpus(make(args.n, size=size, seed=run.seed, channels=channels), args.out)


COMMANDS = {
    "train": cmd_train,
    "coop-train": cmd_coop_train,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "parse": cmd_parse,
    "bases": cmd_bases,
    "kernels": cmd_kernels,
    "info": cmd_info,
    "synth": cmd_synth,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    settings = get_env_settings()
    logging.basicConfig(
        level=settings["log_level"],
        format="[%(asctime)s] %(levelname)s: %(message)s",
    )

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1

    try:
        apply_env_settings()
        run = _run_config(args)
        COMMANDS[args.command](args, run)
    except (SparseGenError, OSError, ValueError) as e:
        logging.exception(f"Error in {args.command}: {e}")
        return 2
    except KeyboardInterrupt:
        logging.info("Stopped by user")
        return 1
    logging.info(f"✅ {args.command} complete.")
    return 0


def main():
    """Console entry point."""
    sys.exit(cli_main())
