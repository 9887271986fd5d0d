"""
Sparse-coding decomposition and AND-OR parse graphs from a recorded forward pass.

With the masks of a trace frozen, every surviving activation j of feature map i
contributes linearly to the next preactivation and, through the remaining
frozen layers, to the pre-tanh image:

    fmⁱ⁺¹ = Σⱼ sⱼ Hⱼ        P = Σⱼ sⱼ Bⱼ        Y = tanh(P)

Biases are shared uniformly among the k surviving activations of layer i, at
layer i and at every layer below it, which makes both sums exact.

Layers are numbered from 1 (fm¹ is the reshaped FC output). Activations of a
layer are ordered by descending coefficient, ties by row-major position.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ActivationIndexError, SparseGenError
from .generator import ForwardTrace, GeneratorParams, propagate_frozen
from .models import AndNode, GeneratorConfig, LayerGraph, OrNode, ParseGraph
from .tensor_ops import Tensor, deconv2d, tanh_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Activation:
    j: int
    x: int
    y: int
    channel: int
    coeff: float


def _single_trace(trace: ForwardTrace) -> ForwardTrace:
    trace.require_masks()
    if trace.batched:
        raise SparseGenError(
            "decomposition needs a single-example trace; use trace.example(n)"
        )
    return trace


def _check_layer(trace: ForwardTrace, i: int) -> None:
    if not 1 <= i <= len(trace.layers):
        raise ActivationIndexError(f"layer {i} outside 1..{len(trace.layers)}")


def surviving_activations(trace: ForwardTrace, i: int) -> List[Activation]:
    """Strictly positive entries of fm_sⁱ in j order."""
    trace = _single_trace(trace)
    _check_layer(trace, i)
    fm_s = trace.layers[i - 1].fm_s
    flat = fm_s.ravel()
    positions = np.flatnonzero(flat > 0)
    order = np.argsort(-flat[positions], kind="stable")
    acts = []
    for j, p in enumerate(positions[order]):
        x, y, c = np.unravel_index(p, fm_s.shape)
        acts.append(
            Activation(j=j, x=int(x), y=int(y), channel=int(c), coeff=float(flat[p]))
        )
    return acts


def _activation(
    trace: ForwardTrace, i: int, j: int
) -> Tuple[List[Activation], Activation]:
    acts = surviving_activations(trace, i)
    if not 0 <= j < len(acts):
        raise ActivationIndexError(
            f"activation {j} out of range for layer {i} ({len(acts)} surviving)"
        )
    return acts, acts[j]


def parse_graph(trace: ForwardTrace) -> ParseGraph:
    """
    AND-OR parse graph of a trace.

    Each location with at least one surviving activation is an AND node; the
    surviving channels there are its OR nodes.
    """
    trace = _single_trace(trace)
    layers = []
    for i, lt in enumerate(trace.layers, start=1):
        acts = surviving_activations(trace, i)
        k_masks = int(np.count_nonzero(lt.mask_t * lt.mask_r))
        if k_masks != len(acts):
            raise SparseGenError(
                f"layer {i}: {len(acts)} positive activations "
                f"but masks keep {k_masks}"
            )
        by_location = {}
        for a in acts:
            node = OrNode(channel=a.channel, coeff=a.coeff, j=a.j)
            by_location.setdefault((a.x, a.y), []).append(node)
        and_nodes = [
            AndNode(x=x, y=y, layer=i, or_nodes=sorted(nodes, key=lambda n: n.j))
            for (x, y), nodes in sorted(by_location.items())
        ]
        layers.append(LayerGraph(layer=i, k_total=len(acts), and_nodes=and_nodes))
    return ParseGraph(layers=layers)


def single_activation_map(trace: ForwardTrace, i: int, j: int) -> Tensor:
    """fm_{s_j}ⁱ: zero except at activation j, where it carries sⱼ."""
    _, act = _activation(trace, i, j)
    fm_s = trace.layers[i - 1].fm_s
    out = np.zeros_like(fm_s)
    out[act.x, act.y, act.channel] = fm_s[act.x, act.y, act.channel]
    return out


def _one_hot_stack(trace: ForwardTrace, i: int, acts: Sequence[Activation]) -> Tensor:
    fm_s = trace.layers[i - 1].fm_s
    stack = np.zeros((len(acts),) + fm_s.shape, dtype=fm_s.dtype)
    for n, a in enumerate(acts):
        stack[n, a.x, a.y, a.channel] = fm_s[a.x, a.y, a.channel]
    return stack


def _next_contributions(
    params: GeneratorParams,
    trace: ForwardTrace,
    i: int,
    acts: Sequence[Activation],
    k: int,
):
    """sⱼHⱼ for the given activations, stacked on a leading axis."""
    spec = trace.config.layers[i - 1]
    stack = _one_hot_stack(trace, i, acts)
    bias = params.biases[i - 1] / k
    return deconv2d(stack, params.kernels[i - 1], bias, spec.stride, spec.pad)


def _image_contributions(
    params: GeneratorParams,
    trace: ForwardTrace,
    i: int,
    acts: Sequence[Activation],
    k: int,
):
    """sⱼBⱼ for the given activations, stacked on a leading axis."""
    stack = _one_hot_stack(trace, i, acts)
    return propagate_frozen(params, trace, i, stack, bias_divisor=float(k))


def basis_H(
    params: GeneratorParams, trace: ForwardTrace, i: int, j: int
) -> Tuple[float, Tensor]:
    """(sⱼ, Hⱼ) with sⱼHⱼ = deconv(fm_{s_j}ⁱ, kerⁱ) + biasⁱ/k."""
    acts, act = _activation(trace, i, j)
    contribution = _next_contributions(params, trace, i, [act], len(acts))[0]
    return act.coeff, contribution / act.coeff


def synthesis_basis_B(
    params: GeneratorParams, trace: ForwardTrace, i: int, j: int
) -> Tuple[float, Tensor]:
    """(sⱼ, Bⱼ) with sⱼBⱼ the image-space contribution of activation j, masks frozen."""
    acts, act = _activation(trace, i, j)
    contribution = _image_contributions(params, trace, i, [act], len(acts))[0]
    return act.coeff, contribution / act.coeff


def reconstruct_from_layer(
    params: GeneratorParams, trace: ForwardTrace, i: int
) -> Tensor:
    """tanh(Σⱼ sⱼBⱼ); equals trace.Y up to rounding."""
    trace = _single_trace(trace)
    _check_layer(trace, i)
    acts = surviving_activations(trace, i)
    if not acts:
        return ablate(params, trace, i, [])
    contributions = _image_contributions(params, trace, i, acts, len(acts))
    coeffs = np.array([a.coeff for a in acts], dtype=contributions.dtype)
    bases = contributions / coeffs[:, None, None, None]
    total = np.zeros_like(bases[0])
    for s, B in zip(coeffs, bases):
        total = total + s * B
    return tanh_map(total)


def ablate(
    params: GeneratorParams, trace: ForwardTrace, i: int, drop_set: Iterable[int]
) -> Tensor:
    """Image with the coefficients of the dropped activations of layer i set to zero."""
    trace = _single_trace(trace)
    _check_layer(trace, i)
    acts = surviving_activations(trace, i)
    fm_s = trace.layers[i - 1].fm_s.copy()
    for j in sorted(set(drop_set)):
        if not 0 <= j < len(acts):
            raise ActivationIndexError(
                f"cannot drop activation {j}: layer {i} has {len(acts)} surviving"
            )
        a = acts[j]
        fm_s[a.x, a.y, a.channel] = 0.0
    return tanh_map(propagate_frozen(params, trace, i, fm_s))


def basis_support(B: Tensor, tol: float = 0.0) -> Tensor:
    """Spatial footprint (w, h) of a basis: positions with any channel beyond tol."""
    return np.any(np.abs(B) > tol, axis=-1)


@dataclass
class AtlasEntry:
    activation: Activation
    H: Tensor
    B: Tensor


@dataclass
class BasisAtlas:
    layer: int
    entries: List[AtlasEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def cell_index(self) -> List[dict]:
        """Sidecar rows mapping grid cell -> (layer, x, y, channel, coeff)."""
        return [
            {
                "cell": n,
                "layer": self.layer,
                "x": e.activation.x,
                "y": e.activation.y,
                "channel": e.activation.channel,
                "coeff": e.activation.coeff,
            }
            for n, e in enumerate(self.entries)
        ]


def basis_atlas(params: GeneratorParams, trace: ForwardTrace, i: int) -> BasisAtlas:
    trace = _single_trace(trace)
    _check_layer(trace, i)
    acts = surviving_activations(trace, i)
    if not acts:
        return BasisAtlas(layer=i, entries=[])
    k = len(acts)
    coeffs = np.array([a.coeff for a in acts])
    H = _next_contributions(params, trace, i, acts, k)
    B = _image_contributions(params, trace, i, acts, k)
    entries = [
        AtlasEntry(activation=a, H=H[n] / coeffs[n], B=B[n] / coeffs[n])
        for n, a in enumerate(acts)
    ]
    return BasisAtlas(layer=i, entries=entries)


def project_kernels(
    params: GeneratorParams, config: GeneratorConfig, layer: int
) -> List[Tensor]:
    """
    Render each kernel slice kerⁱ[c] of deconv layer `layer` (1-based) into image
    space through the lower deconv layers, linearly: zero bias, no masks, no crop.
    For the last layer these are the kernels themselves.
    """
    if not 1 <= layer <= config.num_layers:
        raise ActivationIndexError(f"layer {layer} outside 1..{config.num_layers}")
    x = params.kernels[layer - 1]
    for i in range(layer, config.num_layers):
        spec = config.layers[i]
        zero = np.zeros(params.kernels[i].shape[3], dtype=x.dtype)
        x = deconv2d(x, params.kernels[i], zero, spec.stride, 0)
    return [x[c] for c in range(x.shape[0])]


# JSON


def _graph_document(pg: ParseGraph, atlas: Optional[BasisAtlas] = None) -> dict:
    doc = pg.model_dump()
    if atlas is not None:
        doc["atlas"] = atlas.cell_index()
    return doc


def export_parse_graph(
    pg: ParseGraph,
    atlas: Optional[BasisAtlas] = None,
    path: Union[str, Path, None] = None,
) -> str:
    """
    Canonical JSON: sorted keys, no whitespace, floats in shortest round-trip form.
    Written to `path` when given.
    """
    doc = _graph_document(pg, atlas)
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        logger.info(f"🌳 Wrote parse graph to {path}")
    return text


def import_parse_graph(text: str) -> ParseGraph:
    """Inverse of export_parse_graph; OR-node ranks j are recomputed from coeffs."""
    doc = json.loads(text)
    doc.pop("atlas", None)
    pg = ParseGraph.model_validate(doc)
    for lg in pg.layers:
        nodes = [(node, o) for node in lg.and_nodes for o in node.or_nodes]
        # rank = descending coeff, ties by row-major (x, y, channel)
        ranked = sorted(
            nodes, key=lambda t: (-t[1].coeff, t[0].x, t[0].y, t[1].channel)
        )
        for j, (node, o) in enumerate(ranked):
            o.j = j
            node.layer = lg.layer
        for node in lg.and_nodes:
            node.or_nodes.sort(key=lambda o: o.j)
    return pg
