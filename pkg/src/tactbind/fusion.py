"""Layer assignment and zero-initialised gated injection of hidden states.

The decoder's ``n`` attention layers are cut into ``T`` contiguous blocks;
block ``t`` receives the hidden pair from step ``t``, so early states feed
shallow layers and the final state feeds the deepest block. When ``T`` does
not divide ``n`` the deepest blocks take one extra layer each.

Injection adds ``tanh(g) * P(h)`` to the attention sublayer output, once per
modality, broadcast over token positions. Gates start at exactly zero, so a
fresh plan leaves the decoder untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoders import HiddenPair, HiddenSequence
from .tensor import Tensor

VARIANTS = ("base", "even", "aware")
GROUPS = ("tactile_and_vision", "tactile_only")


@dataclass(frozen=True)
class LayerAssignment:
    n_layers: int
    T: int
    blocks: tuple[range, ...]

    @property
    def sizes(self) -> list[int]:
        return [len(b) for b in self.blocks]


def assign_layers(n_layers: int, T: int) -> LayerAssignment:
    if n_layers < 1 or T < 1:
        raise ValueError(f"n_layers={n_layers} and T={T} must both be >= 1")
    if T > n_layers:
        raise ValueError(f"T={T} exceeds n_layers={n_layers}: some hidden state would get no layer")
    q, r = divmod(n_layers, T)
    sizes = [q] * (T - r) + [q + 1] * r
    blocks = []
    start = 0
    for s in sizes:
        blocks.append(range(start, start + s))
        start += s
    return LayerAssignment(n_layers, T, tuple(blocks))


def select_hidden_for_layer(assignment: LayerAssignment, layer_index: int) -> int:
    """1-based time step whose block contains ``layer_index``."""
    if not 0 <= layer_index < assignment.n_layers:
        raise ValueError(f"layer {layer_index} outside [0, {assignment.n_layers})")
    for t, block in enumerate(assignment.blocks, start=1):
        if layer_index in block:
            return t
    raise AssertionError("assignment is not a partition")


@dataclass(frozen=True)
class FusionPlan:
    """Which hidden state each layer receives, for one (variant, group) cell.

    ``layer_map[l]`` is a 1-based index into the hidden sequence handed to the
    decoder. For ``base`` that sequence is the single-frame feature (length 1).
    Gate and projection values live in the fusion parameter dict, not here.
    """

    variant: str
    modality_group: str
    n_layers: int
    T: int
    layer_map: tuple[int, ...]
    assignment: LayerAssignment | None = None

    @property
    def uses_image(self) -> bool:
        return self.modality_group == "tactile_and_vision"

    @property
    def state_count(self) -> int:
        """Length of the hidden sequence this plan expects."""
        return 1 if self.variant == "base" else self.T

    def describe(self) -> str:
        lines = [
            f"variant: {self.variant}",
            f"group: {self.modality_group}",
            f"n_layers: {self.n_layers}",
            f"T: {self.T}",
            "layer -> state",
        ]
        for layer, t in enumerate(self.layer_map):
            src = "f^T (single frame)" if self.variant == "base" else f"h^{t}"
            lines.append(f"  {layer:3d} -> {src}")
        if self.assignment is not None:
            lines.append("blocks")
            for t, b in enumerate(self.assignment.blocks, start=1):
                lines.append(f"  h^{t}: layers {b.start}..{b.stop - 1} ({len(b)})")
        return "\n".join(lines)


def build_plan(variant: str, modality_group: str, n_layers: int, T: int) -> FusionPlan:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if modality_group not in GROUPS:
        raise ValueError(f"unknown modality group {modality_group!r}; expected one of {GROUPS}")
    if n_layers < 1 or T < 1:
        raise ValueError(f"n_layers={n_layers} and T={T} must both be >= 1")
    if variant == "aware":
        assignment = assign_layers(n_layers, T)
        layer_map = tuple(select_hidden_for_layer(assignment, l) for l in range(n_layers))
        return FusionPlan(variant, modality_group, n_layers, T, layer_map, assignment)
    if variant == "even":
        return FusionPlan(variant, modality_group, n_layers, T, (T,) * n_layers)
    return FusionPlan(variant, modality_group, n_layers, T, (1,) * n_layers)


def init_fusion_params(plan: FusionPlan, hidden_dim: int, width: int,
                       rng: np.random.Generator) -> dict[str, Tensor]:
    """Zero gates per (layer, modality); projections uniform(-1/sqrt(fan_in), +).

    The image branch is drawn from ``rng`` even for tactile-only plans so both
    groups see the same tactile projection for a given seed.
    """
    s = 1.0 / np.sqrt(hidden_dim)
    params = {}
    for mod in ("image", "tactile"):
        w = rng.uniform(-s, s, size=(hidden_dim, width))
        b = rng.uniform(-s, s, size=width)
        if mod == "image" and not plan.uses_image:
            continue
        params[f"fusion.gate.{mod}"] = Tensor(np.zeros(plan.n_layers), requires_grad=True)
        params[f"fusion.proj.{mod}.w"] = Tensor(w, requires_grad=True)
        params[f"fusion.proj.{mod}.b"] = Tensor(b, requires_grad=True)
    return params


def project_hidden(h: Tensor, fparams: dict[str, Tensor], mod: str) -> Tensor:
    """``P_mod(h)``: ``(B, D_h) -> (B, width)``."""
    return tn.add(tn.matmul(h, fparams[f"fusion.proj.{mod}.w"]), fparams[f"fusion.proj.{mod}.b"])


def inject_projected(layer_output: Tensor, projected: dict[str, Tensor], plan: FusionPlan,
                     layer_index: int, fparams: dict[str, Tensor]) -> Tensor:
    """Gated add of already-projected hidden vectors (``modality -> (B, width)``)."""
    if layer_output.data.ndim != 3:
        raise tn.ShapeError(f"fuse_into_layer: expected (B, S, width), got {layer_output.shape}")
    B, S, width = layer_output.shape
    out = layer_output
    for mod in (("image", "tactile") if plan.uses_image else ("tactile",)):
        proj = projected[mod]
        if proj.shape != (B, width):
            raise tn.ShapeError(f"fuse_into_layer: projected {mod} {proj.shape} does not fit layer output {layer_output.shape}")
        gate = tn.tanh(tn.select(fparams[f"fusion.gate.{mod}"], layer_index, axis=0))
        out = tn.add(out, tn.expand(tn.multiply(proj, gate), axis=1, size=S))
    return out


def fuse_into_layer(layer_output: Tensor, h: HiddenPair, plan: FusionPlan, layer_index: int,
                    fparams: dict[str, Tensor]) -> Tensor:
    """``out + tanh(g_img) P_img(h_img) + tanh(g_tac) P_tac(h_tac)`` over all tokens.

    ``layer_output`` is ``(B, S, width)``; hidden vectors are ``(B, D_h)``.
    The image term is dropped for tactile-only plans.
    """
    if plan.uses_image and h.image is None:
        raise ValueError("tactile_and_vision plan needs image hidden states")
    projected = {"tactile": project_hidden(h.tactile, fparams, "tactile")}
    if plan.uses_image:
        projected["image"] = project_hidden(h.image, fparams, "image")
    return inject_projected(layer_output, projected, plan, layer_index, fparams)


def hidden_for_layer(plan: FusionPlan, hidden: HiddenSequence, layer_index: int) -> HiddenPair:
    return hidden.pair(plan.layer_map[layer_index])


def check_hidden(plan: FusionPlan, hidden: HiddenSequence) -> None:
    if hidden.T != plan.state_count:
        raise ValueError(f"{plan.variant} plan expects {plan.state_count} hidden states, got {hidden.T}")
    if plan.uses_image and hidden.image is None:
        raise ValueError("tactile_and_vision plan needs image hidden states")
