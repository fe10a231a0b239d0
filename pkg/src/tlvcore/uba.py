"""Unified Bridging Adapter: per-modality down/up projections around a shared bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Mapping

import numpy as np

from . import numerics as nx
from .encoders import MODALITIES, EncoderConfig, count_encoder_params, gaussian_param
from .errors import ConfigurationError, ShapeError
from .numerics import Parameter, Tensor


@dataclass
class UbaBlock:
    """One adapter level. ``shared`` is the single r x r matrix all modalities use."""

    level: int
    down: dict[str, Parameter]
    up: dict[str, Parameter]
    shared: Parameter

    @property
    def rank(self) -> int:
        return self.shared.shape[0]


@dataclass
class PlacementPlan:
    """0-based (encoder layer, adapter level) pairs per modality."""

    levels: int
    layers: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def layer_to_level(self, modality: str) -> dict[int, int]:
        return dict(self.layers.get(modality, []))


def uba_apply(h, modality: str, block: UbaBlock, shared=None) -> Tensor:
    """h + W_up^m W_sh W_down^m h, applied to the last axis of ``h``.

    ``shared`` substitutes another tensor for ``block.shared``; tests use
    it to untie the bottleneck per modality.
    """
    if modality not in block.down or modality not in block.up:
        raise ConfigurationError(f"modality {modality!r} absent from UBA level {block.level}")
    h = nx.as_tensor(h)
    down, up = block.down[modality], block.up[modality]
    if h.shape[-1] != down.shape[1]:
        raise ShapeError(f"feature dim {h.shape[-1]} != adapter dim {down.shape[1]}")
    w_sh = block.shared if shared is None else shared
    z = nx.linear(nx.linear(h, down), w_sh)
    return nx.add(h, nx.linear(z, up))


def plan_placement(configs: Mapping[str, EncoderConfig], levels: int) -> PlacementPlan:
    """Attach levels 1..L to the top L layers of every encoder."""
    if levels < 0:
        raise ConfigurationError("number of UBA levels must be non-negative")
    depth = min(c.num_layers for c in configs.values())
    if levels > depth:
        raise ConfigurationError(f"{levels} UBA levels exceed the shallowest encoder depth {depth}")
    plan = PlacementPlan(levels)
    for m, cfg in configs.items():
        first = cfg.num_layers - levels
        plan.layers[m] = [(first + lvl, lvl) for lvl in range(levels)]
    return plan


def init_uba(configs: Mapping[str, EncoderConfig], levels: int, rank: int, seed: int) -> dict[str, Parameter]:
    """Down and shared projections ~ N(0, 0.02^2); up projections zero."""
    if levels and rank < 1:
        raise ConfigurationError("UBA rank must be >= 1")
    for cfg in configs.values():
        if levels and rank > cfg.dim // 2:
            raise ConfigurationError(f"UBA rank {rank} exceeds half of d={cfg.dim}")
    params: dict[str, Parameter] = {}
    for lvl in range(levels):
        for m in MODALITIES:
            if m not in configs:
                continue
            d = configs[m].dim
            name = f"uba.{lvl}.down.{m}"
            params[name] = gaussian_param(name, (rank, d), seed)
            params[f"uba.{lvl}.up.{m}"] = Parameter(f"uba.{lvl}.up.{m}", np.zeros((d, rank)))
        name = f"uba.{lvl}.shared"
        params[name] = gaussian_param(name, (rank, rank), seed)
    return params


def blocks_from_params(params: Mapping[str, Parameter], levels: int) -> list[UbaBlock]:
    blocks = []
    for lvl in range(levels):
        down = {m: params[f"uba.{lvl}.down.{m}"] for m in MODALITIES if f"uba.{lvl}.down.{m}" in params}
        up = {m: params[f"uba.{lvl}.up.{m}"] for m in MODALITIES if f"uba.{lvl}.up.{m}" in params}
        blocks.append(UbaBlock(lvl, down, up, params[f"uba.{lvl}.shared"]))
    return blocks


def build_hooks(blocks: list[UbaBlock], plan: PlacementPlan, modality: str, shared_overrides=None) -> dict:
    """Encoder hooks for one modality; ``shared_overrides`` maps level -> tensor."""
    overrides = shared_overrides or {}
    return {
        layer: partial(uba_apply, modality=modality, block=blocks[lvl], shared=overrides.get(lvl))
        for layer, lvl in plan.layers.get(modality, [])
    }


def count_uba_params(configs: Mapping[str, EncoderConfig], levels: int, rank: int) -> int:
    """Per level: sum over modalities of 2*d_m*r, plus one shared r*r."""
    per_level = sum(2 * c.dim * rank for c in configs.values()) + rank * rank
    return levels * per_level


def count_sam_params(num_sensors: int, dim: int) -> int:
    """Routing matrix plus centroids."""
    return 2 * num_sensors * dim


def count_trainable_fraction(
    configs: Mapping[str, EncoderConfig],
    levels: int,
    rank: int,
    num_sensors: int = 0,
) -> float:
    """(UBA + SAM parameters) / (all encoder + UBA + SAM parameters).

    ``num_sensors=0`` leaves the SAM out entirely.
    """
    plan_placement(configs, levels)
    adapters = count_uba_params(configs, levels, rank)
    sam = count_sam_params(num_sensors, configs["T"].dim) if num_sensors else 0
    encoders = sum(count_encoder_params(c) for c in configs.values())
    return (adapters + sam) / (encoders + adapters + sam)
