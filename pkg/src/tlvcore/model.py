"""Tri-modal model state: three encoders, the SAM and the UBA stack."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import numerics as nx
from .encoders import MODALITIES, EncoderConfig, encode, init_encoder, toy_configs
from .errors import ConfigurationError
from .numerics import Parameter, Tensor
from .objective import DEFAULT_TAU_CL, LossParts, total_loss
from .sam import DEFAULT_TAU_DL, SamParams, init_sam_params, modulate, route
from .uba import blocks_from_params, build_hooks, init_uba, plan_placement


@dataclass(frozen=True)
class ModelConfig:
    encoders: dict = field(default_factory=toy_configs)
    num_sensors: int = 4
    uba_levels: int = 2
    uba_rank: int = 8
    use_sam: bool = True
    tau_cl: float = DEFAULT_TAU_CL
    tau_dl: float = DEFAULT_TAU_DL
    lambda_grl: float = 1.0

    def __post_init__(self):
        if set(self.encoders) != set(MODALITIES):
            raise ConfigurationError("encoder configs for T, V and L are required")
        if self.num_sensors < 1:
            raise ConfigurationError("num_sensors must be >= 1")
        if len({c.dim for c in self.encoders.values()}) != 1:
            raise ConfigurationError("all encoders must share the embedding width d")
        plan_placement(self.encoders, self.uba_levels)

    @property
    def dim(self) -> int:
        return self.encoders["T"].dim

    def to_dict(self) -> dict:
        return {
            "encoders": {m: c.to_dict() for m, c in self.encoders.items()},
            "num_sensors": self.num_sensors,
            "uba_levels": self.uba_levels,
            "uba_rank": self.uba_rank,
            "use_sam": self.use_sam,
            "tau_cl": self.tau_cl,
            "tau_dl": self.tau_dl,
            "lambda_grl": self.lambda_grl,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoders"] = {m: EncoderConfig(**c) for m, c in d["encoders"].items()}
        return cls(**d)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Parameter]

    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def sam(self) -> SamParams:
        return SamParams(
            self.params["sam.W_r"], self.params["sam.centroids"],
            tau_dl=self.config.tau_dl, lambda_grl=self.config.lambda_grl,
        )

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: Parameter(k, p.data, p.trainable) for k, p in self.params.items()},
        )

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def init_model(config: ModelConfig, seed: int) -> ModelState:
    params: dict[str, Parameter] = {}
    for m in MODALITIES:
        params.update(init_encoder(config.encoders[m], seed))
    params.update(init_uba(config.encoders, config.uba_levels, config.uba_rank, seed))
    params.update(init_sam_params(config.num_sensors, config.dim, seed))
    if not config.use_sam:
        params["sam.W_r"].trainable = False
        params["sam.W_r"].requires_grad = False
    return ModelState(config, params)


def encode_modality(state: ModelState, modality: str, inputs, encoder: str | None = None,
                    shared_overrides=None) -> Tensor:
    """Pooled features h^m. ``encoder`` lets one branch consume another's inputs."""
    enc = encoder or modality
    cfg = state.config
    plan = plan_placement(cfg.encoders, cfg.uba_levels)
    blocks = blocks_from_params(state.params, cfg.uba_levels)
    hooks = build_hooks(blocks, plan, enc, shared_overrides)
    return encode(inputs, state.params, cfg.encoders[enc], hooks)


def forward(state: ModelState, tactile, vision, tokens, sensor_ids=None, shared_overrides=None) -> dict:
    """Encoder outputs and final unit embeddings for a batch of triplets.

    The SAM scales h^T by (1 + r_s) before normalization; with
    ``sensor_ids=None`` the argmax of the routing weights is used.
    """
    h = {
        "T": encode_modality(state, "T", tactile, shared_overrides=shared_overrides),
        "V": encode_modality(state, "V", vision, shared_overrides=shared_overrides),
        "L": encode_modality(state, "L", tokens, shared_overrides=shared_overrides),
    }
    h_t = h["T"]
    if state.config.use_sam:
        sam = state.sam()
        r = route(h_t, sam)
        s = np.argmax(r.data, axis=-1) if sensor_ids is None else sensor_ids
        h_t = modulate(h_t, r, s)
    z = {"T": nx.l2_normalize(h_t), "V": nx.l2_normalize(h["V"]), "L": nx.l2_normalize(h["L"])}
    return {"h": h, "z": z}


def batch_loss(state: ModelState, batch, lambda_dl: float, reverse: bool = True,
               shared_overrides=None) -> tuple[Tensor, LossParts]:
    """Total objective for a collated batch (see :class:`tlvcore.synthdata.Batch`)."""
    out = forward(state, batch.tactile, batch.vision, batch.tokens, batch.sensors,
                  shared_overrides=shared_overrides)
    return total_loss(
        out["z"], out["h"]["T"], batch.sensors, state.sam(), lambda_dl,
        tau_cl=state.config.tau_cl, reverse=reverse,
    )


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
