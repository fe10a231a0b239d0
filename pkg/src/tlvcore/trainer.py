"""AdamW training loop, binary checkpoints and the metrics log."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoders import toy_configs
from .errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateInputError,
    DomainError,
    TrainingDivergedError,
)
from .model import ModelConfig, ModelState, batch_loss, init_model
from .synthdata import TEXT_LEN, Batch, Dataset, load_dataset

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TLVC"
# version 2 stores float64 payloads (version 1 layout was float32)
CKPT_VERSION = 2
METRICS_HEADER = ["epoch", "step", "l_total", "l_tv", "l_tl", "l_vl", "l_dl", "grad_norm", "wall_ms"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    lambda_dl: float = 0.1
    tau_cl: float = 0.05
    tau_dl: float = 0.05
    seed: int = 0
    dim: int = 32
    heads: int = 4
    image_layers: int = 4
    text_layers: int = 2
    patch_size: int = 4
    uba_levels: int = 2
    uba_rank: int = 8
    use_sam: bool = True
    train_sensors: tuple = ()
    dataset_path: str = ""
    log_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigurationError("lr must be a finite non-negative number")
        if self.lambda_dl < 0:
            raise ConfigurationError("lambda_dl must be >= 0")
        if self.tau_cl <= 0 or self.tau_dl <= 0:
            raise ConfigurationError("temperatures must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "train_sensors", tuple(int(s) for s in self.train_sensors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_sensors"] = list(self.train_sensors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, dataset_cfg, vocab_size: int) -> ModelConfig:
        if dataset_cfg.image_size % self.patch_size:
            raise ConfigurationError(
                f"patch_size {self.patch_size} does not divide dataset image size {dataset_cfg.image_size}"
            )
        if self.dim % self.heads:
            raise ConfigurationError("dim must be divisible by heads")
        encoders = toy_configs(
            dim=self.dim, heads=self.heads, image_layers=self.image_layers,
            text_layers=self.text_layers, vocab_size=vocab_size, text_len=TEXT_LEN,
            image_size=dataset_cfg.image_size, patch_size=self.patch_size,
        )
        return ModelConfig(
            encoders=encoders, num_sensors=dataset_cfg.num_sensors, uba_levels=self.uba_levels,
            uba_rank=self.uba_rank, use_sam=self.use_sam, tau_cl=self.tau_cl, tau_dl=self.tau_dl,
        )


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    l_total: float
    l_tv: float
    l_tl: float
    l_vl: float
    l_dl: float
    grad_norm: float
    wall_ms: float = 0.0

    @property
    def l_scl(self) -> float:
        return self.l_tv + self.l_tl + self.l_vl

    def row(self) -> list[str]:
        return [str(self.epoch), str(self.step)] + [
            repr(float(getattr(self, k))) for k in METRICS_HEADER[2:]
        ]


class AdamW:
    """AdamW with decoupled weight decay (decay applied before the Adam step)."""

    def __init__(self, params, lr, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    epoch: int
    step: int
    rng: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config["train"])

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def model_state(self) -> ModelState:
        mcfg = self.model_config()
        state = init_model(mcfg, 0)
        for name, p in state.params.items():
            if name not in self.params:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if self.params[name].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.data[...] = self.params[name]
        return state


def _make_checkpoint(state: ModelState, opt: AdamW, cfg: TrainConfig, dataset_cfg, epoch: int,
                     step: int) -> Checkpoint:
    return Checkpoint(
        version=CKPT_VERSION,
        config={"train": cfg.to_dict(), "model": state.config.to_dict(),
                "dataset": dataset_cfg.to_dict() if dataset_cfg is not None else None},
        params={k: p.data.copy() for k, p in state.params.items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_t=opt.t,
        epoch=epoch,
        step=step,
        rng={"algorithm": "philox", "key": [cfg.seed, _SHUFFLE_KIND], "next_epoch": epoch},
    )


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """TLVC layout: magic, u32 version, u32-length-prefixed JSON header, tensor records.

    The JSON header echoes the configs and carries epoch/step/optimizer
    step/RNG state. Tensor records are (u32 name length, name, u32 rank,
    u32 dims, little-endian float64 payload); optimizer moments are stored
    as records named ``adam.m.<param>`` / ``adam.v.<param>``.
    """
    header = {
        "config": ckpt.config, "epoch": ckpt.epoch, "step": ckpt.step,
        "adam_t": ckpt.adam_t, "rng": ckpt.rng, "tensor_count": 3 * len(ckpt.params),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for name, arr in ckpt.params.items():
        _write_tensor(buf, name, arr)
    for name, arr in ckpt.adam_m.items():
        _write_tensor(buf, f"adam.m.{name}", arr)
    for name, arr in ckpt.adam_v.items():
        _write_tensor(buf, f"adam.v.{name}", arr)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    tensors = {}
    for _ in range(header["tensor_count"]):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor records")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    return Checkpoint(version, header["config"], params, m, v, header["adam_t"],
                      header["epoch"], header["step"], header["rng"])


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in records:
            w.writerow(rec.row())


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRecord(int(r["epoch"]), int(r["step"]), *(float(r[k]) for k in METRICS_HEADER[2:]))
        for r in rows
    ]


def epoch_means(records, key: str = "l_total") -> list[float]:
    """Mean of ``key`` per epoch, in epoch order."""
    by_epoch: dict[int, list[float]] = {}
    for rec in records:
        by_epoch.setdefault(rec.epoch, []).append(getattr(rec, key))
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _clip(params, max_norm: float) -> float:
    norm = nx.global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def _all_finite(state: ModelState, batch: Batch) -> bool:
    arrays = [p.data for p in state.params.values()] + [batch.tactile, batch.vision]
    return all(np.all(np.isfinite(a)) for a in arrays)


def train_step(state: ModelState, opt: AdamW, batch: Batch, cfg: TrainConfig,
               epoch: int = 0, step: int = 0) -> tuple[ModelState, MetricsRecord]:
    """One AdamW update on ``batch``; parameters are updated in place."""
    if len(batch) == 0:
        raise DomainError("empty batch")
    t0 = time.perf_counter()
    state.zero_grad()
    try:
        loss, parts = batch_loss(state, batch, cfg.lambda_dl)
    except (DomainError, DegenerateInputError) as exc:
        # validation inside the forward pass trips first when values blew up
        if _all_finite(state, batch):
            raise
        nan = float("nan")
        rec = MetricsRecord(epoch, step, nan, nan, nan, nan, nan, nan)
        raise TrainingDivergedError(f"non-finite values at step {step}: {exc}", rec) from exc
    params = opt.params
    if not math.isfinite(parts.total):
        rec = MetricsRecord(epoch, step, parts.total, parts.tv, parts.tl, parts.vl, parts.dl, float("nan"))
        raise TrainingDivergedError(f"non-finite loss at step {step}", rec)
    loss.backward()
    norm = _clip(params, cfg.grad_clip)
    if not math.isfinite(norm):
        rec = MetricsRecord(epoch, step, parts.total, parts.tv, parts.tl, parts.vl, parts.dl, norm)
        raise TrainingDivergedError(f"non-finite gradient at step {step}", rec)
    opt.step()
    wall = (time.perf_counter() - t0) * 1000.0 if cfg.log_wall_time else 0.0
    return state, MetricsRecord(epoch, step, parts.total, parts.tv, parts.tl, parts.vl, parts.dl, norm, wall)


_SHUFFLE_KIND = 0x5EED


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[seed, (_SHUFFLE_KIND << 32) | epoch]))
    return rng.permutation(n)


def training_split(dataset: Dataset, cfg: TrainConfig) -> Batch:
    train = dataset.splits["train"]
    if cfg.train_sensors:
        missing = set(cfg.train_sensors) - set(np.unique(train.sensors).tolist())
        if missing:
            raise ConfigurationError(f"training sensors {sorted(missing)} absent from the dataset")
        train = train.where(np.isin(train.sensors, cfg.train_sensors))
    return train


def make_optimizer(state: ModelState, cfg: TrainConfig) -> AdamW:
    return AdamW(state.trainable_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)


def train_run(
    cfg: TrainConfig,
    dataset: Dataset | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Train for ``cfg.epochs`` epochs; returns the final checkpoint and the step log.

    With ``out_dir`` a checkpoint ``epoch_XX.tlvc`` is written after every
    epoch and ``metrics.csv`` is rewritten. ``resume`` continues from a
    checkpoint's epoch; the metrics returned then cover only the new steps.
    """
    if dataset is None:
        if not cfg.dataset_path:
            raise ConfigurationError("no dataset given and dataset_path is empty")
        dataset = load_dataset(cfg.dataset_path)
    train = training_split(dataset, cfg)
    n = len(train)
    if n < cfg.batch_size:
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds {n} training triplets")
    mcfg = cfg.model_config(dataset.config, len(dataset.vocab))

    if resume is None:
        state = init_model(mcfg, cfg.seed)
        opt = make_optimizer(state, cfg)
        start_epoch, step = 0, 0
    else:
        state = resume.model_state()
        opt = make_optimizer(state, cfg)
        for name in opt.m:
            opt.m[name][...] = resume.adam_m[name]
            opt.v[name][...] = resume.adam_v[name]
        opt.t = resume.adam_t
        start_epoch, step = resume.epoch, resume.step

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list[MetricsRecord] = []
    steps_per_epoch = n // cfg.batch_size
    ckpt = None
    for epoch in range(start_epoch, cfg.epochs):
        order = epoch_order(cfg.seed, epoch, n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            _, rec = train_step(state, opt, train.take(idx), cfg, epoch + 1, step + 1)
            step += 1
            metrics.append(rec)
        log.info("epoch %d mean l_total %.4f", epoch + 1, np.mean([r.l_total for r in metrics[-steps_per_epoch:]]))
        ckpt = _make_checkpoint(state, opt, cfg, dataset.config, epoch + 1, step)
        if out is not None:
            save_checkpoint(ckpt, out / f"epoch_{epoch + 1:02d}.tlvc")
            prior = []
            if resume is not None and (out / "metrics.csv").exists():
                prior = [r for r in read_metrics_csv(out / "metrics.csv") if r.step <= resume.step]
            write_metrics_csv(prior + metrics, out / "metrics.csv")
    if ckpt is None:
        ckpt = _make_checkpoint(state, opt, cfg, dataset.config, start_epoch, step)
    return ckpt, metrics
