"""Robustness, synergy and stability evaluation plus the theory-side estimators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DegenerateInputError, DomainError, ShapeError
from .model import ModelState, batch_loss, encode_modality
from .synthdata import TASKS, Batch, Dataset
from .trainer import Checkpoint, TrainConfig, train_run

PROTOCOLS = ("intra", "cross", "multi")
STABILITY_SIZES = (8, 16, 32, 64)
PROBE_CSV_HEADER = ["protocol", "task", "encoder", "sensor", "accuracy", "n_test", "seed"]
THEORY_CSV_HEADER = ["metric", "level", "value"]


@dataclass(frozen=True)
class ProbeResult:
    task: str
    encoder: str
    correct: int
    n_test: int
    seed: int
    protocol: str = ""
    sensor: int = -1

    @property
    def accuracy(self) -> float:
        return self.correct / self.n_test

    def row(self) -> list[str]:
        return [self.protocol, self.task, self.encoder, str(self.sensor),
                repr(self.accuracy), str(self.n_test), str(self.seed)]


@dataclass(frozen=True)
class MiEstimate:
    mi_proxy: float
    log_s: float
    held_out_ce: float
    imbalanced: bool


@dataclass(frozen=True)
class StabilityResult:
    batch_sizes: tuple
    accuracies: tuple

    @property
    def spread(self) -> float:
        return float(max(self.accuracies) - min(self.accuracies))


@dataclass
class TheoryEstimates:
    """Quantities from the convergence analysis that can be measured at toy scale.

    The PL and Lipschitz constants, the transfer coefficient and the
    stability constants have no estimator here.
    """

    mi_proxy: float
    grad_variance: float
    kappa_sh: list[float]
    convergence_csv: str = ""

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("mi_proxy", "", self.mi_proxy), ("grad_variance", "", self.grad_variance)]
        out += [("kappa_sh", str(i), k) for i, k in enumerate(self.kappa_sh)]
        return out


@dataclass
class RssReport:
    robustness: list[ProbeResult] = field(default_factory=list)
    synergy: list[ProbeResult] = field(default_factory=list)
    stability: StabilityResult | None = None
    theory: TheoryEstimates | None = None


# ---------------------------------------------------------------------------
# linear probe


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def _fit_softmax(x: np.ndarray, y: np.ndarray, k: int, epochs: int, seed: int, lr: float,
                 weight_decay: float, steps_per_epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch AdamW on softmax cross-entropy; returns (W, b)."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x9B0BE]))
    n, d = x.shape
    w = rng.normal(0.0, 0.01, size=(d, k))
    b = np.zeros(k)
    onehot = np.eye(k)[y]
    mw, vw, mb, vb = (np.zeros_like(w), np.zeros_like(w), np.zeros_like(b), np.zeros_like(b))
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs * steps_per_epoch + 1):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        gw, gb = x.T @ g, g.sum(axis=0)
        for prm, grad, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            prm *= 1 - lr * weight_decay
            prm -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w, b


def _check_probe_inputs(x, y, name):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
        raise ShapeError(f"{name}: need (N, d) embeddings and N labels")
    if len(y) == 0:
        raise DegenerateInputError(f"{name}: empty split")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name}: non-finite embeddings")
    if y.min() < 0:
        raise DomainError(f"{name}: labels must be non-negative class indices")
    return x, y.astype(np.int64)


def linear_probe(
    train_x, train_y, test_x, test_y,
    epochs: int = 50, seed: int = 0, task: str = "", encoder: str = "",
    lr: float = 0.05, weight_decay: float = 1e-4, steps_per_epoch: int = 10,
) -> ProbeResult:
    """Linear softmax classifier on frozen embeddings, scored on the test split.

    Features are standardized with train-split statistics and the fit is
    full-batch, so duplicating every (embedding, label) pair leaves the
    result unchanged.
    """
    train_x, train_y = _check_probe_inputs(train_x, train_y, "train")
    test_x, test_y = _check_probe_inputs(test_x, test_y, "test")
    if len(np.unique(train_y)) < 2:
        raise DegenerateInputError("probe task has a single class in the train split")
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    k = int(max(train_y.max(), test_y.max())) + 1
    xtr, xte = _standardize(train_x, test_x)
    w, b = _fit_softmax(xtr, train_y, k, epochs, seed, lr, weight_decay, steps_per_epoch)
    pred = np.argmax(xte @ w + b, axis=1)
    return ProbeResult(task, encoder, int((pred == test_y).sum()), len(test_y), seed)


# ---------------------------------------------------------------------------
# embeddings


def _as_state(model) -> ModelState:
    if isinstance(model, Checkpoint):
        return model.model_state()
    if isinstance(model, ModelState):
        return model
    raise ConfigurationError(f"expected a Checkpoint or ModelState, got {type(model).__name__}")


def embed(state: ModelState, modality: str, inputs: np.ndarray, encoder: str | None = None,
          chunk: int = 256) -> np.ndarray:
    """Pooled encoder features for ``inputs`` without recording a graph.

    ``encoder`` selects the branch that consumes the inputs; it defaults to
    the branch of ``modality``.
    """
    enc = encoder or modality
    ecfg = state.config.encoders[enc]
    if ecfg.is_image != (inputs.ndim == 4):
        raise ConfigurationError(f"inputs of shape {inputs.shape} cannot feed encoder {enc}")
    if ecfg.is_image and tuple(inputs.shape[1:]) != (ecfg.image_size, ecfg.image_size, ecfg.channels):
        raise ConfigurationError(f"grid shape {inputs.shape[1:]} does not match encoder {enc}")
    out = []
    with nx.no_grad():
        for i in range(0, len(inputs), chunk):
            out.append(encode_modality(state, modality, inputs[i:i + chunk], encoder=enc).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, state.config.dim))


def _tactile_features(state: ModelState, batch: Batch) -> np.ndarray:
    return embed(state, "T", batch.tactile.astype(np.float64))


def _sensors_in(batch: Batch) -> set[int]:
    return set(np.unique(batch.sensors).tolist())


# ---------------------------------------------------------------------------
# robustness


def _probe_split(state, dataset: Dataset, sensor: int, tasks, seed, epochs, protocol):
    tr = dataset.splits["train"].where(dataset.splits["train"].sensors == sensor)
    te = dataset.splits["test"].where(dataset.splits["test"].sensors == sensor)
    ftr, fte = _tactile_features(state, tr), _tactile_features(state, te)
    out = []
    for task in tasks:
        r = linear_probe(ftr, tr.task_labels(task), fte, te.task_labels(task),
                         epochs=epochs, seed=seed, task=task, encoder="T")
        out.append(replace(r, protocol=protocol, sensor=sensor))
    return out


def eval_robustness(
    model,
    dataset: Dataset,
    protocol: str,
    train_sensors: Sequence[int] | None = None,
    target_sensors: Sequence[int] | None = None,
    tasks: Sequence[str] = TASKS,
    seed: int = 0,
    epochs: int = 50,
) -> list[ProbeResult]:
    """Tactile linear probes under one sensor protocol.

    intra: probe fit and scored on each sensor the model was trained on.
    cross: the same probe procedure on sensors the model never saw.
    multi: per-sensor probes for a model trained on several sensors.

    ``train_sensors`` defaults to the training sensors recorded in a
    checkpoint (all sensors when none were recorded).
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    state = _as_state(model)
    present = _sensors_in(dataset.splits["train"]) & _sensors_in(dataset.splits["test"])
    if train_sensors is None:
        recorded = model.train_config().train_sensors if isinstance(model, Checkpoint) else ()
        train_sensors = recorded or sorted(present)
    train_sensors = sorted(set(int(s) for s in train_sensors))
    if protocol == "intra":
        targets = train_sensors if target_sensors is None else target_sensors
        if set(targets) - set(train_sensors):
            raise ConfigurationError("intra protocol targets must be training sensors")
    elif protocol == "cross":
        targets = sorted(present - set(train_sensors)) if target_sensors is None else target_sensors
        if set(targets) & set(train_sensors):
            raise ConfigurationError("cross protocol targets must be unseen sensors")
        if not targets:
            raise ConfigurationError("cross protocol needs a sensor the model was not trained on")
    else:
        if len(train_sensors) < 2:
            raise ConfigurationError("multi protocol needs a model trained on at least two sensors")
        targets = sorted(present) if target_sensors is None else target_sensors
    targets = sorted(set(int(s) for s in targets))
    missing = set(targets) - present
    if missing:
        raise ConfigurationError(f"sensors {sorted(missing)} absent from the dataset")
    results = []
    for s in targets:
        results.extend(_probe_split(state, dataset, s, tasks, seed, epochs, protocol))
    return results


# ---------------------------------------------------------------------------
# synergy

TACTILE_TASKS = TASKS
VISION_TASKS = ("material", "roughness")


def eval_synergy(
    model,
    dataset: Dataset,
    tactile_tasks: Sequence[str] = TACTILE_TASKS,
    vision_tasks: Sequence[str] = VISION_TASKS,
    seed: int = 0,
    epochs: int = 50,
    include_self: bool = True,
) -> list[ProbeResult]:
    """Modal cross-evaluation: each image encoder probed on the other modality's grids.

    Encoder labels read ``<encoder><-<input modality>``, e.g. ``V<-T`` is
    the vision branch fed tactile grids. With ``include_self`` the matching
    ``T<-T`` and ``V<-V`` probes are added for comparison.
    """
    state = _as_state(model)
    enc = state.config.encoders
    if not (enc["T"].is_image and enc["V"].is_image):
        raise ConfigurationError("synergy evaluation needs image encoders for T and V")
    tr, te = dataset.splits["train"], dataset.splits["test"]
    grids = {"T": (tr.tactile, te.tactile), "V": (tr.vision, te.vision)}
    plan = [("V", "T", tactile_tasks), ("T", "V", vision_tasks)]
    if include_self:
        plan += [("T", "T", tactile_tasks), ("V", "V", vision_tasks)]
    results = []
    for encoder, source, tasks in plan:
        if not tasks:
            continue
        xtr, xte = grids[source]
        ftr = embed(state, encoder, xtr.astype(np.float64))
        fte = embed(state, encoder, xte.astype(np.float64))
        for task in tasks:
            r = linear_probe(ftr, tr.task_labels(task), fte, te.task_labels(task),
                             epochs=epochs, seed=seed, task=task, encoder=f"{encoder}<-{source}")
            results.append(replace(r, protocol="synergy"))
    return results


# ---------------------------------------------------------------------------
# stability


def eval_stability(
    cfg: TrainConfig,
    dataset: Dataset,
    batch_sizes: Sequence[int] = STABILITY_SIZES,
    probe_seed: int = 0,
    epochs: int = 50,
    runner=None,
) -> StabilityResult:
    """Train once per batch size with everything else fixed; probe material accuracy.

    ``runner`` maps a list of TrainConfigs to final checkpoints and defaults
    to running them one after another.
    """
    sizes = tuple(int(b) for b in batch_sizes)
    if not sizes:
        raise ConfigurationError("at least one batch size is required")
    bad = [b for b in sizes if b not in STABILITY_SIZES]
    if bad:
        raise ConfigurationError(f"batch sizes {bad} not in {STABILITY_SIZES}")
    n_train = len(dataset.splits["train"])
    if max(sizes) > n_train:
        raise ConfigurationError(f"batch size {max(sizes)} exceeds {n_train} training triplets")
    cfgs = [replace(cfg, batch_size=b) for b in sizes]
    if runner is None:
        ckpts = [train_run(c, dataset)[0] for c in cfgs]
    else:
        ckpts = runner(cfgs)
    accs = tuple(material_accuracy(ck, dataset, seed=probe_seed, epochs=epochs) for ck in ckpts)
    return StabilityResult(sizes, accs)


# ---------------------------------------------------------------------------
# theory estimators


def _held_out_split(sensor_ids: np.ndarray, seed: int, frac: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x3A1]))
    train, test = [], []
    for s in np.unique(sensor_ids):
        idx = np.flatnonzero(sensor_ids == s)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(frac * len(idx))))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def estimate_sensor_mi(embeddings, sensor_ids, seed: int = 0, epochs: int = 50,
                       min_per_sensor: int = 50) -> MiEstimate:
    """Variational lower bound on I(h; s): ln S minus a probe's held-out cross-entropy.

    A linear sensor classifier is fit on 70% of each sensor's samples and
    its mean cross-entropy (nats) on the rest is subtracted from ln S. The
    result is clamped to [0, ln S].
    """
    x = np.asarray(embeddings, dtype=np.float64)
    s = np.asarray(sensor_ids, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(s):
        raise ShapeError("need (N, d) embeddings and N sensor ids")
    sensors, counts = np.unique(s, return_counts=True)
    if len(sensors) < 2:
        raise DegenerateInputError("mutual information needs at least two sensors")
    if counts.min() < min_per_sensor:
        raise DomainError(f"need >= {min_per_sensor} samples per sensor, got {counts.min()}")
    remap = np.searchsorted(sensors, s)
    k = len(sensors)
    tr, te = _held_out_split(remap, seed)
    xtr, xte = _standardize(x[tr], x[te])
    w, b = _fit_softmax(xtr, remap[tr], k, epochs, seed, 0.05, 1e-4, 10)
    logits = xte @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    ce = float(-logp[np.arange(len(te)), remap[te]].mean())
    log_s = math.log(k)
    mi = min(max(log_s - ce, 0.0), log_s)
    return MiEstimate(mi, log_s, ce, bool(counts.max() > 10 * counts.min()))


def estimate_grad_variance(state: ModelState, data: Batch, n_trials: int, batch_size: int,
                           lambda_dl: float = 0.1, seed: int = 0) -> float:
    """Per-coordinate sample variance of the stochastic training gradient, averaged.

    Each trial draws ``batch_size`` distinct indices (sorted, so a batch
    covering all of ``data`` is identical across trials).
    """
    if n_trials < 2:
        raise DomainError("n_trials must be >= 2")
    n = len(data)
    if not 1 <= batch_size <= n:
        raise ConfigurationError(f"batch_size must lie in [1, {n}]")
    params = state.trainable_parameters()
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x6A2]))
    grads = []
    for _ in range(n_trials):
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        state.zero_grad()
        loss, _ = batch_loss(state, data.take(idx), lambda_dl)
        loss.backward()
        grads.append(np.concatenate([p.grad.ravel() for p in params]))
    state.zero_grad()
    g = np.stack(grads)
    return float(g.var(axis=0, ddof=1).mean())


def _jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(float((np.triu(a, 1) ** 2).sum()))
        if off <= tol * max(1.0, float(np.abs(np.diag(a)).max())):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - sn * rq
                a[q, :] = sn * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - sn * cq
                a[:, q] = sn * cp + c * cq
    return np.sort(np.diag(a))


def condition_number(w) -> float:
    """sigma_max / sigma_min from Jacobi eigenvalues of W^T W; +inf when rank-deficient."""
    w = np.asarray(w.data if isinstance(w, nx.Tensor) else w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {w.shape}")
    if not np.any(w):
        raise DegenerateInputError("condition number of the zero matrix is undefined")
    ev = _jacobi_eigenvalues(w.T @ w)
    lo, hi = ev[0], ev[-1]
    if lo <= 10.0 * w.shape[0] * np.finfo(np.float64).eps * hi:
        return math.inf
    return max(1.0, math.sqrt(hi / lo))


def theory_estimates(state: ModelState, dataset: Dataset, lambda_dl: float = 0.1, n_trials: int = 20,
                     batch_size: int = 64, seed: int = 0, convergence_csv: str = "") -> TheoryEstimates:
    mi = held_out_sensor_mi(state, dataset, seed=seed)
    train = dataset.splits["train"]
    var = estimate_grad_variance(state, train, n_trials, min(batch_size, len(train)), lambda_dl, seed)
    kappas = [condition_number(state.params[f"uba.{i}.shared"]) for i in range(state.config.uba_levels)]
    return TheoryEstimates(mi.mi_proxy, var, kappas, convergence_csv)


def _concat(a: Batch, b: Batch) -> Batch:
    return Batch(*(np.concatenate([getattr(a, f), getattr(b, f)]) for f in a.__dataclass_fields__))


def material_accuracy(model, dataset: Dataset, seed: int = 0, epochs: int = 50) -> float:
    """Material probe on tactile embeddings, fit on train and scored on test."""
    state = _as_state(model)
    tr, te = dataset.splits["train"], dataset.splits["test"]
    return linear_probe(_tactile_features(state, tr), tr.labels, _tactile_features(state, te), te.labels,
                        epochs=epochs, seed=seed, task="material", encoder="T").accuracy


def held_out_sensor_mi(model, dataset: Dataset, seed: int = 0, epochs: int = 50) -> MiEstimate:
    """Sensor MI proxy on tactile embeddings of the val and test splits."""
    held = _concat(dataset.splits["val"], dataset.splits["test"])
    return estimate_sensor_mi(_tactile_features(_as_state(model), held), held.sensors, seed=seed, epochs=epochs)


# ---------------------------------------------------------------------------
# CSV output


def sort_results(results: Sequence[ProbeResult]) -> list[ProbeResult]:
    return sorted(results, key=lambda r: (r.protocol, r.task, r.sensor, r.encoder, r.seed))


def write_probe_csv(results: Sequence[ProbeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROBE_CSV_HEADER)
        for r in sort_results(results):
            w.writerow(r.row())


def write_theory_csv(theory: TheoryEstimates, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(THEORY_CSV_HEADER)
        for metric, level, value in theory.rows():
            w.writerow([metric, level, repr(float(value))])
