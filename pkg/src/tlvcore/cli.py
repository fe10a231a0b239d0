"""Command-line entry point: ``tlvcore <command> [options]``.

Exit codes: 0 success, 1 validation error (bad flags, bad config), 2 runtime
failure (missing inputs, hash mismatch, divergence).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetFormatError,
    DegenerateInputError,
    DomainError,
    TLVCoreError,
    TrainingDivergedError,
)
from .numerics import finite_diff_check
from .synthdata import DatasetConfig, generate_dataset, load_dataset, save_dataset, sha256_file
from .trainer import (
    TrainConfig,
    epoch_means,
    load_checkpoint,
    read_metrics_csv,
    train_run,
)

log = logging.getLogger("tlvcore")

MANIFEST = "manifest.json"
ABLATION_KNOBS = ("no-sam", "no-dl", "no-uba", "lambda_dl", "n_uba", "d_shared")
ABLATION_CSV_HEADER = ["knob", "value", "seed", "accuracy", "mi_proxy", "final_l_total",
                       "baseline_accuracy", "baseline_mi_proxy", "baseline_final_l_total"]


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration


_SECTIONS = {"data": DatasetConfig, "train": TrainConfig}


def _coerce(field: dataclasses.Field, raw: str):
    default = field.default
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{field.name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"{field.name}: cannot parse {raw!r}") from exc
    return raw


def read_config_file(path) -> dict[str, dict]:
    """Parse ``[data]`` / ``[train]`` key=value sections; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        known = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(known[key], raw)
        out[section] = values
    return out


def resolve_config(section: str, args: argparse.Namespace):
    """Built-in defaults, then the config file, then command-line flags."""
    cls = _SECTIONS[section]
    values = dict(getattr(args, "_file_config", {}).get(section, {}))
    for f in dataclasses.fields(cls):
        flag = getattr(args, f"{section}__{f.name}", None)
        if flag is None:
            flag = getattr(args, f"shared__{f.name}", None)
        if flag is not None:
            values[f.name] = _coerce(f, flag)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return cls(**values)


def _add_overrides(p: argparse.ArgumentParser, *sections: str) -> None:
    # a field present in several sections gets one flag that sets all of them
    names = [[f.name for f in dataclasses.fields(_SECTIONS[s])] for s in sections]
    shared = set.intersection(*map(set, names)) if len(sections) > 1 else set()
    for section, fields in zip(sections, names):
        group = p.add_argument_group(f"[{section}] overrides")
        for name in fields:
            if name == "seed" or (name in shared and section != sections[0]):
                continue
            dest = f"shared__{name}" if name in shared else f"{section}__{name}"
            group.add_argument(f"--{name}", dest=dest, metavar="VALUE", default=None)


# ---------------------------------------------------------------------------
# manifests


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: list[str],
                   tables: dict[str, int] | None = None) -> dict:
    """One manifest per output directory; hashes let later readers detect tampering."""
    manifest = {
        "tool": "tlvcore",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": {name: sha256_file(out / name) for name in sorted(outputs)},
        "tables": dict(sorted((tables or {}).items())),
        "created": _now(),
    }
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST)
    return manifest


def read_manifest(directory: Path, verify: bool = True) -> dict:
    path = directory / MANIFEST
    if not path.is_file():
        raise DatasetFormatError(f"{directory}: no {MANIFEST}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: not valid JSON") from exc
    if verify:
        for name, digest in manifest.get("outputs", {}).items():
            target = directory / name
            if not target.is_file() or sha256_file(target) != digest:
                raise DatasetFormatError(f"{target}: content hash does not match manifest")
    return manifest


def _input_record(path: Path) -> dict:
    rec = {"path": str(path)}
    if path.is_file():
        rec["sha256"] = sha256_file(path)
    elif (path / MANIFEST).is_file():
        rec["manifest_sha256"] = sha256_file(path / MANIFEST)
    return rec


def _verified_checkpoint(path: Path):
    manifest_dir = path.parent
    if (manifest_dir / MANIFEST).is_file():
        manifest = read_manifest(manifest_dir, verify=False)
        digest = manifest.get("outputs", {}).get(path.name)
        if digest is not None and sha256_file(path) != digest:
            raise CheckpointError(f"{path}: content hash does not match manifest")
    return load_checkpoint(path)


def _prepare_out(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jobs(args) -> int:
    if os.environ.get("TLV_CORE_DETERMINISTIC") == "1":
        return 1
    return max(1, int(args.jobs or 1))


def _run_parallel(fn, items, jobs: int) -> list:
    """Map ``fn`` over ``items``; results come back in input order regardless of ``jobs``."""
    if jobs == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config("data", args)
    out = _prepare_out(args)
    ds = generate_dataset(cfg)
    save_dataset(ds, out, extra={"command": "gen-data", "created": _now(), "tables": {}})
    print(f"wrote {sum(len(b) for b in ds.splits.values())} triplets to {out}")
    return 0


def _dataset_for(args):
    if not args.data:
        raise ConfigurationError("--data DIR is required")
    return load_dataset(args.data)


def cmd_train(args) -> int:
    cfg = resolve_config("train", args)
    ds = _dataset_for(args)
    cfg = dataclasses.replace(cfg, dataset_path=str(args.data))
    out = _prepare_out(args)
    resume = _verified_checkpoint(Path(args.resume)) if args.resume else None
    ckpt, _ = train_run(cfg, ds, out_dir=out, resume=resume)
    outputs = sorted(p.name for p in out.glob("epoch_*.tlvc")) + ["metrics.csv"]
    records = read_metrics_csv(out / "metrics.csv")
    write_manifest(out, "train", {"train": cfg.to_dict()}, {"data": _input_record(Path(args.data))},
                   outputs, {"metrics.csv": len(records)})
    print(f"trained {ckpt.epoch} epochs ({ckpt.step} steps); final checkpoint {out / f'epoch_{ckpt.epoch:02d}.tlvc'}")
    return 0


def cmd_eval_rss(args) -> int:
    from .rss_eval import (
        PROTOCOLS,
        eval_robustness,
        eval_synergy,
        theory_estimates,
        write_probe_csv,
        write_theory_csv,
    )

    if not args.checkpoint:
        raise ConfigurationError("--checkpoint PATH is required")
    protocols = [p for p in args.protocols.split(",") if p]
    for p in protocols:
        if p not in PROTOCOLS:
            raise ConfigurationError(f"unknown protocol {p!r}")
    ds = _dataset_for(args)
    out = _prepare_out(args)
    ckpt = _verified_checkpoint(Path(args.checkpoint))
    seed = args.seed if args.seed is not None else 0
    results = []
    for p in protocols:
        results.extend(eval_robustness(ckpt, ds, p, seed=seed))
    if args.synergy:
        results.extend(eval_synergy(ckpt, ds, seed=seed))
    write_probe_csv(results, out / "rss.csv")
    outputs, tables = ["rss.csv"], {"rss.csv": len(results)}
    if args.theory:
        tcfg = ckpt.train_config()
        theory = theory_estimates(ckpt.model_state(), ds, lambda_dl=tcfg.lambda_dl, seed=seed)
        write_theory_csv(theory, out / "theory.csv")
        outputs.append("theory.csv")
        tables["theory.csv"] = len(theory.rows())
    write_manifest(out, "eval-rss", {"protocols": protocols, "synergy": args.synergy, "seed": seed},
                   {"checkpoint": _input_record(Path(args.checkpoint)), "data": _input_record(Path(args.data))},
                   outputs, tables)
    for r in results:
        print(f"{r.protocol:6s} {r.task:10s} {r.encoder:5s} sensor={r.sensor:<3d} acc={r.accuracy:.4f}")
    return 0


def _train_final(job):
    cfg, data_dir = job
    ds = load_dataset(data_dir)
    return train_run(cfg, ds)[0]


def cmd_sweep_batch(args) -> int:
    from .rss_eval import eval_stability

    cfg = resolve_config("train", args)
    ds = _dataset_for(args)
    out = _prepare_out(args)
    sizes = _int_list(args.sizes)
    jobs = _jobs(args)
    runner = lambda cfgs: _run_parallel(_train_final, [(c, args.data) for c in cfgs], jobs)  # noqa: E731
    res = eval_stability(cfg, ds, sizes, runner=runner)
    rows = [[b, repr(a)] for b, a in zip(res.batch_sizes, res.accuracies)]
    _write_csv(out / "stability.csv", ["batch_size", "accuracy"], rows)
    write_manifest(out, "sweep-batch", {"train": cfg.to_dict(), "sizes": list(sizes)},
                   {"data": _input_record(Path(args.data))}, ["stability.csv"], {"stability.csv": len(rows)})
    for b, a in zip(res.batch_sizes, res.accuracies):
        print(f"batch {b:3d} accuracy {a:.4f}")
    print(f"spread {res.spread:.4f}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from exc


def ablation_configs(cfg: TrainConfig, knob: str, values: list[str]) -> list[tuple[str, TrainConfig]]:
    """(label, config) pairs for one ablation axis; removal knobs yield a single variant."""
    if knob not in ABLATION_KNOBS:
        raise ConfigurationError(f"unknown knob {knob!r}; expected one of {ABLATION_KNOBS}")
    if knob == "no-sam":
        return [("off", dataclasses.replace(cfg, use_sam=False))]
    if knob == "no-dl":
        return [("off", dataclasses.replace(cfg, lambda_dl=0.0))]
    if knob == "no-uba":
        return [("off", dataclasses.replace(cfg, uba_levels=0))]
    if not values:
        raise ConfigurationError(f"--values is required for knob {knob}")
    field = {"lambda_dl": "lambda_dl", "n_uba": "uba_levels", "d_shared": "uba_rank"}[knob]
    cast = float if knob == "lambda_dl" else int
    out = []
    for v in values:
        try:
            out.append((v, dataclasses.replace(cfg, **{field: cast(v)})))
        except ValueError as exc:
            raise ConfigurationError(f"bad value {v!r} for knob {knob}") from exc
    return out


def _score(job) -> tuple[float, float, float]:
    from .rss_eval import held_out_sensor_mi, material_accuracy

    cfg, data_dir = job
    ds = load_dataset(data_dir)
    ckpt, metrics = train_run(cfg, ds)
    acc = material_accuracy(ckpt, ds, seed=cfg.seed)
    try:
        mi = held_out_sensor_mi(ckpt, ds, seed=cfg.seed).mi_proxy
    except (DomainError, DegenerateInputError):
        # single sensor or too few held-out samples for the MI probe
        mi = float("nan")
    return acc, mi, epoch_means(metrics)[-1]


def cmd_ablate(args) -> int:
    cfg = resolve_config("train", args)
    ds = _dataset_for(args)
    values = [v.strip() for v in (args.values or "").split(",") if v.strip()]
    variants = ablation_configs(cfg, args.knob, values)
    out = _prepare_out(args)
    for _, c in variants:
        c.model_config(ds.config, len(ds.vocab))
    jobs = [(cfg, args.data)] + [(c, args.data) for _, c in variants]
    scores = _run_parallel(_score, jobs, _jobs(args))
    base = scores[0]
    rows = [[args.knob, label, cfg.seed, *map(repr, s), *map(repr, base)]
            for (label, _), s in zip(variants, scores[1:])]
    _write_csv(out / "ablation.csv", ABLATION_CSV_HEADER, rows)
    write_manifest(out, "ablate", {"train": cfg.to_dict(), "knob": args.knob, "values": values},
                   {"data": _input_record(Path(args.data))}, ["ablation.csv"], {"ablation.csv": len(rows)})
    for row in rows:
        print(f"{row[0]}={row[1]}: accuracy {float(row[3]):.4f} (baseline {float(row[6]):.4f}), "
              f"mi {float(row[4]):.4f} (baseline {float(row[7]):.4f})")
    return 0


def grad_check(cfg: TrainConfig, dataset_cfg: DatasetConfig, eps: float = 1e-5, coords: int = 16) -> float:
    """Finite-difference check of the full objective on a two-sample batch."""
    from .model import batch_loss, init_model

    ds = generate_dataset(dataset_cfg)
    batch = ds.splits["train"].take(np.arange(2))
    state = init_model(cfg.model_config(dataset_cfg, len(ds.vocab)), cfg.seed)
    # up projections start at zero; perturb them so every path carries gradient
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xFD]))
    for name, p in state.params.items():
        if ".up." in name:
            p.data[...] = rng.normal(0.0, 0.02, size=p.data.shape)

    def loss_fn(s):
        return batch_loss(s, batch, cfg.lambda_dl, reverse=False)[0]

    return finite_diff_check(loss_fn, state, eps=eps, max_coords_per_param=coords, seed=cfg.seed)


def cmd_grad_check(args) -> int:
    cfg = resolve_config("train", args)
    dcfg = resolve_config("data", args)
    err = grad_check(cfg, dcfg, eps=args.eps, coords=args.coords)
    print(f"max relative error {err:.3e}")
    if args.out:
        out = _prepare_out(args)
        _write_csv(out / "grad_check.csv", ["metric", "value"], [["max_relative_error", repr(err)]])
        write_manifest(out, "grad-check", {"train": cfg.to_dict(), "data": dcfg.to_dict()}, {},
                       ["grad_check.csv"], {"grad_check.csv": 1})
    return 0 if err < 1e-4 else 2


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_report(root: Path) -> tuple[str, list[list[str]]]:
    """Summary text plus convergence rows for every manifest under ``root``."""
    if not root.is_dir():
        raise DatasetFormatError(f"{root}: not a directory")
    dirs = sorted({p.parent for p in root.rglob(MANIFEST)}, key=lambda p: p.relative_to(root).as_posix())
    if not dirs:
        raise DatasetFormatError(f"{root}: no manifests found")
    lines: list[str] = []
    convergence: list[list[str]] = []
    for d in dirs:
        manifest = read_manifest(d)
        if manifest.get("format") == "TLVD":
            load_dataset(d)
        rel = d.relative_to(root).as_posix() or "."
        command = manifest.get("command", "unknown")
        lines.append(f"== {rel} ({command})")
        for table in sorted(manifest.get("tables", {})):
            rows = _read_rows(d / table)
            if table == "metrics.csv":
                recs = read_metrics_csv(d / table)
                means = epoch_means(recs)
                for e, v in enumerate(means, start=1):
                    convergence.append([rel, str(e), repr(v)])
                for r in recs:
                    lines.append(f"  step {r.step:5d} epoch {r.epoch:3d} l_total {r.l_total:.6f}")
                continue
            if table == "rss.csv":
                rows.sort(key=lambda r: (r["protocol"], r["task"], int(r["sensor"]), r["encoder"]))
            keys = list(rows[0].keys()) if rows else []
            for r in rows:
                lines.append("  " + " ".join(f"{k}={r[k]}" for k in keys))
    return "\n".join(lines) + "\n", convergence


def cmd_report(args) -> int:
    text, convergence = build_report(Path(args.dir))
    sys.stdout.write(text)
    if args.out:
        out = _prepare_out(args)
        (out / "summary.txt").write_text(text)
        _write_csv(out / "convergence.csv", ["run", "epoch", "mean_l_total"], convergence)
        write_manifest(out, "report", {"dir": str(args.dir)}, {}, ["summary.txt", "convergence.csv"], {})
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config with [data]/[train] sections")
    common.add_argument("--seed", type=int, metavar="U64", default=None)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--jobs", type=int, metavar="N", default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tlvcore", description="Tri-modal tactile representation toolkit.")
    parser.add_argument("--version", action="version", version=f"tlvcore {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic triplet dataset")
    _add_overrides(p, "data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--resume", metavar="CKPT")
    _add_overrides(p, "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-rss", parents=[common], help="probe a checkpoint under the sensor protocols")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--protocols", default="intra", help="comma-separated subset of intra,cross,multi")
    p.add_argument("--synergy", action="store_true", help="add modal cross-evaluation probes")
    p.add_argument("--theory", action="store_true", help="add MI proxy, gradient variance and kappa")
    p.set_defaults(func=cmd_eval_rss)

    p = sub.add_parser("sweep-batch", parents=[common], help="batch-size stability sweep")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--sizes", default="8,16,32,64")
    _add_overrides(p, "train")
    p.set_defaults(func=cmd_sweep_batch)

    p = sub.add_parser("ablate", parents=[common], help="paired ablation runs along one knob")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--knob", required=True, choices=ABLATION_KNOBS)
    p.add_argument("--values", default="")
    _add_overrides(p, "train")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the objective")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=16, help="sampled coordinates per parameter")
    _add_overrides(p, "train", "data")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", parents=[common], help="summarize every manifest under a directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args._file_config = read_config_file(args.config) if args.config else {}
        return args.func(args)
    except (ConfigurationError, DomainError) as exc:
        print(f"tlvcore: validation error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetFormatError, TrainingDivergedError, OSError) as exc:
        print(f"tlvcore: {exc}", file=sys.stderr)
        return 2
    except TLVCoreError as exc:
        print(f"tlvcore: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
