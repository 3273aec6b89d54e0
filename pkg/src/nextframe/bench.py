"""Config-driven experiment runner.

A config is flat ``key = value`` text. Keys before the first ``[variant]``
header are global: data source, output directory, sweep range, plus any
model field, which then serves as the default for every variant. Each
``[variant]`` block lists model fields for one run::

    manifest = frames.txt        # or: synthetic = moving_square
    epochs = 100
    timesteps = 5..10

    [variant]
    architecture = conv_lstm
    resolution = 64
    loss_kind = mae

Every emitted number can be recomputed from other emitted files, and
``check_run`` does exactly that.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
import math
import os
import re
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SYNTH_KINDS,
    FrameSequence,
    chrono_split,
    frame_to_uint8,
    ingest_frames,
    make_windows,
    preprocess,
    synth_sequence,
    write_pgm,
)
from .metrics import evaluate
from .model import ConfigError, ModelConfig, build_model
from .tensor import TensorFormatError, read_tensor, write_tensor
from .training import TrainingDiverged, fit, load_checkpoint, parse_key_values, save_checkpoint

log = logging.getLogger("nextframe.bench")

OUTPUT_ENV = "NEXTFRAME_OUTPUT_DIR"
DETERMINISTIC_ENV = "NEXTFRAME_DETERMINISTIC"

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
GLOBAL_KEYS = {"output_dir", "manifest", "synthetic", "frames", "synthetic_size", "train_fraction", "timesteps"}
SUMMARY_COLUMNS = ["variant", "architecture", "resolution", "loss_kind", "timestep", "epochs",
                   "train_loss", "valid_loss", "ssim", "status"]
TIMING_COLUMNS = ["variant", "epochs", "train_time_s", "mean_epoch_s"]
CURVE_COLUMNS = ["epoch", "train_loss", "valid_loss"]
STATS_COLUMNS = ["epoch", "runs", "train_mean", "train_std", "valid_mean", "valid_std"]
FINAL_COLUMNS = ["variant", "architecture", "timestep", "final_train_loss", "final_valid_loss", "status"]
FINAL_EPOCHS = 10
MANIFEST_NAME = "run_manifest.txt"
NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


# ------------------------------------------------------------------ config


@dataclass
class DataSource:
    manifest: Path | None = None
    synthetic: str | None = None
    frames: int = 30
    synthetic_size: int | None = None
    seed: int = 0
    _raw: FrameSequence | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def load(self, resolution: int) -> FrameSequence:
        """Preprocessed frames at ``resolution``, computed once per resolution."""
        if resolution not in self._cache:
            if self.manifest is not None:
                if self._raw is None:
                    self._raw = ingest_frames(self.manifest)
                seq = preprocess(self._raw, resolution)
            else:
                size = self.synthetic_size or resolution
                seq = preprocess(synth_sequence(self.synthetic, self.frames, size, self.seed), resolution)
            self._cache[resolution] = seq
        return self._cache[resolution]


@dataclass
class ExperimentConfig:
    source: DataSource
    variants: list[ModelConfig]
    names: list[str]
    timesteps: tuple[int, ...] = tuple(range(5, 11))
    output_dir: Path = Path("runs")
    train_fraction: float = 0.8
    text: str = ""


def _parse_timesteps(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if ".." in raw:
        lo, hi = raw.split("..", 1)
        values = tuple(range(int(lo), int(hi) + 1))
    else:
        values = tuple(int(v) for v in raw.split(",") if v.strip())
    if not values:
        raise ValueError("empty timestep range")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError("timesteps must be strictly increasing")
    if values[0] < 1:
        raise ValueError("timesteps must be positive")
    return values


def parse_experiment(text: str, base_dir=".") -> ExperimentConfig:
    base_dir = Path(base_dir)
    globals_: dict[str, tuple[int, str]] = {}
    blocks: list[dict[str, tuple[int, str]]] = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line != "[variant]":
                raise ConfigError(f"line {n}: unknown section {line}", line)
            blocks.append({})
            continue
        where = f"variant[{len(blocks) - 1}]" if blocks else "global"
        try:
            key, value = (part.strip() for part in parse_key_values(line).popitem())
        except ConfigError as exc:
            raise ConfigError(f"line {n}: {where}: {exc}", where) from exc
        if blocks:
            if key not in MODEL_KEYS and key != "name":
                raise ConfigError(f"line {n}: {where}.{key}: unknown variant key", f"{where}.{key}")
            blocks[-1][key] = (n, value)
        else:
            if key not in MODEL_KEYS and key not in GLOBAL_KEYS:
                raise ConfigError(f"line {n}: {key}: unknown key", key)
            globals_[key] = (n, value)

    def global_value(key, convert, default):
        if key not in globals_:
            return default
        n, raw = globals_[key]
        try:
            return convert(raw)
        except ValueError as exc:
            raise ConfigError(f"line {n}: {key}: {exc}", key) from exc

    if not blocks:
        raise ConfigError("at least one [variant] block is required", "variant")
    if "manifest" in globals_ and "synthetic" in globals_:
        raise ConfigError("manifest and synthetic are mutually exclusive", "manifest")
    seed = global_value("seed", int, 0)
    manifest = global_value("manifest", lambda raw: base_dir / raw, None)
    source = DataSource(
        manifest=manifest,
        synthetic=None if manifest is not None else global_value("synthetic", str, "moving_square"),
        frames=global_value("frames", int, 30),
        synthetic_size=global_value("synthetic_size", int, None),
        seed=seed,
    )
    if source.synthetic is not None and source.synthetic not in SYNTH_KINDS:
        raise ConfigError(f"synthetic: unknown kind {source.synthetic!r}; expected one of {SYNTH_KINDS}", "synthetic")
    if source.frames < 1:
        raise ConfigError("frames must be positive", "frames")
    train_fraction = global_value("train_fraction", float, 0.8)
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)", "train_fraction")

    defaults = {k: v for k, (_, v) in globals_.items() if k in MODEL_KEYS}
    variants, names = [], []
    for i, block in enumerate(blocks):
        path = f"variant[{i}]"
        merged = dict(defaults)
        merged.update({k: v for k, (_, v) in block.items() if k != "name"})
        try:
            cfg = ModelConfig.from_strings(merged)
        except ConfigError as exc:
            where = f"{path}.{exc.field}" if exc.field else path
            line = block.get(exc.field, globals_.get(exc.field, (None,)))[0] if exc.field else None
            prefix = f"line {line}: " if line else ""
            raise ConfigError(f"{prefix}{where}: {exc}", where) from exc
        name = block["name"][1] if "name" in block else (
            f"{i:02d}_{cfg.architecture}_r{cfg.resolution}_{cfg.loss_kind}_t{cfg.timestep}")
        if not NAME_RE.match(name) or name in names:
            raise ConfigError(f"{path}.name: {name!r} is not a unique file-safe name", f"{path}.name")
        variants.append(cfg)
        names.append(name)
    return ExperimentConfig(
        source=source,
        variants=variants,
        names=names,
        timesteps=global_value("timesteps", _parse_timesteps, tuple(range(5, 11))),
        output_dir=global_value("output_dir", lambda raw: base_dir / raw, base_dir / "runs"),
        train_fraction=train_fraction,
        text=text,
    )


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_experiment(text, path.parent)


def resolve_output(exp: ExperimentConfig, output_dir=None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return exp.output_dir


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS/OpenMP pools to one thread so reductions are order-stable."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in ("1", "true", "yes", "on")


# -------------------------------------------------------------- csv helpers


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_rows(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, exp: ExperimentConfig, kind: str, failed: int) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    lines = [
        "# nextframe run manifest",
        f"kind = {kind}",
        f"nextframe_version = {__version__}",
        f"seed = {exp.source.seed}",
        f"variants = {len(exp.variants)}",
        f"failed = {failed}",
        "config = config.txt",
        "[files]",
    ]
    lines += [f"{_sha256(p)}  {p.relative_to(out).as_posix()}" for p in files]
    path = out / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _prepare(exp: ExperimentConfig, cfgs) -> None:
    """Surface data problems for every run before any training starts."""
    for cfg in cfgs:
        seq = exp.source.load(cfg.resolution)
        chrono_split(make_windows(seq, cfg.timestep), exp.train_fraction)


# -------------------------------------------------------------------- runs


@dataclass
class VariantOutcome:
    row: dict
    timing: dict | None
    curve: list[tuple[int, float, float]]
    error: str | None = None


def _train_variant(exp: ExperimentConfig, cfg: ModelConfig, name: str, vdir: Path, artifacts: bool) -> VariantOutcome:
    vdir.mkdir(parents=True, exist_ok=True)
    seq = exp.source.load(cfg.resolution)
    train, valid = chrono_split(make_windows(seq, cfg.timestep), exp.train_fraction)
    row = {"variant": name, "architecture": cfg.architecture, "resolution": cfg.resolution,
           "loss_kind": cfg.loss_kind, "timestep": cfg.timestep, "epochs": cfg.epochs}
    curve: list[tuple[int, float, float]] = []
    m = build_model(cfg)
    try:
        report = fit(m, train, valid, cfg, callback=lambda e, t, v: curve.append((e, t, v)))
    except TrainingDiverged as exc:
        log.warning("%s failed: %s", name, exc)
        write_rows(vdir / "loss_curve.csv", CURVE_COLUMNS, [dict(zip(CURVE_COLUMNS, c)) for c in curve])
        row.update(train_loss=float(exc.value), status=f"failed: {exc}")
        return VariantOutcome(row, None, curve, str(exc))
    except Exception as exc:  # isolate unexpected failures to this variant
        log.error("%s crashed: %s", name, traceback.format_exc())
        write_rows(vdir / "loss_curve.csv", CURVE_COLUMNS, [dict(zip(CURVE_COLUMNS, c)) for c in curve])
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
        return VariantOutcome(row, None, curve, str(exc))

    write_rows(vdir / "loss_curve.csv", CURVE_COLUMNS, [dict(zip(CURVE_COLUMNS, c)) for c in curve])
    row.update(train_loss=curve[-1][1], valid_loss=curve[-1][2], status="ok")
    timing = {"variant": name, "epochs": cfg.epochs, "train_time_s": report.total_seconds,
              "mean_epoch_s": report.total_seconds / cfg.epochs}
    if artifacts:
        batch = cfg.batch_size or len(valid)
        preds = np.concatenate([m.forward(valid.X[s:s + batch], "eval") for s in range(0, len(valid), batch)])
        write_tensor(vdir / "predictions.fct", preds)
        write_tensor(vdir / "truth.fct", valid.Y)
        for k in range(len(preds)):
            write_pgm(vdir / f"pred_{k:03d}.pgm", preds[k])
            write_pgm(vdir / f"truth_{k:03d}.pgm", valid.Y[k])
        ev = evaluate(preds, valid.Y)
        ev.write_csv(vdir / "eval.csv")
        row["ssim"] = ev.ssim
        save_checkpoint(m, vdir / "checkpoint")
    return VariantOutcome(row, timing, curve)


@dataclass
class RunResult:
    output_dir: Path
    rows: list[dict]
    timings: list[dict]

    @property
    def failed(self) -> int:
        return sum(1 for r in self.rows if r["status"] != "ok")


def run_experiment(config, output_dir=None) -> RunResult:
    """Train every variant and write summary, curves, predictions, checkpoints and a manifest."""
    exp = config if isinstance(config, ExperimentConfig) else load_experiment(config)
    out = resolve_output(exp, output_dir)
    _prepare(exp, exp.variants)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(exp.text, encoding="utf-8")
    rows, timings = [], []
    for cfg, name in zip(exp.variants, exp.names):
        log.info("variant %s", name)
        outcome = _train_variant(exp, cfg, name, out / "variants" / name, artifacts=True)
        rows.append(outcome.row)
        if outcome.timing:
            timings.append(outcome.timing)
    write_rows(out / "summary.csv", SUMMARY_COLUMNS, rows)
    write_rows(out / "timing.csv", TIMING_COLUMNS, timings)
    result = RunResult(out, rows, timings)
    write_manifest(out, exp, "run", result.failed)
    return result


def curve_stats(curves: list[list[tuple[int, float, float]]]) -> list[dict]:
    """Per-epoch mean and population std of train and valid loss across runs."""
    if not curves:
        return []
    epochs = min(len(c) for c in curves)
    out = []
    for e in range(epochs):
        tr = np.array([c[e][1] for c in curves], dtype=np.float64)
        va = np.array([c[e][2] for c in curves], dtype=np.float64)
        out.append({"epoch": e + 1, "runs": len(curves), "train_mean": float(tr.mean()), "train_std": float(tr.std()),
                    "valid_mean": float(va.mean()), "valid_std": float(va.std())})
    return out


def final_mean(values, last: int = FINAL_EPOCHS) -> float:
    tail = list(values)[-last:]
    return float(np.mean(np.asarray(tail, dtype=np.float64)))


@dataclass
class SweepResult:
    output_dir: Path
    final: list[dict]
    stats: dict[str, list[dict]]

    @property
    def failed(self) -> int:
        return sum(1 for r in self.final if r["status"] != "ok")

    def final_train(self, variant: str, timestep: int) -> float:
        for r in self.final:
            if r["variant"] == variant and r["timestep"] == timestep:
                return r["final_train_loss"]
        raise KeyError((variant, timestep))


def timestep_sweep(config, output_dir=None) -> SweepResult:
    """Train every variant once per timestep in the configured range."""
    exp = config if isinstance(config, ExperimentConfig) else load_experiment(config)
    out = resolve_output(exp, output_dir)
    runs = {name: [ModelConfig(**{**cfg.to_dict(), "timestep": t}) for t in exp.timesteps]
            for cfg, name in zip(exp.variants, exp.names)}
    _prepare(exp, [c for cfgs in runs.values() for c in cfgs])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(exp.text, encoding="utf-8")
    final, stats = [], {}
    for name, cfgs in runs.items():
        curves = []
        for cfg in cfgs:
            log.info("sweep %s timestep %d", name, cfg.timestep)
            vdir = out / "sweep" / name
            outcome = _train_variant(exp, cfg, name, vdir, artifacts=False)
            (vdir / "loss_curve.csv").rename(vdir / f"t{cfg.timestep:02d}_loss_curve.csv")
            ok = outcome.error is None
            if ok:
                curves.append(outcome.curve)
            final.append({
                "variant": name, "architecture": cfg.architecture, "timestep": cfg.timestep,
                "final_train_loss": final_mean([c[1] for c in outcome.curve]) if ok else None,
                "final_valid_loss": final_mean([c[2] for c in outcome.curve]) if ok else None,
                "status": outcome.row["status"],
            })
        stats[name] = curve_stats(curves)
        write_rows(out / "sweep" / name / "sweep_stats.csv", STATS_COLUMNS, stats[name])
    write_rows(out / "sweep_final.csv", FINAL_COLUMNS, final)
    result = SweepResult(out, final, stats)
    write_manifest(out, exp, "sweep", result.failed)
    return result


# ------------------------------------------------------------------- check


def _read_curve(path) -> list[tuple[int, float, float]]:
    return [(int(r["epoch"]), float(r["train_loss"]), float(r["valid_loss"])) for r in read_rows(path)]


def _same(a: str, b: float) -> bool:
    try:
        x = float(a)
    except ValueError:
        return False
    return x == b or (math.isnan(x) and math.isnan(b))


def _check_manifest(run_dir: Path, problems: list[str]) -> None:
    path = run_dir / MANIFEST_NAME
    if not path.exists():
        problems.append(f"missing {MANIFEST_NAME}")
        return
    listed = set()
    in_files = False
    for line in path.read_text(encoding="utf-8").splitlines():
        if line == "[files]":
            in_files = True
            continue
        if not in_files or not line.strip():
            continue
        digest, rel = line.split("  ", 1)
        listed.add(rel)
        target = run_dir / rel
        if not target.is_file():
            problems.append(f"{rel}: listed in manifest but missing")
        elif _sha256(target) != digest:
            problems.append(f"{rel}: checksum mismatch")
    for p in run_dir.rglob("*"):
        rel = p.relative_to(run_dir).as_posix()
        if p.is_file() and p.name != MANIFEST_NAME and rel not in listed:
            problems.append(f"{rel}: present but not in manifest")


def _check_variant(vdir: Path, row: dict, problems: list[str]) -> None:
    name = row["variant"]
    curve_path = vdir / "loss_curve.csv"
    if not curve_path.exists():
        problems.append(f"{name}: missing loss_curve.csv")
        return
    curve = _read_curve(curve_path)
    if len(curve) != int(row["epochs"]):
        problems.append(f"{name}: loss curve has {len(curve)} rows, expected {row['epochs']}")
    if curve and not (_same(row["train_loss"], curve[-1][1]) and _same(row["valid_loss"], curve[-1][2])):
        problems.append(f"{name}: summary losses differ from the last loss-curve row")
    try:
        preds = read_tensor(vdir / "predictions.fct")
        truth = read_tensor(vdir / "truth.fct")
    except (OSError, TensorFormatError) as exc:
        problems.append(f"{name}: cannot read prediction tensors: {exc}")
        return
    ev = evaluate(preds, truth)
    eval_rows = read_rows(vdir / "eval.csv")
    expected = [(str(k), r, m, s) for k, (r, m, s) in enumerate(ev.per_frame)] + [("all", ev.rmse, ev.mae, ev.ssim)]
    if len(eval_rows) != len(expected):
        problems.append(f"{name}: eval.csv has {len(eval_rows)} rows, expected {len(expected)}")
    else:
        for got, (idx, r, m, s) in zip(eval_rows, expected):
            if got["frame_index"] != idx or not all(_same(got[c], v) for c, v in (("rmse", r), ("mae", m), ("ssim", s))):
                problems.append(f"{name}: eval.csv row {idx} does not match recomputed metrics")
                break
    if not _same(row["ssim"], ev.ssim):
        problems.append(f"{name}: summary ssim differs from recomputed mean ssim")
    for k in range(len(preds)):
        for stem, frames in (("pred", preds), ("truth", truth)):
            pgm = vdir / f"{stem}_{k:03d}.pgm"
            if not pgm.exists():
                problems.append(f"{name}: missing {pgm.name}")
                continue
            from PIL import Image

            with Image.open(pgm) as img:
                if not np.array_equal(np.asarray(img), frame_to_uint8(frames[k][..., 0])):
                    problems.append(f"{name}: {pgm.name} does not match {stem} tensor")
    try:
        load_checkpoint(vdir / "checkpoint")
    except Exception as exc:
        problems.append(f"{name}: checkpoint does not load: {exc}")


def _check_sweep(run_dir: Path, problems: list[str]) -> None:
    final = read_rows(run_dir / "sweep_final.csv")
    by_variant: dict[str, list[dict]] = {}
    for r in final:
        by_variant.setdefault(r["variant"], []).append(r)
    for name, rows in by_variant.items():
        curves = []
        for r in rows:
            path = run_dir / "sweep" / name / f"t{int(r['timestep']):02d}_loss_curve.csv"
            curve = _read_curve(path)
            if r["status"] != "ok":
                continue
            curves.append(curve)
            if not _same(r["final_train_loss"], final_mean([c[1] for c in curve])):
                problems.append(f"{name} t={r['timestep']}: final_train_loss does not match its curve")
            if not _same(r["final_valid_loss"], final_mean([c[2] for c in curve])):
                problems.append(f"{name} t={r['timestep']}: final_valid_loss does not match its curve")
        expected = curve_stats(curves)
        got = read_rows(run_dir / "sweep" / name / "sweep_stats.csv")
        if len(got) != len(expected):
            problems.append(f"{name}: sweep_stats.csv has {len(got)} rows, expected {len(expected)}")
            continue
        for g, e in zip(got, expected):
            if int(g["epoch"]) != e["epoch"] or int(g["runs"]) != e["runs"] or not all(
                    _same(g[c], e[c]) for c in STATS_COLUMNS[2:]):
                problems.append(f"{name}: sweep_stats.csv epoch {g['epoch']} does not match recomputation")
                break


def check_run(run_dir) -> list[str]:
    """Return a list of inconsistencies in an emitted run directory (empty when valid)."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return [f"{run_dir} is not a directory"]
    problems: list[str] = []
    _check_manifest(run_dir, problems)
    summary = run_dir / "summary.csv"
    sweep = run_dir / "sweep_final.csv"
    if not summary.exists() and not sweep.exists():
        problems.append("neither summary.csv nor sweep_final.csv present")
    if summary.exists():
        rows = read_rows(summary)
        timing = {r["variant"]: r for r in read_rows(run_dir / "timing.csv")} if (run_dir / "timing.csv").exists() else {}
        for row in rows:
            if row["status"] != "ok":
                continue
            _check_variant(run_dir / "variants" / row["variant"], row, problems)
            t = timing.get(row["variant"])
            if t is None:
                problems.append(f"{row['variant']}: no timing row")
            elif not _same(t["mean_epoch_s"], float(t["train_time_s"]) / int(t["epochs"])):
                problems.append(f"{row['variant']}: mean_epoch_s is not train_time_s / epochs")
    if sweep.exists():
        _check_sweep(run_dir, problems)
    return problems
