"""Orchestration behind the CLI: every command reads a RunConfig and writes files under ``out``.

Layout of a run directory::

    run.cfg                      exact config used (re-runnable)
    checkpoints/epoch_###.npz    periodic checkpoints
    checkpoints/final.npz        last state
    train_log.csv                one row per optimizer step
    eval_<mode>.json             EvalReport per probe mode
    results.csv                  appended rows (strategy, criteria, mode, task, ...)
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from medaug import cohort, engine, evaluation, pairs, training
from medaug.config import RunConfig, save
from medaug.errors import IngestError, MedAugError

log = logging.getLogger(__name__)

RESULTS_COLUMNS = ("strategy", "criteria", "mode", "task", "mean_auc", "std_auc", "seed")
LOG_COLUMNS = ("step", "epoch", "loss", "queue_fill", "n_negatives", "same_share", "fallbacks")
PAIRS_COLUMNS = ("query_id", "criteria", "set_size", "conflict_proportion")
KNN_REDRAWS = 10


# --------------------------------------------------------------------------- data


@dataclass
class Data:
    train: list
    test: list
    pool_x: np.ndarray
    pool_y: np.ndarray
    pool_patients: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def load_records(cfg: RunConfig, need_pixels: bool = True) -> list:
    c = cfg.cohort
    if c.source == "synthetic":
        return cohort.generate(cfg.cohort_config())
    blob = c.blob_path if need_pixels else None
    if need_pixels and blob is None:
        raise IngestError("cohort.blob_path is required for commands that need pixels")
    try:
        return cohort.ingest_csv(c.csv_path, cohort.IngestSchema(uncertain_policy=c.uncertain_policy), blob)
    except OSError as exc:
        raise IngestError(f"cannot read cohort: {exc}") from None


def load_data(cfg: RunConfig) -> Data:
    records = load_records(cfg)
    if not records:
        raise IngestError("cohort is empty")
    train, test = cohort.split_patients(records, cfg.run.test_fraction, cfg.run.seed)
    task = cfg.run.task

    def xy(recs):
        x = engine.as_input(np.stack([r.pixels for r in recs]))
        return x, np.array([int(r.labels[task]) for r in recs], dtype=np.int64)

    pool_x, pool_y = xy(train)
    test_x, test_y = xy(test)
    pids = np.array([r.patient_id for r in train], dtype=np.int64)
    return Data(train, test, pool_x, pool_y, pids, test_x, test_y)


def make_sampler(cfg: RunConfig, train: list):
    qids = [r.image_id for r in train]
    crit = cfg.pair_criteria()
    if crit is None:
        return pairs.SelfSampler(qids)
    return pairs.PositiveSampler(pairs.build_index(train), crit, qids, cfg.run.seed, cfg.criteria.empty_policy)


def _prepare_out(cfg: RunConfig, out) -> Path:
    out = Path(out if out is not None else cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    save(replace(cfg, run=replace(cfg.run, out=str(out))), out / "run.cfg")
    return out


# --------------------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out=None) -> Path:
    """Write ``cohort.csv`` and ``pixels.npz``."""
    if cfg.cohort.source != "synthetic":
        raise IngestError("generate needs cohort.source = synthetic")
    out = _prepare_out(cfg, out)
    records = cohort.generate(cfg.cohort_config())
    cohort.write_cohort(records, out / "cohort.csv", out / "pixels.npz")
    log.info("wrote %d records to %s", len(records), out)
    return out


def cmd_pretrain(cfg: RunConfig, out=None, data: Data | None = None) -> Path:
    """Pretrain and write checkpoints plus the step log. Returns the final checkpoint path."""
    out = _prepare_out(cfg, out)
    data = data or load_data(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for stale in ckpt_dir.glob("*.npz"):
        stale.unlink()
    settings = cfg.pretrain_settings()
    strategy = cfg.strategy()
    sampler = make_sampler(cfg, data.train)
    meta = {
        "config_hash": cfg.hash(),
        "seed": cfg.run.seed,
        "criteria": cfg.criteria_name(),
        "strategy": engine.strategy_dict(strategy),
        # all sampling is counter-based on (seed, epoch, image_id, stream); no RNG state to carry
        "rng": "counter:seed,epoch,image_id,stream",
    }
    rows = []

    def on_step(step, epoch, result, queue):
        rows.append(
            (step, epoch, "" if result.loss is None else repr(result.loss), len(queue),
             result.n_negatives, result.same_share, result.fallbacks)
        )

    def on_epoch(epoch, state, queue):
        if epoch % settings.checkpoint_every == 0 or epoch == settings.epochs:
            engine.save_checkpoint(
                ckpt_dir / f"epoch_{epoch:03d}.npz", state, queue, {**meta, "epoch": epoch, "step": len(rows)}
            )

    t0 = time.perf_counter()
    state, queue = training.pretrain(
        data.train, sampler, cfg.augmentation(), strategy, settings, cfg.run.seed,
        on_step=on_step, on_epoch=on_epoch, dump_dir=out,
    )
    final = ckpt_dir / "final.npz"
    engine.save_checkpoint(final, state, queue, {**meta, "epoch": settings.epochs, "step": len(rows)})
    with (out / "train_log.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        writer.writerows(rows)
    log.info("pretrained %s in %.1fs (%d steps)", cfg.criteria_name(), time.perf_counter() - t0, len(rows))
    return final


def list_checkpoints(out) -> list[Path]:
    return sorted((Path(out) / "checkpoints").glob("epoch_*.npz"))


def knn_probe_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Fixed labeled subset of the pool used only for checkpoint selection."""
    n = len(labels)
    size = max(2, int(round(fraction * n)))
    for attempt in range(KNN_REDRAWS + 1):
        rng = np.random.default_rng([int(seed), 0xC4, attempt])
        idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
        if 0 < labels[idx].sum() < len(idx):
            return idx
    raise ValueError("k-NN probe set has a single class after redraws")


def select_checkpoint(cfg: RunConfig, out, data: Data):
    """``(checkpoint_id, params, knn_scores)`` under the configured selection rule."""
    paths = list_checkpoints(out)
    if not paths:
        final = Path(out) / "checkpoints" / "final.npz"
        if not final.exists():
            raise IngestError(f"no checkpoints under {out}")
        paths = [final]
    if cfg.eval.selection == "last":
        state, _, _ = engine.load_checkpoint(paths[-1])
        return paths[-1].stem, state.query, []
    cands = [(p.stem, engine.load_checkpoint(p)[0].query) for p in paths]
    idx = knn_probe_indices(data.pool_y, cfg.eval.knn_fraction, cfg.run.seed)
    return evaluation.knn_select(cands, data.pool_x[idx], data.pool_y[idx], cfg.eval.knn_k)


def cmd_evaluate(cfg: RunConfig, out=None, checkpoint=None, data: Data | None = None) -> list:
    """Probe a checkpoint in every configured mode; returns the EvalReports."""
    out = Path(out if out is not None else cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_data(cfg)
    if checkpoint is not None:
        state, _, _ = engine.load_checkpoint(checkpoint)
        ckpt_id, params, scores = Path(checkpoint).stem, state.query, []
    else:
        ckpt_id, params, scores = select_checkpoint(cfg, out, data)
    splits = evaluation.draw_splits(data.pool_y, data.pool_patients, cfg.split_spec())
    reports = []
    for mode in cfg.eval.modes:
        mode = evaluation.EvalMode(mode)
        fn = evaluation.linear_probe if mode is evaluation.EvalMode.LINEAR_PROBE else evaluation.end_to_end
        report = fn(
            params, data.pool_x, data.pool_y, data.test_x, data.test_y, splits,
            cfg.probe_hyper(mode.value), cfg.run.task, ckpt_id,
        )
        report.meta = {
            "config_hash": cfg.hash(),
            "criteria": cfg.criteria_name(),
            "strategy": cfg.strategy().name,
            "seed": cfg.run.seed,
            "knn_scores": [float(s) for s in scores],
            "split_sizes": [int(len(s)) for s in splits],
        }
        (out / f"eval_{mode.value}.json").write_text(report.to_json())
        append_result(out / "results.csv", report)
        reports.append(report)
    return reports


def append_result(path: Path, report: evaluation.EvalReport) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(RESULTS_COLUMNS)
        writer.writerow(
            (report.meta.get("strategy", ""), report.meta.get("criteria", ""), report.mode.value, report.task,
             repr(report.mean_auc), repr(report.std_auc), report.meta.get("seed", ""))
        )


def analyze_one(cfg: RunConfig, records: list):
    crit = cfg.pair_criteria()
    if crit is None:
        raise MedAugError("instance discrimination has no candidate sets to analyze")
    index = pairs.build_index(records)
    sets = None
    if crit.size_control_reference is not None:
        sets = pairs.PositiveSampler(index, crit, index.image_ids, cfg.run.seed).sets
    return pairs.conflict_stats(index, crit, task=cfg.run.task, sets=sets)


def cmd_analyze_pairs(cfg: RunConfig, out=None) -> dict:
    """Conflict statistics for the config's criteria, or for each benchmark arm."""
    out = _prepare_out(cfg, out)
    records = load_records(cfg, need_pixels=False)
    arms = list(cfg.benchmark.arms) or [None]
    summaries = {}
    with (out / "pairs.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PAIRS_COLUMNS)
        for arm in arms:
            arm_cfg = cfg if arm is None else cfg.arm(arm)
            if arm_cfg.pair_criteria() is None:
                continue
            stats = analyze_one(arm_cfg, records)
            name = stats.criteria.name
            for q, size, prop in zip(stats.query_ids, stats.set_sizes, stats.proportions):
                writer.writerow((int(q), name, int(size), repr(float(prop))))
            summaries[arm or name] = stats.summary()
    (out / "conflict_histogram.json").write_text(json.dumps(summaries, indent=2, sort_keys=True))
    return summaries


# --------------------------------------------------------------------------- benchmark

TABLE_COLUMNS = (
    "arm", "criteria", "strategy", "n_seeds",
    "linear_mean", "linear_std", "end_to_end_mean", "end_to_end_std",
    "linear_per_seed", "end_to_end_per_seed", "status",
)


def run_arm(cfg: RunConfig, out) -> dict:
    """Pretrain + evaluate one config; returns ``{mode: EvalReport}``."""
    data = load_data(cfg)
    cmd_pretrain(cfg, out, data)
    return {r.mode.value: r for r in cmd_evaluate(cfg, out, data=data)}


def cmd_benchmark(cfg: RunConfig, out=None) -> list[dict]:
    """Every arm at every seed, then one table row per arm.

    A failing arm is recorded with a ``FAILED`` status instead of stopping the table.
    """
    if not cfg.benchmark.arms:
        raise MedAugError("benchmark.arms is empty")
    out = _prepare_out(cfg, out)
    results: dict[str, dict] = {arm: {"reports": [], "errors": []} for arm in cfg.benchmark.arms}
    for seed in cfg.benchmark.seeds:
        for arm in cfg.benchmark.arms:
            arm_cfg = cfg.arm(arm)
            arm_cfg = replace(arm_cfg, run=replace(arm_cfg.run, seed=int(seed)))
            arm_out = out / f"seed_{seed}" / arm
            t0 = time.perf_counter()
            try:
                results[arm]["reports"].append(run_arm(arm_cfg, arm_out))
            except Exception as exc:  # noqa: BLE001 - a failed arm must not sink the table
                log.error("arm %s seed %s failed: %s", arm, seed, exc)
                results[arm]["errors"].append(f"seed {seed}: {type(exc).__name__}: {exc}")
            log.info("arm %s seed %s done in %.1fs", arm, seed, time.perf_counter() - t0)
    rows = []
    for arm in cfg.benchmark.arms:
        arm_cfg = cfg.arm(arm)
        row = {
            "arm": arm,
            "criteria": arm_cfg.criteria_name(),
            "strategy": arm_cfg.strategy().name,
            "n_seeds": len(results[arm]["reports"]),
        }
        for mode in ("linear", "end_to_end"):
            reps = [r[mode] for r in results[arm]["reports"] if mode in r]
            aucs = [a for r in reps for a in r.per_split_auc]
            row[f"{mode}_mean"] = float(np.mean(aucs)) if aucs else None
            row[f"{mode}_std"] = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else None
            row[f"{mode}_per_seed"] = [r.mean_auc for r in reps]
        errors = results[arm]["errors"]
        row["status"] = "ok" if not errors else "FAILED (" + "; ".join(errors) + ")"
        rows.append(row)
    write_table(rows, out / "benchmark_table.csv")
    (out / "benchmark.json").write_text(json.dumps(rows, indent=2))
    return rows


def write_table(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for row in rows:
            cells = []
            for col in TABLE_COLUMNS:
                v = row.get(col)
                if isinstance(v, list):
                    v = ";".join(f"{x:.4f}" for x in v)
                elif isinstance(v, float):
                    v = f"{v:.6f}"
                elif v is None:  # a mode that was not requested stays blank
                    v = "FAILED" if row.get("status") != "ok" else ""
                cells.append(v)
            writer.writerow(cells)


def cmd_report(out) -> str:
    """Markdown rendering of a benchmark table (or of a run's results.csv)."""
    out = Path(out)
    table = out / "benchmark_table.csv"
    if table.exists():
        with table.open() as fh:
            rows = list(csv.DictReader(fh))
        lines = ["| arm | criteria | strategy | linear | end-to-end | status |", "|---|---|---|---|---|---|"]
        for r in rows:
            lines.append(
                f"| {r['arm']} | {r['criteria']} | {r['strategy']} | "
                f"{_pm(r['linear_mean'], r['linear_std'])} | {_pm(r['end_to_end_mean'], r['end_to_end_std'])} | "
                f"{r['status']} |"
            )
        return "\n".join(lines)
    results = out / "results.csv"
    if not results.exists():
        raise IngestError(f"nothing to report under {out}")
    with results.open() as fh:
        rows = list(csv.DictReader(fh))
    lines = ["| criteria | strategy | mode | seed | AUC |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {r['criteria']} | {r['strategy']} | {r['mode']} | {r['seed']} | {_pm(r['mean_auc'], r['std_auc'])} |"
        )
    return "\n".join(lines)


def _pm(mean, std) -> str:
    if mean == "":
        return "n/a"
    if std == "":
        std = "nan"
    try:
        return f"{float(mean):.3f} ± {float(std):.3f}"
    except ValueError:
        return "FAILED"
