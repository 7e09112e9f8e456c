"""One test per acceptance criterion; each records a PASS/FAIL line at the stated tolerance.

The benchmark-backed criteria (1 to 3) share a single run of ``configs/benchmark.cfg``
(3 seeds, about 8 minutes on one CPU core).
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from medaug import cli, cohort, engine, evaluation, pairs, runner
from medaug import config as cfgmod
from medaug.engine import EncoderConfig, NegativeQueue, NegativeStrategy
from medaug.pairs import PairCriteria

import gradcheck

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
MARGIN = 0.01
REPORT: dict[int, str] = {}


def record(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
    REPORT[n] = line
    print(line)
    return ok


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    cfg = cfgmod.load(CONFIGS / "benchmark.cfg")
    out = tmp_path_factory.mktemp("acceptance") / "bench"
    t0 = time.perf_counter()
    rows = runner.cmd_benchmark(cfg, out)
    elapsed = time.perf_counter() - t0
    return {r["arm"]: r for r in rows}, elapsed, out


def _lin(row):
    return row["linear_mean"], np.asarray(row["linear_per_seed"])


# --------------------------------------------------------------------------- 1-3


@pytest.mark.slow
def test_criterion_1_same_study_ordering(benchmark):
    rows, elapsed, _ = benchmark
    same, same_s = _lin(rows["same-study"])
    parts, ok = [], elapsed < 15 * 60
    for rival in ("instance", "distinct-studies"):
        m, s = _lin(rows[rival])
        wins = int(np.sum(same_s - s >= MARGIN))
        ok &= (same - m >= MARGIN) and wins >= 2
        parts.append(f"same-study {same:.3f} vs {rival} {m:.3f} (margin {same - m:+.3f}, {wins}/3 seeds)")
    assert record(1, ok, "; ".join(parts) + f"; runtime {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_2_oracle_labels_help(benchmark):
    rows, _, _ = benchmark
    oracle, _ = _lin(rows["all-studies-oracle"])
    plain, _ = _lin(rows["all-studies"])
    assert record(2, oracle - plain >= MARGIN, f"oracle {oracle:.3f} vs all-studies {plain:.3f} (margin {oracle - plain:+.3f})")


@pytest.mark.slow
def test_criterion_3_size_controlled_all_beats_distinct(benchmark):
    rows, _, _ = benchmark
    a, _ = _lin(rows["all-studies-ctrl"])
    d, _ = _lin(rows["distinct-studies-ctrl"])
    assert record(3, a - d >= MARGIN, f"all-studies ctrl {a:.3f} vs distinct-studies ctrl {d:.3f} (margin {a - d:+.3f})")


# --------------------------------------------------------------------------- 4


def test_criterion_4_conflict_histogram():
    cfg = cfgmod.load(CONFIGS / "fig2_conflict.cfg")
    assert cfg.cohort.p_label_flip_between_studies == 0.3
    records = runner.load_records(cfg, need_pixels=False)
    mass = {arm: runner.analyze_one(cfg.arm(arm), records).mass_at_one for arm in ("all-studies", "distinct-studies")}
    ok = mass["distinct-studies"] > 0 and mass["all-studies"] == 0.0
    assert record(4, ok, f"mass at 1.0: distinct-studies {mass['distinct-studies']:.3f}, all-studies {mass['all-studies']:.3f}")


# --------------------------------------------------------------------------- 5


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_criterion_5_negative_strategy_equivalences(tmp_path):
    worst_rw, worst_share, worst_norm, same_lat_exact = 0.0, 0.0, 0.0, True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(4, 300)), 64
        queue = NegativeQueue(n, d)
        lats = (rng.random(n) < 0.3).astype(np.int8)
        lats[:2] = [0, 1]
        queue.push(_unit(rng, n, d), lats, np.arange(n), np.arange(n))
        q, k = _unit(rng, 2, d)
        for lat in (0, 1):
            base = engine.info_nce(q, k, queue.embeddings)
            z, w = engine.negative_terms(queue, lat, NegativeStrategy("reweighted", match_proportion=True), rng)
            worst_rw = max(worst_rw, abs(engine.info_nce(q, k, z, w) - base))

            z, w = engine.negative_terms(queue, lat, NegativeStrategy("same_laterality"), rng)
            filt = queue.filtered(queue.lateralities == lat)
            same_lat_exact &= engine.info_nce(q, k, z, w) == engine.info_nce(q, k, *engine.negative_terms(filt, lat, NegativeStrategy(), rng))

            t = float(rng.uniform(0.01, 0.99))
            _, w = engine.negative_terms(queue, lat, NegativeStrategy("reweighted", target=t), rng)
            same = queue.lateralities == lat
            worst_share = max(worst_share, abs(w[same].sum() / w.sum() - t))

            z, _ = engine.negative_terms(queue, lat, NegativeStrategy("synthetic"), rng)
            worst_norm = max(worst_norm, float(np.max(np.abs(np.linalg.norm(z[len(queue):], axis=1) - 1.0))))

    # the same equivalence end to end through the step log of a real run
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text("[cohort]\nn_patients = 12\n[engine]\nepochs = 2\nqueue_size = 64\n")
    cli.main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
    cli.main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "b"),
              "--set", "negatives.kind=reweighted", "--set", "negatives.match_proportion=true"])
    la = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    lb = (tmp_path / "b" / "train_log.csv").read_text().splitlines()
    losses = [(x.split(",")[2], y.split(",")[2]) for x, y in zip(la[1:], lb[1:]) if x.split(",")[2]]
    worst_log = max(abs(float(x) - float(y)) for x, y in losses)

    ok = worst_rw <= 1e-12 and worst_log <= 1e-12 and same_lat_exact and worst_share <= 1e-12 and worst_norm <= 1e-9
    assert record(
        5, ok,
        f"reweighted(t=r) vs default {worst_rw:.1e} (per-step log {worst_log:.1e}); "
        f"same-laterality exact {same_lat_exact}; share error {worst_share:.1e}; synthetic norm error {worst_norm:.1e}",
    )


# --------------------------------------------------------------------------- 6

STRATEGIES = [
    NegativeStrategy(),
    NegativeStrategy("same_laterality"),
    NegativeStrategy("reweighted", target=0.1),
    NegativeStrategy("appended"),
    NegativeStrategy("synthetic"),
]


def test_criterion_6_gradients_match_finite_differences():
    enc = EncoderConfig()
    errors = {}
    for i, strategy in enumerate(STRATEGIES):
        rng = np.random.default_rng(100 + i)
        params = engine.init_params(enc, rng)
        x = engine.as_input(rng.random((1, 16, 16)))
        k = _unit(rng, 1, enc.embed_dim)[0]
        queue = NegativeQueue(256, enc.embed_dim)
        queue.push(_unit(rng, 256, enc.embed_dim), (rng.random(256) < 0.3).astype(np.int8), range(256), range(256))

        def loss(p, strategy=strategy):
            z, w = engine.negative_terms(queue, 1, strategy, np.random.default_rng(7))
            return engine.info_nce(engine.forward(p, x)[0][0], k, z, w, 0.2)

        z, w = engine.negative_terms(queue, 1, strategy, np.random.default_rng(7))
        q, cache = engine.forward(params, x)
        _, dq = engine.info_nce_grad(q[0], k, z, w, 0.2)
        errors[strategy.name] = gradcheck.check(loss, params, engine.backward(params, cache, dq[None]), rng)

    rng = np.random.default_rng(200)
    params = engine.init_params(enc, rng)
    backbone = {k: v for k, v in params.items() if k.startswith("backbone.")}
    x = engine.as_input(rng.random((12, 16, 16)))
    y = rng.integers(0, 2, 12).astype(float)
    f = engine.features(params, x)
    w, b = rng.standard_normal(f.shape[1]) * 0.1, 0.05
    _, dw, db, _ = evaluation.logistic_loss_and_grad(w, b, f, y)
    errors["linear"] = gradcheck.check(
        lambda p: evaluation.logistic_loss_and_grad(p["w"], float(p["b"][0]), f, y)[0],
        {"w": w, "b": np.array([b])}, {"w": dw, "b": np.array([db])}, rng,
    )
    _, dp, dw, _ = evaluation.end_to_end_loss_and_grad(backbone, w, b, x, y)
    errors["end_to_end"] = gradcheck.check(
        lambda p: evaluation.end_to_end_loss_and_grad({k: v for k, v in p.items() if k != "w"}, p["w"], b, x, y)[0],
        dict(backbone, w=w), dict(dp, w=dw), rng,
    )
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    assert record(6, worst < gradcheck.REL_TOL, f"max relative error on 25 coordinates: {detail}")


# --------------------------------------------------------------------------- 7


def test_criterion_7_auc_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[: 2] = [0, 1]
        s = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))
        worst = max(worst, abs(evaluation.auc(s, y) - evaluation.auc_trapezoid(s, y)))
    worked = evaluation.auc([0.9, 0.6, 0.4], [1, 0, 1])
    assert record(7, worst <= 1e-9 and worked == 0.5, f"max |MW - trapezoid| {worst:.1e}; worked example {worked}")


# --------------------------------------------------------------------------- 8


def _expected(q, o, study, lat):
    """Independent statement of the candidate rule (no oracle, query included)."""
    if o.patient_id != q.patient_id:
        return False
    same_study = o.study_id == q.study_id
    same_lat = o.laterality == q.laterality
    study_ok = {"all": True, "same": same_study, "distinct": not same_study}[study]
    lat_ok = {"all": True, "same": same_lat, "distinct": not same_lat}[lat]
    return study_ok and lat_ok


def test_criterion_8_criteria_soundness():
    rules = ("all", "same", "distinct")
    checked, bad, partition_ok = 0, 0, True
    for seed in range(100):
        cfg = cohort.CohortConfig(n_patients=int(np.random.default_rng(seed).integers(2, 12)), image_size=(4, 4), seed=seed)
        recs = cohort.generate(cfg)
        idx = pairs.build_index(recs)
        by_id = {r.image_id: r for r in recs}
        for r in recs:
            sets = {}
            for study in rules:
                for lat in rules:
                    members = set(pairs.candidates(idx, r.image_id, PairCriteria(study, lat)).members)
                    expected = {o.image_id for o in recs if _expected(r, o, study, lat)}
                    bad += members != expected
                    bad += any(not _expected(r, by_id[o], study, lat) for o in members)
                    checked += 1
                    sets[study, lat] = members
            for lat in rules:
                s, d, a = sets["same", lat], sets["distinct", lat], sets["all", lat]
                partition_ok &= not (s & d) and (s | d) == a
    assert record(8, bad == 0 and partition_ok, f"{checked} candidate sets over 100 cohorts; mismatches {bad}; partition {partition_ok}")


# --------------------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("[cohort]\nn_patients = 16\n[engine]\nepochs = 2\nqueue_size = 64\n[eval]\nfraction = 0.1\nprobe_epochs = 50\ne2e_epochs = 5\n")
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["pretrain", "--config", str(cfg_path), "--out", str(a)])
    cli.main(["evaluate", "--config", str(cfg_path), "--out", str(a)])
    cli.main(["pretrain", "--config", str(a / "run.cfg"), "--out", str(b)])
    cli.main(["evaluate", "--config", str(a / "run.cfg"), "--out", str(b)])
    za, zb = np.load(a / "checkpoints" / "final.npz"), np.load(b / "checkpoints" / "final.npz")
    arrays_equal = all(np.array_equal(za[k], zb[k]) for k in za.files if k != "meta")
    aucs_equal = all(
        json.loads((a / f"eval_{m}.json").read_text())["per_split_auc"] == json.loads((b / f"eval_{m}.json").read_text())["per_split_auc"]
        for m in ("linear", "end_to_end")
    )
    assert record(9, arrays_equal and aucs_equal, f"final checkpoint identical {arrays_equal}; AUCs identical {aucs_equal}")


# --------------------------------------------------------------------------- 10


def test_criterion_10_five_split_protocol(tmp_path):
    cfg = cfgmod.apply_overrides(
        cfgmod.RunConfig(),
        ["cohort.n_patients=200", "engine.epochs=1", "eval.probe_epochs=50", "eval.e2e_epochs=5", "eval.selection=last"],
    )
    assert cfg.eval.fraction == 0.01 and cfg.eval.n_repeats == 5
    reports = runner.run_arm(cfg, tmp_path / "run")
    counts = {r.mode: len(r.per_split_auc) for r in reports.values()}
    ok = all(c == 5 for c in counts.values()) and len(counts) == 2
    for r in reports.values():
        ok &= r.mean_auc == pytest.approx(np.mean(r.per_split_auc)) and r.std_auc == pytest.approx(np.std(r.per_split_auc, ddof=1))
    sizes = reports["linear"].meta["split_sizes"]
    assert record(10, ok, f"per-split AUC counts {dict((m.value, c) for m, c in counts.items())} on 1% splits of sizes {sizes}")
