"""Acceptance criteria, one test per criterion.

Trend criteria train real models on the desk presets. Artifacts are cached under
``$TVIN_ACCEPTANCE_DIR`` (default ``.acceptance_runs`` in the repo), so only the first
run pays the training cost (about 90 minutes on one core). Deselect with ``-m "not slow"``.
"""

import csv
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from tvin import checks
from tvin import evaluation as ev
from tvin import gridworld as gw
from tvin import transfer as tr
from tvin import vin
from tvin.harness.presets import get_preset
from tvin.harness.runner import Runner, replay, summarize

WORKDIR = Path(os.environ.get("TVIN_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / ".acceptance_runs"))


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def run_preset(preset):
    runner = Runner(preset, WORKDIR, reference=True, progress=print)
    rows = runner.run()
    means = {k: (float(np.mean(o)), float(np.mean(s))) for k, (o, s) in summarize(rows).items()}
    return runner, means


def train_minutes(runner) -> float:
    """Training wall time of every model in the run, read from the per-epoch curves."""
    total_ms = 0.0
    for st in runner.manifest.stages:
        curve = WORKDIR / (st.path + ".csv")
        if st.name in ("source",) or st.name.startswith("target-"):
            with open(curve) as f:
                total_ms += sum(float(r["wall_ms"]) for r in csv.DictReader(f))
    return total_ms / 60000


@pytest.fixture(scope="module")
def desk():
    return run_preset(get_preset("news2moore-desk"))


def pick(means, model, **kw):
    hits = [v for (m, N, K, F, pairs), v in means.items()
            if m == model and all({"N": N, "K": K, "F": F, "pairs": pairs}[k] == x for k, x in kw.items())]
    assert len(hits) == 1, (model, kw, hits)
    return hits[0]


def test_1_gradient_suite():
    results, secs = checks.timed(lambda: checks.gradient_suite(range(20)))
    bad = [r for r in results if not r.passed]
    worst_op = max(r.error for r in results if r.name.startswith("op/"))
    worst_comp = max(r.error for r in results if not r.name.startswith("op/"))
    ok = not bad and secs < 120
    report(1, ok, f"{len(results)} checks over 20 seeds, max op err {worst_op:.1e} (tol 1e-4), "
                  f"max composed err {worst_comp:.1e} (tol 1e-3), {secs:.1f}s (limit 120s)")
    assert ok, bad[:5]


def test_2_oracle_vi():
    results, secs = checks.timed(lambda: checks.oracle_suite(range(50)))
    worst = max(r.error for r in results)
    ok = all(r.passed for r in results) and secs < 60
    report(2, ok, f"50 seeds, max |V - V_tab| {worst:.1e} (tol 1e-5), {secs:.1f}s (limit 60s)")
    assert ok


def test_3_expert_sanity(tmp_path):
    runner = Runner(get_preset("news2moore-desk"), tmp_path)
    sets = [runner.test_set(s) for s in runner.p.seeds]
    for dom in (gw.NEWS, gw.MOORE, gw.DRIVE):
        for kind in ("obstacles", "maze"):
            for seed in range(3):
                sets.append(gw.sample_dataset(dom, 20, 3, gw.MapGen(9, kind=kind), seed, split="test"))
    scores = [ev.evaluate(ev.ExpertTablePolicy(t.domain), t) for t in sets]
    ok = all(r.pct_opt == 100.0 and r.pct_suc == 100.0 for r in scores)
    report(3, ok, f"{len(sets)} test sets, min %Opt {min(r.pct_opt for r in scores)}, "
                  f"min %Suc {min(r.pct_suc for r in scores)}")
    assert ok


def test_4_identity_transfer():
    src = vin.VinModel(vin.VinConfig(gw.NEWS, K=20, seed=4))
    model = tr.build_tvin(src, gw.NEWS, gw.NEWS, tr.default_mapping(gw.NEWS, gw.NEWS),
                          vin.VinConfig(gw.NEWS, K=20, seed=5))
    rng = np.random.default_rng(4)
    grids = [gw.MapGen(9)(s, gw.NEWS) for s in range(50)]
    obs = np.stack([gw.render_observation(gw.NEWS, g) for g in grids])
    batch = np.repeat(np.arange(50), 20)
    states = np.stack([rng.integers(9, size=1000), rng.integers(9, size=1000), np.zeros(1000, int)], axis=1)
    a = vin.attend_batch(vin.vi_forward(src, vin.reward_map(src, obs))[1], 4, 1, batch, states).data
    b = vin.attend_batch(vin.vi_forward(model, vin.reward_map(model, obs))[1], 4, 1, batch, states).data
    ok = a.shape == (1000, 4) and a.tobytes() == b.tobytes()
    report(4, ok, f"1000 random (map, state) inputs, max |dQ| {np.abs(a - b).max():.1e}")
    assert ok


@pytest.mark.slow
def test_5_transfer_helps_at_low_data(desk):
    runner, means = desk
    t, v = pick(means, "TVIN", N=200), pick(means, "VIN", N=200)
    mins = train_minutes(runner)
    ok = t[0] >= v[0] + 4 and t[1] >= v[1] + 4
    report(5, ok, f"N=200 3 seeds: TVIN %Opt/%Suc {t[0]:.1f}/{t[1]:.1f} vs VIN {v[0]:.1f}/{v[1]:.1f} "
                  f"(need +4); preset training time {mins:.1f} min on {os.cpu_count()} core(s)")
    assert ok


@pytest.mark.slow
def test_6_ordering(desk):
    _, means = desk
    v, i, t = (pick(means, m, N=200)[0] for m in ("VIN", "VIN_i", "TVIN"))
    ok = v <= i + 1.5 and i <= t + 1.5 and v <= t
    report(6, ok, f"N=200 mean %Opt: VIN {v:.1f} <= VIN_i {i:.1f} <= TVIN {t:.1f} (tie tol 1.5)")
    assert ok


@pytest.mark.slow
def test_7_action_ablation():
    _, means = run_preset(get_preset("action-ablation"))
    opt = [pick(means, "TVIN", pairs=k)[0] for k in (1, 2, 3, 4)]
    mono = all(b >= a - 2 for a, b in zip(opt, opt[1:]))
    ok = mono and opt[3] >= opt[0] + 2
    report(7, ok, "TVIN mean %Opt by pairs 1..4: " + " ".join(f"{x:.1f}" for x in opt)
                  + " (non-decreasing within 2, 4 >= 1 + 2)")
    assert ok


@pytest.mark.slow
def test_8_gap_shrinks(desk):
    _, means = desk
    gaps = {N: pick(means, "TVIN", N=N)[0] - pick(means, "VIN", N=N)[0] for N in (200, 1000)}
    ok = gaps[200] > gaps[1000]
    report(8, ok, f"TVIN - VIN %Opt gap: {gaps[200]:+.1f} at 200 maps, {gaps[1000]:+.1f} at 1000 maps")
    assert ok


@pytest.mark.slow
def test_9_kf_robustness():
    _, means = run_preset(get_preset("kf-sweep").with_overrides(F=(3, 5)))
    cells = {(K, F): (pick(means, "TVIN", K=K, F=F)[0], pick(means, "VIN", K=K, F=F)[0])
             for K in (10, 20, 30) for F in (3, 5)}
    ok = all(t >= v for t, v in cells.values())
    report(9, ok, "TVIN/VIN mean %Opt per (K,F): "
                  + " ".join(f"({K},{F}) {t:.1f}/{v:.1f}" for (K, F), (t, v) in cells.items()))
    assert ok


@pytest.mark.slow
def test_10_reference_determinism(tmp_path):
    small_desk = get_preset("news2moore-desk").with_overrides(seeds=(1,), target_n=(200,), epochs=2)
    presets = [get_preset("smoke"), small_desk]
    t0 = time.perf_counter()
    mismatches = {}
    for p in presets:
        first = Runner(p, tmp_path / p.name / "a", reference=True)
        first.run()
        mismatches.update(replay(first.manifest_path, tmp_path / p.name / "b"))
    ok = not mismatches
    report(10, ok, f"smoke and 1-seed desk presets rerun from scratch with --reference: "
                   f"{len(mismatches)} hash mismatches ({time.perf_counter() - t0:.0f}s)")
    assert ok, mismatches
