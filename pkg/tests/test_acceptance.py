"""Acceptance criteria, one PASS/FAIL line each.

The end-to-end benchmark runs the full desk-scale configuration and takes
several minutes; it is marked ``slow`` but is part of the default run.
"""

import csv
import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import STRATEGY_SPEC
from covsel import cds
from covsel.cli import main
from covsel.harness import compare, load_results, run_experiment
from covsel.novelty import SV_TOL, KernelSpec, train_ocsvm
from covsel.oracle import gen_synthetic
from covsel.strategy import StrategyConfig, replay
from test_cds import as_dict, exact_impurity

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).parent / "fixtures"
REFERENCE_INI = ROOT / "configs" / "reference.ini"


@pytest.fixture
def report(capsys):
    """Print a verdict line outside pytest's capture, then assert it."""

    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return emit


def read_csv(name):
    with open(FIXTURES / name, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- tables


def test_table_arithmetic(report):
    counts = {}
    for r in read_csv("published_counts.csv"):
        counts.setdefault(r["strategy"], {})[float(r["level"])] = [int(r["tests"])]
    comp = compare(counts, "random")
    worst, n = 0.0, 0
    for r in read_csv("published_savings.csv"):
        got = comp.row(r["strategy"], float(r["level"])).savings
        worst = max(worst, abs(got - float(r["savings_pct"])))
        n += 1
    report("table arithmetic", n == 18 and worst <= 0.01, f"{n} cells, max deviation {worst:.4f} pts (tol 0.01)")


# ---------------------------------------------------------------- OCSVM


def ocsvm_instances(count=60):
    rng = np.random.default_rng(2024)
    nus = (0.3, 0.5, 1.0)
    for k in range(count):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        yield rng.normal(size=(n, d)), max(nus[k % 3], 1.0 / n), 1.0 / d


def test_ocsvm_against_active_set_oracle(report):
    t0 = time.perf_counter()
    worst = dict(objective=0.0, score=0.0, sum=0.0, box=0.0, margin=0.0)
    nu_ok, count = True, 0
    probe_rng = np.random.default_rng(7)
    for X, nu, gamma in ocsvm_instances():
        n = len(X)
        m = train_ocsvm(X, nu=nu, kernel=KernelSpec(gamma))
        alpha, rho, obj = oracles.ocsvm_active_set(X, nu, gamma)
        probe = np.vstack([X, probe_rng.normal(size=(10, X.shape[1]))])
        a = np.zeros(n)
        a[m.support_ids] = m.alphas
        worst["objective"] = max(worst["objective"], abs(m.objective - obj))
        want = oracles.ocsvm_scores(X, alpha, rho, gamma, probe)
        worst["score"] = max(worst["score"], float(np.max(np.abs(m.decision(probe) - want))))
        worst["sum"] = max(worst["sum"], abs(a.sum() - 1.0))
        worst["box"] = max(worst["box"], max(0.0, -a.min(), a.max() - m.upper_bound))
        margin = (m.alphas > SV_TOL) & (m.alphas < m.upper_bound - SV_TOL)
        if margin.any():
            worst["margin"] = max(worst["margin"], float(np.max(np.abs(m.decision(m.support_vectors[margin])))))
        at_bound = np.sum(a >= m.upper_bound - SV_TOL) / n
        sv_frac = np.sum(a > SV_TOL) / n
        nu_ok &= bool(at_bound <= nu + 1.0 / n and sv_frac >= nu - 1.0 / n)
        count += 1
    elapsed = time.perf_counter() - t0
    ok = (
        count >= 50
        and worst["objective"] <= 1e-6
        and worst["score"] <= 1e-4
        and worst["sum"] <= 1e-8
        and worst["box"] <= 1e-8
        and worst["margin"] <= 1e-4
        and nu_ok
        and elapsed < 30
    )
    detail = (
        f"{count} instances, |dobj| {worst['objective']:.1e}, |dscore| {worst['score']:.1e}, "
        f"|sum-1| {worst['sum']:.1e}, box {worst['box']:.1e}, margin {worst['margin']:.1e}, "
        f"nu-property {'ok' if nu_ok else 'violated'}, {elapsed:.1f}s"
    )
    report("OCSVM vs active-set oracle", ok, detail)


# ---------------------------------------------------------------- trees


def test_tree_against_exhaustive_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatches = count = 0
    for _ in range(400):
        n, d = int(rng.integers(1, 17)), int(rng.integers(1, 5))
        depth, min_leaf = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        X = rng.integers(0, int(rng.integers(2, 7)), size=(n, d)).astype(float)
        y = rng.integers(0, 2, size=n)
        t = cds.train_tree(cds.TrainingSet.from_arrays(X, y), cds.TreeParams(depth, min_leaf))
        ref = oracles.greedy_tree(X.tolist(), y.tolist(), depth, min_leaf)
        mismatches += exact_impurity(t) != oracles.tree_impurity(ref) or as_dict(t) != ref
        count += 1

    # XOR on a 4x4 grid: needs the full depth, so four rules
    grid = np.array([(a, b) for a in (0.125, 0.375, 0.625, 0.875) for b in (0.125, 0.375, 0.625, 0.875)])
    Xr = np.hstack([grid, rng.random((16, 2))])
    ts = cds.TrainingSet.from_arrays(Xr, (Xr[:, 0] > 0.5) ^ (Xr[:, 1] > 0.5))
    clf = cds.GroupClassifier(0, cds.train_tree(ts, cds.TreeParams(2, 1)))
    rules = cds.extract_rules(clf)
    not_one = sum(sum(r.holds(x) for r in rules) != 1 for x in rng.random((1000, 4)))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and not_one == 0 and elapsed < 30
    report(
        "decision tree vs exhaustive-split oracle",
        ok,
        f"{count} trees, {mismatches} mismatches; {len(rules)} rules, {not_one}/1000 inputs without exactly one rule; "
        f"{elapsed:.1f}s",
    )


# ---------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference")
    t0 = time.perf_counter()
    code = main(["run", "--config", str(REFERENCE_INI), "--out", str(out), "--jobs", "1"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return load_results(out), elapsed


def counts_table(results):
    table = {}
    for r in sorted(results, key=lambda r: (r.label, r.config.seed)):
        per = table.setdefault(r.label, {})
        per[str(r.config.seed)] = {f"{lv:g}": n for lv, n in sorted(r.tests_to_level.items())}
    return table


def median_at(results, label, level):
    vals = [r.tests_to_level[level] for r in results if r.label == label]
    return statistics.median(float("inf") if v is None else v for v in vals)


@pytest.mark.slow
def test_reference_ndv_beats_random(reference_run, report):
    results, _ = reference_run
    rnd, ndv = median_at(results, "random", 0.95), median_at(results, "ndv", 0.95)
    cut = (ndv - rnd) / rnd * 100
    report("NDV tests-to-95% vs random", cut <= -10.0, f"median {ndv:g} vs {rnd:g} ({cut:+.1f}%, need <= -10%)")


@pytest.mark.slow
@pytest.mark.parametrize("label", ["uha", "iha"])
def test_reference_hybrid_beats_random(reference_run, report, label):
    results, _ = reference_run
    rnd, hyb = median_at(results, "random", 0.99), median_at(results, label, 0.99)
    cut = (hyb - rnd) / rnd * 100
    report(f"{label.upper()} tests-to-99% vs random", cut <= -5.0, f"median {hyb:g} vs {rnd:g} ({cut:+.1f}%, need <= -5%)")


@pytest.mark.slow
def test_reference_counts_frozen(reference_run, report):
    results, _ = reference_run
    want = json.loads((FIXTURES / "reference_counts.json").read_text())
    got = counts_table(results)
    diffs = [
        f"{lab} s{s} @{lv}: {got.get(lab, {}).get(s, {}).get(lv)} != {n}"
        for lab, per in want.items()
        for s, levels in per.items()
        for lv, n in levels.items()
        if got.get(lab, {}).get(s, {}).get(lv) != n
    ]
    ok = not diffs and got == want
    report("reference counts frozen (+-0)", ok, "all counts match" if ok else "; ".join(diffs[:5]) or "label/seed sets differ")


@pytest.mark.slow
def test_reference_runtime(reference_run, report):
    _, elapsed = reference_run
    report("reference benchmark runtime", elapsed < 600, f"{elapsed:.0f}s for 4 strategies x 5 seeds (limit 600s)")


# ---------------------------------------------------------------- determinism


def test_jobs_byte_identical(tmp_path, report):
    spec = STRATEGY_SPEC.to_dict()
    ini = "[synthetic]\n" + "".join(f"{k} = {v}\n" for k, v in spec.items())
    ini += "[run]\nstrategies = random, ndv, uha, iha\nseeds = 1, 2, 3\nbaseline = random\n"
    ini += "[strategy]\nbatch_size = 50\nswitch_levels = 0.7, 0.85\n"
    cfg = tmp_path / "run.ini"
    cfg.write_text(ini)
    outs = {}
    for name, jobs in (("a1", 1), ("b8", 8), ("c1", 1)):
        assert main(["run", "--config", str(cfg), "--jobs", str(jobs), "--out", str(tmp_path / name)]) == 0
        root = tmp_path / name
        outs[name] = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    n_results = sum(k.endswith(".result.json") for k in outs["a1"])
    ok = n_results == 12 and outs["a1"] == outs["b8"] == outs["c1"]
    report("determinism --jobs 1 vs --jobs 8", ok, f"{len(outs['a1'])} files, {n_results} results, byte-identical={ok}")


# ---------------------------------------------------------------- UHA replay


def test_uha_pre_switch_replay(report):
    db = gen_synthetic(STRATEGY_SPEC).db
    base = dict(batch_size=25, switch_levels=(0.7, 0.85), seed=3)
    uha_cfg = StrategyConfig(kind="uha", **base)
    uha = run_experiment(db, uha_cfg)
    rnd = run_experiment(db, StrategyConfig(kind="random", **base))
    switch = uha.diagnostics["phase_switches"][0][1]
    same = all(uha.trace[k].ids == rnd.trace[k].ids for k in range(switch))
    replayed = replay(StrategyConfig(kind="random", **base), db, uha.trace[:switch], policy="random")
    ok = switch >= 2 and same and all(replayed)
    report("UHA pre-switch replay", ok, f"{switch} pre-switch batches, equal to standalone random={same}, replay={all(replayed)}")
