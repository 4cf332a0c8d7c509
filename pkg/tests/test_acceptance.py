"""Acceptance criteria 1-10, each printing one PASS/FAIL line."""

import time

import numpy as np
import pytest

from cfx.alignment import align_prototype, detect_rpeaks
from cfx.classifier import fit_reference_classifier, save_model
from cfx.cli import main
from cfx.clustering import DistanceMatrix, mds_embed, medoid
from cfx.data import write_dataset, zscore_stats
from cfx.dtw import dtw_distance
from cfx.engine import explain
from cfx.errors import EmptyRuleError
from cfx.metrics import evaluate_result, lp_sparsity, temporal_stability
from cfx.prototypes import MiningConfig, mine_prototypes, save_db
from cfx.rules import (RuleConfig, extract_rule, feature_sigma, global_threshold,
                       occlusion_attribution, score_rule)
from cfx.synth import beat_train, make_dataset

import test_metrics
from oracles import dtw_bruteforce, medoid_oracle, percentile_oracle

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return _report


@pytest.fixture(scope="module")
def run():
    t0 = time.perf_counter()
    train = make_dataset(n_per_class=200, n_timesteps=500, n_channels=4, seed=0)
    query = make_dataset(n_per_class=34, n_timesteps=500, n_channels=4, seed=1, prefix="q",
                         stats=train.stats).subset(range(100))
    model = fit_reference_classifier(train)
    config = MiningConfig()
    db = mine_prototypes(train, model, config)
    t_mine = time.perf_counter() - t0
    sigma = zscore_stats(train).sigma
    results, latencies, entries = [], [], []
    for i in range(len(query)):
        s = time.perf_counter()
        res = explain(query.series(i), model, db)
        latencies.append(time.perf_counter() - s)
        results.append(res)
        entries.append(evaluate_result(res, query.signals[i], model, sigma))
    return dict(train=train, query=query, model=model, db=db, config=config, results=results,
                latencies=np.array(latencies), entries=entries,
                runtime=time.perf_counter() - t0, t_mine=t_mine)


def _by_variant(entries, name):
    return [e for es in entries for e in es if e.variant == name]


def test_c01_validity_structure(run, report):
    orig = _by_variant(run["entries"], "Original")
    sparse = _by_variant(run["entries"], "Sparse")
    aligned = _by_variant(run["entries"], "Aligned Sparse")
    vo = np.mean([e.validity_multi for e in orig])
    vs = np.mean([e.validity_multi for e in sparse])
    va = np.mean([e.validity_multi for e in aligned]) if aligned else float("nan")
    ok = (len(orig) == len(sparse) == 100 and vo == 1.0 and vs == 1.0
          and (not aligned or 0.0 <= va <= 1.0) and run["runtime"] <= 600)
    report(1, ok, f"validity_multi Original={vo:.4f} Sparse={vs:.4f} Aligned Sparse={va:.4f} "
                  f"(n={len(aligned)}); mine {run['t_mine']:.1f}s, total {run['runtime']:.1f}s")


def test_c02_sparsity_ordering(run, report):
    orig = _by_variant(run["entries"], "Original")
    sparse = _by_variant(run["entries"], "Sparse")
    so = np.mean([e.sparsity_ratio for e in orig])
    ss = np.mean([e.sparsity_ratio for e in sparse])
    l0_ok = [s.l0 <= o.l0 for o, s in zip(orig, sparse)]
    ok = ss < so and all(l0_ok)
    report(2, ok, f"mean sparsity Sparse={ss:.4f} < Original={so:.4f}; "
                  f"L0(Sparse)<=L0(Original) for {np.mean(l0_ok):.0%} of queries")


def test_c03_dtw_oracle(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        c = int(rng.integers(1, 3))
        a = rng.standard_normal((int(rng.integers(1, 7)), c))
        b = rng.standard_normal((int(rng.integers(1, 7)), c))
        worst = max(worst, abs(dtw_distance(a, b) - dtw_bruteforce(a, b)))
    dt = time.perf_counter() - t0
    report(3, worst <= 1e-9 and dt <= 30,
           f"500 pairs, max |DP - enumeration| = {worst:.2e}, {dt:.1f}s")


def test_c04_mds_exactness(report):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst_stress = worst_rel = 0.0
    for _ in range(40):
        n = int(rng.integers(3, 31))
        dims = int(rng.integers(1, 6))
        P = rng.standard_normal((n, dims)) * rng.uniform(0.5, 5)
        D = np.linalg.norm(P[:, None] - P[None], axis=-1)
        e = mds_embed(D, dims)
        Z = np.linalg.norm(e.z[:, None] - e.z[None], axis=-1)
        iu = np.triu_indices(n, 1)
        worst_stress = max(worst_stress, e.stress)
        worst_rel = max(worst_rel, float(np.max(np.abs(Z[iu] - D[iu]) / D[iu])))
    dt = time.perf_counter() - t0
    ok = worst_stress <= 1e-6 and worst_rel <= 1e-4 and dt <= 10
    report(4, ok, f"40 embeddings, max stress {worst_stress:.2e}, max relative error "
                  f"{worst_rel:.2e}, {dt:.2f}s")


def test_c05_medoid_percentile(report):
    rng = np.random.default_rng(5)
    med_ok = 0
    for _ in range(200):
        n = int(rng.integers(1, 13))
        P = rng.standard_normal((n, 2))
        if rng.random() < 0.3:
            P = np.round(P)  # encourage ties
        D = np.linalg.norm(P[:, None] - P[None], axis=-1)
        ids = [f"r{i}" for i in range(n)]
        members = list(range(n))
        med_ok += medoid(ids, DistanceMatrix(D, ids)) == ids[medoid_oracle(members, D.tolist())]
    worst = 0.0
    for _ in range(200):
        vals = rng.standard_normal(int(rng.integers(1, 60))) * 10
        p = float(rng.uniform(0, 100))
        worst = max(worst, abs(global_threshold(vals, p) - percentile_oracle(vals, p)))
    ok = med_ok == 200 and worst <= 1e-12
    report(5, ok, f"medoid matches exhaustive argmin {med_ok}/200; "
                  f"percentile max error {worst:.1e}")


def test_c06_alignment(report):
    rng = np.random.default_rng(6)

    def pair_member():
        rr = rng.uniform(70, 100)
        peaks = np.arange(rng.uniform(15, 15 + rr), 495, rr).round()
        peaks = peaks + rng.integers(-2, 3, size=peaks.size)
        gains = rng.uniform(0.9, 1.1, size=4) * np.array([0.8, 1.2, 0.5, -0.6])
        return np.outer(beat_train(peaks, 500), gains)

    matched = hit = identity = 0
    for _ in range(100):
        p, q = pair_member(), pair_member()
        out, qm = align_prototype(p, q, return_peaks=True)
        found = set(detect_rpeaks(out).tolist())
        matched += len(qm)
        hit += sum(int(t) in found for t in qm)
        identity += np.array_equal(align_prototype(q, q), q)
    ok = hit == matched and identity == 100
    report(6, ok, f"aligned R-peaks coincide at {hit}/{matched} matched beats; "
                  f"self-alignment bit-exact {identity}/100")


def test_c07_metric_suite(report):
    rng = np.random.default_rng(7)
    fns = [getattr(test_metrics, n) for n in dir(test_metrics)
           if n.startswith("test_") and n.endswith("examples")]
    failed = []
    for fn in fns:
        try:
            fn(rng) if "rng" in fn.__code__.co_varnames[:fn.__code__.co_argcount] else fn()
        except AssertionError as exc:
            failed.append(f"{fn.__name__}: {exc}")
    const = temporal_stability(np.full((50, 3), 0.7))
    norm_ok = 0
    for _ in range(1000):
        shape = (int(rng.integers(2, 40)), int(rng.integers(1, 5)))
        _, l1, l2 = lp_sparsity(rng.standard_normal(shape), rng.standard_normal(shape))
        norm_ok += l2 <= l1
    ok = not failed and const == 1.0 and norm_ok == 1000
    report(7, ok, f"{len(fns) - len(failed)}/{len(fns)} example groups pass; "
                  f"temporal_stability(constant)={const}; L2<=L1 on {norm_ok}/1000 pairs"
                  + (f"; failures: {failed}" if failed else ""))


def test_c08_latency(run, report):
    lat = run["latencies"]
    med, p95 = float(np.median(lat)), float(np.percentile(lat, 95))
    n_proto = len(run["db"].entries)
    ok = med <= 1.0 and p95 <= 2.0 and n_proto <= 30
    report(8, ok, f"explain latency median {med * 1000:.1f} ms, p95 {p95 * 1000:.1f} ms "
                  f"over {len(lat)} queries, {n_proto} prototypes, band {run['config'].resolve_band(500)}")


def _brute_score(rule, X, preds):
    sat = np.array([all(lo < x[t, c] <= hi for t, c, lo, hi in rule.conjuncts) for x in X])
    cov = sat.sum() / len(X)
    if not sat.any():
        return cov, 0.0
    hits = [list(p) == rule.prediction for p in preds[sat]]
    return cov, sum(hits) / len(hits)


def test_c09_rule_soundness(run, report):
    train, query, model = run["train"], run["query"], run["model"]
    cfg = RuleConfig()
    idx = range(len(query))
    attrs = np.stack([occlusion_attribution(model, query.signals[i], 25) for i in idx])
    thr = global_threshold(attrs, cfg.percentile)
    sigma = feature_sigma(train)
    preds = model.predict_labels_batch(train.signals)
    rules = []
    for i in idx:
        for j in np.flatnonzero(model.predict_labels(query.signals[i])):
            try:
                rules.append((i, extract_rule(model, query.signals[i], attrs[i, j], train, cfg,
                                              class_index=int(j), threshold=thr, sigma_f=sigma,
                                              seed=i, record_id=query.record_ids[i],
                                              predictions=preds)))
            except EmptyRuleError:
                continue
            if len(rules) == 50:
                break
        if len(rules) == 50:
            break
    rng = np.random.default_rng(9)
    freqs, exact = [], 0
    for i, rule in rules:
        draws = np.repeat(query.signals[i][None], 1000, axis=0)
        for t, c, lo, hi in rule.conjuncts:
            draws[:, t, c] = rng.uniform(lo, hi, size=1000)
        keep = np.all(model.predict_labels_batch(draws) == rule.prediction, axis=1)
        freqs.append(keep.mean())
        brute = _brute_score(rule, train.signals, preds)
        exact += (rule.coverage, rule.confidence) == brute == score_rule(rule, train, model)
    ok = len(rules) == 50 and min(freqs) >= 0.99 and exact == 50
    report(9, ok, f"{len(rules)} rules, min preservation frequency {min(freqs):.3f}, "
                  f"mean conjuncts {np.mean([len(r.conjuncts) for _, r in rules]):.1f}; "
                  f"coverage/confidence exact {exact}/{len(rules)}")


def test_c10_determinism(run, report, tmp_path):
    train, query, model = run["train"], run["query"], run["model"]
    write_dataset(train, tmp_path / "train")
    write_dataset(query, tmp_path / "query")
    save_model(model, tmp_path / "model.json")
    save_db(run["db"], tmp_path / "db_api")
    common = ["--model", str(tmp_path / "model.json"), "--seed", "0"]
    assert main(["mine", "--dataset", str(tmp_path / "train"), "--db", str(tmp_path / "db_cli"),
                 *common]) == 0
    same = {}
    for name in ("prototypes.json", "proto_signals.f32"):
        same[f"db/{name}"] = ((tmp_path / "db_api" / name).read_bytes()
                              == (tmp_path / "db_cli" / name).read_bytes())
    for run_id in ("a", "b"):
        for rid in query.record_ids[:3]:
            assert main(["explain", "--dataset", str(tmp_path / "query"), "--db",
                         str(tmp_path / "db_cli"), "--record-id", rid, "--out",
                         str(tmp_path / run_id / "res" / rid), "--svg",
                         str(tmp_path / run_id / f"{rid}.svg"), *common]) == 0
        assert main(["evaluate", "--dataset", str(tmp_path / "query"), "--results",
                     str(tmp_path / run_id / "res"), "--out", str(tmp_path / run_id / "eval"),
                     *common]) == 0
    a = tmp_path / "a"
    for f in sorted(a.rglob("*")):
        if f.is_file() and f.name != "timing.json":
            rel = f.relative_to(a)
            same[str(rel)] = f.read_bytes() == (tmp_path / "b" / rel).read_bytes()
    bad = [k for k, v in same.items() if not v]
    report(10, not bad, f"{len(same) - len(bad)}/{len(same)} artifacts byte-identical "
                        f"(DB, result JSON/binary, CSV, SVG)" + (f"; differ: {bad}" if bad else ""))
