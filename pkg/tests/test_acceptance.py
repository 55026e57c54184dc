"""Acceptance criteria, one test per criterion, each printing a pass/fail line.

The end-to-end criteria (8 to 10) train real models with the numpy engine and
take most of an hour together on one core.
"""
import time
from collections import defaultdict

import numpy as np
import pytest

from remm import tensor as T
from remm.benchmark import (BUCKETS, RMSE_FAIL, SUCCESS_NCM, EvalRecord, angle_bucket, bucket_report,
                            build_benchmark, iter_benchmark, ncm, rmse, signed_angle)
from remm.cyclic import GROUP_SIZES, cyclic_shift, group, shift_value_from_angle
from remm.evaluate import EvalConfig, evaluate_pairs
from remm.geometry import make_homography, warp_points
from remm.net import NetConfig
from remm.pipeline import MatchSet, match_mutual_nn, nms_topk, ransac
from remm.synthetic import synth_pairs
from remm.train import TrainConfig, train

from oracles import apply_h, conv2d_loops, grad_rel_error, mutual_nn_loops, nms_loops

TRAIN_PAIRS_SEED = 1  # 32 training sources
TEST_PAIRS_SEED = 2  # 4 held-out sources, 420 benchmark pairs
SWEEP_STEPS = 400


@pytest.fixture
def report(criterion_log):
    def emit(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        criterion_log.append(line)
        print(line)
        assert ok, line

    return emit


# -- 1 to 3: shift arithmetic and algebra ------------------------------------------------
def test_criterion_01_shift_arithmetic(report):
    t = time.perf_counter()
    got = [shift_value_from_angle(a, 16) for a in range(0, 360, 10)]
    want = [int(np.floor(a / 22.5 + 0.5)) % 16 for a in range(0, 360, 10)]  # no .5 ties on this grid
    dt = time.perf_counter() - t
    report(1, got == want and dt < 1, f"36 angles, G=16, {sum(g == w for g, w in zip(got, want))}/36 equal, {dt:.3f}s")


def canonical_norm(v):
    """Euclidean norm summed in sorted order, so equal multisets give bit-equal norms."""
    return np.sqrt(np.sum(np.sort(np.square(v.astype(np.float64)))))


def test_criterion_02_cyclic_algebra(report):
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = 0
    for g in GROUP_SIZES:
        for _ in range(1000):
            gd = group(rng.standard_normal(128).astype(np.float32), g)
            a, b = (int(v) for v in rng.integers(0, 3 * g, 2))
            bad += not np.array_equal(cyclic_shift(cyclic_shift(gd, a), b).groups, cyclic_shift(gd, a + b).groups)
            bad += not np.array_equal(cyclic_shift(cyclic_shift(gd, a), g - a % g).groups, gd.groups)
            bad += not np.array_equal(cyclic_shift(gd, 0).groups, gd.groups)
            bad += canonical_norm(cyclic_shift(gd, a).flatten()) != canonical_norm(gd.flatten())
            bad += not np.array_equal(np.sort(cyclic_shift(gd, a).flatten()), np.sort(gd.flatten()))
    dt = time.perf_counter() - t
    report(2, bad == 0 and dt < 5, f"4000 descriptors x 5 identities, {bad} violations, {dt:.2f}s")


def binned_descriptor(rng, g):
    """Descriptor whose group i is the feature response of orientation bin i."""
    angles = rng.uniform(0, 360, 40)
    weights = rng.random(40)
    per = 128 // g
    d = np.zeros((g, per), np.float32)
    for a, w in zip(angles, weights):
        b = int(a // (360 / g))
        d[b, 0] += w
        d[b, 1:] += w * rng.random(per - 1)
    return d, angles, weights


def test_criterion_03_encoding_consistency(report):
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = total = 0
    for g in GROUP_SIZES:
        for _ in range(20):
            d, angles, weights = binned_descriptor(rng, g)
            for k in range(g):
                theta = k * 360.0 / g
                # rotating the content by theta moves every orientation to bin (b + k) mod g
                rot = np.zeros_like(d)
                for b in range(g):
                    rot[(b + k) % g] = d[b]
                hist = np.bincount(((angles + theta) % 360 // (360 / g)).astype(int), weights, g)
                assert np.allclose(rot[:, 0], hist, atol=1e-5)
                rec = cyclic_shift(group(rot.reshape(-1), g), shift_value_from_angle(theta, g))
                bad += not np.array_equal(rec.groups, d)
                total += 1
    dt = time.perf_counter() - t
    report(3, bad == 0 and dt < 5, f"{total} rotations over G in {GROUP_SIZES}, {bad} not recovered, {dt:.2f}s")


# -- 4 to 7: oracle suites -----------------------------------------------------------------
def test_criterion_04_gradient_suite(report):
    from test_net import LOSSES
    from test_tensor import PRIMITIVES, rnd

    t = time.perf_counter()
    worst = {}
    for name, (build, shapes, positive) in PRIMITIVES.items():
        worst[name] = max(grad_rel_error(build, [rnd(s * 31 + i, *sh, positive=positive and i < 2)
                                                 for i, sh in enumerate(shapes)]) for s in range(20))
    worst_gs = 0.0
    for s in range(20):
        r = np.random.default_rng(s)
        pts = r.uniform(-1.1, 1.1, (1, 3, 4, 2))
        worst_gs = max(worst_gs, grad_rel_error(lambda v: T.tsum(T.grid_sample(v[0], pts) * v[1]),
                                                [r.standard_normal((2, 3, 5, 6)), r.standard_normal((2, 3, 3, 4))]))
    worst["grid_sample"] = worst_gs
    prim_ok = all(v < 1e-4 for v in worst.values())
    loss_worst = {}
    for name, (build, shapes) in LOSSES.items():
        loss_worst[name] = max(grad_rel_error(build, [np.random.default_rng(s).random(sh) for sh in shapes])
                               for s in range(20))
    loss_ok = all(v < 1e-3 for v in loss_worst.values())
    dt = time.perf_counter() - t
    report(4, prim_ok and loss_ok and dt < 120,
           f"{len(worst)} primitives max rel err {max(worst.values()):.1e} (<1e-4), losses "
           + ", ".join(f"{k} {v:.1e}" for k, v in sorted(loss_worst.items())) + f" (<1e-3), 20 seeds, {dt:.1f}s")


def test_criterion_05_oracle_equivalence(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    fails = defaultdict(int)
    n_inst = 100
    for _ in range(n_inst):
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), 7, 8))
        k = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], 3, 3))
        bias = rng.standard_normal(k.shape[0])
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        got = T.conv2d(T.Tensor(x), T.Tensor(k), stride, pad, T.Tensor(bias)).data
        fails["conv2d"] += not np.allclose(got, conv2d_loops(x, k, stride, pad, bias), atol=1e-5)

        s = rng.random(tuple(rng.integers(5, 16, 2)))
        if rng.random() < 0.3:
            s = np.round(s * 4) / 4
        kk = int(rng.integers(1, 30))
        fails["nms_topk"] += [(int(p.x), int(p.y)) for p in nms_topk(s, 5, kk)] != nms_loops(s, 5, kk)

        g = int(rng.choice(GROUP_SIZES))
        mode = [None, "top1", 0.5, 0.1][int(rng.integers(4))]
        da = rng.standard_normal((int(rng.integers(1, 20)), 128)).astype(np.float32)
        db = rng.standard_normal((int(rng.integers(1, 20)), 128)).astype(np.float32)
        da /= np.linalg.norm(da, axis=1, keepdims=True)
        db /= np.linalg.norm(db, axis=1, keepdims=True)
        ms = match_mutual_nn(da, db, g, mode)
        want = mutual_nn_loops(da, db, g, mode)
        fails["mutual_nn"] += (list(zip(ms.idx_a, ms.idx_b)) != [(i, j) for i, j, _ in want]
                               or not np.allclose(ms.similarity, [v for *_, v in want], atol=1e-5))

        gt = make_homography(float(rng.uniform(-180, 180)), float(rng.uniform(0.5, 1)), tuple(rng.uniform(-5, 5, 2)))
        n = int(rng.integers(0, 40))
        pa = rng.uniform(0, 64, (n, 2))
        pb = apply_h(gt.m, pa) + rng.uniform(-4, 4, (n, 2))
        m = MatchSet(np.arange(n), np.arange(n), np.ones(n), np.zeros((n, 2), int), pa, pb)
        res = [float(np.hypot(*(apply_h(gt.m, p[None])[0] - q))) for p, q in zip(pa, pb)]
        good = [r for r in res if r < 3.0]
        want_rmse = float(np.sqrt(sum(r * r for r in good) / len(good))) if len(good) > 10 else RMSE_FAIL
        fails["ncm_rmse"] += ncm(m, gt) != len(good) or abs(rmse(m, gt) - want_rmse) > 1e-5

    for trial in range(n_inst):
        recs = []
        for i in range(int(rng.integers(1, 60))):
            c = int(rng.integers(0, 30))
            recs.append(EvalRecord(f"p{i}", c, float(rng.uniform(0, 3)) if c > SUCCESS_NCM else RMSE_FAIL,
                                   c > SUCCESS_NCM, BUCKETS[int(rng.integers(5))]))
        for row in bucket_report(recs):
            sel = [r for r in recs if row.bucket in ("all", r.angle_bucket)]
            succ = [r for r in sel if r.ncm > SUCCESS_NCM]
            want = (len(sel), 100 * len(succ) / len(sel) if sel else 0.0,
                    sum(r.ncm for r in succ) / len(succ) if succ else 0.0,
                    sum(r.rmse for r in succ) / len(succ) if succ else RMSE_FAIL)
            fails["aggregation"] += not np.allclose((row.pairs, row.sr, row.ncm, row.rmse), want, atol=1e-9)
    dt = time.perf_counter() - t
    ok = sum(fails.values()) == 0 and dt < 120
    names = ("conv2d", "nms_topk", "mutual_nn", "ncm_rmse", "aggregation")
    report(5, ok, f"{n_inst} instances each, mismatches " + ", ".join(f"{k} {fails[k]}" for k in names) + f", {dt:.1f}s")


def test_criterion_06_ransac_recovery(report):
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    grid = np.stack(np.meshgrid(np.linspace(0, 64, 9), np.linspace(0, 64, 9)), -1).reshape(-1, 2)
    good = 0
    for _ in range(50):
        m = make_homography(rng.uniform(-180, 180), rng.uniform(0.5, 1.5), tuple(rng.uniform(-20, 20, 2)),
                            (32, 32)).m @ np.array([[1, 0, 0], [0, 1, 0], [*rng.normal(0, 5e-4, 2), 1]])
        src = rng.uniform(0, 64, (100, 2))
        dst = warp_points(m, src)[0]
        src = np.concatenate([src, rng.uniform(0, 64, (50, 2))])
        dst = np.concatenate([dst, rng.uniform(-20, 84, (50, 2))])
        perm = rng.permutation(150)
        est = ransac(src[perm], dst[perm], 3.0, 2000, 0)
        err = np.linalg.norm(warp_points(est.h, grid)[0] - warp_points(m, grid)[0], axis=1).max()
        good += err < 0.5
    dt = time.perf_counter() - t
    report(6, good >= 49 and dt < 60, f"{good}/50 homographies within 0.5 px on a 9x9 grid, {dt:.1f}s")


def test_criterion_07_benchmark_counts(report, tmp_path):
    t = time.perf_counter()
    one = build_benchmark(synth_pairs(1, seed=7), tmp_path / "one", seed=0)
    sources = synth_pairs(316, seed=7)
    many = build_benchmark(sources, tmp_path / "many", seed=0, write_images=False)
    lines = len((tmp_path / "many" / "manifest.tsv").read_text().splitlines())
    dt = time.perf_counter() - t
    report(7, len(one) == 105 and len(many) == lines == 33180 and dt < 60,
           f"1 source -> {len(one)} pairs, 316 sources -> {len(many)} pairs ({lines} manifest lines), {dt:.1f}s")


# -- 8 to 10: synthetic end-to-end --------------------------------------------------------
@pytest.fixture(scope="session")
def heldout():
    return [bp for _, bp in iter_benchmark(synth_pairs(4, seed=TEST_PAIRS_SEED))]


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_g16")
    t = time.perf_counter()
    params = train(synth_pairs(32, seed=TRAIN_PAIRS_SEED), NetConfig(g_size=16), TrainConfig(steps=1500), out)
    return params, time.perf_counter() - t, out


@pytest.fixture(scope="session")
def end_to_end(trained, heldout):
    params, train_s, out = trained
    t = time.perf_counter()
    recs = evaluate_pairs(heldout, params, NetConfig(g_size=16), EvalConfig(shift_mode=0.1), modes=(0.1,))[0.1]
    return recs, train_s, time.perf_counter() - t, out


def test_criterion_08_synthetic_end_to_end(report, end_to_end):
    recs, train_s, eval_s, out = end_to_end
    rows = bucket_report(recs)
    overall = rows[-1].sr
    worst = min(r.sr for r in rows[:-1])
    log = np.genfromtxt(out / "train_log.csv", delimiter=",", names=True)
    total = (train_s + eval_s) / 60
    ok = len(recs) == 420 and overall >= 90 and worst >= 80 and total <= 30
    report(8, ok, f"420 pairs SR {overall:.1f}% (>=90), worst bucket {worst:.1f}% (>=80), "
                  + " ".join(f"{r.bucket}:{r.sr:.0f}" for r in rows[:-1])
                  + f"; L_all step0 {log['L_all'][0]:.3f} step200 {log['L_all'][200]:.3f}; "
                  f"train {train_s / 60:.1f} + eval {eval_s / 60:.1f} min (<=30)")


def test_training_curve_drops_by_step_200(end_to_end):
    out = end_to_end[3]
    log = np.genfromtxt(out / "train_log.csv", delimiter=",", names=True)
    assert log["L_all"][200] < log["L_all"][0]


def test_trained_descriptors_agree_across_modalities(trained):
    """Corresponding points of an aligned pair beat random pixel pairs by >= 0.3 cosine."""
    from remm.net import extract_features

    params = trained[0]
    rng = np.random.default_rng(0)
    gaps = []
    for a, b in synth_pairs(4, seed=TEST_PAIRS_SEED):
        fa = extract_features(a, "A", params, NetConfig(g_size=16)).descriptors.data[0].reshape(128, -1)
        fb = extract_features(b, "B", params, NetConfig(g_size=16)).descriptors.data[0].reshape(128, -1)
        same = np.sum(fa * fb, axis=0).mean()
        i, j = rng.integers(0, fa.shape[1], (2, 4000))
        gaps.append(same - np.sum(fa[:, i] * fb[:, j], axis=0).mean())
    assert min(gaps) >= 0.3, gaps


def monotone_with_slack(values, slack=0.05):
    """Non-decreasing except single-step drops of at most ``slack`` (relative)."""
    drops = [(a - b) / max(abs(a), 1e-12) for a, b in zip(values, values[1:]) if b < a]
    return all(d <= slack for d in drops), drops


def test_criterion_09_cyclic_shift_ablation(report, trained, heldout):
    params = trained[0]
    ratios = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
    modes = (None,) + ratios
    t = time.perf_counter()
    res = evaluate_pairs(heldout, params, NetConfig(g_size=16), EvalConfig(), modes=modes)
    dt = time.perf_counter() - t

    def mean_ncm(recs, large=False):
        sel = [r for r in recs if not large or abs(signed_angle(r.theta_deg)) > 30]
        return float(np.mean([r.ncm for r in sel]))

    off, on = mean_ncm(res[None], True), mean_ncm(res[0.1], True)
    drop = 1 - off / on if on else 0.0
    ncms = [mean_ncm(res[r]) for r in ratios]
    secs = [sum(r.seconds for r in res[m]) for m in ratios]
    ncm_ok, ncm_drops = monotone_with_slack(ncms)
    t_ok, t_drops = monotone_with_slack(secs)
    ok = drop >= 0.30 and ncm_ok and t_ok and dt < 15 * 60
    report(9, ok, f"|theta|>30 mean NCM no-shift {off:.1f} vs R=0.1 {on:.1f} (drop {100 * drop:.0f}%, >=30); "
                  f"NCM R0.9..0.1 " + " ".join(f"{v:.1f}" for v in ncms)
                  + f"; match s " + " ".join(f"{v:.1f}" for v in secs)
                  + f"; worst drops ncm {max(ncm_drops, default=0):.3f} time {max(t_drops, default=0):.3f}; {dt / 60:.1f} min")


def test_criterion_10_group_size_sweep(report, heldout, tmp_path):
    t = time.perf_counter()
    srs = {}
    for g in GROUP_SIZES:
        params = train(synth_pairs(32, seed=TRAIN_PAIRS_SEED), NetConfig(g_size=g),
                       TrainConfig(steps=SWEEP_STEPS, log_every=0), tmp_path / f"g{g}")
        recs = evaluate_pairs(heldout, params, NetConfig(g_size=g), EvalConfig(shift_mode=0.1), modes=(0.1,))[0.1]
        srs[g] = bucket_report(recs)[-1].sr
    dt = time.perf_counter() - t
    report(10, all(v > 0 for v in srs.values()) and dt < 30 * 60,
           "SR " + ", ".join(f"G={g}: {v:.1f}%" for g, v in srs.items())
           + f" ({SWEEP_STEPS} training steps each), {dt / 60:.1f} min")
