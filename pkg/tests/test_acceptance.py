"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the summary."""
import contextlib
import itertools
import json
import math
import shutil
import time

import numpy as np
import pytest
from scipy import integrate

from conftest import ACCEPTANCE_LINES
from sumo import cli, dsp, metrics, model, synth, train, verify
from sumo.postproc import SpindleEvent

# pinned tolerances and budgets
GRADCHECK_TOL = 1e-4
GRADCHECK_SECONDS = 60
H15_RANGE = (0.99, 1.01)
H60_MAX = 0.01
RESAMPLE_AMP_TOL = 0.01
DSP_SECONDS = 10
MATCH_THRESHOLDS = (0.1, 0.2, 0.5, 0.9)
MATCH_GRID = 6  # interval endpoints on {0, ..., 6}
MATCH_MAX_EVENTS = 4
MATCH_SECONDS = 60
LOSS_ZERO_TOL = 1e-7
LOSS_ONE_TOL = 1e-6
LOSS_GRAD_TOL = 1e-5
SPLIT_SECONDS = 30
E2E_F1_MIN = 0.80
E2E_R2_MIN = 0.8
E2E_SLOPE = (0.85, 1.15)
E2E_MAX_EPOCHS = 6  # pilot: test F1 at 0.2 reached 0.997 after 2 epochs and 1.0 from epoch 3
E2E_PATIENCE = 2
FISHER_TOL = 1e-6
CORR_TOL = 1e-12


@contextlib.contextmanager
def criterion(number, title):
    """Collect named checks and record a single PASS/FAIL line for the criterion."""
    checks: dict[str, tuple[bool, str]] = {}
    start = time.time()
    error = None
    try:
        yield checks
    except Exception as exc:  # recorded, then re-raised
        error = exc
        raise
    finally:
        elapsed = time.time() - start
        ok = error is None and bool(checks) and all(v[0] for v in checks.values())
        detail = "; ".join(f"{k}={v[1]}{'' if v[0] else ' (!)'}" for k, v in checks.items())
        if error is not None:
            detail += f"; error={error!r}"
        ACCEPTANCE_LINES[number] = (f"{'PASS' if ok else 'FAIL'}  criterion {number} {title} "
                                    f"[{elapsed:.1f} s]: {detail}")
    failed = [k for k, v in checks.items() if not v[0]]
    assert not failed, f"failed checks: {failed}"


def test_gradient_verification():
    with criterion(1, "gradient verification") as checks:
        start = time.time()
        results = verify.run_all(seed=0)
        elapsed = time.time() - start
        worst = max(results, key=lambda r: r.max_error)
        checks["layers_and_tiny_model"] = (all(r.max_error < GRADCHECK_TOL for r in results),
                                          f"max {worst.max_error:.2e} ({worst.name})")
        tiny = [r for r in results if r.name.startswith("model(levels=2, channels=[2, 4], T=64)")]
        checks["tiny_model_present"] = (len(tiny) == 1, len(tiny))
        checks["runtime"] = (elapsed < GRADCHECK_SECONDS, f"{elapsed:.1f}s")


def test_dsp_fidelity():
    with criterion(2, "DSP fidelity") as checks:
        start = time.time()
        f = dsp.design_bandpass(10, 0.3, 30, 256)
        z = np.exp(-2j * np.pi * np.array([15.0, 60.0]) / 256)
        h = np.ones(2, complex)
        for b, a in f.sections:
            h *= np.polyval(b[::-1], z) / np.polyval(a[::-1], z)
        h15, h60 = np.abs(h)
        checks["|H(15)|"] = (H15_RANGE[0] <= h15 <= H15_RANGE[1], f"{h15:.5f}")
        checks["|H(60)|"] = (h60 < H60_MAX, f"{h60:.5f}")
        t = np.arange(30 * 256) / 256
        lags = []
        for freq in (1.0, 5.0, 11.0, 15.0, 20.0, 25.0):
            x = np.sin(2 * np.pi * freq * t + 0.7)
            y = dsp.filtfilt(f, x)
            cc = [np.dot(x[40:-40], np.roll(y, k)[40:-40]) for k in range(-20, 21)]
            lags.append(int(np.argmax(cc)) - 20)
        checks["zero_phase_lags"] = (all(v == 0 for v in lags), lags)
        n = 115 * 256
        y = dsp.resample_to(np.sin(2 * np.pi * 10 * np.arange(n) / 256), 256, 100)
        ref = np.sin(2 * np.pi * 10 * np.arange(len(y)) / 100)
        err = float(np.max(np.abs(y - ref)))
        checks["resample_10Hz"] = (len(y) == 11500 and err < RESAMPLE_AMP_TOL,
                                   f"len {len(y)}, max dev {err:.2e}")
        elapsed = time.time() - start
        checks["runtime"] = (elapsed < DSP_SECONDS, f"{elapsed:.1f}s")


def interval_lists(grid, max_events):
    out = []

    def rec(start, cur):
        out.append([SpindleEvent(a, b - a) for a, b in cur])
        if len(cur) == max_events:
            return
        for a in range(start, grid):
            for b in range(a + 1, grid + 1):
                cur.append((a, b))
                rec(b, cur)
                cur.pop()

    rec(0, [])
    return out


_PERMS = {}


def optimal_tp(ok):
    """Exhaustive maximum one-to-one matching size."""
    n, m = ok.shape
    if n == 0 or m == 0:
        return 0
    if n > m:
        ok, n, m = ok.T, m, n
    key = (n, m)
    if key not in _PERMS:
        _PERMS[key] = np.array(list(itertools.permutations(range(m), n)))
    perms = _PERMS[key]
    return int(ok[np.arange(n), perms].sum(axis=1).max())


def naive_greedy_tp(iou, threshold):
    order = sorted(((-iou[i, j], i, j) for i in range(iou.shape[0]) for j in range(iou.shape[1])))
    used_r, used_d, tp = set(), set(), 0
    for neg, i, j in order:
        if i in used_r or j in used_d or -neg <= 0:
            continue
        used_r.add(i)
        used_d.add(j)
        tp += (-neg > threshold) or (-neg >= 1.0)
    return tp


def test_matching_oracle_equivalence():
    with criterion(3, "matching vs exhaustive oracle") as checks:
        start = time.time()
        corpus = interval_lists(MATCH_GRID, MATCH_MAX_EVENTS)
        # shift the detected side by half a unit so partial overlaps of every kind occur
        shifted = [[SpindleEvent(e.onset_s + 0.5, e.duration_s) for e in lst] for lst in corpus]
        disagreements = naive_diff = instances = 0
        for ref in corpus:
            for side in (corpus, shifted):
                for det in side:
                    iou = metrics.overlap_matrix(ref, det)
                    for theta in MATCH_THRESHOLDS:
                        m = metrics.match_events(ref, det, theta, iou)
                        best = optimal_tp((iou > theta) | (iou >= 1.0))
                        disagreements += m.tp != best
                        if ref and det and len(ref) + len(det) >= 3:
                            naive_diff += naive_greedy_tp(iou, theta) != best
                        instances += 1
        elapsed = time.time() - start
        checks["instances"] = (instances > 0, f"{instances} ({len(corpus)} lists per side)")
        checks["disagreements"] = (disagreements == 0, disagreements)
        checks["naive_greedy_suboptimal_cases"] = (True, naive_diff)
        checks["runtime"] = (elapsed < MATCH_SECONDS, f"{elapsed:.1f}s")


def test_loss_correctness():
    with criterion(4, "generalized dice loss") as checks:
        rng = np.random.default_rng(0)
        m = (rng.random((3, 500)) < 0.2).astype(float)
        m[:, 0], m[:, 1] = 1, 0
        r = train.one_hot(m).astype(np.float64)
        zero, _ = train.generalized_dice_loss(r.copy(), r)
        one, _ = train.generalized_dice_loss(1 - r, r)
        checks["perfect"] = (abs(zero) <= LOSS_ZERO_TOL, f"{zero:.2e}")
        checks["mismatch"] = (abs(one - 1) <= LOSS_ONE_TOL, f"{one:.8f}")
        grad = verify.check_dice(rng, tol=LOSS_GRAD_TOL)
        checks["gradient"] = (grad.passed, f"{grad.max_error:.2e}")
        p = rng.uniform(0.01, 0.99, (4, 1, 300))
        p = np.concatenate([p, 1 - p], axis=1)
        loss, g = train.generalized_dice_loss(p, train.one_hot(np.zeros((4, 300))))
        checks["no_spindle_batch"] = (bool(np.isfinite(loss) and np.all(np.isfinite(g))), f"{loss:.4f}")


def test_formula_suite():
    with criterion(5, "F1 formula and curve shape") as checks:
        rng = np.random.default_rng(5)
        bad = 0
        for tp, fp, fn in rng.integers(0, 500, (1000, 3)):
            p, r, f1 = metrics.prf(int(tp), int(fp), int(fn))
            denom = 2 * tp + fp + fn
            bad += not math.isclose(f1, 2 * tp / denom if denom else 1.0, abs_tol=1e-12)
            if p + r > 0:
                bad += not math.isclose(f1, 2 * p * r / (p + r), abs_tol=1e-12)
        checks["harmonic_mean_1000"] = (bad == 0, f"{bad} mismatches")
        violations = 0
        for _ in range(100):
            ref = random_events(rng, 60.0)
            det = random_events(rng, 60.0)
            f1s, _ = metrics.f1_curve_and_bar(ref, det)
            violations += any(b > a + 1e-12 for a, b in zip(f1s, f1s[1:]))
        checks["non_increasing_100"] = (violations == 0, f"{violations} violations")


def random_events(rng, span):
    events, t = [], rng.uniform(0, 3)
    while True:
        d = rng.uniform(0.3, 2.5)
        if t + d > span:
            return events
        events.append(SpindleEvent(t, d))
        t += d + rng.uniform(0.0, 6.0)


def test_split_procedure():
    with criterion(6, "median split") as checks:
        start = time.time()
        pool = []
        for i in range(100):
            pool.append(train.SubjectInfo(f"y{i:03d}", "younger", 10 if i < 15 else 3))
        for i in range(80):
            pool.append(train.SubjectInfo(f"o{i:03d}", "older", 10 if i < 15 else 3))
        rng = np.random.default_rng(6)
        quality = {s.subject_id: rng.uniform(0.6, 0.9) for s in pool}
        res = train.select_median_split(pool, lambda c: float(np.mean([quality[s] for s in c])),
                                        candidates=25, seed=6)
        info = {s.subject_id: s for s in pool}
        ok = 0
        for cand in res.candidates:
            good = all(info[s].n_segments < 10 for s in cand)
            for cohort in ("younger", "older"):
                members = [info[s] for s in cand if info[s].cohort == cohort]
                good &= len(members) == 18 and sum(m.n_segments for m in members) == 54
            ok += good
        checks["candidates_valid"] = (ok == 25 and len(res.candidates) == 25, f"{ok}/25")
        rank = sorted(range(25), key=lambda i: (res.scores[i], i)).index(res.chosen) + 1
        checks["selected_rank"] = (rank == 13, rank)
        checks["train_size"] = (len(res.train) == 144, len(res.train))
        elapsed = time.time() - start
        checks["runtime"] = (elapsed < SPLIT_SECONDS, f"{elapsed:.1f}s")


@pytest.mark.slow
def test_end_to_end_benchmark():
    with criterion(7, "end-to-end synthetic benchmark") as checks:
        start = time.time()
        cfg = synth.SynthConfig(snr=6.0, rate_per_min=4.0)
        subjects = []
        for i in range(100):
            segs = [synth.gen_segment(cfg, [7, i, j], f"subj{i:03d}", "younger" if i % 2 else "older")
                    for j in range(3)]
            subjects.append(segs)
        train_subj, test_subj = subjects[:80], subjects[80:]
        fit = [s for k, segs in enumerate(train_subj) if k % 6 for s in segs]
        val = [s for k, segs in enumerate(train_subj) if k % 6 == 0 for s in segs]
        stack = lambda segs: np.stack([s.segment.samples for s in segs]).astype(np.float32)
        masks = np.stack([train.rasterize(s.truth, 100, 11500) for s in fit])
        tcfg = train.TrainConfig(max_epochs=E2E_MAX_EPOCHS, patience_epochs=E2E_PATIENCE, seed=0)
        best, history = train.train_fold(stack(fit), masks, stack(val), [s.truth for s in val],
                                         model.ArchConfig(), tcfg)
        test_segs = [s for segs in test_subj for s in segs]
        detected = train.predict_events(best, stack(test_segs), 100)
        curve = metrics.pooled_curve(zip([s.truth for s in test_segs], detected), [0.2])
        f1 = curve[0].f1
        checks["F1@0.2"] = (f1 >= E2E_F1_MIN, f"{f1:.4f}")
        seg_subject = {f"{i}": s.segment.subject_id for i, s in enumerate(test_segs)}
        durations = {k: 115.0 for k in seg_subject}
        ref_stats = metrics.subject_stats({f"{i}": s.truth for i, s in enumerate(test_segs)},
                                          durations, seg_subject)
        det_stats = metrics.subject_stats({f"{i}": d for i, d in enumerate(detected)},
                                          durations, seg_subject)
        c = metrics.correlate([s.density_per_min for s in ref_stats],
                              [s.density_per_min for s in det_stats])
        checks["density_r2"] = (c.r2 >= E2E_R2_MIN, f"{c.r2:.4f}")
        checks["density_slope"] = (E2E_SLOPE[0] <= c.slope <= E2E_SLOPE[1], f"{c.slope:.4f}")
        checks["epochs"] = (True, f"{len(history)} (best {best.meta['epoch']})")
        checks["runtime"] = (True, f"{time.time() - start:.0f}s")


def test_statistics():
    with criterion(8, "correlation statistics") as checks:
        z, p = metrics.compare_correlations(0.7, 25, 0.7, 40)
        checks["equal_r_p"] = (z == 0 and p == 1.0, p)
        worst = 0.0
        for r1, n1, r2, n2 in [(0.906, 18, 0.592, 18), (0.3, 50, -0.2, 60), (0.8, 10, 0.1, 12),
                               (0.95, 100, 0.9, 100)]:
            z, p = metrics.compare_correlations(r1, n1, r2, n2)
            z_ref = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1 / (n1 - 3) + 1 / (n2 - 3))
            tail = integrate.quad(lambda u: math.exp(-u * u / 2) / math.sqrt(2 * math.pi),
                                  abs(z_ref), np.inf, epsabs=1e-14)[0]
            worst = max(worst, abs(z - z_ref), abs(p - 2 * tail))
        checks["fisher_vs_quadrature"] = (worst < FISHER_TOL, f"{worst:.1e}")
        rng = np.random.default_rng(8)
        dev = 0.0
        for _ in range(100):
            x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 10), int(rng.integers(3, 60)))
            c = metrics.correlate(x, x)
            dev = max(dev, abs(c.r - 1), abs(c.slope - 1))
        checks["self_correlation"] = (dev <= CORR_TOL, f"{dev:.1e}")


def test_determinism(tmp_path):
    with criterion(9, "determinism") as checks:
        digests = []
        root = tmp_path / "run"
        for rep in ("a", "b"):
            # same path both times, since the run config records its input paths
            if root.exists():
                shutil.rmtree(root)
            root.mkdir()
            (root / "synth.json").write_text(json.dumps({"segment_s": 20.0, "snr": 8.0}))
            (root / "arch.json").write_text(json.dumps(
                {"levels": 2, "pool_widths": [4], "channels": [2, 4], "dilations": [1, 1]}))
            (root / "train.json").write_text(json.dumps({"max_epochs": 2, "patience_epochs": 2,
                                                         "folds": 2, "seed": 3}))
            steps = [
                ["synth", "--config", root / "synth.json", "--out", root / "ds",
                 "--n-subjects", 12, "--seed", 11],
                ["split", "--dataset", root / "ds", "--scorer", "baseline", "--candidates", 3,
                 "--n-per-cohort", 2, "--segments-per-cohort", 6, "--out", root / "split.json"],
                ["train", "--dataset", root / "ds", "--split", root / "split.json", "--arch-config",
                 root / "arch.json", "--train-config", root / "train.json", "--out-dir", root / "run"],
                ["predict", "--model", root / "run" / "fold0" / "best.sumo", "--dataset",
                 root / "ds", "--out", "det"],
                ["eval", "--dataset", root / "ds", "--reference", "truth", "--detected", "det",
                 "--detected", "baseline", "--by-subject", "--out", root / "report.json"],
            ]
            codes = [cli.main([str(a) for a in step]) for step in steps]
            checks[f"exit_codes_{rep}"] = (codes == [0] * 5, codes)
            digests.append({str(p.relative_to(root)): p.read_bytes()
                            for p in sorted(root.rglob("*")) if p.is_file()})
        same = digests[0].keys() == digests[1].keys() and all(
            digests[0][k] == digests[1][k] for k in digests[0])
        checks["byte_identical"] = (same, f"{len(digests[0])} files")
