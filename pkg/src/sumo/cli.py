"""Command-line entry point: ``sumo <verb> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dsp, metrics, model, synth, train, verify
from .dataset import Dataset, dump_json, write_dataset
from .errors import ConfigError, FormatError, TrainingDivergedError
from .postproc import SpindleEvent

log = logging.getLogger("sumo")

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    return max(1, int(os.environ.get("SUMO_THREADS", "1")))


def _subject_infos(ds: Dataset, subject_ids=None) -> list[train.SubjectInfo]:
    counts: dict[str, int] = {}
    for seg in ds.segments:
        counts[seg.subject_id] = counts.get(seg.subject_id, 0) + 1
    ids = sorted(ds.subjects) if subject_ids is None else sorted(subject_ids)
    return [train.SubjectInfo(s, ds.subjects[s], counts.get(s, 0)) for s in ids]


def _annotations(ds: Dataset, name: str) -> dict[str, list[SpindleEvent]]:
    try:
        return ds.read_annotations(name)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    cfg = synth.SynthConfig.from_dict(_load_json(args.config))
    n = args.n_subjects
    n_older = n // 2 if args.n_older is None else args.n_older
    if not 0 <= n_older <= n or not 0 <= args.ten_segment_subjects <= n:
        raise UsageError("inconsistent subject counts")
    n_younger = n - n_older
    # ten-segment subjects are split between cohorts, younger first
    heavy_y = min(n_younger, (args.ten_segment_subjects + 1) // 2)
    heavy_o = args.ten_segment_subjects - heavy_y
    if heavy_o > n_older:
        raise UsageError("not enough older subjects for the ten-segment group")
    subjects, plan = {}, []
    for i in range(n):
        sid = f"subj{i:03d}"
        younger = i < n_younger
        subjects[sid] = "younger" if younger else "older"
        rank = i if younger else i - n_younger
        heavy = rank < (heavy_y if younger else heavy_o)
        plan.append((i, sid, 10 if heavy else args.segments_per_subject))
    truth, baseline, signals = {}, {}, []
    for i, sid, n_seg in plan:
        for j in range(n_seg):
            seg_id = f"{sid}_seg{j:02d}"
            s = synth.gen_segment(cfg, [args.seed, i, j], sid, subjects[sid], seg_id)
            signals.append((seg_id, sid, s.segment.samples, cfg.fs))
            truth[seg_id] = s.truth
            baseline[seg_id] = synth.jitter_annotations(s.truth, cfg, [args.seed, i, j, 1])
    ds = write_dataset(args.out, subjects, signals)
    ds.write_annotations("truth", truth)
    if args.baseline_name:
        ds.write_annotations(args.baseline_name, baseline)
    dump_json({"synth": cfg.to_dict(), "seed": args.seed}, Path(args.out) / "synth_config.json")
    print(f"wrote {len(subjects)} subjects, {len(signals)} segments to {args.out}")
    return 0


# ---------------------------------------------------------------- preprocess

def cmd_preprocess(args) -> int:
    src = Dataset.open(args.dataset)

    def work(seg):
        raw = dsp.RawSegment(src.read_signal(seg), seg.fs, seg.subject_id,
                             src.subjects[seg.subject_id], seg.segment_id)
        return dsp.preprocess(raw, fs_out=args.fs)

    with ThreadPoolExecutor(_threads(args)) as pool:
        done = list(pool.map(work, src.segments))
    out = write_dataset(args.out, src.subjects,
                        ((s.segment_id, s.subject_id, s.samples, s.fs) for s in done))
    durations = {s.segment_id: s.duration_s for s in done}
    for name in src.annotation_names():
        events = {}
        for seg_id, evs in src.read_annotations(name).items():
            end = durations[seg_id]
            kept = []
            for ev in evs:
                stop = min(ev.offset_s, end)
                if stop > ev.onset_s:
                    kept.append(SpindleEvent(ev.onset_s, stop - ev.onset_s))
            events[seg_id] = kept
        out.write_annotations(name, events)
    print(f"preprocessed {len(done)} segments to {args.out}")
    return 0


# ---------------------------------------------------------------- split

def pooled_f1(reference, detected, segment_ids, threshold=0.2) -> float:
    curve = metrics.pooled_curve(((reference[s], detected[s]) for s in segment_ids), [threshold])
    return curve[0].f1


def cmd_split(args) -> int:
    ds = Dataset.open(args.dataset)
    scored = _annotations(ds, args.scorer)
    reference = _annotations(ds, args.reference)
    by_subject: dict[str, list[str]] = {}
    for seg in ds.segments:
        by_subject.setdefault(seg.subject_id, []).append(seg.segment_id)

    def scorer(test_subjects):
        segs = [s for subj in test_subjects for s in by_subject[subj]]
        return pooled_f1(reference, scored, segs)

    res = train.select_median_split(_subject_infos(ds), scorer, candidates=args.candidates,
                                    seed=args.seed, n_per_cohort=args.n_per_cohort,
                                    segments_per_cohort=args.segments_per_cohort)
    ranked = sorted(range(len(res.scores)), key=lambda i: (res.scores[i], i))
    print("rank  candidate  F1@0.2")
    for rank, i in enumerate(ranked, 1):
        mark = "  <- selected" if i == res.chosen else ""
        print(f"{rank:4d}  {i:9d}  {res.scores[i]:.4f}{mark}")
    out = Path(args.out) if args.out else Path(args.dataset) / "split.json"
    dump_json({"train": res.train, "test": res.test, "candidate_scores": res.scores,
               "chosen": res.chosen, "scorer": args.scorer, "reference": args.reference,
               "seed": args.seed}, out)
    print(f"train {len(res.train)} subjects, test {len(res.test)} subjects -> {out}")
    return 0


# ---------------------------------------------------------------- train

def _stack(ds: Dataset, segs) -> np.ndarray:
    signals = [ds.read_signal(s) for s in segs]
    lengths = {len(x) for x in signals}
    if len(lengths) > 1:
        raise UsageError(f"segments differ in length ({sorted(lengths)}); batching needs equal lengths")
    return np.stack(signals).astype(np.float32)


def _save_state(state: train.TrainState, fold_dir: Path) -> None:
    extra = {}
    for name in state.adam.m:
        extra[f"adam.m.{name}"] = state.adam.m[name]
        extra[f"adam.v.{name}"] = state.adam.v[name]
    last = model.ModelParams(state.params.arch, state.params.tensors, {
        "epoch": state.epoch, "adam_t": state.adam.t, "best_f1_bar": state.best_score,
        "since_best": state.since_best, "history": state.history})
    model.save(last, fold_dir / "last.sumo", extra)
    if state.best is not None:
        model.save(state.best, fold_dir / "best.sumo")
    with open(fold_dir / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_f1_bar"])
        for h in state.history:
            w.writerow([h["epoch"], f"{h['loss']:.8f}", f"{h['val_f1_bar']:.8f}"])


def _load_state(fold_dir: Path, arch) -> train.TrainState:
    params, extra = model.load(fold_dir / "last.sumo", arch, with_extra=True)
    meta = params.meta
    adam = train.AdamState(t=int(meta["adam_t"]))
    for key, arr in extra.items():
        _, which, name = key.split(".", 2)
        (adam.m if which == "m" else adam.v)[name] = arr.copy()
    best = model.load(fold_dir / "best.sumo", arch) if (fold_dir / "best.sumo").exists() else None
    return train.TrainState(params, adam, int(meta["epoch"]), best,
                            float(meta["best_f1_bar"]), int(meta["since_best"]),
                            list(meta["history"]))


def cmd_train(args) -> int:
    ds = Dataset.open(args.dataset)
    if not Path(args.split).is_file():
        raise UsageError(f"split file {args.split} not found")
    split = _load_json(args.split)
    arch = model.ArchConfig.from_dict(_load_json(args.arch_config))
    tcfg = train.TrainConfig.from_dict(_load_json(args.train_config))
    reference = _annotations(ds, args.reference)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"arch": arch.to_dict(), "train": tcfg.to_dict(), "reference": args.reference,
               "split": str(args.split)}, out / "config.json")
    infos = _subject_infos(ds, split["train"])
    folds = train.make_folds(infos, tcfg.folds, seed=tcfg.seed)
    run_folds = args.fold if args.fold else list(range(tcfg.folds))
    for fold in run_folds:
        if not 0 <= fold < tcfg.folds:
            raise UsageError(f"fold {fold} out of range")
        val_subj = {s for s, f in folds.items() if f == fold}
        train_subj = set(folds) - val_subj
        if not train_subj:
            # single-fold runs validate on the training data itself
            train_subj = val_subj
        tr_segs = ds.segments_of(train_subj)
        va_segs = ds.segments_of(val_subj)
        x_tr = _stack(ds, tr_segs)
        masks = np.stack([train.rasterize(reference[s.segment_id], s.fs, len(x))
                          for s, x in zip(tr_segs, x_tr)])
        x_va = _stack(ds, va_segs)
        fs = tr_segs[0].fs
        fold_dir = out / f"fold{fold}"
        fold_dir.mkdir(exist_ok=True)
        state = _load_state(fold_dir, arch) if args.resume and (fold_dir / "last.sumo").exists() else None
        try:
            best, history = train.train_fold(
                x_tr, masks, x_va, [reference[s.segment_id] for s in va_segs], arch, tcfg,
                fs=fs, state=state, on_epoch=lambda st: _save_state(st, fold_dir))
        except TrainingDivergedError as exc:
            print(f"fold {fold}: training diverged: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"fold {fold}: best validation F1-bar {best.meta['best_f1_bar']:.4f} "
              f"at epoch {best.meta['epoch']} ({len(history)} epochs)")
    return 0


# ---------------------------------------------------------------- predict

def cmd_predict(args) -> int:
    arch = model.ArchConfig.from_dict(_load_json(args.arch_config)) if args.arch_config else None
    try:
        params = model.load(args.model, arch)
    except FormatError as exc:
        raise UsageError(str(exc)) from exc
    ds = Dataset.open(args.dataset)
    events: dict[str, list[SpindleEvent]] = {}
    by_len: dict[int, list] = {}
    for seg in ds.segments:
        by_len.setdefault(seg.n_samples, []).append(seg)
    for n, segs in sorted(by_len.items()):
        if n < params.arch.min_length:
            raise UsageError(f"segments of {n} samples are shorter than the model allows")
        x = _stack(ds, segs)
        for seg, evs in zip(segs, train.predict_events(params, x, segs[0].fs, args.batch_size)):
            events[seg.segment_id] = evs
    path = ds.write_annotations(args.out, events)
    print(f"{sum(map(len, events.values()))} events in {len(events)} segments -> {path}")
    return 0


# ---------------------------------------------------------------- eval

def _curve_rows(reference, detected, seg_ids, grid):
    curve = metrics.pooled_curve(((reference[s], detected[s]) for s in seg_ids), grid)
    rows = [{"threshold": p.threshold, "tp": p.tp, "fp": p.fp, "fn": p.fn,
             "precision": p.precision, "recall": p.recall, "f1": p.f1} for p in curve]
    return rows, metrics.f1_bar(grid, [p.f1 for p in curve])


def _stats_rows(stats):
    return [{"subject_id": s.subject_id, "cohort": s.cohort, "n_events": s.n_events,
             "total_minutes": s.total_minutes, "density_per_min": s.density_per_min,
             "mean_duration_s": s.mean_duration_s} for s in stats]


def _correlation(ref_stats, det_stats, field):
    pairs = [(getattr(a, field), getattr(b, field)) for a, b in zip(ref_stats, det_stats)
             if getattr(a, field) is not None and getattr(b, field) is not None]
    try:
        c = metrics.correlate([p[0] for p in pairs], [p[1] for p in pairs])
    except ValueError as exc:
        return {"n": len(pairs), "error": str(exc)}
    return {"n": c.n, "r": c.r, "r2": c.r2, "slope": c.slope, "intercept": c.intercept,
            "p_value": c.p_value}


def evaluate(ds: Dataset, reference_name: str, detected_names, segments=None, by_subject=True,
             grid=metrics.THRESHOLD_GRID) -> dict:
    segments = ds.segments if segments is None else segments
    reference = _annotations(ds, reference_name)
    seg_subject = {s.segment_id: s.subject_id for s in segments}
    durations = {s.segment_id: s.duration_s for s in segments}
    groups = {"both": [s.segment_id for s in segments]}
    for cohort in metrics.COHORTS:
        groups[cohort] = [s.segment_id for s in segments if ds.subjects[s.subject_id] == cohort]
    report = {"reference": reference_name, "detectors": {}, "grid": list(grid)}
    ref_stats = metrics.subject_stats(reference, durations, seg_subject, ds.subjects)
    if by_subject:
        report["reference_subjects"] = _stats_rows(ref_stats)
    for name in detected_names:
        detected = _annotations(ds, name)
        entry = {"by_event": {}}
        for group, seg_ids in groups.items():
            if not seg_ids:
                continue
            rows, fbar = _curve_rows(reference, detected, seg_ids, grid)
            entry["by_event"][group] = {"curve": rows, "f1_bar": fbar}
        if by_subject:
            det_stats = metrics.subject_stats(detected, durations, seg_subject, ds.subjects)
            entry["subjects"] = _stats_rows(det_stats)
            entry["correlation"] = {}
            for group in groups:
                keep = [i for i, s in enumerate(ref_stats)
                        if group == "both" or s.cohort == group]
                entry["correlation"][group] = {
                    field: _correlation([ref_stats[i] for i in keep], [det_stats[i] for i in keep],
                                        field)
                    for field in ("density_per_min", "mean_duration_s")}
        report["detectors"][name] = entry
    if by_subject and len(detected_names) == 2:
        a, b = (report["detectors"][n]["correlation"] for n in detected_names)
        comparison = {}
        for group in a:
            comparison[group] = {}
            for field in a[group]:
                ca, cb = a[group][field], b[group][field]
                try:
                    z, p = metrics.compare_correlations(ca["r"], ca["n"], cb["r"], cb["n"])
                    comparison[group][field] = {"z": z, "p_two_sided": p}
                except (KeyError, ValueError) as exc:
                    comparison[group][field] = {"error": str(exc)}
        report["fisher_z"] = {"first": detected_names[0], "second": detected_names[1],
                              "by_group": comparison}
    return report


def write_report_csvs(report: dict, out: Path) -> None:
    stem = out.with_suffix("")
    with open(f"{stem}_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "group", "threshold", "tp", "fp", "fn", "precision", "recall", "f1"])
        for name, entry in report["detectors"].items():
            for group, data in entry["by_event"].items():
                for r in data["curve"]:
                    w.writerow([name, group, f"{r['threshold']:.2f}", r["tp"], r["fp"], r["fn"],
                                f"{r['precision']:.6f}", f"{r['recall']:.6f}", f"{r['f1']:.6f}"])
    if "reference_subjects" not in report:
        return
    with open(f"{stem}_subjects.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["annotation_set", "subject_id", "cohort", "n_events", "total_minutes",
                    "density_per_min", "mean_duration_s"])
        sets = [(report["reference"], report["reference_subjects"])]
        sets += [(n, e["subjects"]) for n, e in report["detectors"].items()]
        for name, rows in sets:
            for r in rows:
                dur = "" if r["mean_duration_s"] is None else f"{r['mean_duration_s']:.6f}"
                w.writerow([name, r["subject_id"], r["cohort"], r["n_events"],
                            f"{r['total_minutes']:.6f}", f"{r['density_per_min']:.6f}", dur])


def cmd_eval(args) -> int:
    ds = Dataset.open(args.dataset)
    segments = None
    if args.split:
        split = _load_json(args.split)
        segments = ds.segments_of(split[args.subset])
    report = evaluate(ds, args.reference, args.detected, segments, args.by_subject)
    out = Path(args.out)
    dump_json(report, out)
    write_report_csvs(report, out)
    for name, entry in report["detectors"].items():
        both = entry["by_event"].get("both")
        if both:
            at20 = next(r for r in both["curve"] if abs(r["threshold"] - 0.2) < 1e-9)
            print(f"{name}: F1@0.2 {at20['f1']:.4f}  precision {at20['precision']:.4f}  "
                  f"recall {at20['recall']:.4f}  F1-bar {both['f1_bar']:.4f}")
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    results = verify.run_all(seed=args.seed)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  {'max rel err':>12}  {'tol':>8}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.max_error:12.3e}  {r.tolerance:8.0e}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sumo", description="Sleep spindle detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $SUMO_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON synth config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-subjects", type=int, default=30)
    p.add_argument("--segments-per-subject", type=int, default=3)
    p.add_argument("--ten-segment-subjects", type=int, default=0)
    p.add_argument("--n-older", type=int, default=None)
    p.add_argument("--baseline-name", default="baseline",
                   help="name of the jittered annotation set ('' to skip)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="band-pass, resample and z-score a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fs", type=float, default=dsp.TARGET_FS)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="median-candidate train/test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--candidates", type=int, default=25)
    p.add_argument("--scorer", required=True, help="annotation set scored on each candidate")
    p.add_argument("--reference", default="truth")
    p.add_argument("--n-per-cohort", type=int, default=18)
    p.add_argument("--segments-per-cohort", type=int, default=54)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="k-fold training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--arch-config")
    p.add_argument("--train-config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--reference", default="truth")
    p.add_argument("--fold", type=int, action="append", help="run only these folds")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="detect spindles with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="annotation set name")
    p.add_argument("--arch-config", help="expected architecture; a mismatch is an error")
    p.add_argument("--batch-size", type=int, default=12)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="by-event and by-subject evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--detected", required=True, action="append")
    p.add_argument("--by-subject", action="store_true")
    p.add_argument("--split", help="restrict to a subset of a split file")
    p.add_argument("--subset", default="test", choices=["train", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all layers")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(_threads(args))
    except ImportError:  # pragma: no cover
        limiter = None
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
