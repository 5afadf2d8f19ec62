"""
On-disk dataset layout.

    root/
      manifest.json            subjects (id, cohort) and segments (id, subject_id, file, duration_s, fs)
      signals/<segment>.f32    raw little-endian float32 samples
      annotations/<name>.json  sorted list of {segment_id, onset_s, duration_s}
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError
from .postproc import SpindleEvent

FLOAT_DECIMALS = 6


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed float precision, trailing newline."""
    Path(path).write_text(json.dumps(_round_floats(obj), sort_keys=True, indent=1) + "\n")


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, FLOAT_DECIMALS)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


@dataclass(frozen=True)
class SegmentEntry:
    segment_id: str
    subject_id: str
    file: str
    duration_s: float
    fs: float

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.fs))


class Dataset:
    def __init__(self, root, subjects: dict[str, str], segments: list[SegmentEntry]):
        self.root = Path(root)
        self.subjects = subjects  # subject id -> cohort
        self.segments = segments

    # -------------------------------------------------------------- reading

    @classmethod
    def open(cls, root, check_files: bool = True) -> "Dataset":
        root = Path(root)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
            subjects = {s["id"]: s["cohort"] for s in manifest["subjects"]}
            segments = [SegmentEntry(s["id"], s["subject_id"], s["file"],
                                     float(s["duration_s"]), float(s["fs"]))
                        for s in manifest["segments"]]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{root}: unreadable manifest ({exc})") from exc
        ds = cls(root, subjects, segments)
        ds.validate(check_files)
        return ds

    def validate(self, check_files: bool = True) -> None:
        ids = [s.segment_id for s in self.segments]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate segment ids in manifest")
        for seg in self.segments:
            if seg.subject_id not in self.subjects:
                raise FormatError(f"segment {seg.segment_id} references unknown subject")
            if not check_files:
                continue
            path = self.root / seg.file
            if not path.is_file():
                raise FormatError(f"missing signal file {path}")
            if path.stat().st_size != 4 * seg.n_samples:
                raise FormatError(f"{path}: sample count does not match duration * fs")

    def segment(self, segment_id: str) -> SegmentEntry:
        for seg in self.segments:
            if seg.segment_id == segment_id:
                return seg
        raise KeyError(segment_id)

    def read_signal(self, seg: SegmentEntry) -> np.ndarray:
        return np.fromfile(self.root / seg.file, dtype="<f4").astype(np.float32)

    def annotation_names(self) -> list[str]:
        d = self.root / "annotations"
        return sorted(p.stem for p in d.glob("*.json")) if d.is_dir() else []

    def read_annotations(self, name: str) -> dict[str, list[SpindleEvent]]:
        path = self.root / "annotations" / f"{name}.json"
        if not path.is_file():
            raise KeyError(f"annotation set {name!r} not found in {self.root}")
        try:
            records = json.loads(path.read_text())
            known = {s.segment_id for s in self.segments}
            out: dict[str, list[SpindleEvent]] = {s.segment_id: [] for s in self.segments}
            for rec in records:
                if rec["segment_id"] not in known:
                    raise FormatError(f"{path}: unknown segment {rec['segment_id']}")
                out[rec["segment_id"]].append(SpindleEvent(float(rec["onset_s"]),
                                                           float(rec["duration_s"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed annotations ({exc})") from exc
        for events in out.values():
            events.sort()
        return out

    def segments_of(self, subject_ids: Iterable[str]) -> list[SegmentEntry]:
        wanted = set(subject_ids)
        return [s for s in self.segments if s.subject_id in wanted]

    # -------------------------------------------------------------- writing

    def write_annotations(self, name: str, events: Mapping[str, Sequence[SpindleEvent]]) -> Path:
        order = {s.segment_id: i for i, s in enumerate(self.segments)}
        records = []
        for seg_id in sorted(events, key=lambda k: order.get(k, len(order))):
            if seg_id not in order:
                raise FormatError(f"annotation references unknown segment {seg_id}")
            for ev in sorted(events[seg_id]):
                records.append({"segment_id": seg_id, "onset_s": ev.onset_s,
                                "duration_s": ev.duration_s})
        d = self.root / "annotations"
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{name}.json"
        dump_json(records, path)
        return path


def write_dataset(root, subjects: Mapping[str, str],
                  segments: Iterable[tuple[str, str, np.ndarray, float]]) -> Dataset:
    """Write signals and manifest. ``segments`` yields (segment_id, subject_id, samples, fs)."""
    root = Path(root)
    (root / "signals").mkdir(parents=True, exist_ok=True)
    entries = []
    for seg_id, subj, samples, fs in segments:
        rel = f"signals/{seg_id}.f32"
        np.asarray(samples, dtype="<f4").tofile(root / rel)
        entries.append(SegmentEntry(seg_id, subj, rel, len(samples) / fs, float(fs)))
    manifest = {
        "subjects": [{"id": k, "cohort": v} for k, v in subjects.items()],
        "segments": [{"id": e.segment_id, "subject_id": e.subject_id, "file": e.file,
                      "duration_s": e.duration_s, "fs": e.fs} for e in entries],
    }
    dump_json(manifest, root / "manifest.json")
    return Dataset(root, dict(subjects), entries)
