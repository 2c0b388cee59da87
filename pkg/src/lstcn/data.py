"""Silhouette sequence ingestion, normalization and batch construction.

Sequences live on disk as directories of numerically ordered binary
frames (PGM/PNG). Two index sources are supported: an explicit manifest
(one tab-separated record per sequence: path, subject, condition, view,
seq_index) and the conventional CASIA-B directory layout
``subject/cond-seq/view``. Frames are normalized to 64 x 44: crop to the
silhouette's vertical bounding box, scale isotropically to height 64,
re-binarize at 0.5, then center the width on the foreground centroid and
crop/pad to 44.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

TARGET_H = 64
TARGET_W = 44
CONDITIONS = ("NM", "BG", "CL", "SYNTH")

CLIP_LEN = 30
MIN_TRAIN_FRAMES = 15
MIN_EVAL_FRAMES = 3


@dataclass
class SilhouetteSequence:
    """T binary frames of one walking sequence plus its labels."""

    frames: np.ndarray  # [T, H, W] uint8 in {0, 1}
    subject_id: str
    condition: str
    view_deg: int
    seq_index: int

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T >= 1, H, W], got shape {self.frames.shape}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition {self.condition!r} not one of {CONDITIONS}")
        bad = np.setdiff1d(np.unique(self.frames), [0, 1])
        if bad.size:
            raise ValueError(f"frames must be binary {{0,1}}, found values {bad[:5]}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class IndexEntry:
    subject_id: str
    condition: str
    view_deg: int
    seq_index: int
    path: str

    @property
    def key(self) -> tuple:
        return (self.subject_id, self.condition, self.view_deg, self.seq_index)


@dataclass
class DatasetIndex:
    """Sequence catalog with an optional split tag (train/gallery/probe)."""

    entries: list[IndexEntry]
    split: str = "train"

    def __post_init__(self):
        keys = [e.key for e in self.entries]
        if len(set(keys)) != len(keys):
            seen, dups = set(), []
            for k in keys:
                if k in seen:
                    dups.append(k)
                seen.add(k)
            raise ValueError(f"duplicate sequence keys in index: {dups[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def filter(self, pred) -> "DatasetIndex":
        return DatasetIndex([e for e in self.entries if pred(e)], split=self.split)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_FRAME_SUFFIXES = {".png", ".pgm", ".ppm", ".pbm"}
_NUM_RE = re.compile(r"(\d+)")


def _frame_sort_key(path: Path):
    m = _NUM_RE.findall(path.stem)
    return (int(m[-1]) if m else 0, path.name)


def load_frame(path: Path) -> np.ndarray:
    """Read one image as a {0,1} uint8 array (any nonzero pixel is foreground)."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except Exception as e:
        raise OSError(f"unreadable frame file {path}: {e}") from e
    return (arr > 0).astype(np.uint8)


def load_sequence(dir_path, subject_id="?", condition="SYNTH", view_deg=0, seq_index=0) -> SilhouetteSequence:
    """Load a directory of numerically ordered frames into one sequence."""
    dir_path = Path(dir_path)
    files = sorted(
        (p for p in dir_path.iterdir() if p.suffix.lower() in _FRAME_SUFFIXES),
        key=_frame_sort_key,
    )
    if not files:
        raise FileNotFoundError(f"no frame files in {dir_path}")
    frames = [load_frame(p) for p in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent frame sizes {sorted(shapes)} in {dir_path}")
    return SilhouetteSequence(
        np.stack(frames), subject_id=subject_id, condition=condition,
        view_deg=view_deg, seq_index=seq_index,
    )


def parse_casia_path(rel_path: str) -> tuple[str, str, int, int]:
    """Parse subject/cond-seq/view, e.g. '001/nm-01/090' -> ('001', 'NM', 1, 90).

    seq_index is 1-based in the directory name and kept that way.
    """
    parts = Path(rel_path).parts
    if len(parts) < 3:
        raise ValueError(f"CASIA-style path needs subject/cond-seq/view, got {rel_path!r}")
    subject, cond_seq, view = parts[-3], parts[-2], parts[-1]
    m = re.fullmatch(r"([a-zA-Z]+)-(\d+)", cond_seq)
    if not m:
        raise ValueError(f"cannot parse condition-seq component {cond_seq!r} of {rel_path!r}")
    condition = m.group(1).upper()
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r} in {rel_path!r}")
    return subject, condition, int(m.group(2)), int(view)


def index_casia_layout(root) -> DatasetIndex:
    """Index a dataset laid out as root/subject/cond-seq/view/frames."""
    root = Path(root)
    entries = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for cond_dir in sorted(p for p in subject_dir.iterdir() if p.is_dir()):
            for view_dir in sorted(p for p in cond_dir.iterdir() if p.is_dir()):
                rel = f"{subject_dir.name}/{cond_dir.name}/{view_dir.name}"
                subject, condition, seq_index, view = parse_casia_path(rel)
                entries.append(IndexEntry(subject, condition, view, seq_index, rel))
    if not entries:
        raise FileNotFoundError(f"no sequences found under {root}")
    return DatasetIndex(entries)


MANIFEST_NAME = "manifest.tsv"
_MANIFEST_HEADER = "path\tsubject_id\tcondition\tview_deg\tseq_index"


def write_manifest(entries: list[IndexEntry], path) -> None:
    lines = [_MANIFEST_HEADER]
    for e in entries:
        lines.append(f"{e.path}\t{e.subject_id}\t{e.condition}\t{e.view_deg}\t{e.seq_index}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def index_from_manifest(path) -> DatasetIndex:
    """Read a tab-separated sequence manifest."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ValueError(f"{path}: missing or unexpected manifest header")
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{path}:{ln}: expected 5 tab-separated fields, got {len(fields)}")
        rel, subject, condition, view, seq = fields
        entries.append(IndexEntry(subject, condition, int(view), int(seq), rel))
    return DatasetIndex(entries)


def load_index(data_dir) -> DatasetIndex:
    """Manifest if present, CASIA directory layout otherwise."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if manifest.exists():
        return index_from_manifest(manifest)
    return index_casia_layout(data_dir)


class SequenceStore:
    """Loads and caches normalized sequences by index entry."""

    def __init__(self, data_dir, normalize: bool = True):
        self.data_dir = Path(data_dir)
        self.normalize = normalize
        self._cache: dict[tuple, SilhouetteSequence] = {}

    def get(self, entry: IndexEntry) -> SilhouetteSequence:
        if entry.key not in self._cache:
            seq = load_sequence(
                self.data_dir / entry.path,
                subject_id=entry.subject_id,
                condition=entry.condition,
                view_deg=entry.view_deg,
                seq_index=entry.seq_index,
            )
            if self.normalize:
                seq = normalize_sequence(seq)
            self._cache[entry.key] = seq
        return self._cache[entry.key]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_frame(frame: np.ndarray) -> np.ndarray:
    """Normalize one binary frame to the 64 x 44 network input.

    Crop to the vertical bounding box, isotropically scale to height 64
    (bilinear, re-binarized at 0.5), then place the horizontal centroid
    at the center column of a 44-wide canvas.
    """
    frame = np.asarray(frame)
    rows = np.flatnonzero(frame.any(axis=1))
    if rows.size == 0:
        raise ValueError("normalize_frame requires at least one foreground pixel")
    cropped = frame[rows[0] : rows[-1] + 1, :]
    h = cropped.shape[0]

    if h == TARGET_H:
        scaled = cropped.astype(np.uint8)
    else:
        scale = TARGET_H / h
        new_w = max(1, round(cropped.shape[1] * scale))
        scaled = _resize_binary(cropped, TARGET_H, new_w)

    cols = np.flatnonzero(scaled.any(axis=0))
    if cols.size == 0:
        raise ValueError("silhouette vanished during rescale")
    centroid = float(np.nonzero(scaled)[1].mean())
    # shift so the centroid lands on the canvas center column
    offset = int(np.floor(TARGET_W / 2 - centroid + 0.5))
    out = np.zeros((TARGET_H, TARGET_W), dtype=np.uint8)
    src_lo = max(0, -offset)
    src_hi = min(scaled.shape[1], TARGET_W - offset)
    if src_lo < src_hi:
        out[:, src_lo + offset : src_hi + offset] = scaled[:, src_lo:src_hi]
    return out


def _resize_binary(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a {0,1} image, thresholded back to binary at 0.5."""
    in_h, in_w = img.shape
    src = img.astype(np.float64)
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return ((top * (1 - wy) + bot * wy) >= 0.5).astype(np.uint8)


def normalize_sequence(seq: SilhouetteSequence) -> SilhouetteSequence:
    """Normalize every frame; empty frames are dropped with a warning."""
    out = []
    dropped = 0
    for i, frame in enumerate(seq.frames):
        if not frame.any():
            dropped += 1
            continue
        out.append(normalize_frame(frame))
    if dropped:
        log.warning(
            "dropped %d empty frame(s) from %s/%s-%02d/%03d",
            dropped, seq.subject_id, seq.condition, seq.seq_index, seq.view_deg,
        )
    if not out:
        raise ValueError("sequence contains no non-empty frames")
    return replace(seq, frames=np.stack(out))


def downsample_frames(frames: np.ndarray, factor: int) -> np.ndarray:
    """Block-max downsample of [T, H, W] binary frames by an integer factor."""
    if factor == 1:
        return frames
    t, h, w = frames.shape
    if h % factor or w % factor:
        raise ValueError(f"frame size {h}x{w} not divisible by downsample factor {factor}")
    view = frames.reshape(t, h // factor, factor, w // factor, factor)
    return view.max(axis=(2, 4))


# ---------------------------------------------------------------------------
# clip sampling and batches
# ---------------------------------------------------------------------------


def sample_training_clip(
    seq: SilhouetteSequence,
    rng: np.random.Generator,
    clip_len: int = CLIP_LEN,
    min_frames: int = MIN_TRAIN_FRAMES,
) -> np.ndarray | None:
    """Sample a fixed-length training clip, or None when the sequence is
    too short to train on.

    Sequences shorter than ``min_frames`` are rejected; those between
    ``min_frames`` and ``clip_len`` are extended by cyclically repeating
    the whole sequence; longer ones contribute a uniformly random run of
    ``clip_len`` consecutive frames.
    """
    t = seq.n_frames
    if t < min_frames:
        return None
    if t <= clip_len:
        reps = np.arange(clip_len) % t
        return seq.frames[reps]
    start = int(rng.integers(0, t - clip_len + 1))
    return seq.frames[start : start + clip_len]


def pk_batch(
    index: DatasetIndex,
    store: SequenceStore,
    p: int,
    k: int,
    rng: np.random.Generator,
    clip_len: int = CLIP_LEN,
    min_frames: int = MIN_TRAIN_FRAMES,
):
    """Draw p subjects and k clips per subject; returns (clips, subject_ids).

    clips is a [p*k, clip_len, H, W] uint8 array. A subject's sequences
    are drawn without replacement when it has at least k trainable
    sequences, with replacement otherwise.
    """
    by_subject: dict[str, list[IndexEntry]] = {}
    for e in index.entries:
        by_subject.setdefault(e.subject_id, []).append(e)
    trainable: dict[str, list[IndexEntry]] = {}
    for subject in sorted(by_subject):
        ok = [e for e in by_subject[subject] if store.get(e).n_frames >= min_frames]
        if ok:
            trainable[subject] = ok
    if len(trainable) < p:
        raise ValueError(
            f"need at least p={p} subjects with trainable sequences, found {len(trainable)}"
        )

    subjects = sorted(trainable)
    chosen = rng.choice(len(subjects), size=p, replace=False)
    clips, labels = [], []
    for si in chosen:
        subject = subjects[si]
        pool = trainable[subject]
        if len(pool) >= k:
            picks = rng.choice(len(pool), size=k, replace=False)
        else:
            picks = rng.integers(0, len(pool), size=k)
        for pi in picks:
            clip = sample_training_clip(store.get(pool[pi]), rng, clip_len, min_frames)
            assert clip is not None  # pool was pre-filtered
            clips.append(clip)
            labels.append(subject)
    return np.stack(clips), labels


# ---------------------------------------------------------------------------
# evaluation splits
# ---------------------------------------------------------------------------


@dataclass
class SynthSplitSpec:
    """Gallery/probe selection rules for generated datasets."""

    gallery_conditions: tuple[str, ...] = ("NM",)
    gallery_seq_indices: tuple[int, ...] = (0, 1)
    gallery_views: tuple[int, ...] | None = None  # None = all views
    probe_conditions: tuple[str, ...] = ("NM",)
    probe_views: tuple[int, ...] | None = None
    probe_seq_indices: tuple[int, ...] | None = None  # None = all non-gallery


def make_eval_split(index: DatasetIndex, protocol: str = "casia",
                    synth_spec: SynthSplitSpec | None = None) -> tuple[DatasetIndex, DatasetIndex]:
    """Split an index into disjoint gallery and probe sets.

    casia: per subject, NM sequences 1-4 are gallery; NM 5-6, BG 1-2 and
    CL 1-2 are probe; subjects missing any of those are reported.
    synth: selection by condition / seq_index / view lists.
    """
    if protocol == "casia":
        required = [("NM", i) for i in range(1, 7)] + [("BG", 1), ("BG", 2), ("CL", 1), ("CL", 2)]
        missing: dict[str, list] = {}
        for subject in index.subjects():
            have = {(e.condition, e.seq_index) for e in index.entries if e.subject_id == subject}
            lack = [r for r in required if r not in have]
            if lack:
                missing[subject] = lack
        if missing:
            detail = "; ".join(f"{s}: {v}" for s, v in sorted(missing.items()))
            raise ValueError(f"subjects missing required sequences for the casia protocol: {detail}")
        gallery = [e for e in index.entries if e.condition == "NM" and 1 <= e.seq_index <= 4]
        probe = [
            e for e in index.entries
            if (e.condition == "NM" and e.seq_index >= 5) or e.condition in ("BG", "CL")
        ]
    elif protocol == "synth":
        spec = synth_spec or SynthSplitSpec()
        if not spec.probe_conditions:
            raise ValueError("synth split: probe condition list is empty")
        if not spec.gallery_conditions:
            raise ValueError("synth split: gallery condition list is empty")

        def in_gallery(e: IndexEntry) -> bool:
            return (
                e.condition in spec.gallery_conditions
                and e.seq_index in spec.gallery_seq_indices
                and (spec.gallery_views is None or e.view_deg in spec.gallery_views)
            )

        gallery = [e for e in index.entries if in_gallery(e)]
        probe = [
            e for e in index.entries
            if not in_gallery(e)
            and e.condition in spec.probe_conditions
            and (spec.probe_views is None or e.view_deg in spec.probe_views)
            and (spec.probe_seq_indices is None or e.seq_index in spec.probe_seq_indices)
        ]
    else:
        raise ValueError(f"unknown eval protocol {protocol!r}")

    if not gallery:
        raise ValueError("eval split produced an empty gallery")
    if not probe:
        raise ValueError("eval split produced an empty probe set")
    overlap = {e.key for e in gallery} & {e.key for e in probe}
    assert not overlap, f"gallery/probe overlap: {sorted(overlap)[:5]}"
    return DatasetIndex(gallery, split="gallery"), DatasetIndex(probe, split="probe")
