"""Procedural silhouette-sequence generator.

Renders a 2-D articulated walker (torso, head, swinging arms and legs)
directly at the network's 64 x 44 input geometry: head pinned to the top
row, feet to the bottom row, body centered on the canvas, so generated
frames pass input normalization essentially unchanged. Limbs pivot
sinusoidally; identity can be carried by body geometry, by motion
parameters (stride frequency / phase), or both. The motion-only mode
gives every subject identical geometry and distinct stride frequencies,
producing datasets where appearance alone cannot separate identities but
temporal dynamics can.

Camera view is modeled as a horizontal squash (cos of the view angle,
floored at 0.3) plus a small shear. Carrying condition adds an
elliptical blob at hip height; clothing condition dilates the whole
silhouette by 2 pixels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    TARGET_H,
    TARGET_W,
    DatasetIndex,
    IndexEntry,
    MANIFEST_NAME,
    write_manifest,
)

log = logging.getLogger(__name__)

CANVAS_CX = 22.0  # column the body is centered on
HIP_CY = 32.0  # shear pivot row

_YY, _XX = np.mgrid[0:TARGET_H, 0:TARGET_W].astype(np.float64)


@dataclass(frozen=True)
class WalkerSpec:
    """Geometry and motion of one rendered walker."""

    subject_id: str
    torso_width: float = 10.0
    torso_height: float = 21.0
    head_radius: float = 5.0
    leg_length: float = 27.0
    arm_length: float = 17.0
    stride_freq: float = 0.10  # cycles per frame
    phase0: float = 0.0
    swing_amp: float = 0.5  # radians
    view_deg: int = 0
    condition: str = "NM"

    def __post_init__(self):
        if not 0.02 < self.stride_freq < 0.25:
            raise ValueError(f"stride_freq must lie in (0.02, 0.25), got {self.stride_freq}")
        if not 0.0 <= self.swing_amp < math.pi / 3:
            raise ValueError(f"swing_amp must lie in [0, pi/3), got {self.swing_amp}")
        if self.condition not in ("NM", "BG", "CL"):
            raise ValueError(f"condition must be NM, BG or CL, got {self.condition!r}")
        hip_y = TARGET_H - 1 - self.leg_length
        torso_top = hip_y - self.torso_height
        if torso_top < 2 * self.head_radius - 2:
            raise ValueError(
                f"torso top {torso_top:.1f} collides with head (radius {self.head_radius})"
            )
        reach = max(
            self.leg_length * math.sin(self.swing_amp) + 2.0,
            self.torso_width / 2 + self.arm_length * math.sin(0.8 * self.swing_amp),
        ) + 2.0
        margin = TARGET_W - 1 - CANVAS_CX
        if reach > margin:
            raise ValueError(
                f"limb reach {reach:.1f}px escapes the canvas (margin {margin:.1f}px); "
                "reduce swing_amp or limb lengths"
            )

    @property
    def hip_y(self) -> float:
        return TARGET_H - 1 - self.leg_length


def _segment_mask(ax, ay, bx, by, half_thickness):
    """Pixels within half_thickness of segment (ax, ay)-(bx, by)."""
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        d2 = (_XX - ax) ** 2 + (_YY - ay) ** 2
    else:
        t = np.clip(((_XX - ax) * dx + (_YY - ay) * dy) / denom, 0.0, 1.0)
        d2 = (_XX - (ax + t * dx)) ** 2 + (_YY - (ay + t * dy)) ** 2
    return d2 <= half_thickness * half_thickness


def _ellipse_mask(cx, cy, rx, ry):
    return ((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2 <= 1.0


def _dilate(img: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a disk structuring element."""
    h, w = img.shape
    padded = np.pad(img, radius)
    out = np.zeros_like(img)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            if di * di + dj * dj <= radius * radius:
                out |= padded[radius + di : radius + di + h, radius + dj : radius + dj + w]
    return out


def render_walker(spec: WalkerSpec, t: int) -> np.ndarray:
    """Render frame ``t`` of the walker as a {0,1} uint8 array 64 x 44."""
    phase = 2.0 * math.pi * spec.stride_freq * t + spec.phase0
    leg = spec.swing_amp * math.sin(phase)
    arm = -0.8 * spec.swing_amp * math.sin(phase)

    cx = CANVAS_CX
    hip_y = spec.hip_y
    torso_top = hip_y - spec.torso_height
    shoulder_y = torso_top + 2.0
    r = spec.head_radius
    ground = TARGET_H - 1.0

    mask = np.zeros((TARGET_H, TARGET_W), dtype=bool)
    # head pinned to the top row so the vertical span is always the full canvas
    mask |= _ellipse_mask(cx, r, r, r)
    mask |= _segment_mask(cx, 2 * r - 1, cx, torso_top + 1, 2.0)  # neck
    mask |= (
        (np.abs(_XX - cx) <= spec.torso_width / 2)
        & (_YY >= torso_top)
        & (_YY <= hip_y)
    )
    # legs swing in antiphase; feet stay pinned to the ground row
    for side, angle in ((-1.0, leg), (1.0, -leg)):
        hx = cx + side * 2.0
        foot_x = hx + spec.leg_length * math.sin(angle)
        mask |= _segment_mask(hx, hip_y, foot_x, ground, 1.6)
    # arms swing opposite to the same-side leg
    for side, angle in ((-1.0, arm), (1.0, -arm)):
        sx = cx + side * spec.torso_width / 2
        ex = sx + spec.arm_length * math.sin(angle)
        ey = shoulder_y + spec.arm_length * math.cos(angle)
        mask |= _segment_mask(sx, shoulder_y, ex, ey, 1.3)
    if spec.condition == "BG":
        mask |= _ellipse_mask(cx + 9.0, hip_y - 3.0, 4.0, 3.0)

    frame = mask.astype(np.uint8)
    if spec.view_deg:
        frame = _apply_view(frame, spec.view_deg)
    if spec.condition == "CL":
        frame = _dilate(frame, 2).astype(np.uint8)
    return frame


def _apply_view(frame: np.ndarray, view_deg: int) -> np.ndarray:
    """Horizontal squash (floored at 0.3) plus a small shear.

    Each output pixel takes the max over sub-samples spanning its source
    footprint, so thin limbs survive strong squashes; view 0 resolves to
    the exact identity.
    """
    theta = math.radians(view_deg)
    s = max(math.cos(theta), 0.3)
    k = 0.15 * math.sin(theta)
    yy = _YY.astype(int)
    out = np.zeros_like(frame)
    n_sub = 4  # footprint is at most 1/0.3 ~ 3.4 source pixels wide
    for m in range(n_sub):
        xc = _XX + (m + 0.5) / n_sub - 0.5
        x_src = np.floor(CANVAS_CX + (xc - CANVAS_CX - k * (_YY - HIP_CY)) / s + 0.5).astype(int)
        valid = (x_src >= 0) & (x_src < TARGET_W)
        sampled = np.zeros_like(frame)
        sampled[valid] = frame[yy[valid], x_src[valid]]
        out |= sampled
    return out


@dataclass
class SynthProtocol:
    """Shape of one generated dataset."""

    n_subjects: int
    frames_per_seq: int = 40
    views: tuple[int, ...] = (0, 30)
    conditions: tuple[str, ...] = ("NM",)
    seqs_per_view: int = 4
    motion_only: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if self.frames_per_seq < 15:
            raise ValueError(f"frames_per_seq must be >= 15, got {self.frames_per_seq}")
        for v in self.views:
            if v not in (0, 30, 60, 90):
                raise ValueError(f"view {v} not in (0, 30, 60, 90)")
        for c in self.conditions:
            if c not in ("NM", "BG", "CL"):
                raise ValueError(f"condition {c!r} not in (NM, BG, CL)")


MIN_FREQ_SEPARATION = 0.01  # cycles/frame, motion-only identifiability floor
_FREQ_LO, _FREQ_HI = 0.06, 0.241
_FREQ_JITTER = (0.002, 0.008)  # keeps frequencies off small-denominator rationals


def _subject_motion(protocol: SynthProtocol, rng: np.random.Generator) -> list[dict]:
    """Per-subject motion/geometry draws, deterministic in subject order.

    Motion-only frequencies are a jittered ladder: the jitter keeps every
    frequency away from small-denominator rationals, whose aliasing would
    paint subject-specific stroke patterns into time-max-pooled appearance
    (a static shortcut this mode must not offer).
    """
    n = protocol.n_subjects
    if protocol.motion_only:
        step = (_FREQ_HI - _FREQ_LO) / max(n - 1, 1)
        if n > 1 and step < MIN_FREQ_SEPARATION + (_FREQ_JITTER[1] - _FREQ_JITTER[0]):
            raise ValueError(
                f"motion-only protocol infeasible: {n} subjects cannot keep "
                f">= {MIN_FREQ_SEPARATION} cycles/frame separation in ({_FREQ_LO}, {_FREQ_HI})"
            )
        return [
            dict(stride_freq=_FREQ_LO + i * step + float(rng.uniform(*_FREQ_JITTER)))
            for i in range(n)
        ]
    draws = []
    for _ in range(n):
        draws.append(
            dict(
                stride_freq=float(rng.uniform(0.05, 0.24)),
                swing_amp=float(rng.uniform(0.35, 0.60)),
                torso_width=float(rng.uniform(8, 12)),
                torso_height=float(rng.uniform(18, 24)),
                head_radius=float(rng.uniform(4, 6)),
                leg_length=float(rng.uniform(24, 29)),
                arm_length=float(rng.uniform(14, 18)),
            )
        )
    return draws


def generate_dataset(protocol: SynthProtocol, out_dir) -> DatasetIndex:
    """Write every subject x view x condition x seq to disk plus a manifest.

    Frames are PGM files named by frame number; layout mirrors the
    subject/cond-seq/view convention. Fully deterministic in
    (protocol, seed): regenerating produces bit-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(protocol.seed)
    motion = _subject_motion(protocol, rng)

    entries: list[IndexEntry] = []
    for si in range(protocol.n_subjects):
        subject = f"{si + 1:03d}"
        base = WalkerSpec(subject_id=subject, **motion[si])
        for condition in protocol.conditions:
            for seq_index in range(protocol.seqs_per_view):
                for view in protocol.views:
                    phase0 = float(rng.uniform(0.0, 2.0 * math.pi))
                    # per-sequence geometry jitter: sequence-level appearance
                    # noise that carries no identity, so appearance cannot
                    # proxy for motion in motion-only datasets
                    jit = lambda a: float(rng.uniform(-a, a))
                    spec = replace(
                        base,
                        phase0=phase0,
                        view_deg=view,
                        condition=condition,
                        torso_width=base.torso_width + jit(0.2),
                        torso_height=base.torso_height + jit(0.2),
                        head_radius=base.head_radius + jit(0.1),
                        leg_length=base.leg_length + jit(0.2),
                        arm_length=base.arm_length + jit(0.2),
                        swing_amp=base.swing_amp + jit(0.05),
                    )
                    rel = f"{subject}/{condition.lower()}-{seq_index + 1:02d}/{view:03d}"
                    seq_dir = out_dir / rel
                    seq_dir.mkdir(parents=True, exist_ok=True)
                    for t in range(protocol.frames_per_seq):
                        write_pgm(render_walker(spec, t), seq_dir / f"{t:03d}.pgm")
                    entries.append(IndexEntry(subject, condition, view, seq_index + 1, rel))
    index = DatasetIndex(entries)
    write_manifest(entries, out_dir / MANIFEST_NAME)
    log.info("generated %d sequences under %s", len(entries), out_dir)
    return index


def write_pgm(frame: np.ndarray, path) -> None:
    """Binary (P5) PGM, foreground 255; byte-deterministic."""
    h, w = frame.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + (frame.astype(np.uint8) * 255).tobytes())


def acceptance_protocol(seed: int = 77) -> SynthProtocol:
    """The motion-only benchmark: 10 subjects of identical geometry whose
    identities live solely in stride frequency and phase."""
    return SynthProtocol(
        n_subjects=10,
        frames_per_seq=40,
        views=(0, 30),
        conditions=("NM",),
        seqs_per_view=4,
        motion_only=True,
        seed=seed,
    )
