"""Walker rendering and dataset generation."""

import numpy as np
import pytest

from lstcn.data import SequenceStore, load_index, normalize_frame
from lstcn.synth import (
    SynthProtocol,
    WalkerSpec,
    acceptance_protocol,
    generate_dataset,
    render_walker,
)


def _hausdorff_within(a, b, radius=1):
    """Every foreground pixel of each frame within ``radius`` of the other's."""
    from lstcn.synth import _dilate

    return (a <= _dilate(b.astype(bool), radius)).all() and (
        b <= _dilate(a.astype(bool), radius)
    ).all()


class TestRenderWalker:
    def test_zero_swing_is_static(self):
        spec = WalkerSpec(subject_id="s", swing_amp=0.0)
        frames = [render_walker(spec, t) for t in (0, 3, 11)]
        np.testing.assert_array_equal(frames[0], frames[1])
        np.testing.assert_array_equal(frames[0], frames[2])

    @pytest.mark.parametrize("freq", [0.05, 0.1, 0.125])
    def test_periodicity(self, freq):
        spec = WalkerSpec(subject_id="s", stride_freq=freq)
        period = round(1.0 / freq)
        for t in (0, 2, 7):
            a, b = render_walker(spec, t), render_walker(spec, t + period)
            assert _hausdorff_within(a, b, 1), f"frames {t} and {t + period} differ beyond 1px"

    def test_cl_adds_pixels(self):
        nm = render_walker(WalkerSpec(subject_id="s", condition="NM"), 4)
        cl = render_walker(WalkerSpec(subject_id="s", condition="CL"), 4)
        assert cl.sum() > nm.sum()

    def test_bg_adds_blob(self):
        nm = render_walker(WalkerSpec(subject_id="s", condition="NM"), 4)
        bg = render_walker(WalkerSpec(subject_id="s", condition="BG"), 4)
        assert bg.sum() > nm.sum()

    def test_geometry_escape_rejected_at_construction(self):
        with pytest.raises(ValueError, match="escapes the canvas"):
            WalkerSpec(subject_id="s", swing_amp=1.0, leg_length=29.0)

    def test_motion_bounds_validated(self):
        with pytest.raises(ValueError, match="stride_freq"):
            WalkerSpec(subject_id="s", stride_freq=0.3)
        with pytest.raises(ValueError, match="swing_amp"):
            WalkerSpec(subject_id="s", swing_amp=1.2)

    @pytest.mark.parametrize("view", [0, 30, 60, 90])
    def test_views_render_and_normalize(self, view):
        spec = WalkerSpec(subject_id="s", view_deg=view)
        frame = render_walker(spec, 5)
        assert frame.shape == (64, 44)
        assert set(np.unique(frame)) <= {0, 1}
        normalized = normalize_frame(frame)
        assert _hausdorff_within(frame, normalized, 1)

    def test_view_squash_narrows(self):
        # compare mid-swing (t=3 at freq 0.1) where limbs set the width
        wide = render_walker(WalkerSpec(subject_id="s", view_deg=0), 3)
        narrow = render_walker(WalkerSpec(subject_id="s", view_deg=90), 3)
        def width(f):
            cols = np.flatnonzero(f.any(axis=0))
            return cols[-1] - cols[0]
        assert width(narrow) < width(wide)


class TestGenerateDataset:
    def test_counts_and_manifest(self, tmp_path):
        proto = SynthProtocol(n_subjects=10, frames_per_seq=40, views=(0, 30),
                              conditions=("NM",), seqs_per_view=1, motion_only=False, seed=3)
        index = generate_dataset(proto, tmp_path)
        assert len(index) == 20
        reloaded = load_index(tmp_path)
        assert len(reloaded) == 20
        store = SequenceStore(tmp_path)
        seq = store.get(reloaded.entries[0])
        assert seq.n_frames == 40

    def test_deterministic_bytes(self, tmp_path):
        proto = SynthProtocol(n_subjects=2, frames_per_seq=16, views=(0,),
                              conditions=("NM",), seqs_per_view=1, seed=5)
        generate_dataset(proto, tmp_path / "a")
        generate_dataset(proto, tmp_path / "b")
        files_a = sorted((tmp_path / "a").rglob("*.pgm"))
        files_b = sorted((tmp_path / "b").rglob("*.pgm"))
        assert len(files_a) == len(files_b) > 0
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_motion_only_time_averages_close(self, tmp_path):
        """Subjects are indistinguishable by time-averaged appearance: the
        per-subject mean silhouette differs pairwise by at most 2% of the
        pixel scale."""
        proto = acceptance_protocol(seed=77)
        index = generate_dataset(proto, tmp_path)
        store = SequenceStore(tmp_path, normalize=False)
        means = {}
        for e in index.entries:
            if e.view_deg != 0:
                continue
            means.setdefault(e.subject_id, []).append(store.get(e).frames.mean(axis=0))
        avg = {s: np.mean(v, axis=0) for s, v in means.items()}
        subjects = sorted(avg)
        worst = 0.0
        for i, a in enumerate(subjects):
            for b in subjects[i + 1 :]:
                worst = max(worst, np.abs(avg[a] - avg[b]).mean())
        assert worst <= 0.02, f"time-averaged images differ by {worst:.3%}"

    def test_motion_only_sequences_differ_dynamically(self, tmp_path):
        proto = SynthProtocol(n_subjects=3, frames_per_seq=30, views=(0,),
                              conditions=("NM",), seqs_per_view=1, motion_only=True, seed=9)
        index = generate_dataset(proto, tmp_path)
        store = SequenceStore(tmp_path, normalize=False)
        a = store.get(index.entries[0]).frames.astype(float)
        b = store.get(index.entries[1]).frames.astype(float)
        per_frame = np.abs(a - b).mean(axis=(1, 2))
        assert per_frame.max() >= 0.02

    def test_motion_only_frequency_separation(self):
        from lstcn.synth import MIN_FREQ_SEPARATION, _subject_motion

        rng = np.random.default_rng(0)
        proto = SynthProtocol(n_subjects=10, motion_only=True)
        freqs = sorted(m["stride_freq"] for m in _subject_motion(proto, rng))
        gaps = np.diff(freqs)
        assert gaps.min() >= MIN_FREQ_SEPARATION
        assert all(0.02 < f < 0.25 for f in freqs)

    def test_infeasible_protocol_rejected(self):
        from lstcn.synth import _subject_motion

        proto = SynthProtocol(n_subjects=30, motion_only=True)
        with pytest.raises(ValueError, match="infeasible"):
            _subject_motion(proto, np.random.default_rng(0))

    def test_generated_frames_survive_normalization(self, tmp_path):
        proto = SynthProtocol(n_subjects=2, frames_per_seq=15, views=(0, 60),
                              conditions=("NM", "BG", "CL"), seqs_per_view=1, seed=11)
        index = generate_dataset(proto, tmp_path)
        store = SequenceStore(tmp_path, normalize=False)
        for e in index.entries:
            for frame in store.get(e).frames[::5]:
                assert _hausdorff_within(frame, normalize_frame(frame), 1)

    def test_acceptance_protocol_shape(self):
        proto = acceptance_protocol()
        assert proto.n_subjects == 10
        assert proto.motion_only
        assert proto.seqs_per_view == 4
        assert len(proto.views) == 2
