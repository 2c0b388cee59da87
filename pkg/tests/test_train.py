"""Optimizer, training loop artifacts, embeddings and rank-1 protocol."""

import math
from dataclasses import replace

import numpy as np
import pytest

from lstcn.data import IndexEntry
from lstcn.model import build_model
from lstcn.synth import SynthProtocol, generate_dataset
from lstcn.tensor import Tensor
from lstcn.train import (
    Adam,
    EmbeddingTable,
    TrainConfig,
    desk_config,
    eval_to_kv_lines,
    extract_embeddings,
    load_train_config,
    model_config_for,
    parse_metrics,
    rank1,
    schedule_lr,
    sequence_distances,
    train,
    train_config_lines,
)
from lstcn.configio import save_config_file
from lstcn.data import SequenceStore, load_index


class TestAdam:
    def test_hand_computed_single_step(self):
        """One step on a 2-parameter toy against the closed-form update."""
        theta = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        theta.grad = np.array([0.5, -1.5])
        opt = Adam([("theta", theta)], beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step(lr=0.1)
        g = np.array([0.5, -1.5])
        m = 0.1 * g
        v = 0.001 * g * g
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        expected = np.array([1.0, -2.0]) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(theta.data, expected, atol=1e-12)

    def test_skips_params_without_grads(self):
        a = Tensor(np.ones(2), requires_grad=True)
        opt = Adam([("a", a)])
        opt.step(0.1)
        np.testing.assert_array_equal(a.data, 1.0)

    def test_two_steps_decay_moments(self):
        theta = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([("t", theta)], beta1=0.5, beta2=0.5, eps=0.0)
        theta.grad = np.array([1.0])
        opt.step(1.0)
        first = theta.data.copy()
        theta.grad = np.array([1.0])
        opt.step(1.0)
        # constant gradient: mhat/sqrt(vhat) = 1 both steps
        np.testing.assert_allclose(first, [-1.0], atol=1e-12)
        np.testing.assert_allclose(theta.data, [-2.0], atol=1e-12)


class TestSchedule:
    def test_piecewise_constant(self):
        sched = ((0, 0.1), (20_000, 0.01), (40_000, 0.001))
        assert schedule_lr(sched, 1) == 0.1
        assert schedule_lr(sched, 19_999) == 0.1
        assert schedule_lr(sched, 20_000) == 0.01
        assert schedule_lr(sched, 25_000) == 0.01
        assert schedule_lr(sched, 60_000) == 0.001

    def test_config_validates_schedule(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            TrainConfig(lr_schedule=((0, 0.1), (100, 0.2), (100, 0.3)))
        with pytest.raises(ValueError, match="start at iteration 0"):
            TrainConfig(lr_schedule=((5, 0.1),))

    def test_pk_floor(self):
        with pytest.raises(ValueError, match="p\\*k"):
            TrainConfig(p=1, k=2)


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        cfg = TrainConfig(data_dir="somewhere", max_iters=123,
                          lr_schedule=((0, 0.5), (10, 0.05)), channels=(4, 8, 16))
        save_config_file(cfg, tmp_path / "run.cfg")
        loaded = load_train_config(tmp_path / "run.cfg")
        assert loaded == cfg

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("data_dir = x\nbogus_key = 3\n")
        with pytest.raises(ValueError, match="bogus_key"):
            load_train_config(tmp_path / "bad.cfg")

    def test_every_field_serialized(self):
        import dataclasses

        lines = train_config_lines(TrainConfig())
        keys = {line.split(" = ")[0] for line in lines}
        assert keys == {f.name for f in dataclasses.fields(TrainConfig)}


def _random_table(rng, n, parts=3, dim=8, subjects=None, views=(0,), cond="NM"):
    feats = rng.normal(size=(n, parts, dim))
    feats /= np.linalg.norm(feats, axis=2, keepdims=True)
    entries = []
    for i in range(n):
        sid = subjects[i] if subjects else f"{i:03d}"
        entries.append(IndexEntry(sid, cond, views[i % len(views)], i + 1, f"p{i}"))
    return EmbeddingTable(entries=entries, features=feats)


class TestRank1:
    def test_self_match_is_perfect(self, rng):
        table = _random_table(rng, 10)
        gallery = EmbeddingTable(
            entries=[replace(e, seq_index=e.seq_index + 100) for e in table.entries],
            features=table.features.copy(),
        )
        result = rank1(gallery, table)
        assert result.aggregate == 1.0

    def test_orthogonal_one_hot(self):
        n = 6
        feats = np.eye(n)[:, None, :]
        subjects = [f"s{i}" for i in range(n)]
        gal = EmbeddingTable(
            entries=[IndexEntry(s, "NM", 0, 1, s) for s in subjects], features=feats
        )
        probe = EmbeddingTable(
            entries=[IndexEntry(s, "NM", 90, 2, s + "p") for s in subjects],
            features=feats.copy(),
        )
        assert rank1(gal, probe).aggregate == 1.0

    def test_random_embeddings_near_chance(self, rng):
        n_subjects, n_probe = 10, 400
        gal = _random_table(rng, n_subjects)
        subjects = [gal.entries[i % n_subjects].subject_id for i in range(n_probe)]
        probe = _random_table(rng, n_probe, subjects=subjects)
        acc = rank1(gal, probe).aggregate
        # binomial: p=0.1, n=400 -> std ~1.5%; allow 5 sigma
        assert abs(acc - 0.1) < 0.08

    def test_gallery_order_invariance(self, rng):
        gal = _random_table(rng, 8)
        probe = _random_table(rng, 12, subjects=[gal.entries[i % 8].subject_id
                                                 for i in range(12)])
        base = rank1(gal, probe)
        perm = rng.permutation(8)
        shuffled = EmbeddingTable(
            entries=[gal.entries[i] for i in perm], features=gal.features[perm]
        )
        assert rank1(shuffled, probe).cells == base.cells

    def test_rotation_invariance(self, rng):
        """A common orthogonal rotation of every embedding preserves ranks."""
        gal = _random_table(rng, 6, parts=2, dim=5)
        probe = _random_table(rng, 9, parts=2, dim=5,
                              subjects=[gal.entries[i % 6].subject_id for i in range(9)])
        base = rank1(gal, probe)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        gal_rot = EmbeddingTable(entries=gal.entries, features=gal.features @ q)
        probe_rot = EmbeddingTable(entries=probe.entries, features=probe.features @ q)
        rotated = rank1(gal_rot, probe_rot)
        assert rotated.cells == base.cells

    def test_missing_subject_is_error_row(self, rng):
        gal = _random_table(rng, 4)
        probe = _random_table(rng, 2, subjects=["zzz", gal.entries[0].subject_id])
        result = rank1(gal, probe)
        assert len(result.errors) == 1
        assert "absent" in result.errors[0][1]

    def test_identical_view_exclusion(self, rng):
        gal = _random_table(rng, 4, views=(0, 90))
        probe = _random_table(rng, 8, views=(0, 90),
                              subjects=[gal.entries[i % 4].subject_id for i in range(8)])
        incl = rank1(gal, probe, include_identical_view=True)
        excl = rank1(gal, probe, include_identical_view=False)
        assert incl.cells == excl.cells  # cells unchanged, aggregation differs
        n_incl = sum(1 for (c, pv, gv) in incl.cells)
        used_excl = [k for k in excl.cells if k[1] != k[2]]
        assert len(used_excl) < n_incl

    def test_kv_lines_parse(self, rng):
        gal = _random_table(rng, 4)
        probe = _random_table(rng, 4, subjects=[e.subject_id for e in gal.entries])
        lines = eval_to_kv_lines(rank1(gal, probe))
        assert any(line.startswith("aggregate = ") for line in lines)

    def test_distance_matrix_symmetric_on_self(self, rng):
        feats = rng.normal(size=(5, 3, 8))
        feats /= np.linalg.norm(feats, axis=2, keepdims=True)
        d = sequence_distances(feats, feats)
        np.testing.assert_allclose(d, d.T, atol=1e-7)
        # diagonal d^2 cancels to float eps; sqrt lifts it to ~1e-8
        np.testing.assert_allclose(np.diag(d), 0.0, atol=1e-7)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("smalldata")
    proto = SynthProtocol(n_subjects=4, frames_per_seq=34, views=(0,),
                          conditions=("NM",), seqs_per_view=3, motion_only=True, seed=21)
    generate_dataset(proto, root)
    return root


def _tiny_train_config(data_dir, **overrides):
    base = dict(
        data_dir=str(data_dir),
        p=4, k=2,
        max_iters=8,
        lr_schedule=((0, 0.01),),
        checkpoint_every=4,
        channels=(4, 8, 8),
        embed_dim=8,
        n_static_strips=2,
        frame_downsample=4,
        seed=7,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_artifacts_and_metrics(self, small_dataset, tmp_path):
        cfg = _tiny_train_config(small_dataset)
        result = train(cfg, tmp_path / "run")
        assert result.iterations_run == 8
        assert result.final_checkpoint.exists()
        assert (tmp_path / "run" / "run_config.cfg").exists()
        rows = parse_metrics(result.metrics_path)
        assert [r["iteration"] for r in rows] == list(range(1, 9))
        assert all(math.isfinite(r["total"]) for r in rows)
        assert len(result.checkpoints) == 3  # iters 4, 8 + final

    def test_determinism_bitwise(self, small_dataset, tmp_path):
        cfg = _tiny_train_config(small_dataset)
        r1 = train(cfg, tmp_path / "a")
        r2 = train(cfg, tmp_path / "b")
        assert r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()
        assert r1.final_checkpoint.read_bytes() == r2.final_checkpoint.read_bytes()

    def test_too_few_subjects_at_startup(self, small_dataset, tmp_path):
        cfg = _tiny_train_config(small_dataset, p=9, k=1)
        with pytest.raises(ValueError, match="subjects"):
            train(cfg, tmp_path / "run")

    def test_loss_decreases_on_longer_run(self, small_dataset, tmp_path):
        cfg = _tiny_train_config(small_dataset, max_iters=60, checkpoint_every=60)
        result = train(cfg, tmp_path / "run")
        rows = parse_metrics(result.metrics_path)
        first = np.mean([r["total"] for r in rows[:10]])
        last = np.mean([r["total"] for r in rows[-10:]])
        assert last < first

    def test_desk_config_defaults(self):
        cfg = desk_config("/data", variant="static_only", seed=3)
        assert cfg.variant == "static_only"
        assert cfg.seed == 3
        assert set(cfg.probe_seq_indices).isdisjoint(cfg.train_seq_indices)

    def test_nonfinite_loss_aborts_with_checkpoint_reference(
        self, small_dataset, tmp_path, monkeypatch
    ):
        """A NaN loss aborts naming the last good checkpoint, and the
        metrics written so far stay parseable."""
        import lstcn.train as train_mod
        from lstcn.tensor import NonFiniteError
        from lstcn.train import TrainAbort

        real = train_mod.joint_loss
        calls = {"n": 0}

        def exploding(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] >= 6:
                raise NonFiniteError("synthetic blow-up")
            return real(*args, **kwargs)

        monkeypatch.setattr(train_mod, "joint_loss", exploding)
        cfg = _tiny_train_config(small_dataset, max_iters=10, checkpoint_every=2)
        with pytest.raises(TrainAbort) as exc:
            train(cfg, tmp_path / "run")
        assert exc.value.last_checkpoint is not None
        assert "ckpt_000004" in exc.value.last_checkpoint
        rows = parse_metrics(tmp_path / "run" / "metrics.tsv")
        assert [r["iteration"] for r in rows] == [1, 2, 3, 4, 5]


class TestEmbeddings:
    def test_rows_normalized_and_aligned(self, small_dataset):
        cfg = _tiny_train_config(small_dataset)
        index = load_index(small_dataset)
        store = SequenceStore(small_dataset)
        model = build_model(model_config_for(cfg, n_classes=4), seed=0)
        table = extract_embeddings(model, index, store, cfg.frame_downsample)
        assert table.features.shape[0] == len(index)
        norms = np.linalg.norm(table.features, axis=2)
        np.testing.assert_allclose(norms, 1.0, atol=1e-10)

    def test_duplicate_sequences_identical_rows(self, small_dataset):
        cfg = _tiny_train_config(small_dataset)
        index = load_index(small_dataset)
        store = SequenceStore(small_dataset)
        model = build_model(model_config_for(cfg, n_classes=4), seed=0)
        sub = index.filter(lambda e: e.subject_id == "001")
        table1 = extract_embeddings(model, sub, store, cfg.frame_downsample)
        table2 = extract_embeddings(model, sub, store, cfg.frame_downsample)
        np.testing.assert_array_equal(table1.features, table2.features)

    def test_short_sequences_skipped_and_reported(self, small_dataset, tmp_path):
        import shutil

        root = tmp_path / "data"
        shutil.copytree(small_dataset, root)
        seq_dir = root / "001" / "nm-01" / "000"
        for f in sorted(seq_dir.iterdir())[2:]:
            f.unlink()  # leave 2 frames, below the eval minimum of 3
        index = load_index(root)
        store = SequenceStore(root)
        cfg = _tiny_train_config(root)
        model = build_model(model_config_for(cfg, n_classes=4), seed=0)
        table = extract_embeddings(model, index, store, cfg.frame_downsample)
        assert len(table.skipped) == 1
        assert table.features.shape[0] == len(index) - 1
