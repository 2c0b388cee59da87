"""CLI surface: subcommands, exit codes, artifact manifests, help sync."""

import dataclasses

import pytest

from lstcn.cli import main
from lstcn.train import TrainConfig


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_synth")
    code = run_cli(
        "synth", "--subjects", "4", "--frames", "34", "--views", "0",
        "--seqs-per-view", "3", "--motion-only", "--seed", "5",
        "--out", str(out / "data"),
    )
    assert code == 0
    return out / "data"


class TestSynthCommand:
    def test_writes_dataset_and_manifest(self, synth_dir):
        assert (synth_dir / "manifest.tsv").exists()
        assert (synth_dir / "artifacts.txt").exists()
        listed = (synth_dir / "artifacts.txt").read_text().splitlines()
        assert "manifest.tsv" in listed
        assert sum(1 for n in listed if n.endswith(".pgm")) == 4 * 3 * 34

    def test_byte_identical_reruns(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli(
                "synth", "--subjects", "2", "--frames", "16", "--views", "0",
                "--seqs-per-view", "1", "--seed", "9", "--out", str(tmp_path / sub),
            ) == 0
        fa = sorted((tmp_path / "a").rglob("*.pgm"))
        fb = sorted((tmp_path / "b").rglob("*.pgm"))
        assert [f.read_bytes() for f in fa] == [f.read_bytes() for f in fb]

    def test_bad_view_fails_cleanly(self, tmp_path, capsys):
        code = run_cli("synth", "--views", "45", "--out", str(tmp_path / "x"))
        assert code == 1
        assert "error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = run_cli(
        "train", "--data", str(synth_dir), "--out", str(out),
        "--iters", "6", "--seed", "3",
        "--set", "p=4", "--set", "k=2", "--set", "channels=4,8,8",
        "--set", "embed_dim=8", "--set", "n_static_strips=2",
        "--set", "lr_schedule=0:0.01", "--set", "checkpoint_every=6",
    )
    assert code == 0
    return out


class TestTrainEvalCommands:
    def test_train_artifacts(self, trained):
        assert (trained / "final.lstcn").exists()
        assert (trained / "metrics.tsv").exists()
        assert (trained / "run_config.cfg").exists()
        assert (trained / "eval_report.kv").exists()
        listed = (trained / "artifacts.txt").read_text().splitlines()
        assert "final.lstcn" in listed

    def test_eval_from_checkpoint(self, trained, synth_dir, tmp_path, capsys):
        code = run_cli(
            "eval", "--checkpoint", str(trained / "final.lstcn"),
            "--data", str(synth_dir), "--out", str(tmp_path / "eval"),
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "aggregate" in out
        assert (tmp_path / "eval" / "eval_report.txt").exists()

    def test_eval_fused_matches(self, trained, synth_dir, tmp_path):
        base, fused = tmp_path / "plain", tmp_path / "fused"
        for out, extra in ((base, []), (fused, ["--fuse"])):
            assert run_cli(
                "eval", "--checkpoint", str(trained / "final.lstcn"),
                "--data", str(synth_dir), "--out", str(out), *extra,
            ) == 0
        a = (base / "eval_report.kv").read_text()
        b = (fused / "eval_report.kv").read_text()
        assert a == b

    def test_eval_missing_checkpoint_exit_1(self, tmp_path, capsys):
        code = run_cli("eval", "--checkpoint", str(tmp_path / "nope.lstcn"),
                       "--out", str(tmp_path / "o"))
        assert code == 1
        assert "nope.lstcn" in capsys.readouterr().err

    def test_report_command(self, trained, capsys):
        code = run_cli("report", "--run", str(trained))
        assert code == 0
        out = capsys.readouterr().out
        assert "iterations: 6" in out
        assert "aggregate" in out


class TestHarnessCommands:
    def test_fusecheck_passes(self, capsys):
        code = run_cli("fusecheck", "--trials", "20", "--seed", "1")
        assert code == 0
        assert "PASS" in capsys.readouterr().out

    def test_gradcheck_passes(self, capsys):
        code = run_cli("gradcheck", "--trials", "1", "--seed", "1")
        assert code == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "composite_gbsp_lstc_lstp" in out


class TestAblateCommand:
    def test_grid_rows(self, synth_dir, tmp_path, capsys):
        code = run_cli(
            "ablate", "--data", str(synth_dir), "--out", str(tmp_path / "ab"),
            "--variants", "static_only,gstp_head", "--iters", "4",
            "--set", "p=4", "--set", "k=2", "--set", "channels=4,8,8",
            "--set", "embed_dim=8", "--set", "n_static_strips=2",
            "--set", "lr_schedule=0:0.01", "--set", "checkpoint_every=4",
        )
        assert code == 0
        table = (tmp_path / "ab" / "ablation.tsv").read_text().splitlines()
        assert len(table) == 3  # header + one row per variant
        assert "static_only" in table[1]
        assert "gstp_head" in table[2]


class TestUsage:
    def test_unknown_subcommand_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--bogus")
        assert exc.value.code == 2

    def test_help_lists_every_config_key(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("train", "--help")
        assert exc.value.code == 0
        help_text = capsys.readouterr().out
        for field in dataclasses.fields(TrainConfig):
            assert field.name in help_text, f"{field.name} missing from --help"

    def test_help_lists_every_subcommand(self, capsys):
        with pytest.raises(SystemExit):
            run_cli("--help")
        text = capsys.readouterr().out
        for cmd in ("synth", "train", "eval", "ablate", "gradcheck", "fusecheck", "report"):
            assert cmd in text

    def test_unknown_set_key_diagnosed(self, synth_dir, tmp_path, capsys):
        code = run_cli("train", "--data", str(synth_dir), "--out", str(tmp_path / "o"),
                       "--set", "not_a_key=3")
        assert code == 1
        assert "not_a_key" in capsys.readouterr().err
