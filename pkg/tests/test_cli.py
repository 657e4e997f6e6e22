import json

import pytest

from mmdistill.checkpoint import FORMAT_VERSION
from mmdistill.cli import INCOMPLETE, main
from mmdistill.config import OUTPUT_ENV
from mmdistill.training import RECIPE_ROWS, RunRecord

from conftest import TINY_INI

ENCODER_DIM, STUDENT_DIM = 24, 16


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.ini"
    config.write_text(TINY_INI)
    mp = pytest.MonkeyPatch()
    mp.setenv(OUTPUT_ENV, str(root / "out"))
    assert main(["train-teacher", str(config)]) == 0
    assert main(["train-teacher", str(config), "--preset", "teacher-small"]) == 0
    yield root, config
    mp.undo()


@pytest.fixture
def env(workspace, monkeypatch):
    root, config = workspace
    monkeypatch.setenv(OUTPUT_ENV, str(root / "out"))
    return root / "out", str(config)


def last_metrics(path):
    return json.loads(path.read_text().splitlines()[-1])


class TestTrainTeacher:
    def test_outputs(self, env):
        out, _ = env
        tdir = out / "teacher" / "teacher-large"
        assert {p.name for p in tdir.iterdir()} == {"config.ini", "dataset.jsonl", "metrics.jsonl",
                                                     "teacher.ckpt"}

    def test_printed_accuracy_matches_metrics(self, env, capsys, tmp_path, monkeypatch):
        _, config = env
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
        assert main(["train-teacher", config]) == 0
        printed = capsys.readouterr().out
        last = last_metrics(tmp_path / "teacher" / "teacher-large" / "metrics.jsonl")
        assert f"final eval accuracy: {last['accuracy']!r}" in printed

    def test_eval_reproduces_training_accuracy_exactly(self, env, capsys):
        out, _ = env
        tdir = out / "teacher" / "teacher-large"
        capsys.readouterr()
        assert main(["eval", str(tdir / "teacher.ckpt"), "--data", str(tdir / "dataset.jsonl")]) == 0
        printed = capsys.readouterr().out
        last = last_metrics(tdir / "metrics.jsonl")
        assert f"exact-match accuracy: {last['accuracy']!r}" in printed
        assert f"eval cross-entropy: {last['eval_ce']!r}" in printed

    def test_missing_config_names_path(self, capsys, tmp_path):
        missing = tmp_path / "absent.ini"
        assert main(["train-teacher", str(missing)]) != 0
        assert str(missing) in capsys.readouterr().err

    def test_bad_config_is_line_anchored(self, capsys, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[student]\nembed_dim = 16\nepochs = 3\n")
        assert main(["train-teacher", str(bad)]) == 2
        assert f"{bad}:3:" in capsys.readouterr().err


class TestRun:
    def test_pt_sft_needs_no_teacher(self, tmp_path, monkeypatch):
        config = tmp_path / "c.ini"
        config.write_text(TINY_INI)
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "fresh"))
        assert main(["run", str(config), "--recipe", "PT-SFT"]) == 0
        run_dir = tmp_path / "fresh" / "runs" / "PT-SFT" / "seed0"
        assert (run_dir / "run_record.json").exists()
        assert not (run_dir / INCOMPLETE).exists()

    def test_distillation_without_teacher_explains(self, tmp_path, monkeypatch, capsys):
        config = tmp_path / "c.ini"
        config.write_text(TINY_INI)
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "fresh"))
        assert main(["run", str(config), "--recipe", "DPT-SFT-DFT"]) == 2
        err = capsys.readouterr().err
        assert "needs a trained teacher" in err and "train-teacher" in err
        assert not (tmp_path / "fresh" / "runs").exists()

    def test_rerun_gives_identical_record(self, env):
        out, config = env
        records = []
        for _ in range(2):
            assert main(["run", config, "--recipe", "DPT-SFT-DFT", "--seed", "1"]) == 0
            run_dir = out / "runs" / "DPT-SFT-DFT" / "seed1"
            records.append(RunRecord.from_dict(json.loads((run_dir / "run_record.json").read_text())))
        assert records[0] == records[1]
        assert sorted(p.name for p in run_dir.iterdir()) == [
            "config.ini", "metrics.jsonl", "run_record.json", "stage0_DPT.ckpt", "stage1_SFT.ckpt",
            "stage2_DFT.ckpt"]

    def test_bad_recipe(self, env, capsys):
        _, config = env
        assert main(["run", config, "--recipe", "SFT-DPT"]) == 2
        assert "first stage" in capsys.readouterr().err


class TestAblate:
    def rows(self, out, axis):
        return json.loads((out / "ablations" / axis / "results.json").read_text())["rows"]

    def test_unknown_axis_lists_valid_axes(self, env, capsys):
        _, config = env
        assert main(["ablate", config, "--axis", "colours"]) == 2
        assert "recipes, divergences, targets, teacher_sizes" in capsys.readouterr().err

    def test_recipes_axis(self, env):
        out, config = env
        assert main(["ablate", config, "--axis", "recipes"]) == 0
        rows = self.rows(out, "recipes")
        assert sorted(r["recipe"] for r in rows) == sorted(RECIPE_ROWS)
        assert [r["rank"] for r in rows] == list(range(1, 7))
        assert (out / "ablations" / "recipes" / "table.txt").read_text().count("\n") == 3 + 6

    def test_divergences_axis(self, env):
        out, config = env
        assert main(["ablate", config, "--axis", "divergences", "--workers", "2"]) == 0
        assert sorted(r["label"] for r in self.rows(out, "divergences")) == ["FKL", "JSD", "RKL"]

    def test_targets_axis(self, env):
        out, config = env
        assert main(["ablate", config, "--axis", "targets"]) == 0
        labels = [r["label"] for r in self.rows(out, "targets")]
        assert len(labels) == 8
        assert sum(lbl.startswith("DPT:") for lbl in labels) == sum(lbl.startswith("DFT:") for lbl in labels) == 4

    def test_teacher_sizes_axis(self, env):
        out, config = env
        assert main(["ablate", config, "--axis", "teacher_sizes"]) == 0
        assert sorted(r["label"] for r in self.rows(out, "teacher_sizes")) == ["teacher-large", "teacher-small"]


class TestInspectAndEval:
    def test_inspect_projector_count(self, env, capsys):
        out, config = env
        main(["run", config, "--recipe", "PT-SFT"])
        ckpt = out / "runs" / "PT-SFT" / "seed0" / "stage1_SFT.ckpt"
        capsys.readouterr()
        assert main(["inspect", str(ckpt)]) == 0
        printed = capsys.readouterr().out
        c, h, d = ENCODER_DIM, STUDENT_DIM, STUDENT_DIM
        assert f"  projector: {c * h + h + h * d + d}\n" in printed
        assert f"format version: {FORMAT_VERSION}" in printed
        assert '"embed_dim": 16' in printed

    def test_truncated_checkpoint(self, env, tmp_path, capsys):
        out, _ = env
        blob = (out / "teacher" / "teacher-large" / "teacher.ckpt").read_bytes()
        broken = tmp_path / "broken.ckpt"
        broken.write_bytes(blob[: len(blob) // 2])
        assert main(["inspect", str(broken)]) == 2
        assert "truncated" in capsys.readouterr().err
        assert main(["eval", str(broken), "--data", str(out / "teacher" / "teacher-large" / "dataset.jsonl")]) == 2

    def test_version_mismatch_names_both_versions(self, env, tmp_path, capsys):
        out, _ = env
        blob = bytearray((out / "teacher" / "teacher-large" / "teacher.ckpt").read_bytes())
        blob[8:12] = (FORMAT_VERSION + 6).to_bytes(4, "little")
        path = tmp_path / "future.ckpt"
        path.write_bytes(bytes(blob))
        assert main(["inspect", str(path)]) == 2
        assert f"expected {FORMAT_VERSION}, found {FORMAT_VERSION + 6}" in capsys.readouterr().err

    def test_eval_requires_data_source(self, env, capsys):
        out, _ = env
        assert main(["eval", str(out / "teacher" / "teacher-large" / "teacher.ckpt")]) == 2
        assert "--data" in capsys.readouterr().err

    def test_eval_from_config_matches_dataset_file(self, env, capsys):
        out, config = env
        ckpt = str(out / "teacher" / "teacher-large" / "teacher.ckpt")
        capsys.readouterr()
        main(["eval", ckpt, "--config", config])
        from_config = capsys.readouterr().out
        main(["eval", ckpt, "--data", str(out / "teacher" / "teacher-large" / "dataset.jsonl")])
        assert capsys.readouterr().out == from_config


class TestIncompleteMarker:
    def test_marker_left_on_failure(self, env, tmp_path, monkeypatch):
        out, config = env
        import mmdistill.cli as cli

        def boom(*a, **k):
            raise RuntimeError("interrupted")

        monkeypatch.setattr(cli, "run_recipe", boom)
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
        with pytest.raises(RuntimeError):
            main(["run", config, "--recipe", "PT-SFT"])
        assert (tmp_path / "runs" / "PT-SFT" / "seed0" / INCOMPLETE).exists()

    def test_no_marker_after_success(self, env):
        out, _ = env
        assert not list(out.rglob(INCOMPLETE))
