import json

import numpy as np
import pytest

from mmdistill import training
from mmdistill.checkpoint import load_checkpoint
from mmdistill.losses import DistillConfig
from mmdistill.model import MultimodalModel
from mmdistill.training import (AXES, ConfigurationError, Recipe, RecipeError, Stage, StageKind,
                                ablation_cells, ablation_matrix, format_recipe, parse_recipe, rank_records,
                                run_recipe, run_stage)

from conftest import TINY_TRAIN, tiny_student, tiny_teacher


REAL_STEP = training.optimizer_step


def snapshot(model, group=None):
    return {k: p.data.tobytes() for k, p in model.named_parameters()
            if group is None or k.startswith(group + "/")}


def changed_groups(before, after):
    return {k.split("/")[0] for k in before if before[k] != after[k]}


def stage(kind, epochs=1, **distill):
    return Stage(StageKind(kind), epochs, DistillConfig(**distill), StageKind(kind).default_split)


class TestParseRecipe:
    def test_pt_sft(self):
        r = parse_recipe("PT-SFT")
        assert [s.kind for s in r.stages] == [StageKind.PT, StageKind.SFT]
        assert not r.needs_teacher

    def test_three_stage(self):
        r = parse_recipe("DPT-SFT-DFT")
        assert [s.kind.needs_teacher for s in r.stages] == [True, False, True]
        assert r.needs_teacher

    @pytest.mark.parametrize("label", ["SFT-DPT", "DPT-PT-SFT", "PT-SFT-PT", "XYZ-SFT", "", "PT--SFT"])
    def test_parse_errors(self, label):
        with pytest.raises(RecipeError):
            parse_recipe(label)

    @pytest.mark.parametrize("label", ["PT-SFT", "DPT-SFT", "PT-DFT", "DPT-DFT", "PT-SFT-DFT",
                                       "DPT-SFT-DFT", "DPT-DFT-DFT", "SFT"])
    def test_label_round_trip(self, label):
        assert format_recipe(parse_recipe(label)) == label == parse_recipe(label).label

    def test_stage_defaults(self):
        r = parse_recipe("DPT-SFT-DFT", train=TINY_TRAIN)
        assert [s.epochs for s in r.stages] == [1, 1, 1]
        assert [s.split for s in r.stages] == ["pretrain", "finetune", "finetune"]

    def test_pt_sft_and_dpt_sft_differ_only_in_first_stage(self):
        a, b = parse_recipe("PT-SFT"), parse_recipe("DPT-SFT")
        assert a.stages[1:] == b.stages[1:]
        assert a.stages[0].kind != b.stages[0].kind
        assert (a.stages[0].epochs, a.stages[0].split) == (b.stages[0].epochs, b.stages[0].split)


class TestFreezePolicy:
    def test_trainable_sets(self):
        assert StageKind.PT.trainable_groups == StageKind.DPT.trainable_groups == frozenset({"projector"})
        assert StageKind.SFT.trainable_groups == StageKind.DFT.trainable_groups == frozenset(
            {"projector", "llm"})
        assert all("visual_encoder" not in k.trainable_groups for k in StageKind)

    @pytest.mark.parametrize("kind", ["PT", "DPT", "SFT", "DFT"])
    def test_only_policy_groups_change(self, kind, tiny_pair, tiny_data):
        teacher, student = tiny_pair
        before, t_before = snapshot(student), snapshot(teacher)
        run_stage(student, teacher, stage(kind), tiny_data.split(StageKind(kind).default_split),
                  TINY_TRAIN, seed=0)
        assert changed_groups(before, snapshot(student)) == set(StageKind(kind).trainable_groups)
        assert snapshot(teacher) == t_before
        assert all(p.grad is None for _, p in teacher.named_parameters())

    def test_distillation_stage_without_teacher(self, tiny_data):
        student = MultimodalModel.create(tiny_student())
        with pytest.raises(ConfigurationError):
            run_stage(student, None, stage("DFT"), tiny_data.split("finetune"), TINY_TRAIN, seed=0)


class TestTeacherTraining:
    def test_pt_leaves_llm_and_sft_leaves_encoder(self, tiny_data):
        teacher = MultimodalModel.create(tiny_teacher(), seed=0)
        init = snapshot(teacher)
        run_stage(teacher, None, stage("PT"), tiny_data.split("pretrain"), TINY_TRAIN, seed=0)
        after_pt = snapshot(teacher)
        assert changed_groups(init, after_pt) == {"projector"}
        run_stage(teacher, None, stage("SFT"), tiny_data.split("finetune"), TINY_TRAIN, seed=0, stage_index=1)
        assert "visual_encoder" not in changed_groups(after_pt, snapshot(teacher))

    def test_train_teacher_writes_metrics(self, tiny_data, tmp_path):
        teacher, reports = training.train_teacher(tiny_teacher(), tiny_data, TINY_TRAIN, out_dir=tmp_path)
        lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [(x["stage"], x["epoch"]) for x in lines] == [("PT", 0), ("SFT", 0)]
        assert lines[-1]["accuracy"] == reports[-1].epochs[-1]["accuracy"]
        assert not any(g.trainable for g in teacher.groups)


class TestWeightCollapse:
    def trajectory(self, kind, tiny_data, monkeypatch, **distill):
        teacher = MultimodalModel.create(tiny_teacher(), seed=1)
        student = MultimodalModel.create(tiny_student(), seed=2, visual_encoder=teacher.visual_encoder)
        steps = []

        def recording(state, groups):
            REAL_STEP(state, groups)
            steps.append(snapshot(student))

        monkeypatch.setattr(training, "optimizer_step", recording)
        report = run_stage(student, teacher, stage(kind, epochs=2, **distill),
                           tiny_data.split(StageKind(kind).default_split), TINY_TRAIN, seed=4)
        return steps, report

    def test_dpt_with_zero_weights_is_pt(self, tiny_data, monkeypatch):
        pt, _ = self.trajectory("PT", tiny_data, monkeypatch)
        dpt, _ = self.trajectory("DPT", tiny_data, monkeypatch, alpha=0.0, beta=0.0, gamma=0.0)
        assert len(pt) == len(dpt) == 4
        assert pt == dpt

    def test_dft_with_zero_weights_reports_reg_and_follows_sft(self, tiny_data, monkeypatch):
        sft, _ = self.trajectory("SFT", tiny_data, monkeypatch)
        dft, report = self.trajectory("DFT", tiny_data, monkeypatch, alpha_ft=0.0, beta_ft=0.0, gamma_ft=0.0)
        assert sft == dft
        for rec in report.epochs:
            assert rec["loss"] == rec["L_reg"]


class TestRunRecipe:
    def test_needs_teacher(self, tiny_data):
        with pytest.raises(ConfigurationError, match="teacher"):
            run_recipe(parse_recipe("DPT-SFT-DFT"), tiny_student(), None, tiny_data, seed=0, train=TINY_TRAIN)

    def test_deterministic_record(self, tiny_pair, tiny_data):
        teacher, _ = tiny_pair
        recipe = parse_recipe("DPT-SFT-DFT", train=TINY_TRAIN)
        a = run_recipe(recipe, tiny_student(), teacher, tiny_data, seed=3, train=TINY_TRAIN)
        b = run_recipe(recipe, tiny_student(), teacher, tiny_data, seed=3, train=TINY_TRAIN)
        assert a == b
        assert set(a.stage_losses) == {"0:DPT", "1:SFT", "2:DFT"}
        assert np.isfinite(a.eval_ce) and 0.0 <= a.accuracy <= 1.0

    def test_outputs(self, tiny_pair, tiny_data, tmp_path):
        teacher, _ = tiny_pair
        recipe = parse_recipe("DPT-SFT-DFT", train=TINY_TRAIN)
        rec = run_recipe(recipe, tiny_student(), teacher, tiny_data, seed=0, train=TINY_TRAIN, out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "stage0_DPT.ckpt", "stage1_SFT.ckpt", "stage2_DFT.ckpt"]
        lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert len(lines) == 3
        for line in lines:
            assert {"stage", "stage_index", "epoch", "loss", "L_reg", "accuracy", "eval_ce"} <= set(line)
        assert {"L_res", "L_vis", "L_rel"} <= set(lines[0])
        stored = json.loads((tmp_path / "run_record.json").read_text())
        assert training.RunRecord.from_dict(stored) == rec
        # a rerun replaces the metrics stream rather than appending to it
        run_recipe(recipe, tiny_student(), teacher, tiny_data, seed=0, train=TINY_TRAIN, out_dir=tmp_path)
        assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 3

    def test_resume_from_stage_checkpoint_is_bit_identical(self, tiny_pair, tiny_data, tmp_path):
        teacher, _ = tiny_pair
        recipe = parse_recipe("DPT-SFT-DFT", train=TINY_TRAIN)
        full = run_recipe(recipe, tiny_student(), teacher, tiny_data, seed=5, train=TINY_TRAIN,
                          out_dir=tmp_path / "full")
        for k in (0, 1):
            student, meta = load_checkpoint(tmp_path / "full" / f"stage{k}_{recipe.stages[k].kind.value}.ckpt")
            assert meta["stage_index"] == k
            resumed = run_recipe(recipe, tiny_student(), teacher, tiny_data, seed=5, train=TINY_TRAIN,
                                 out_dir=tmp_path / f"resume{k}", student=student, start_stage=k + 1)
            assert (resumed.accuracy, resumed.eval_ce) == (full.accuracy, full.eval_ce)
            final_full = (tmp_path / "full" / "stage2_DFT.ckpt").read_bytes()
            final_resumed = (tmp_path / f"resume{k}" / "stage2_DFT.ckpt").read_bytes()
            assert final_full == final_resumed


class TestAblation:
    def test_cells_per_axis(self):
        base, train = DistillConfig(), TINY_TRAIN
        assert [c.label for c in ablation_cells("recipes", base, train)] == list(training.RECIPE_ROWS)
        assert [c.label for c in ablation_cells("divergences", base, train)] == ["FKL", "RKL", "JSD"]
        targets = [c.label for c in ablation_cells("targets", base, train)]
        masks = ["response", "response+prompt", "response+visual", "response+prompt+visual"]
        assert targets == [f"DPT:{m}" for m in masks] + [f"DFT:{m}" for m in masks]
        sizes = ablation_cells("teacher_sizes", base, train)
        assert [c.teacher_key for c in sizes] == ["teacher-small", "teacher-large"]

    def test_divergence_cells_only_change_divergence(self):
        cells = ablation_cells("divergences", DistillConfig(), TINY_TRAIN)
        for c in cells:
            assert all(s.distill.divergence == c.label for s in c.recipe.stages)

    def test_unknown_axis(self):
        with pytest.raises(ConfigurationError, match="recipes, divergences, targets, teacher_sizes"):
            ablation_cells("colors", DistillConfig(), TINY_TRAIN)
        assert AXES == ("recipes", "divergences", "targets", "teacher_sizes")

    def test_recipe_matrix_runs(self, tiny_pair, tiny_data):
        teacher, _ = tiny_pair
        records = ablation_matrix("recipes", tiny_student(), {"default": teacher}, tiny_data, seed=0,
                                  train=TINY_TRAIN)
        assert sorted(r.recipe for r in records) == sorted(training.RECIPE_ROWS)
        assert records == rank_records(records)

    def test_worker_pool_matches_serial(self, tiny_pair, tiny_data):
        teacher, _ = tiny_pair
        kw = dict(student_config=tiny_student(), teachers={"default": teacher}, data=tiny_data, seed=1,
                  train=TINY_TRAIN)
        assert ablation_matrix("divergences", workers=1, **kw) == ablation_matrix("divergences", workers=2, **kw)

    def test_rank_order(self):
        rec = lambda label, acc, ce: training.RunRecord(label, 0, {}, acc, ce, label=label)
        ranked = rank_records([rec("a", 0.5, 1.0), rec("b", 0.9, 2.0), rec("c", 0.5, 0.5)])
        assert [r.label for r in ranked] == ["b", "c", "a"]


class TestRecipeType:
    def test_construction_validates_order(self):
        with pytest.raises(RecipeError):
            Recipe((stage("SFT"), stage("PT")))
