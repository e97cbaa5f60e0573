import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from mtaffect.checkpoint import checkpoint_digest, save_checkpoint
from mtaffect.data import (
    DatasetManifest,
    generate_synthetic,
    load_manifest,
    save_manifest,
)
from mtaffect.distill import (
    CompletedEntry,
    CompletedLabels,
    TeacherModel,
    build_unified,
    complete_labels,
    filter_task_labeled,
    load_teacher,
    save_teacher,
    task_loss_weights,
    train_student,
    train_teacher,
)
from mtaffect.errors import CheckpointError, CompletenessError, ValidationError
from mtaffect.metrics import evaluate
from mtaffect.model import ModelConfig, build_model
from mtaffect.trainer import TrainConfig, fit, predict_manifest

from test_data import coverage_fixture, make_record

TINY = ModelConfig(backbone_variant="tiny", pyramid_channels=8, input_size=(32, 32), seed=4)


@pytest.fixture(scope="module")
def clean70(tmp_path_factory):
    out = tmp_path_factory.mktemp("clean70")
    manifest, _ = generate_synthetic(out, num_samples=70, image_size=(32, 32), seed=3)
    return manifest


@pytest.fixture(scope="module")
def masked140(tmp_path_factory):
    out = tmp_path_factory.mktemp("masked140")
    manifest, _ = generate_synthetic(
        out, num_samples=140, image_size=(32, 32), seed=9, mask_rate=0.5
    )
    return manifest


def untrained_teachers(seed=0):
    return {
        task: TeacherModel(
            task=task,
            model=build_model(replace(TINY, seed=seed + i)),
            manifest_digest="0" * 64,
        )
        for i, task in enumerate(("va", "expr", "au"))
    }


class TestTaskWeights:
    def test_single_active_weight(self):
        assert task_loss_weights("va") .alpha == 1.0
        assert task_loss_weights("va").beta == 0.0
        assert task_loss_weights("expr").beta == 1.0
        assert task_loss_weights("au").gamma == 1.0

    def test_unknown_task_rejected(self):
        with pytest.raises(ValidationError):
            task_loss_weights("pose")


class TestFilter:
    def test_filter_counts(self):
        manifest = coverage_fixture()
        assert len(filter_task_labeled(manifest, "va").records) == 40
        assert len(filter_task_labeled(manifest, "expr").records) == 70
        assert len(filter_task_labeled(manifest, "au").records) == 55


class TestTeacherTraining:
    def test_expr_teacher_overfits_separable_data(self, clean70):
        teacher, history = train_teacher(
            "expr", clean70, TINY, TrainConfig(batch_size=16, epochs=40, epoch_fraction=1.0, seed=0)
        )
        losses = [e.loss_total for e in history.epochs]
        assert all(losses[i + 1] < losses[i] for i in range(4))
        report = evaluate(clean70, predict_manifest(teacher.model, clean70))
        assert report.expr_tacc >= 0.95
        # noiseless classes are separable by construction: full train accuracy
        assert report.expr_tacc == 1.0

    def test_va_teacher_reaches_small_mse(self, clean70):
        teacher, _ = train_teacher(
            "va", clean70, TINY, TrainConfig(batch_size=16, epochs=80, epoch_fraction=1.0, seed=0)
        )
        preds = predict_manifest(teacher.model, clean70)
        va_true = np.array([r.targets.va for r in clean70.records])
        assert float(((preds.va - va_true) ** 2).mean()) < 0.01

    def test_no_au_labels_rejected(self):
        records = [make_record(i, expr=i % 7) for i in range(10)]
        manifest = DatasetManifest(records=records, num_aus=12)
        with pytest.raises(ValidationError, match="au"):
            train_teacher("au", manifest, TINY, TrainConfig(batch_size=2, epochs=1))

    def test_only_designated_head_receives_gradients(self, clean70):
        teacher, _ = train_teacher(
            "expr", clean70, TINY, TrainConfig(batch_size=16, epochs=2, epoch_fraction=1.0, seed=0)
        )
        fresh = build_model(TINY)
        assert torch.equal(teacher.model.heads.va.weight, fresh.heads.va.weight.double() if teacher.model.dtype == torch.float64 else fresh.heads.va.weight)
        assert torch.equal(teacher.model.heads.au.weight, fresh.heads.au.weight)
        assert not torch.equal(teacher.model.heads.expr.weight, fresh.heads.expr.weight)

    def test_teacher_checkpoint_round_trip(self, clean70, tmp_path):
        teacher, _ = train_teacher(
            "expr", clean70, TINY, TrainConfig(batch_size=16, epochs=1, epoch_fraction=1.0, seed=0)
        )
        save_teacher(teacher, tmp_path / "t.ckpt")
        loaded = load_teacher(tmp_path / "t.ckpt")
        assert loaded.task == "expr"
        assert loaded.manifest_digest == teacher.manifest_digest
        for p1, p2 in zip(teacher.model.parameters(), loaded.model.parameters()):
            assert torch.equal(p1, p2)

    def test_non_teacher_checkpoint_rejected(self, tmp_path):
        save_checkpoint(build_model(TINY), tmp_path / "plain.ckpt")
        with pytest.raises(CheckpointError):
            load_teacher(tmp_path / "plain.ckpt")

    def test_training_is_reproducible(self, clean70, tmp_path):
        cfg = TrainConfig(batch_size=16, epochs=3, epoch_fraction=0.5, seed=8)
        t1, _ = train_teacher("expr", clean70, TINY, cfg)
        t2, _ = train_teacher("expr", clean70, TINY, cfg)
        save_teacher(t1, tmp_path / "a.ckpt")
        save_teacher(t2, tmp_path / "b.ckpt")
        assert checkpoint_digest(tmp_path / "a.ckpt") == checkpoint_digest(tmp_path / "b.ckpt")


class TestCompleteLabels:
    def test_fully_labeled_samples_get_no_entries(self, masked140):
        completed = complete_labels(untrained_teachers(), masked140, batch_size=64)
        for record in masked140.records:
            if all(record.targets.mask):
                assert record.id not in completed.entries

    def test_missing_tasks_get_entries(self, masked140):
        completed = complete_labels(untrained_teachers(), masked140, batch_size=64)
        for record in masked140.records:
            mask = record.targets.mask
            by_task = completed.entries.get(record.id, {})
            for task, present in zip(("va", "expr", "au"), mask):
                assert (task in by_task) == (not present)

    def test_completed_values_are_valid_targets(self, masked140):
        completed = complete_labels(untrained_teachers(), masked140, batch_size=64)
        for by_task in completed.entries.values():
            if "va" in by_task:
                v, a = by_task["va"].value
                assert -1.0 <= v <= 1.0 and -1.0 <= a <= 1.0
            if "expr" in by_task:
                probs = by_task["expr"].value
                assert len(probs) == 7
                assert abs(math.fsum(probs) - 1.0) < 1e-6
            if "au" in by_task:
                assert all(0.0 <= p <= 1.0 for p in by_task["au"].value)

    def test_constant_head_teacher_gives_identical_completions(self, masked140):
        teachers = untrained_teachers()
        with torch.no_grad():
            teachers["va"].model.heads.va.weight.zero_()
            teachers["va"].model.heads.va.bias.fill_(0.3)
        completed = complete_labels(teachers, masked140, batch_size=64)
        va_values = {
            by_task["va"].value for by_task in completed.entries.values() if "va" in by_task
        }
        assert len(va_values) == 1

    def test_hard_mode_produces_decisions(self, masked140):
        completed = complete_labels(untrained_teachers(), masked140, batch_size=64, hard=True)
        for by_task in completed.entries.values():
            if "expr" in by_task:
                assert sorted(set(by_task["expr"].value)) in ([0.0, 1.0], [1.0])
            if "au" in by_task:
                assert set(by_task["au"].value) <= {0.0, 1.0}

    def test_unreadable_image_is_dropped_with_report(self, tmp_path):
        manifest, _ = generate_synthetic(
            tmp_path / "d", num_samples=14, image_size=(32, 32), seed=2, mask_rate=0.5
        )
        victim = next(r for r in manifest.records if not all(r.targets.mask))
        (manifest.root / victim.image_path).write_bytes(b"not an image")
        completed = complete_labels(untrained_teachers(), manifest, batch_size=8)
        assert [sid for sid, _ in completed.dropped] == [victim.id]
        assert victim.id not in completed.entries

    def test_missing_teacher_rejected(self, masked140):
        teachers = untrained_teachers()
        del teachers["au"]
        with pytest.raises(ValidationError):
            complete_labels(teachers, masked140)

    def test_mis_registered_teacher_rejected(self, masked140):
        teachers = untrained_teachers()
        teachers["va"], teachers["au"] = teachers["au"], teachers["va"]
        with pytest.raises(ValidationError):
            complete_labels(teachers, masked140)

    def test_save_load_round_trip(self, masked140, tmp_path):
        completed = complete_labels(untrained_teachers(), masked140, batch_size=64)
        path = tmp_path / "completed.csv"
        completed.save(path)
        loaded = CompletedLabels.load(path)
        assert set(loaded.entries) == set(completed.entries)
        for sid, by_task in completed.entries.items():
            for task, entry in by_task.items():
                restored = loaded.entries[sid][task]
                assert restored.value == entry.value
                assert restored.teacher_id == entry.teacher_id


def fake_completions(manifest, teacher_id="fake:000000000000"):
    completed = CompletedLabels(num_expressions=7, num_aus=manifest.num_aus)
    for record in manifest.records:
        mask = record.targets.mask
        if not mask[0]:
            completed.add(record.id, CompletedEntry("va", (0.25, -0.25), teacher_id))
        if not mask[1]:
            completed.add(
                record.id,
                CompletedEntry("expr", (0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1), teacher_id),
            )
        if not mask[2]:
            completed.add(
                record.id,
                CompletedEntry("au", tuple(0.5 for _ in range(manifest.num_aus)), teacher_id),
            )
    return completed


class TestBuildUnified:
    def test_coverage_arithmetic(self):
        manifest = coverage_fixture(100, 40, 70, 55)
        d_multi = build_unified(manifest, fake_completions(manifest))
        assert d_multi.coverage == (100, 100, 100)
        teacher_counts = tuple(
            sum(1 for r in d_multi.records if getattr(r.provenance, task) == "teacher")
            for task in ("va", "expr", "au")
        )
        assert teacher_counts == (60, 30, 45)

    def test_fully_labeled_input_is_identity(self, clean70):
        d_multi = build_unified(clean70, CompletedLabels(num_aus=12))
        assert d_multi.records == clean70.records
        assert all(r.provenance.as_tuple() == ("gt", "gt", "gt") for r in d_multi.records)

    def test_ground_truth_targets_preserved_bit_exactly(self):
        manifest = coverage_fixture(50, 20, 35, 30)
        d_multi = build_unified(manifest, fake_completions(manifest))
        by_id = {r.id: r for r in d_multi.records}
        for record in manifest.records:
            unified = by_id[record.id]
            for task, present in zip(("va", "expr", "au"), record.targets.mask):
                if present:
                    assert getattr(unified.targets, task) == getattr(record.targets, task)
                    assert getattr(unified.provenance, task) == "gt"
                else:
                    assert getattr(unified.provenance, task) == "teacher"

    def test_uncovered_pair_names_the_sample(self):
        manifest = coverage_fixture(10, 4, 10, 10)
        completed = CompletedLabels(num_aus=12)  # covers nothing
        with pytest.raises(CompletenessError, match="va.*r0004"):
            build_unified(manifest, completed)

    def test_dropped_samples_are_excluded(self):
        manifest = coverage_fixture(10, 4, 10, 10)
        completed = fake_completions(manifest)
        completed.dropped.append(("r0005", "decode failure"))
        d_multi = build_unified(manifest, completed)
        assert len(d_multi.records) == 9
        assert all(r.id != "r0005" for r in d_multi.records)


class TestStudentTraining:
    def test_all_gt_manifest_equals_plain_training(self, clean70):
        train_cfg = TrainConfig(batch_size=16, epochs=2, epoch_fraction=1.0, seed=5)
        result_student = train_student(clean70, TINY, train_cfg)
        plain = build_model(TINY)
        result_plain = fit(plain, clean70, train_cfg)
        for p1, p2 in zip(result_student.model.parameters(), result_plain.model.parameters()):
            assert torch.equal(p1, p2)

    def test_loss_decreases_smoothed(self, clean70):
        result = train_student(
            clean70, TINY, TrainConfig(batch_size=16, epochs=6, epoch_fraction=1.0, seed=5)
        )
        losses = [e.loss_total for e in result.history.epochs]
        smoothed = [(losses[i] + losses[i + 1]) / 2 for i in range(5)]
        assert all(smoothed[i + 1] < smoothed[i] for i in range(4))

    def test_partial_manifest_rejected(self, masked140):
        with pytest.raises(ValidationError):
            train_student(masked140, TINY, TrainConfig(batch_size=8, epochs=1))


class TestPipelineEndToEnd:
    def test_small_pipeline_completes(self, masked140, tmp_path):
        tcfg = TrainConfig(batch_size=16, epochs=8, epoch_fraction=1.0, seed=1)
        teachers = {
            task: train_teacher(task, masked140, TINY, tcfg)[0] for task in ("va", "expr", "au")
        }
        completed = complete_labels(teachers, masked140, batch_size=64)
        d_multi = build_unified(masked140, completed)
        n = len(d_multi.records)
        assert d_multi.coverage == (n, n, n)
        assert not any("absent" in r.provenance.as_tuple() for r in d_multi.records)
        # unified manifest round-trips through the file format (soft labels included)
        path = save_manifest(d_multi, tmp_path / "multi.csv")
        reloaded = load_manifest(path)
        assert reloaded.coverage == (n, n, n)
        result = train_student(
            d_multi, TINY, TrainConfig(batch_size=16, epochs=2, epoch_fraction=1.0, seed=2)
        )
        assert all(np.isfinite(e.loss_total) for e in result.history.epochs)
