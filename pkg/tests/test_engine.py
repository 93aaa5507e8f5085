import pytest
import torch

from conre.data import Task
from conre.engine import TrainingLogger, run_task
from conre.errors import NumericsError, StateError
from conre.memory import MemoryStore, PrototypeStore
from conre.model import build_model
from conre.synthetic import SyntheticSpec, generate_synthetic_sequence

from conftest import relation_samples, tiny_config


def toy_task(index, relations, per_relation=12):
    train, test = [], []
    for r in relations:
        samples = relation_samples(r, per_relation)
        train.extend(samples[:-2])
        test.extend(samples[-2:])
    return Task(index=index, relations=frozenset(relations), train=tuple(train),
                valid=(), test=tuple(test))


def fresh_state(config):
    return build_model(config), MemoryStore(config.memory_size), PrototypeStore()


class TestRunTask:
    def test_first_task_effects(self):
        config = tiny_config(memory_size=10, epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        task = toy_task(1, range(8), per_relation=14)
        summary = run_task(model, task, memory, prototypes, config)
        assert model.classifier.num_relations == 8
        assert len(memory) == 80
        assert all(prototypes.has_static(r) for r in range(8))
        assert summary["replay_set_size"] == 4 * 80
        assert model.teacher is not None
        assert model.task_index == 1

    def test_memory_capped_by_available_samples(self):
        config = tiny_config(memory_size=10, epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        run_task(model, toy_task(1, [0, 1], per_relation=6), memory, prototypes, config)
        assert all(len(memory.exemplars(r)) == 4 for r in (0, 1))  # 6 - 2 test

    def test_out_of_order_task_rejected(self):
        config = tiny_config(epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        with pytest.raises(StateError, match="out of order"):
            run_task(model, toy_task(2, [0, 1]), memory, prototypes, config)
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        with pytest.raises(StateError, match="out of order"):
            run_task(model, toy_task(1, [4, 5]), memory, prototypes, config)

    def test_old_prototypes_move_when_dynamic(self):
        config = tiny_config(beta=0.5, epochs_new=2, epochs_replay=2)
        model, memory, prototypes = fresh_state(config)
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        after_t1 = {r: prototypes.combined(r).clone() for r in (0, 1)}
        run_task(model, toy_task(2, [2, 3]), memory, prototypes, config)
        for r in (0, 1):
            assert not torch.equal(prototypes.combined(r), after_t1[r])

    def test_static_only_prototypes_stay_fixed(self):
        config = tiny_config(use_dp=False, epochs_new=2, epochs_replay=2)
        model, memory, prototypes = fresh_state(config)
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        run_task(model, toy_task(2, [2, 3]), memory, prototypes, config)
        for r in (0, 1):
            assert torch.equal(prototypes.combined(r), prototypes.static(r))

    def test_no_replay_skips_memory_and_teacher(self):
        config = tiny_config(replay=False, epochs_new=1)
        model, memory, prototypes = fresh_state(config)
        summary = run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        assert summary == {"task": 1, "replay": False}
        assert len(memory) == 0
        assert model.teacher is None
        assert not prototypes.relations

    def test_augmentation_switch(self):
        config = tiny_config(use_ma=False, epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        summary = run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        assert summary["replay_set_size"] == len(memory)  # originals only

    def test_structured_log_contents(self):
        config = tiny_config(epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        log = TrainingLogger()
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config, log=log)
        run_task(model, toy_task(2, [2, 3]), memory, prototypes, config, log=log)
        phases = {(r["task"], r["phase"]) for r in log.records}
        assert phases == {(1, "new_task"), (1, "replay"), (2, "new_task"), (2, "replay")}
        replay_record = next(r for r in log.records if r["phase"] == "replay" and r["task"] == 2)
        for field in ("c_cls", "l_cls", "cls", "c_fkd", "l_fkd", "replay"):
            assert field in replay_record

    def test_non_finite_loss_raises(self):
        config = tiny_config(epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        with torch.no_grad():
            model.encoder.fuse.weight.fill_(float("nan"))
        with pytest.raises(NumericsError, match="non-finite"):
            run_task(model, toy_task(2, [2, 3]), memory, prototypes, config)

    def test_replay_protects_first_task(self):
        """Paired runs, same seed: replay strictly beats sequential fine-tuning
        on the first task's test set after the last task."""
        spec = SyntheticSpec(num_relations=6, num_tasks=3, samples_per_relation=25, seed=0)
        sequence, _ = generate_synthetic_sequence(spec)

        def final_t1_accuracy(replay):
            from conre.estimator import ContinualRelationExtractor

            est = ContinualRelationExtractor(
                memory_size=5, d_model=32, d_proj=16, d_hidden=32, epochs_new=12,
                epochs_replay=10, batch_size=16, seed=0, lr=1e-3, replay=replay)
            est.fit(sequence)
            return est.score(list(sequence.tasks[0].test))

        assert final_t1_accuracy(True) > final_t1_accuracy(False)


class TestOptimizer:
    def test_single_group_by_default(self):
        from conre.engine import make_optimizer

        config = tiny_config()
        model = build_model(config)
        optimizer = make_optimizer(model, config, include_projector=True)
        assert len(optimizer.param_groups) == 1
        assert optimizer.param_groups[0]["lr"] == config.lr

    def test_backbone_lr_splits_groups(self):
        from conre.engine import make_optimizer

        config = tiny_config(backbone_lr=1e-5, lr=1e-3)
        model = build_model(config)
        optimizer = make_optimizer(model, config, include_projector=True)
        assert [g["lr"] for g in optimizer.param_groups] == [1e-5, 1e-3]
        n_backbone = len(list(model.encoder.backbone.parameters()))
        assert len(optimizer.param_groups[0]["params"]) == n_backbone

    def test_frozen_backbone_not_optimized(self):
        config = tiny_config(freeze_backbone=True, epochs_new=1, epochs_replay=1)
        model, memory, prototypes = fresh_state(config)
        before = {name: p.detach().clone() for name, p in model.encoder.backbone.named_parameters()}
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        for name, param in model.encoder.backbone.named_parameters():
            assert torch.equal(param, before[name]), name
        assert not torch.equal(model.encoder.fuse.weight,
                               build_model(config).encoder.fuse.weight)


class TestTeacherIsolation:
    def test_replay_never_moves_teacher_probabilities(self):
        config = tiny_config(epochs_new=1, epochs_replay=2)
        model, memory, prototypes = fresh_state(config)
        run_task(model, toy_task(1, [0, 1]), memory, prototypes, config)
        probe = relation_samples(0, 3, offset=50)
        teacher = model.teacher
        linear_before = teacher.linear_probs(probe).clone()
        contrastive_before = teacher.contrastive_probs(probe).clone()
        run_task(model, toy_task(2, [2, 3]), memory, prototypes, config)
        assert torch.equal(teacher.linear_probs(probe), linear_before)
        assert torch.equal(teacher.contrastive_probs(probe), contrastive_before)


class TestTrainingLogger:
    def test_jsonl_file(self, tmp_path):
        path = tmp_path / "log.jsonl"
        with TrainingLogger(path) as log:
            log.log(task=1, phase="new_task", epoch=0, step=0, new=1.5)
            log.log(task=1, phase="replay", epoch=0, step=0, replay=0.5)
        import json

        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert lines[0]["phase"] == "new_task"
        assert lines[1]["replay"] == 0.5
