import math

import numpy as np
import pytest
import torch

from anatgraph import formats, pipeline
from anatgraph.config import AugmentConfig, ModelConfig, TrainConfig
from anatgraph.contrastive import prime_queue
from anatgraph.synthgen import read_cohort
from anatgraph.trainer import Trainer, cosine_lr


@pytest.fixture(scope="module")
def data(tiny_cohort):
    return pipeline.training_set(read_cohort(tiny_cohort))


def _trainer(data, seed=0, **train):
    cfg = TrainConfig(**{"t_max": 2, "batch_patch": 4, "batch_graph": 4, "patch_queue": 8, "graph_queue": 8, **train})
    return Trainer(ModelConfig(), cfg, AugmentConfig(), data.patch_size, data.n_regions, seed)


class TestSchedule:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 10, 0.03) == 0.03
        assert cosine_lr(5, 10, 0.03) == pytest.approx(0.015)
        assert cosine_lr(10, 10, 0.03) == pytest.approx(0.0, abs=1e-18)

    def test_cosine_formula(self):
        for s in range(11):
            assert cosine_lr(s, 10, 1.0) == pytest.approx(0.5 * (1 + math.cos(math.pi * s / 10)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1.0)


class TestIsolation:
    def test_fifty_steps_zero_violations(self, data):
        # 5 outer steps x (8 region steps + 2 graph steps) = 50 optimizer steps
        trainer = _trainer(data, t_max=5, t_g=2)
        seen, violations = {}, []

        def observe(event, tr):
            phase, edge = event.split("_")
            frozen = tr.gcn if phase == "patch" else tr.enc
            digest = (frozen.query.digest(), frozen.key.digest())
            if edge == "begin":
                seen[phase] = digest
            elif seen[phase] != digest:
                violations.append((tr.outer_step, phase))

        trainer.run(data, observer=observe)
        assert trainer.global_step == 50
        assert violations == []

    def test_patch_phase_moves_encoder(self, data):
        trainer = _trainer(data)
        before = trainer.enc.query.digest()
        trainer.patch_phase_step(data)
        assert trainer.enc.query.digest() != before


class TestDeterminism:
    def test_same_seed_same_metrics(self, data):
        a = _trainer(data, seed=4)
        b = _trainer(data, seed=4)
        assert a.run(data) == b.run(data)

    def test_different_seed_differs(self, data):
        assert _trainer(data, seed=1).run(data) != _trainer(data, seed=2).run(data)

    def test_resume_bit_exact(self, data, tmp_path):
        full = _trainer(data, seed=5, t_max=4)
        full.run(data, tmp_path / "full")
        half = _trainer(data, seed=5, t_max=4)
        half.run(data, tmp_path / "half", stop_after=2)
        resumed = _trainer(data, seed=5, t_max=4)
        resumed.load(tmp_path / "half" / "model.ckpt")
        resumed.run(data, tmp_path / "half")
        assert (tmp_path / "full" / "model.ckpt").read_bytes() == (tmp_path / "half" / "model.ckpt").read_bytes()
        assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "half" / "metrics.jsonl").read_bytes()

    def test_checkpoint_names(self, data, tmp_path):
        trainer = _trainer(data)
        trainer.save(tmp_path / "m.ckpt")
        names = formats.read_checkpoint(tmp_path / "m.ckpt").keys()
        prefixes = {n.split(".")[0] for n in names}
        assert prefixes <= {"enc", "gcn", "bn", "queue", "opt", "meta"}
        assert any(n.startswith("bn.enc.q.") and n.endswith("running_mean") for n in names)


class TestOptimizer:
    def test_lr_zero_keeps_parameters(self, data):
        trainer = _trainer(data, lr=0.0)
        before = (trainer.enc.query.digest(), trainer.gcn.query.digest())
        trainer.run(data)
        assert (trainer.enc.query.digest(), trainer.gcn.query.digest()) == before

    def test_zero_gradient_no_decay_is_still(self, data):
        trainer = _trainer(data, weight_decay=0.0)
        net = trainer.enc.query
        before = net.digest()
        for p in net.params.values():
            p.grad = torch.zeros_like(p)
        trainer.opt_enc.step()
        assert net.digest() == before


class TestQueuePriming:
    def test_fills_every_region(self, data):
        trainer = _trainer(data)
        trainer.prime_patch_queues(data)
        for q in trainer.patch_queues:
            assert len(q) == q.capacity
            assert set(q.snapshot_owners().tolist()) <= set(range(data.n_subjects))
            torch.testing.assert_close(q.snapshot().norm(dim=1), torch.ones(q.capacity))

    def test_leaves_running_stats(self, data):
        trainer = _trainer(data)
        before = {k: v.clone() for k, v in trainer.enc.key.buffers.items()}
        trainer.prime_patch_queues(data)
        for k, v in trainer.enc.key.buffers.items():
            assert torch.equal(v, before[k])

    def test_skipped_when_disabled(self, data):
        trainer = _trainer(data, prime_patch_queues=False, t_max=1)
        trainer.run(data, stop_after=0)
        assert all(len(q) == 0 for q in trainer.patch_queues)

    def test_function_respects_capacity(self, data):
        trainer = _trainer(data, patch_queue=3)
        q = trainer.patch_queues[0]
        prime_queue(trainer.encoder, trainer.enc, data.patches[:, 0], data.centers_norm[0], AugmentConfig(), q, np.random.default_rng(0))
        assert len(q) == 3


class TestInputs:
    def test_needs_two_subjects(self, data):
        trainer = _trainer(data)
        with pytest.raises(ValueError):
            trainer.patch_phase_step(data, batch=[0])

    def test_region_count_mismatch(self, data):
        trainer = Trainer(ModelConfig(), TrainConfig(t_max=1), AugmentConfig(), data.patch_size, data.n_regions + 1, 0)
        with pytest.raises(ValueError, match="regions"):
            trainer.run(data)
