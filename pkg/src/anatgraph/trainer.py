"""Interleaved patch-level / graph-level contrastive training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import formats
from . import numerics as nx
from .config import AugmentConfig, ModelConfig, TrainConfig
from .contrastive import NegativeQueue, graph_pairs, info_nce, patch_pairs, prime_queue
from .encoders import GraphEncoder, MomentumPair, Network, PatchEncoder, momentum_update
from .patch_graph import PatientGraph
from .rng import stream

log = logging.getLogger(__name__)

Observer = Callable[[str, "Trainer"], None]

_QUEUE_KEYS = ("data", "meta", "owners")


class NonFiniteLossError(nx.NonFiniteError):
    def __init__(self, step: int, phase: str, region: int | None, loss: float):
        where = f"region {region}" if region is not None else "graph level"
        super().__init__(f"non-finite {phase} loss {loss} at step {step}, {where}")
        self.step, self.phase, self.region, self.loss = step, phase, region, loss


def cosine_lr(step: float, total_steps: float, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainingSet:
    """Stacked patches, normalized adjacencies and shared atlas centers."""

    subject_ids: list[str]
    patches: np.ndarray  # (S, N, s, s, s)
    a_norm: list[np.ndarray]
    centers_norm: np.ndarray  # (N, 3)

    @classmethod
    def from_graphs(cls, graphs: Sequence[PatientGraph], centers_norm) -> "TrainingSet":
        if len(graphs) < 2:
            raise ValueError(f"training needs at least 2 subjects, got {len(graphs)}")
        n = {g.n for g in graphs}
        if len(n) != 1:
            raise ValueError(f"subjects disagree on node count: {sorted(n)}")
        return cls(
            subject_ids=[g.subject_id for g in graphs],
            patches=np.stack([g.patches for g in graphs]),
            a_norm=[g.normalized_adjacency().astype(np.float32) for g in graphs],
            centers_norm=np.asarray(centers_norm, dtype=np.float32),
        )

    @property
    def n_subjects(self) -> int:
        return self.patches.shape[0]

    @property
    def n_regions(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[-1]


def _adam(net: Network, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        list(net.params.values()),
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def _apply_grads(opt: torch.optim.Optimizer, net: Network, grads: dict, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr
    for name, p in net.params.items():
        p.grad = grads[name]
    opt.step()
    for p in net.params.values():
        p.grad = None


class Trainer:
    """Owns both encoders, their momentum copies, optimizers and queues."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        aug_cfg: AugmentConfig,
        patch_size: int,
        n_regions: int,
        seed: int,
    ):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.aug = aug_cfg
        self.seed = seed
        self.encoder = PatchEncoder(model_cfg, patch_size)
        self.graph = GraphEncoder(model_cfg.feature_dim)
        enc_q = self.encoder.init(stream(seed, "init.enc")).requires_grad_(True)
        gcn_q = self.graph.init(stream(seed, "init.gcn")).requires_grad_(True)
        self.enc = MomentumPair.from_query(enc_q, model_cfg.momentum)
        self.gcn = MomentumPair.from_query(gcn_q, model_cfg.momentum)
        self.opt_enc = _adam(enc_q, train_cfg)
        self.opt_gcn = _adam(gcn_q, train_cfg)
        f = model_cfg.feature_dim
        self.patch_queues = [NegativeQueue(train_cfg.patch_queue, f, j) for j in range(n_regions)]
        self.graph_queue = NegativeQueue(train_cfg.graph_queue, f, "graph")
        self.outer_step = 0
        self.global_step = 0
        self.metrics: list[dict] = []

    # -- schedule -------------------------------------------------------

    def lr(self, outer: int | None = None) -> float:
        outer = self.outer_step if outer is None else outer
        if self.cfg.schedule == "constant":
            return self.cfg.lr
        return cosine_lr(outer, self.cfg.t_max, self.cfg.lr)

    def _record(self, phase: str, loss: float, lr: float, region: int | None = None) -> dict:
        row = {"step": self.global_step, "outer": self.outer_step, "phase": phase}
        if region is not None:
            row["region"] = region
        row.update(loss=loss, lr=lr)
        self.metrics.append(row)
        return row

    # -- phases ---------------------------------------------------------

    def patch_phase_step(self, data: TrainingSet, inner: int = 0, batch: Sequence[int] | None = None) -> float:
        """One pass over all regions; each region is its own optimizer step on E.

        Returns the mean patch-level loss across regions. G is not touched.
        """
        rng = stream(self.seed, f"train.patch.{self.outer_step}.{inner}")
        if batch is None:
            size = min(self.cfg.batch_patch, data.n_subjects)
            batch = np.sort(rng.choice(data.n_subjects, size=size, replace=False))
        batch = np.asarray(batch)
        if len(batch) < 2:
            raise ValueError("patch phase needs at least two subjects")
        regions = np.arange(data.n_regions)
        if not self.cfg.ordered_regions:
            regions = rng.permutation(regions)

        lr = self.lr()
        losses = []
        for j in regions:
            j = int(j)
            aug_rng = stream(self.seed, f"augment.patch.{self.outer_step}.{inner}.{j}")
            pairs = patch_pairs(
                self.encoder,
                self.enc,
                data.patches[batch, j],
                data.centers_norm[j],
                self.aug,
                self.patch_queues[j],
                aug_rng,
                self.model_cfg.normalize_embeddings,
                owners=batch,
            )
            loss = self._loss(pairs, "patch", j)
            grads = nx.grad(loss, self.enc.query.params)
            _apply_grads(self.opt_enc, self.enc.query, grads, lr)
            momentum_update(self.enc)
            self.patch_queues[j].push(pairs.k_pos, batch)
            self.global_step += 1
            value = loss.item()
            losses.append(value)
            self._record("patch", value, lr, region=j)
        return float(np.mean(losses))

    def graph_phase_step(self, data: TrainingSet, inner: int = 0, batch: Sequence[int] | None = None) -> float:
        """One optimizer step on G; E only supplies features, without gradients."""
        rng = stream(self.seed, f"train.graph.{self.outer_step}.{inner}")
        if batch is None:
            size = min(self.cfg.batch_graph, data.n_subjects)
            batch = np.sort(rng.choice(data.n_subjects, size=size, replace=False))
        batch = np.asarray(batch)
        lr = self.lr()
        aug_rng = stream(self.seed, f"augment.graph.{self.outer_step}.{inner}")
        subjects = [(data.patches[i], data.a_norm[i]) for i in batch]
        pairs = graph_pairs(
            self.encoder,
            self.enc,
            self.graph,
            self.gcn,
            subjects,
            data.centers_norm,
            self.aug,
            self.graph_queue,
            aug_rng,
            self.model_cfg.normalize_embeddings,
            owners=batch,
        )
        loss = self._loss(pairs, "graph", None)
        grads = nx.grad(loss, self.gcn.query.params)
        _apply_grads(self.opt_gcn, self.gcn.query, grads, lr)
        momentum_update(self.gcn)
        self.graph_queue.push(pairs.k_pos, batch)
        self.global_step += 1
        value = loss.item()
        self._record("graph", value, lr)
        return value

    def prime_patch_queues(self, data: TrainingSet) -> None:
        """Seed every region's queue so early steps see a full set of negatives."""
        for j, queue in enumerate(self.patch_queues):
            prime_queue(
                self.encoder,
                self.enc,
                data.patches[:, j],
                data.centers_norm[j],
                self.aug,
                queue,
                stream(self.seed, f"train.prime.{j}"),
                self.model_cfg.normalize_embeddings,
            )

    def _loss(self, pairs, phase: str, region: int | None) -> torch.Tensor:
        try:
            loss = info_nce(pairs.q, pairs.k_pos, pairs.negatives, self.cfg.tau, pairs.mask)
        except nx.NonFiniteError:
            raise NonFiniteLossError(self.global_step, phase, region, float("nan")) from None
        return loss

    # -- driver ---------------------------------------------------------

    def run(
        self,
        data: TrainingSet,
        out_dir: str | Path | None = None,
        stop_after: int | None = None,
        observer: Observer | None = None,
    ) -> list[dict]:
        """Outer loop: ``t_l`` patch phases then ``t_g`` graph phases per step.

        Continues from ``self.outer_step`` (so a reloaded trainer resumes),
        writing ``model.ckpt`` and appending to ``metrics.jsonl`` after every
        outer step when ``out_dir`` is given.
        """
        if data.n_subjects < 2:
            raise ValueError("training needs at least 2 subjects")
        if data.n_regions != len(self.patch_queues):
            raise ValueError(f"data has {data.n_regions} regions, trainer expects {len(self.patch_queues)}")
        out = Path(out_dir) if out_dir is not None else None
        end = self.cfg.t_max if stop_after is None else min(self.cfg.t_max, stop_after)
        notify = observer or (lambda event, trainer: None)
        if self.cfg.prime_patch_queues and self.outer_step == 0 and not any(len(q) for q in self.patch_queues):
            self.prime_patch_queues(data)
        while self.outer_step < end:
            first = len(self.metrics)
            for inner in range(self.cfg.t_l):
                notify("patch_begin", self)
                loss = self.patch_phase_step(data, inner)
                notify("patch_end", self)
                log.info("outer %d patch %d: L_l=%.4f", self.outer_step, inner, loss)
            for inner in range(self.cfg.t_g):
                notify("graph_begin", self)
                loss = self.graph_phase_step(data, inner)
                notify("graph_end", self)
                log.info("outer %d graph %d: L_g=%.4f", self.outer_step, inner, loss)
            self.outer_step += 1
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                self.save(out / "model.ckpt")
                with open(out / "metrics.jsonl", "a") as fh:
                    for row in self.metrics[first:]:
                        fh.write(json.dumps(row) + "\n")
        return self.metrics

    # -- persistence ----------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, pair in (("enc", self.enc), ("gcn", self.gcn)):
            for role, net in (("q", pair.query), ("k", pair.key)):
                for name, v in net.params.items():
                    out[f"{prefix}.{role}.{name}"] = v.detach().numpy()
                for name, v in net.buffers.items():
                    out[f"bn.{prefix}.{role}.{name}"] = v.numpy()
        for prefix, opt, net in (("enc", self.opt_enc, self.enc.query), ("gcn", self.opt_gcn, self.gcn.query)):
            for name, p in net.params.items():
                st = opt.state.get(p)
                if not st:
                    continue
                out[f"opt.{prefix}.{name}.step"] = np.array([float(st["step"])], dtype=np.float32)
                out[f"opt.{prefix}.{name}.exp_avg"] = st["exp_avg"].numpy()
                out[f"opt.{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
        for j, q in enumerate(self.patch_queues):
            for key, v in q.state().items():
                out[f"queue.patch.{j}.{key}"] = v
        for key, v in self.graph_queue.state().items():
            out[f"queue.graph.{key}"] = v
        out["meta.outer_step"] = np.array([self.outer_step], dtype=np.float32)
        out["meta.global_step"] = np.array([self.global_step], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for prefix, pair in (("enc", self.enc), ("gcn", self.gcn)):
                for role, net in (("q", pair.query), ("k", pair.key)):
                    for name, v in net.params.items():
                        v.copy_(_loaded(tensors, f"{prefix}.{role}.{name}", v))
                    for name, v in net.buffers.items():
                        v.copy_(_loaded(tensors, f"bn.{prefix}.{role}.{name}", v))
        for prefix, opt, net in (("enc", self.opt_enc, self.enc.query), ("gcn", self.opt_gcn, self.gcn.query)):
            for name, p in net.params.items():
                key = f"opt.{prefix}.{name}"
                if f"{key}.step" not in tensors:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(tensors[f"{key}.step"][0])),
                    "exp_avg": torch.from_numpy(np.array(tensors[f"{key}.exp_avg"])),
                    "exp_avg_sq": torch.from_numpy(np.array(tensors[f"{key}.exp_avg_sq"])),
                }
        for j, q in enumerate(self.patch_queues):
            q.load_state({k: tensors[f"queue.patch.{j}.{k}"] for k in _QUEUE_KEYS})
        self.graph_queue.load_state({k: tensors[f"queue.graph.{k}"] for k in _QUEUE_KEYS})
        self.outer_step = int(tensors["meta.outer_step"][0])
        self.global_step = int(tensors["meta.global_step"][0])

    def save(self, path) -> None:
        formats.write_checkpoint(path, self.state_tensors())

    def load(self, path) -> None:
        self.load_state_tensors(formats.read_checkpoint(path))


def _loaded(tensors: dict, name: str, like: torch.Tensor) -> torch.Tensor:
    if name not in tensors:
        raise KeyError(f"checkpoint lacks tensor {name!r}")
    arr = tensors[name]
    if tuple(arr.shape) != tuple(like.shape):
        raise nx.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(like.shape)}")
    return torch.from_numpy(np.array(arr, dtype=np.float32))


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    data: TrainingSet,
    seed: int,
    out_dir: str | Path | None = None,
    observer: Observer | None = None,
) -> Trainer:
    trainer = Trainer(model_cfg, train_cfg, aug_cfg, data.patch_size, data.n_regions, seed)
    trainer.run(data, out_dir, observer=observer)
    return trainer
