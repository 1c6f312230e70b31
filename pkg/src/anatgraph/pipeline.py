"""Glue between cohorts, graphs, the trainer and frozen-feature extraction."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import GraphEncoder, Network, PatchEncoder, subject_embedding
from .patch_graph import PatientGraph, build_patient_graph
from .synthgen import Cohort
from .trainer import Trainer, TrainingSet


def build_graphs(cohort: Cohort, rho_mm: float | None = None, workers: int = 1) -> list[PatientGraph]:
    """One patient graph per subject, in cohort order; ``workers`` threads share the work."""
    rho = rho_mm if rho_mm is not None else cohort.grid_config.rho(cohort.grid.spacing)

    def build(s):
        return build_patient_graph(s.subject_id, s.volume, cohort.grid, s.transform, rho)

    if workers <= 1:
        return [build(s) for s in cohort.subjects]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(build, cohort.subjects))


def training_set(cohort: Cohort, graphs: list[PatientGraph] | None = None) -> TrainingSet:
    graphs = build_graphs(cohort) if graphs is None else graphs
    return TrainingSet.from_graphs(graphs, cohort.grid.normalized_centers())


@dataclass
class FrozenModel:
    """Query encoders in eval mode, used for feature extraction and explanation."""

    encoder: PatchEncoder
    enc: Network
    graph: GraphEncoder
    gcn: Network

    @classmethod
    def from_trainer(cls, trainer: Trainer) -> "FrozenModel":
        return cls(trainer.encoder, trainer.enc.query, trainer.graph, trainer.gcn.query)

    @torch.no_grad()
    def node_features(self, patches, centers_norm, a_norm) -> torch.Tensor:
        """H' for one subject: ``(N, F)``, eval-mode BatchNorm, no augmentation."""
        h = self.encoder.forward(self.enc, torch.as_tensor(patches), centers_norm, training=False)
        return self.graph.forward(self.gcn, h, torch.as_tensor(a_norm, dtype=torch.float32), training=False)

    @torch.no_grad()
    def extract(self, data: TrainingSet) -> tuple[np.ndarray, list[np.ndarray]]:
        """Pooled features (head discarded) and per-node features for every subject."""
        pooled, nodes = [], []
        for i in range(data.n_subjects):
            hp = self.node_features(data.patches[i], data.centers_norm, data.a_norm[i])
            nodes.append(hp.numpy().astype(np.float64))
            pooled.append(subject_embedding(self.graph, self.gcn, hp, with_head=False).numpy())
        return np.stack(pooled).astype(np.float64), nodes
