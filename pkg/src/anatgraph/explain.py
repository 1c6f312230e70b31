"""Class activation graphs: per-node shares of a linear probe's logit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .patch_graph import Volume


@dataclass
class ActivationGraph:
    subject_id: str
    scores_raw: np.ndarray
    beta: float
    target: str = "logit"

    @property
    def scores_norm(self) -> np.ndarray:
        return normalize_scores(self.scores_raw)

    @property
    def logit(self) -> float:
        return float(self.beta + self.scores_raw.mean())

    def top_nodes(self, fraction: float = 0.25) -> np.ndarray:
        k = max(1, int(round(fraction * len(self.scores_raw))))
        return np.sort(np.argsort(-self.scores_raw, kind="stable")[:k])

    def export(self, probe_logit: float | None = None) -> dict:
        check = abs(self.logit - probe_logit) if probe_logit is not None else 0.0
        return {
            "subject_id": self.subject_id,
            "beta": float(self.beta),
            "scores_raw": self.scores_raw.tolist(),
            "scores_norm": self.scores_norm.tolist(),
            "logit_check": float(check),
            "target": self.target,
        }


def activation_graph(weights, beta: float, node_features, subject_id: str = "", target: str = "logit") -> ActivationGraph:
    """``M_j = W . h'_j`` for every node; ``beta + mean_j M_j`` is the probe logit."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    h = np.asarray(node_features, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ValueError(f"node features {h.shape} do not match probe weights of length {w.shape[0]}")
    return ActivationGraph(subject_id, h @ w, float(beta), target)


def normalize_scores(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    # split by sign to keep exp() from overflowing
    out = np.empty_like(raw)
    pos = raw >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-raw[pos]))
    e = np.exp(raw[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def render_map(graph: ActivationGraph, centers_mm, patch_size: int, volume_dims, spacing: float = 1.0) -> Volume:
    """Dense heat map: each voxel averages the normalized scores of the patches covering it."""
    dims = tuple(int(d) for d in volume_dims)
    total = np.zeros(dims)
    count = np.zeros(dims)
    lo_all = np.rint(np.asarray(centers_mm, dtype=np.float64) / spacing).astype(int) - patch_size // 2
    for lo, score in zip(lo_all, graph.scores_norm):
        hi = lo + patch_size
        a = np.maximum(lo, 0)
        b = np.minimum(hi, dims)
        if (b <= a).any():
            continue
        sl = tuple(slice(int(i), int(j)) for i, j in zip(a, b))
        total[sl] += score
        count[sl] += 1
    heat = np.divide(total, count, out=np.zeros(dims), where=count > 0)
    return Volume(heat.astype(np.float32), spacing)


def jaccard(a, b) -> float:
    a, b = set(int(i) for i in a), set(int(i) for i in b)
    union = a | b
    return len(a & b) / len(union) if union else 1.0
