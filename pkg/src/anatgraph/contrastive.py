"""InfoNCE objectives and momentum negative queues."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import numerics as nx
from .augment import augment_batch
from .config import AugmentConfig
from .encoders import GraphEncoder, MomentumPair, PatchEncoder, subject_embedding


class NegativeQueue:
    """Fixed-capacity FIFO ring of detached key embeddings."""

    def __init__(self, capacity: int, dim: int, scope: int | str):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.scope = scope
        self.data = torch.zeros(capacity, dim)
        # index of the subject each key came from, -1 when unknown
        self.owners = torch.full((capacity,), -1, dtype=torch.int64)
        self.cursor = 0
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    @torch.no_grad()
    def push(self, keys: torch.Tensor, owners=None) -> None:
        keys = keys.detach().reshape(-1, self.dim)
        owners = [-1] * len(keys) if owners is None else [int(o) for o in owners]
        if len(owners) != len(keys):
            raise nx.ShapeError(f"{len(keys)} keys but {len(owners)} owners")
        for row, owner in zip(keys, owners):
            self.data[self.cursor] = row
            self.owners[self.cursor] = owner
            self.cursor = (self.cursor + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)

    def _order(self) -> torch.Tensor:
        if self.fill < self.capacity:
            return torch.arange(self.fill)
        return (torch.arange(self.capacity) + self.cursor) % self.capacity

    def snapshot(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        return self.data[self._order()].clone()

    def snapshot_owners(self) -> torch.Tensor:
        return self.owners[self._order()].clone()

    def negatives_for(self, anchors) -> tuple[torch.Tensor, torch.Tensor]:
        """Stored keys plus a ``(B, K)`` mask hiding each anchor's own entries.

        With fewer subjects than queue slots the same subject recurs in the
        queue; counting those stale copies as negatives would push a query
        away from itself.
        """
        owners = self.snapshot_owners()
        anchors = torch.as_tensor(np.asarray(anchors, dtype=np.int64))
        mask = (owners[None, :] != anchors[:, None]) | (owners[None, :] < 0)
        return self.snapshot(), mask

    def state(self) -> dict[str, np.ndarray]:
        return {
            "data": self.data.numpy().copy(),
            "meta": np.array([self.cursor, self.fill], dtype=np.float32),
            "owners": self.owners.numpy().astype(np.float32),
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.data = torch.from_numpy(np.array(state["data"], dtype=np.float32))
        self.cursor, self.fill = (int(v) for v in state["meta"])
        self.owners = torch.from_numpy(np.array(state["owners"]).astype(np.int64))


def info_nce(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean InfoNCE loss over a batch of anchors.

    ``q`` and ``k_pos`` are ``(F,)`` or ``(B, F)``. ``negatives`` is either
    shared ``(K, F)`` or per anchor ``(B, K, F)``; it is treated as a
    constant. ``mask`` (``(B, K)``, True = use) drops individual negatives.
    Uses log-sum-exp, so large similarities cannot overflow.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if negatives.numel() == 0 or negatives.shape[-2] == 0:
        raise ValueError("InfoNCE needs at least one negative")
    single = q.dim() == 1
    if single:
        q, k_pos = q[None], k_pos[None]
        if negatives.dim() == 3:
            raise nx.ShapeError("per-anchor negatives need batched anchors")
    negatives = negatives.detach()
    pos = (q * k_pos).sum(dim=-1, keepdim=True)
    if negatives.dim() == 2:
        neg = q @ negatives.T
    else:
        neg = torch.einsum("bf,bkf->bk", q, negatives)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool).reshape(neg.shape)
        if not mask.any(dim=1).all():
            raise ValueError("every anchor needs at least one unmasked negative")
        neg = neg.masked_fill(~mask, float("-inf"))
    logits = torch.cat([pos, neg], dim=1) / tau
    loss = (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()
    return nx.check_finite(loss, "InfoNCE loss")


def in_batch_negatives(keys: torch.Tensor) -> torch.Tensor:
    """``(B, B-1, F)``: for anchor ``i`` every other anchor's key."""
    b = keys.shape[0]
    if b < 2:
        raise ValueError("in-batch negatives need at least two subjects")
    idx = torch.tensor([[j for j in range(b) if j != i] for i in range(b)])
    return keys.detach()[idx]


@dataclass
class Pairs:
    q: torch.Tensor
    k_pos: torch.Tensor
    negatives: torch.Tensor
    mask: torch.Tensor | None = None


def _maybe_normalize(x: torch.Tensor, normalize: bool) -> torch.Tensor:
    return nx.l2_normalize(x) if normalize else x


def patch_pairs(
    encoder: PatchEncoder,
    pair: MomentumPair,
    patches,
    center,
    aug: AugmentConfig,
    queue: NegativeQueue,
    rng: np.random.Generator,
    normalize: bool = True,
    owners=None,
) -> Pairs:
    """Query/positive/negatives for one anatomical region across a subject batch.

    ``patches`` are the region's patches ``(B, s, s, s)`` (one per subject)
    and ``center`` its normalized atlas center. The query view goes through
    the query encoder with gradients; the key view through the key encoder
    without. Negatives come from ``queue`` or, while it is empty, from the
    other subjects' keys in the batch. ``owners`` (subject indices) masks
    each subject's own stale keys out of the queue. Pushing the new keys is
    left to the caller, after the loss is taken.
    """
    patches = np.asarray(patches)
    b = patches.shape[0]
    if b < 2:
        raise ValueError("patch pairs need at least two subjects in the batch")
    centers = np.repeat(np.asarray(center, dtype=np.float32).reshape(1, 3), b, axis=0)
    view_q = augment_batch(patches, aug, rng)
    view_k = augment_batch(patches, aug, rng)
    q = _maybe_normalize(encoder.forward(pair.query, view_q, centers, training=True), normalize)
    with torch.no_grad():
        k = _maybe_normalize(encoder.forward(pair.key, view_k, centers, training=True), normalize)
    return Pairs(q, k, *_negatives(queue, k, owners))


def prime_queue(
    encoder: PatchEncoder,
    pair: MomentumPair,
    patches,
    center,
    aug: AugmentConfig,
    queue: NegativeQueue,
    rng: np.random.Generator,
    normalize: bool = True,
) -> None:
    """Fill ``queue`` with key-encoder embeddings of fresh views of ``patches``.

    Subject ``i`` owns row ``i``. Running statistics are left untouched.
    """
    patches = np.asarray(patches)
    b = patches.shape[0]
    centers = np.repeat(np.asarray(center, dtype=np.float32).reshape(1, 3), b, axis=0)
    owners = np.arange(b)
    with torch.no_grad():
        while len(queue) < queue.capacity:
            view = augment_batch(patches, aug, rng)
            keys = encoder.forward(pair.key, view, centers, training=True, update_stats=False)
            queue.push(_maybe_normalize(keys, normalize), owners)


def _negatives(queue: NegativeQueue, k: torch.Tensor, owners):
    if not len(queue):
        return in_batch_negatives(k), None
    if owners is None:
        return queue.snapshot(), None
    negatives, mask = queue.negatives_for(owners)
    if not mask.any(dim=1).all():
        return in_batch_negatives(k), None
    return negatives, mask


def encode_graph_nodes(encoder: PatchEncoder, net, patches, centers_norm, aug, rng) -> torch.Tensor:
    """All node features of one subject through E without gradients (eval-mode BN)."""
    with torch.no_grad():
        view = augment_batch(patches, aug, rng)
        return encoder.forward(net, view, centers_norm, training=False)


def graph_pairs(
    encoder: PatchEncoder,
    enc_pair: MomentumPair,
    graph: GraphEncoder,
    gcn_pair: MomentumPair,
    subjects,
    centers_norm,
    aug: AugmentConfig,
    queue: NegativeQueue,
    rng: np.random.Generator,
    normalize: bool = True,
    owners=None,
) -> Pairs:
    """Graph-level query/positive/negatives for a batch of subjects.

    ``subjects`` is a sequence of ``(patches, a_norm)``. Each subject gets
    two independently augmented patch sets; view one runs through the query
    encoders (gradient only into G), view two through the key encoders.
    """
    if len(subjects) < 2:
        raise ValueError("graph pairs need at least two subjects in the batch")
    h_q, h_k, adj = [], [], []
    for patches, a_norm in subjects:
        h_q.append(encode_graph_nodes(encoder, enc_pair.query, patches, centers_norm, aug, rng))
        h_k.append(encode_graph_nodes(encoder, enc_pair.key, patches, centers_norm, aug, rng))
        adj.append(torch.as_tensor(a_norm, dtype=nx.DTYPE))
    r = subject_embedding(graph, gcn_pair.query, graph.forward(gcn_pair.query, h_q, adj, training=True), True)
    with torch.no_grad():
        t = subject_embedding(graph, gcn_pair.key, graph.forward(gcn_pair.key, h_k, adj, training=True), True)
    r, t = _maybe_normalize(r, normalize), _maybe_normalize(t, normalize)
    return Pairs(r, t, *_negatives(queue, t, owners))
