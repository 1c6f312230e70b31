"""Conditional patch encoder E = f_l(C(x) || p) and graph encoder G.

Networks are plain named tensor dictionaries (parameters plus BatchNorm
running buffers) driven by functional forwards, which keeps momentum
copies, optimizer state and checkpoints straightforward.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numerics as nx
from .config import ModelConfig

EVAL_CHUNK = 1024


@dataclass
class Network:
    params: dict[str, torch.Tensor]
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    def clone(self) -> "Network":
        return Network(
            {k: v.detach().clone() for k, v in self.params.items()},
            {k: v.detach().clone() for k, v in self.buffers.items()},
        )

    def requires_grad_(self, flag: bool = True) -> "Network":
        for v in self.params.values():
            v.requires_grad_(flag)
        return self

    def digest(self) -> str:
        """SHA-256 over parameter names and float32 bytes (buffers excluded)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].detach().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape).astype(np.float32))


def _bn_entries(name: str, ch: int, params: dict, buffers: dict) -> None:
    params[f"{name}.gamma"] = torch.ones(ch)
    params[f"{name}.beta"] = torch.zeros(ch)
    buffers[f"{name}.running_mean"] = torch.zeros(ch)
    buffers[f"{name}.running_var"] = torch.ones(ch)


def _bn(x, net: Network, name: str, training: bool, update_stats: bool):
    p, b = net.params, net.buffers
    return nx.batch_norm(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        b.get(f"{name}.running_mean"),
        b.get(f"{name}.running_var"),
        training=training,
        update_stats=update_stats,
    )


def _dense(x, net: Network, name: str):
    return nx.matmul(x, net.params[f"{name}.w"]) + net.params[f"{name}.b"]


def conv_layout(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(in_channels, out_channels, stride) for every conv in C."""
    layout, c_in = [], 1
    for ch, n in zip(cfg.channels, cfg.convs_per_stage):
        for _ in range(n):
            layout.append((c_in, ch, 1))
            c_in = ch
        layout.append((ch, ch, 2))
    return layout


@dataclass
class PatchEncoder:
    """Holds the architecture of E; parameters live in a :class:`Network`."""

    cfg: ModelConfig
    patch_size: int

    def __post_init__(self):
        size = self.patch_size
        for _, _, stride in conv_layout(self.cfg):
            size = nx.conv_output_size(size, stride)
        if size != 1:
            raise ValueError(
                f"C reduces a {self.patch_size}^3 patch to {size}^3, not 1^3; "
                f"use {len(self.cfg.channels)} halvings to match patch size"
            )

    @property
    def c_width(self) -> int:
        return self.cfg.channels[-1]

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def init(self, rng: np.random.Generator) -> Network:
        params, buffers = {}, {}
        for i, (cin, cout, _) in enumerate(conv_layout(self.cfg)):
            params[f"c.{i}.w"] = _kaiming(rng, (cout, cin, 3, 3, 3), cin * 27)
            _bn_entries(f"c.{i}", cout, params, buffers)
        width = self.c_width + 3
        dims = [(width, width), (width, width), (width, self.feature_dim)]
        for k, (din, dout) in enumerate(dims):
            params[f"fl.{k}.w"] = _kaiming(rng, (din, dout), din)
            params[f"fl.{k}.b"] = torch.zeros(dout)
        return Network(params, buffers)

    def features(self, net: Network, patches: torch.Tensor, training: bool, update_stats: bool = True):
        """C(x): ``(B, s, s, s)`` -> ``(B, c_width)``."""
        x = patches.unsqueeze(1)
        for i, (_, _, stride) in enumerate(conv_layout(self.cfg)):
            x = nx.conv3d(x, net.params[f"c.{i}.w"], stride=stride)
            x = nx.elu(_bn(x, net, f"c.{i}", training, update_stats))
        return x.reshape(x.shape[0], -1)

    def forward(
        self,
        net: Network,
        patches,
        centers,
        training: bool = False,
        update_stats: bool = True,
    ) -> torch.Tensor:
        """h = f_l(C(x) || p) for a batch of patches and their atlas centers."""
        dtype = next(iter(net.params.values())).dtype
        patches = torch.as_tensor(patches, dtype=dtype)
        centers = torch.as_tensor(centers, dtype=dtype)
        if patches.dim() == 3:
            patches, centers = patches[None], centers.reshape(1, 3)
        if patches.shape[1:] != (self.patch_size,) * 3:
            raise nx.ShapeError(f"expected {self.patch_size}^3 patches, got {tuple(patches.shape[1:])}")
        if centers.shape != (patches.shape[0], 3):
            raise nx.ShapeError(f"centers must be ({patches.shape[0]}, 3), got {tuple(centers.shape)}")
        if not training and patches.shape[0] > EVAL_CHUNK:
            return torch.cat(
                [
                    self.forward(net, patches[i : i + EVAL_CHUNK], centers[i : i + EVAL_CHUNK])
                    for i in range(0, patches.shape[0], EVAL_CHUNK)
                ]
            )
        h = torch.cat([self.features(net, patches, training, update_stats), centers], dim=1)
        h = nx.relu(_dense(h, net, "fl.0"))
        h = nx.relu(_dense(h, net, "fl.1"))
        return _dense(h, net, "fl.2")


def encode_patch(encoder: PatchEncoder, net: Network, patch, atlas_center_norm) -> torch.Tensor:
    """Single-patch eval-mode encoding, ``(s, s, s)`` -> ``(F,)``."""
    return encoder.forward(net, patch, atlas_center_norm, training=False)[0]


@dataclass
class GraphEncoder:
    feature_dim: int

    def init(self, rng: np.random.Generator) -> Network:
        f = self.feature_dim
        params, buffers = {"gcn.w": _kaiming(rng, (f, f), f)}, {}
        _bn_entries("gcn", f, params, buffers)
        for k in range(3):
            params[f"fg.{k}.w"] = _kaiming(rng, (f, f), f)
            params[f"fg.{k}.b"] = torch.zeros(f)
        return Network(params, buffers)

    def propagate(self, net: Network, h: torch.Tensor, a_norm) -> torch.Tensor:
        """Pre-activation ``A_norm @ H @ W``."""
        a_norm = torch.as_tensor(a_norm, dtype=h.dtype)
        if a_norm.shape != (h.shape[0], h.shape[0]):
            raise nx.ShapeError(f"adjacency {tuple(a_norm.shape)} does not match {h.shape[0]} nodes")
        return nx.matmul(a_norm, nx.matmul(h, net.params["gcn.w"]))

    def forward(self, net: Network, hs, a_norms, training: bool = False, update_stats: bool = True):
        """GCN layer over one graph or a list of graphs sharing one BatchNorm batch."""
        single = isinstance(hs, torch.Tensor)
        if single:
            hs, a_norms = [hs], [a_norms]
        pre = [self.propagate(net, h, a) for h, a in zip(hs, a_norms)]
        out = nx.elu(_bn(torch.cat(pre), net, "gcn", training, update_stats))
        parts = list(torch.split(out, [p.shape[0] for p in pre]))
        return parts[0] if single else parts

    def head(self, net: Network, pooled: torch.Tensor) -> torch.Tensor:
        x = nx.relu(_dense(pooled, net, "fg.0"))
        x = nx.relu(_dense(x, net, "fg.1"))
        return _dense(x, net, "fg.2")


def gcn_forward(g: GraphEncoder, net: Network, h, a_norm, training: bool = False) -> torch.Tensor:
    return g.forward(net, torch.as_tensor(h, dtype=nx.DTYPE), a_norm, training=training)


def subject_embedding(g: GraphEncoder, net: Network, h_prime, with_head: bool) -> torch.Tensor:
    """Mean-pool node features; apply f_g only on the training path.

    Accepts a single ``(N, F)`` graph or a list of them (returns ``(B, F)``).
    """
    if isinstance(h_prime, (list, tuple)):
        pooled = torch.stack([h.mean(dim=0) for h in h_prime])
    else:
        if h_prime.shape[0] == 0:
            raise ValueError("cannot pool an empty graph")
        pooled = h_prime.mean(dim=0)
    if not with_head:
        return pooled
    if pooled.dim() == 1:
        return g.head(net, pooled[None])[0]
    return g.head(net, pooled)


@dataclass
class MomentumPair:
    query: Network
    key: Network
    m: float

    @classmethod
    def from_query(cls, query: Network, m: float) -> "MomentumPair":
        return cls(query, query.clone().requires_grad_(False), m)


@torch.no_grad()
def momentum_update(pair: MomentumPair) -> Network:
    """Blend key parameters toward the query: ``k <- m k + (1 - m) q``.

    ``torch.lerp`` keeps the two boundary cases exact (k == q stays put,
    m == 0 copies q).
    """
    if not 0.0 <= pair.m < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {pair.m}")
    for name, q in pair.query.params.items():
        k = pair.key.params[name]
        if k.shape != q.shape:
            raise nx.ShapeError(f"momentum pair shape mismatch at {name}")
        k.copy_(torch.lerp(k, q.detach(), 1.0 - pair.m))
    return pair.key
