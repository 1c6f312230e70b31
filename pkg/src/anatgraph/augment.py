"""Stochastic patch views: elastic warp, Gaussian noise, contrast power law."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugmentConfig


def _draw(n: int, size: int, cfg: AugmentConfig, rng: np.random.Generator):
    """Per-patch random parameters, drawn patch by patch in a fixed order."""
    n_ctrl = -(-(size - 1) // cfg.elastic_spacing) + 1
    ctrl = np.zeros((n, 3, n_ctrl, n_ctrl, n_ctrl), dtype=np.float32)
    noise = np.zeros((n, size, size, size), dtype=np.float32)
    gamma = np.ones(n, dtype=np.float32)
    use_elastic = np.zeros(n, dtype=bool)
    for i in range(n):
        if cfg.elastic_sigma > 0 and rng.random() < cfg.p_elastic:
            use_elastic[i] = True
            ctrl[i] = rng.normal(0.0, cfg.elastic_sigma, size=ctrl.shape[1:])
        if cfg.noise_sigma > 0 and rng.random() < cfg.p_noise:
            noise[i] = rng.normal(0.0, cfg.noise_sigma, size=noise.shape[1:])
        if cfg.contrast_hi != 1.0 or cfg.contrast_lo != 1.0:
            if rng.random() < cfg.p_contrast:
                gamma[i] = rng.uniform(cfg.contrast_lo, cfg.contrast_hi)
    return ctrl, use_elastic, noise, gamma


def _elastic(x: torch.Tensor, ctrl: torch.Tensor) -> torch.Tensor:
    """Warp ``(B, s, s, s)`` by control-point displacements in voxels (border-clamped)."""
    b, s = x.shape[0], x.shape[-1]
    disp = F.interpolate(ctrl, size=(s, s, s), mode="trilinear", align_corners=True)
    base = torch.arange(s, dtype=x.dtype)
    zz, yy, xx = torch.meshgrid(base, base, base, indexing="ij")
    # grid_sample wants (x, y, z) order in normalized [-1, 1] coordinates
    coords = torch.stack([xx + disp[:, 2], yy + disp[:, 1], zz + disp[:, 0]], dim=-1)
    grid = coords * (2.0 / (s - 1)) - 1.0
    out = F.grid_sample(x[:, None], grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[:, 0]


def augment_batch(patches, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Augment a stack of cubic patches ``(B, s, s, s)``.

    Random draws happen patch by patch, so the result for patch ``i`` only
    depends on the patch, the config and the generator state.
    """
    x = torch.as_tensor(np.asarray(patches), dtype=torch.float32).clone()
    if x.dim() != 4 or not (x.shape[1] == x.shape[2] == x.shape[3]):
        raise ValueError(f"expected (B, s, s, s) patches, got {tuple(x.shape)}")
    n, s = x.shape[0], x.shape[1]
    ctrl, use_elastic, noise, gamma = _draw(n, s, cfg, rng)

    if use_elastic.any() and s > 1:
        idx = torch.from_numpy(np.nonzero(use_elastic)[0])
        x[idx] = _elastic(x[idx], torch.from_numpy(ctrl[use_elastic]))
    if cfg.noise_sigma > 0:
        x = x + torch.from_numpy(noise)
    if not np.all(gamma == 1.0):
        g = torch.from_numpy(gamma).view(-1, 1, 1, 1)
        x = torch.sign(x) * torch.abs(x).pow(g)
    return x.clamp_(-1.0, 1.0)


def augment(patch, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    return augment_batch(np.asarray(patch)[None], cfg, rng)[0]
