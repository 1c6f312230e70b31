"""Dense tensor primitives with reverse-mode gradients.

Thin, checked wrappers over torch. The autograd graph torch records while
these functions run is the gradient tape; :func:`grad` replays it. Every
op validates shapes up front and refuses to hand back NaN/Inf.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

DTYPE = torch.float32
MAX_RANK = 5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. a zero vector to normalize)."""


def tensor(data, dtype: torch.dtype = DTYPE, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype).contiguous()
    if t.dim() > MAX_RANK:
        raise ShapeError(f"rank {t.dim()} exceeds {MAX_RANK}")
    if requires_grad:
        t.requires_grad_(True)
    return t


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(a @ b, "matmul")


def conv_output_size(dim: int, stride: int) -> int:
    return (dim + 2 - 3) // stride + 1


def conv3d(x: torch.Tensor, kernels: torch.Tensor, stride: int = 1) -> torch.Tensor:
    """3x3x3 cross-correlation with zero padding 1.

    ``x`` is either a single volume ``(C_in, D, H, W)`` or a batch
    ``(B, C_in, D, H, W)``; the output keeps the same batching.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if kernels.dim() != 5 or tuple(kernels.shape[2:]) != (3, 3, 3):
        raise ShapeError(f"kernels must be (C_out, C_in, 3, 3, 3), got {tuple(kernels.shape)}")
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 5:
        raise ShapeError(f"conv3d input must be rank 4 or 5, got {tuple(x.shape)}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernels expect {kernels.shape[1]}")
    out = F.conv3d(x, kernels, stride=stride, padding=1)
    check_finite(out, "conv3d")
    return out[0] if single else out


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "elu":
        out = F.elu(x, alpha=1.0)
    elif kind == "relu":
        out = F.relu(x)
    elif kind == "sigmoid":
        out = torch.sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return check_finite(out, kind)


def elu(x: torch.Tensor) -> torch.Tensor:
    return activation(x, "elu")


def relu(x: torch.Tensor) -> torch.Tensor:
    return activation(x, "relu")


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return activation(x, "sigmoid")


def batch_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor | None = None,
    running_var: torch.Tensor | None = None,
    training: bool = True,
    update_stats: bool = True,
) -> torch.Tensor:
    """Per-channel batch normalization over dim 1 of ``(B, C, ...)``.

    In training mode batch statistics are used and, when ``update_stats``
    is set and running buffers are given, the buffers are blended in place
    with momentum 0.1. Eval mode reads the running buffers.
    """
    if x.dim() < 2:
        raise ShapeError(f"batch_norm expects (B, C, ...), got {tuple(x.shape)}")
    if x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"channel mismatch: x has {x.shape[1]} channels, gamma {tuple(gamma.shape)}")
    shape = (1, -1) + (1,) * (x.dim() - 2)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        dims = [0] + list(range(2, x.dim()))
        # centre first so a constant channel gives exact zeros
        mean = x.mean(dim=dims, keepdim=True)
        centered = x - mean
        var = (centered * centered).mean(dim=dims, keepdim=True)
        if update_stats and running_mean is not None and running_var is not None:
            n = x.numel() // x.shape[1]
            with torch.no_grad():
                running_mean.lerp_(mean.reshape(-1).to(running_mean.dtype), BN_MOMENTUM)
                unbiased = var.reshape(-1) * (n / max(n - 1, 1))
                running_var.lerp_(unbiased.to(running_var.dtype), BN_MOMENTUM)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        centered = x - running_mean.to(x.dtype).reshape(shape)
        var = running_var.to(x.dtype).reshape(shape)
    out = centered * torch.rsqrt(var + BN_EPS) * gamma.reshape(shape) + beta.reshape(shape)
    return check_finite(out, "batch_norm")


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    if bool((norm <= NORM_FLOOR).any()):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    return check_finite(x / norm, "l2_normalize")


def grad(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]
) -> dict[str, torch.Tensor | None] | list[torch.Tensor | None]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    A parameter the loss does not depend on maps to ``None`` rather than a
    zero tensor, so "not on the tape" stays distinguishable from a true zero.
    """
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    named = isinstance(params, Mapping)
    keys = list(params.keys()) if named else None
    tensors = list(params.values()) if named else list(params)
    tracked = [i for i, t in enumerate(tensors) if t.requires_grad]
    grads: list[torch.Tensor | None] = [None] * len(tensors)
    if tracked and loss.requires_grad:
        found = torch.autograd.grad(loss, [tensors[i] for i in tracked], allow_unused=True)
        for i, g in zip(tracked, found):
            grads[i] = g
    for g in grads:
        if g is not None:
            check_finite(g, "gradient")
    if named:
        return dict(zip(keys, grads))
    return grads
