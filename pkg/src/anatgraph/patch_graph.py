"""Atlas patch grid, subject correspondence and patch graphs.

Coordinates are millimetres in (z, y, x) order with the origin at voxel
(0, 0, 0). A subject's transform maps subject space to atlas space; its
inverse carries atlas patch centers into the subject.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats

BACKGROUND = -1.0
INVERT_MAX_ITER = 50
INVERT_TOL = 1e-3


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def save(self, path) -> None:
        formats.write_rvol(path, self.voxels, self.spacing)

    @classmethod
    def load(cls, path) -> "Volume":
        voxels, spacing = formats.read_rvol(path)
        return cls(voxels, spacing)


def _sample_field(field_: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear lookup of a (D, H, W, 3) field at mm points (1 mm nodes, edge clamp)."""
    coords = points.T
    return np.stack(
        [ndimage.map_coordinates(field_[..., c], coords, order=1, mode="nearest") for c in range(3)],
        axis=-1,
    ).astype(np.float64)


@dataclass
class SpatialTransform:
    """``p -> matrix @ p + offset + displacement(p)``.

    The optional displacement is a dense field of mm vectors whose nodes sit
    on the integer-millimetre lattice, sampled trilinearly and clamped at the
    edges.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    displacement: np.ndarray | None = None
    direction: str = "subject_to_atlas"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise ValueError("affine part is singular")
        if self.displacement is not None:
            self.displacement = np.ascontiguousarray(self.displacement, dtype=np.float32)
            if self.displacement.ndim != 4 or self.displacement.shape[3] != 3:
                raise ValueError(f"displacement must be (D, H, W, 3), got {self.displacement.shape}")
        if self.direction not in ("subject_to_atlas", "atlas_to_subject"):
            raise ValueError(f"unknown direction {self.direction!r}")

    @classmethod
    def identity(cls) -> "SpatialTransform":
        return cls()

    @classmethod
    def translation(cls, shift) -> "SpatialTransform":
        return cls(offset=np.asarray(shift, dtype=np.float64))

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = pts @ self.matrix.T + self.offset
        if self.displacement is not None:
            out = out + _sample_field(self.displacement, pts)
        return out

    def save(self, path) -> None:
        if self.direction != "subject_to_atlas":
            raise ValueError("RTFM files store subject-to-atlas transforms")
        formats.write_rtfm(path, self.matrix, self.offset, self.displacement)

    @classmethod
    def load(cls, path) -> "SpatialTransform":
        matrix, offset, disp = formats.read_rtfm(path)
        return cls(matrix, offset, disp)


class InversionError(RuntimeError):
    pass


@dataclass
class InverseTransform:
    """Inverse of a transform with a displacement part, evaluated pointwise.

    Solves ``A p + b + u(p) = q`` for each query ``q`` by the fixed-point
    iteration ``p <- A^-1 (q - b - u(p))``.
    """

    forward: SpatialTransform
    max_iter: int = INVERT_MAX_ITER
    tol: float = INVERT_TOL

    @property
    def direction(self) -> str:
        return "atlas_to_subject" if self.forward.direction == "subject_to_atlas" else "subject_to_atlas"

    def apply(self, points) -> np.ndarray:
        q = np.atleast_2d(np.asarray(points, dtype=np.float64))
        f = self.forward
        a_inv = np.linalg.inv(f.matrix)
        p = (q - f.offset) @ a_inv.T
        worst = np.inf
        for _ in range(self.max_iter):
            p = (q - f.offset - _sample_field(f.displacement, p)) @ a_inv.T
            worst = float(np.max(np.linalg.norm(f.apply(p) - q, axis=1), initial=0.0))
            if worst < self.tol:
                return p
        raise InversionError(f"fixed-point inversion did not converge: worst residual {worst:.4g} mm")


def invert(t):
    """Inverse transform (closed form for affine, fixed point otherwise)."""
    if isinstance(t, InverseTransform):
        return t.forward
    if t.displacement is None:
        a_inv = np.linalg.inv(t.matrix)
        flipped = "atlas_to_subject" if t.direction == "subject_to_atlas" else "subject_to_atlas"
        return SpatialTransform(a_inv, -a_inv @ t.offset, None, flipped)
    return InverseTransform(t)


def round_trip_error(t: SpatialTransform, t_inv: SpatialTransform, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.linalg.norm(t.apply(t_inv.apply(pts)) - pts, axis=1)


@dataclass
class AtlasGrid:
    dims: tuple[int, int, int]
    spacing: float
    patch_size: int
    step: int
    mask: np.ndarray
    centers_vox: np.ndarray  # (N, 3) int

    @property
    def count(self) -> int:
        return len(self.centers_vox)

    @property
    def centers_mm(self) -> np.ndarray:
        return self.centers_vox.astype(np.float64) * self.spacing

    def normalized_centers(self) -> np.ndarray:
        """Centers scaled to [-1, 1] per axis by the atlas extent."""
        extent = np.asarray(self.dims, dtype=np.float64) * self.spacing
        return (2.0 * self.centers_mm / extent - 1.0).astype(np.float32)

    def patch_bounds(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        lo = self.centers_vox[j] - self.patch_size // 2
        return lo, lo + self.patch_size


def build_atlas_grid(atlas: Volume, mask: Volume | np.ndarray, patch_size: int, step: int) -> AtlasGrid:
    """Equally spaced patch grid keeping every position whose patch touches the mask.

    Ordering is z, then y, then x ascending.
    """
    mask_arr = np.asarray(mask.voxels if isinstance(mask, Volume) else mask) > 0
    dims = atlas.dims
    if mask_arr.shape != dims:
        raise ValueError(f"mask shape {mask_arr.shape} differs from atlas {dims}")
    if patch_size > min(dims):
        raise ValueError(f"patch size {patch_size} exceeds atlas dims {dims}")
    if not 0 < step <= patch_size:
        raise ValueError(f"step must lie in (0, patch_size], got {step}")
    if not mask_arr.any():
        raise ValueError("atlas mask is empty")

    starts = [range(0, d - patch_size + 1, step) for d in dims]
    centers = []
    for z in starts[0]:
        for y in starts[1]:
            for x in starts[2]:
                if mask_arr[z : z + patch_size, y : y + patch_size, x : x + patch_size].any():
                    centers.append((z + patch_size // 2, y + patch_size // 2, x + patch_size // 2))
    return AtlasGrid(
        dims=dims,
        spacing=atlas.spacing,
        patch_size=patch_size,
        step=step,
        mask=mask_arr,
        centers_vox=np.asarray(centers, dtype=np.int64).reshape(-1, 3),
    )


def map_centers(grid: AtlasGrid, t_inv) -> np.ndarray:
    if t_inv.direction != "atlas_to_subject":
        raise ValueError("map_centers needs an atlas-to-subject transform")
    return t_inv.apply(grid.centers_mm)


def extract_patches(volume: Volume, centers_mm, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Cubes of side ``patch_size`` around each (voxel-rounded) center.

    Returns ``(patches, out_of_bounds)``; voxels outside the volume read as
    the background value -1 and flag their node.
    """
    centers_mm = np.atleast_2d(np.asarray(centers_mm, dtype=np.float64))
    if not np.isfinite(centers_mm).all():
        raise ValueError("patch centers must be finite")
    s = patch_size
    vox = np.rint(centers_mm / volume.spacing).astype(np.int64)
    lo = vox - s // 2
    dims = np.asarray(volume.dims)
    oob = ((lo < 0) | (lo + s > dims)).any(axis=1)

    pad = s + int(np.max(np.abs(np.concatenate([lo.ravel(), (lo + s - dims).ravel(), [0]]))))
    padded = np.pad(volume.voxels, pad, mode="constant", constant_values=BACKGROUND)
    out = np.empty((len(vox), s, s, s), dtype=np.float32)
    for n, (z, y, x) in enumerate(lo + pad):
        out[n] = padded[z : z + s, y : y + s, x : x + s]
    return out, oob


def build_adjacency(centers_mm, rho: float) -> np.ndarray:
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    c = np.atleast_2d(np.asarray(centers_mm, dtype=np.float64))
    dist = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    adj = (dist < rho).astype(np.uint8)
    np.fill_diagonal(adj, 0)
    return adj


def normalize_adjacency(adj) -> np.ndarray:
    """Symmetric normalization with self loops, ``D^-1/2 (A + I) D^-1/2``."""
    a_hat = np.asarray(adj, dtype=np.float64) + np.eye(len(adj))
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]


@dataclass
class PatientGraph:
    subject_id: str
    centers_mm: np.ndarray
    patches: np.ndarray
    adjacency: np.ndarray
    out_of_bounds: np.ndarray
    rho_mm: float

    @property
    def n(self) -> int:
        return len(self.centers_mm)

    def normalized_adjacency(self) -> np.ndarray:
        return normalize_adjacency(self.adjacency)

    def export(self) -> dict:
        j, k = np.nonzero(np.triu(self.adjacency, 1))
        return {
            "subject_id": self.subject_id,
            "n": int(self.n),
            "centers_mm": self.centers_mm.round(6).tolist(),
            "edges": [[int(a), int(b)] for a, b in zip(j, k)],
            "rho_mm": float(self.rho_mm),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.export()))


def build_patient_graph(
    subject_id: str,
    volume: Volume,
    grid: AtlasGrid,
    transform,
    rho_mm: float,
) -> PatientGraph:
    """Map the atlas grid into a subject and cut its patch graph.

    ``transform`` may be given in either direction; a subject-to-atlas
    transform is inverted first.
    """
    t_inv = invert(transform) if transform.direction == "subject_to_atlas" else transform
    centers = map_centers(grid, t_inv)
    patches, oob = extract_patches(volume, centers, grid.patch_size)
    return PatientGraph(
        subject_id=subject_id,
        centers_mm=centers,
        patches=patches,
        adjacency=build_adjacency(centers, rho_mm),
        out_of_bounds=oob,
        rho_mm=rho_mm,
    )
