"""Synthetic cohort with planted, class-dependent lesion textures.

Every subject is the shared atlas pattern warped by its own invertible
transform. Class 1 subjects carry a band-limited texture inside a fixed
atlas-frame box, so the ground-truth lesion location is known in atlas
coordinates and hence as a set of grid nodes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import GridConfig, SynthConfig, canonical_json
from .patch_graph import AtlasGrid, SpatialTransform, Volume, build_atlas_grid
from .rng import stream

MANIFEST_VERSION = 1
LESION_NODE_FRACTION = 0.25


@dataclass
class SubjectRecord:
    subject_id: str
    volume: Volume
    transform: SpatialTransform
    label: int
    severity: float


@dataclass
class Cohort:
    config: SynthConfig
    grid_config: GridConfig
    seed: int
    atlas: Volume
    mask: Volume
    grid: AtlasGrid
    lesion_nodes: list[int]
    subjects: list[SubjectRecord]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.subjects])


def _smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def body_mask(dims, radius: float = 0.45) -> np.ndarray:
    axes = [(np.arange(d) + 0.5 - d / 2) / (radius * d) for d in dims]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return (zz**2 + yy**2 + xx**2) <= 1.0


def make_atlas(cfg: SynthConfig, seed: int) -> tuple[Volume, Volume]:
    """Smooth low-frequency tissue pattern inside an ellipsoidal body; air outside."""
    rng = stream(seed, "synth.atlas")
    mask = body_mask(cfg.atlas_dims, cfg.body_radius)
    tissue = -0.55 + 0.06 * _smooth_noise(rng, cfg.atlas_dims, 6.0) + 0.03 * _smooth_noise(rng, cfg.atlas_dims, 3.0)
    voxels = np.where(mask, np.clip(tissue, -0.95, 0.95), -1.0)
    return Volume(voxels, cfg.spacing_mm), Volume(mask.astype(np.float32), cfg.spacing_mm)


def _rotation(angles_rad) -> np.ndarray:
    a, b, c = angles_rad
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_transform(cfg: SynthConfig, rng: np.random.Generator) -> SpatialTransform:
    """Subject-to-atlas map: affine about the volume center plus a smooth displacement."""
    d = cfg.deform
    if d.is_identity:
        return SpatialTransform.identity()
    center = (np.asarray(cfg.atlas_dims, dtype=np.float64) - 1) / 2 * cfg.spacing_mm
    scales = 1.0 + rng.uniform(-d.scale, d.scale, size=3)
    angles = np.deg2rad(rng.uniform(-d.rotation_deg, d.rotation_deg, size=3))
    matrix = _rotation(angles) @ np.diag(scales)
    shift = rng.uniform(-d.translation_mm, d.translation_mm, size=3)
    offset = center + shift - matrix @ center
    disp = None
    if d.displacement_mm > 0:
        # nodes on the 1 mm lattice covering the volume
        extent = np.ceil(np.asarray(cfg.atlas_dims) * cfg.spacing_mm).astype(int)
        ctrl_shape = tuple(int(np.ceil(e / d.displacement_spacing)) + 1 for e in extent)
        ctrl = rng.standard_normal((3, *ctrl_shape))
        zoom = [e / c for e, c in zip(extent, ctrl_shape)]
        disp = np.stack([ndimage.zoom(ctrl[c], zoom, order=3, mode="nearest") for c in range(3)], axis=-1)
        disp = disp[: extent[0], : extent[1], : extent[2]]
        disp *= d.displacement_mm / max(float(np.linalg.norm(disp, axis=-1).max()), 1e-12)
    return SpatialTransform(matrix, offset, disp)


def _subject_coords(dims, spacing) -> np.ndarray:
    return np.indices(dims, dtype=np.float64).reshape(3, -1).T * spacing


def lesion_mask(cfg: SynthConfig, transform: SpatialTransform) -> np.ndarray:
    """Subject-frame voxels whose atlas image falls inside the lesion box."""
    q = transform.apply(_subject_coords(cfg.atlas_dims, cfg.spacing_mm)) / cfg.spacing_mm
    lo, hi = (np.asarray(b, dtype=np.float64) for b in cfg.lesion_box)
    inside = ((q >= lo) & (q < hi)).all(axis=1)
    return inside.reshape(cfg.atlas_dims)


def texture(dims, freq: float, rng: np.random.Generator) -> np.ndarray:
    """Sum of three random-direction, random-phase sinusoids, unit peak amplitude."""
    coords = np.indices(dims, dtype=np.float64)
    out = np.zeros(dims)
    for _ in range(3):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        f = freq * rng.uniform(0.9, 1.1)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * f * np.tensordot(direction, coords, axes=1) + phase)
    return out / 3.0


def make_subject(cfg: SynthConfig, seed: int, index: int, atlas: Volume, body: np.ndarray) -> SubjectRecord:
    rng = stream(seed, f"synth.subject.{index}")
    label = index % cfg.n_classes
    lo, hi = cfg.severity_range[label]
    severity = float(rng.uniform(lo, hi))
    transform = random_transform(cfg, rng)

    if cfg.deform.is_identity:
        voxels = atlas.voxels.astype(np.float64).copy()
        inside_body = body
    else:
        q = transform.apply(_subject_coords(cfg.atlas_dims, cfg.spacing_mm)) / cfg.spacing_mm
        voxels = ndimage.map_coordinates(atlas.voxels, q.T, order=1, mode="constant", cval=-1.0)
        voxels = voxels.reshape(cfg.atlas_dims)
        inside_body = ndimage.map_coordinates(body.astype(np.float32), q.T, order=0, cval=0.0)
        inside_body = inside_body.reshape(cfg.atlas_dims) > 0.5

    amp = cfg.texture_amp[label] * severity
    if amp > 0:
        region = lesion_mask(cfg, transform) & inside_body
        voxels = voxels + region * amp * texture(cfg.atlas_dims, cfg.texture_freq[label], rng)
    lo_n, hi_n = cfg.noise_sigma
    if hi_n > 0:
        sigma = rng.uniform(lo_n, hi_n)
        voxels = voxels + inside_body * rng.normal(0.0, sigma, size=cfg.atlas_dims)
    voxels = np.clip(voxels, -1.0, 1.0)
    g_lo, g_hi = cfg.gamma_range
    if g_hi != 1.0 or g_lo != 1.0:
        voxels = np.sign(voxels) * np.abs(voxels) ** rng.uniform(g_lo, g_hi)
    return SubjectRecord(f"sub-{index:03d}", Volume(voxels, cfg.spacing_mm), transform, label, severity)


def lesion_nodes(cfg: SynthConfig, grid: AtlasGrid, mask: np.ndarray) -> list[int]:
    """Atlas nodes whose patch lies at least a quarter inside (lesion box ∩ body)."""
    box = np.zeros(cfg.atlas_dims, dtype=bool)
    (z0, y0, x0), (z1, y1, x1) = cfg.lesion_box
    box[z0:z1, y0:y1, x0:x1] = True
    box &= mask
    out = []
    for j in range(grid.count):
        lo, hi = grid.patch_bounds(j)
        frac = box[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]].mean()
        if frac >= LESION_NODE_FRACTION:
            out.append(j)
    return out


def generate_cohort(cfg: SynthConfig, grid_cfg: GridConfig, seed: int) -> Cohort:
    atlas, mask = make_atlas(cfg, seed)
    body = mask.voxels > 0
    grid = build_atlas_grid(atlas, mask, grid_cfg.patch_size, grid_cfg.step)
    subjects = [make_subject(cfg, seed, i, atlas, body) for i in range(cfg.n_subjects)]
    return Cohort(cfg, grid_cfg, seed, atlas, mask, grid, lesion_nodes(cfg, grid, body), subjects)


def _cohort_config(cohort: Cohort) -> dict:
    return {"data": json.loads(canonical_json(cohort.config)), "grid": json.loads(canonical_json(cohort.grid_config))}


def cohort_hash(cfg: SynthConfig, grid_cfg: GridConfig, seed: int) -> str:
    """SHA-256 over the canonical JSON of everything that shapes the cohort."""
    payload = {"seed": seed, "data": json.loads(canonical_json(cfg)), "grid": json.loads(canonical_json(grid_cfg))}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_cohort(cohort: Cohort, directory) -> dict:
    """Write volumes, transforms, label CSVs and ``manifest.json``; return the manifest."""
    root = Path(directory)
    try:
        (root / "subjects").mkdir(parents=True, exist_ok=True)
        cohort.atlas.save(root / "atlas.rvol")
        cohort.mask.save(root / "mask.rvol")
        entries = []
        for rec in cohort.subjects:
            vol_path = Path("subjects") / f"{rec.subject_id}.rvol"
            tfm_path = Path("subjects") / f"{rec.subject_id}.rtfm"
            rec.volume.save(root / vol_path)
            rec.transform.save(root / tfm_path)
            entries.append(
                {
                    "id": rec.subject_id,
                    "volume": vol_path.as_posix(),
                    "transform": tfm_path.as_posix(),
                    "label": int(rec.label),
                    "severity": float(rec.severity),
                    "lesion_nodes": list(cohort.lesion_nodes),
                }
            )
        manifest = {
            "version": MANIFEST_VERSION,
            "seed": cohort.seed,
            "config": _cohort_config(cohort),
            "config_hash": cohort_hash(cohort.config, cohort.grid_config, cohort.seed),
            "atlas": "atlas.rvol",
            "mask": "mask.rvol",
            "subjects": entries,
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
        for name, key in (("labels.csv", "label"), ("severity.csv", "severity")):
            with open(root / name, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["subject_id", "target"])
                for e in entries:
                    w.writerow([e["id"], e[key]])
    except OSError as exc:
        raise OSError(f"writing cohort to {exc.filename or root}: {exc.strerror or exc}") from exc
    return manifest


def read_cohort(directory) -> Cohort:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    cfg = SynthConfig.model_validate(manifest["config"]["data"])
    grid_cfg = GridConfig.model_validate(manifest["config"]["grid"])
    atlas = Volume.load(root / manifest["atlas"])
    mask = Volume.load(root / manifest["mask"])
    grid = build_atlas_grid(atlas, mask, grid_cfg.patch_size, grid_cfg.step)
    subjects = [
        SubjectRecord(
            e["id"],
            Volume.load(root / e["volume"]),
            SpatialTransform.load(root / e["transform"]),
            int(e["label"]),
            float(e["severity"]),
        )
        for e in manifest["subjects"]
    ]
    nodes = manifest["subjects"][0]["lesion_nodes"] if manifest["subjects"] else []
    return Cohort(cfg, grid_cfg, int(manifest["seed"]), atlas, mask, grid, nodes, subjects)
