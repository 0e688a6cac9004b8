"""Synthetic training/test sets of (initial mesh, target mesh, DRR, camera).

Every sample draws from its own generator seeded by (global seed, split,
index, attempt), so serial and parallel builds produce identical data.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import ProjectionCamera, orthographic_camera, perspective_camera, read_camera, write_camera
from .mesh import MeshGraph, read_obj, write_obj
from .phantom import (DeformationField, ExcessiveDeformationError, PhantomSpec, VoxelVolume,
                      apply_deformation, compose_attenuation_volume, generate_phantom_mesh, phantom_grid,
                      read_pgm16, read_volume, render_drr, write_pgm16, write_volume)

log = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "augment": 1, "test": 2}

MANIFEST_FIELDS = ["sample_id", "split", "kind", "initial", "target", "drr", "raw",
                   "tx", "ty", "tz", "rbf", "raw_min", "raw_max", "axes"]


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 20
    n_augment: int = 0
    n_test: int = 15
    seed: int = 0
    image_size: int = 128
    projection: str = "perspective"
    source_distance: float = 1000.0
    fov_mm: float = 360.0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    shape_jitter: float = 0.05
    translation_mean: tuple = (0.0, 0.0, 10.0)
    translation_std: tuple = (2.0, 2.0, 5.0)
    rbf_count: int = 2
    rbf_amplitude: float = 3.0
    rbf_width: tuple = (30.0, 50.0)
    max_retries: int = 20
    save_volumes: bool = False

    def validate(self):
        if self.n_train + self.n_augment <= 0 or self.n_test < 0 or self.n_train < 0 or self.n_augment < 0:
            raise ValueError("sample counts must be non-negative with at least one training sample")
        if self.image_size <= 0:
            raise ValueError("image size must be positive")
        if self.projection not in ("perspective", "orthographic"):
            raise ValueError("projection must be 'perspective' or 'orthographic'")
        if not 0.0 <= self.shape_jitter < 0.5:
            raise ValueError("shape jitter must be in [0, 0.5)")
        if min(self.rbf_width) <= 0:
            raise ValueError("RBF widths must be positive")
        self.phantom.validate()

    def camera(self) -> ProjectionCamera:
        if self.projection == "orthographic":
            return orthographic_camera(self.image_size, self.image_size, self.fov_mm / self.image_size)
        return perspective_camera(self.image_size, self.image_size, self.source_distance, self.fov_mm)

    @classmethod
    def paper_scale(cls, **overrides) -> "DatasetConfig":
        """Counts and resolution of the clinical setup: 20 + 124 training, 15 test, 640x640."""
        phantom = replace(PhantomSpec(), grid_spacing=(1.0, 1.0, 2.5))
        base = dict(n_train=20, n_augment=124, n_test=15, image_size=640, phantom=phantom)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class SamplePlan:
    sample_id: str
    split: str
    kind: str
    index: int


@dataclass(eq=False)
class TrainingSample:
    sample_id: str
    split: str
    kind: str
    initial_mesh: MeshGraph
    target_mesh: MeshGraph
    drr: np.ndarray
    camera: ProjectionCamera
    field: DeformationField | None = None
    raw: np.ndarray | None = None
    axes: tuple = ()
    volume: VoxelVolume | None = None

    @property
    def is_training(self) -> bool:
        return self.split in ("train", "augment")


def plan_dataset(config: DatasetConfig) -> list[SamplePlan]:
    plans = []
    for i in range(config.n_train):
        plans.append(SamplePlan(f"train_{i:03d}", "train", "rbf", i))
    for i in range(config.n_augment):
        plans.append(SamplePlan(f"augment_{i:03d}", "augment", "translation", i))
    for i in range(config.n_test):
        plans.append(SamplePlan(f"test_{i:03d}", "test", "rbf", i))
    return plans


def sample_rng(seed: int, plan: SamplePlan, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLIT_CODES[plan.split], plan.index, attempt]))


def _draw_field(rng, config: DatasetConfig, mesh: MeshGraph, kind: str) -> DeformationField:
    t = rng.normal(config.translation_mean, config.translation_std)
    if kind == "translation" or config.rbf_count == 0:
        return DeformationField(translation=t)
    k = config.rbf_count
    centers = mesh.vertices[rng.choice(mesh.n, size=k, replace=False)]
    widths = rng.uniform(*config.rbf_width, size=k)
    amps = rng.normal(0.0, config.rbf_amplitude, size=(k, 3))
    return DeformationField(t, centers, widths, amps)


def generate_sample(config: DatasetConfig, plan: SamplePlan) -> TrainingSample:
    camera = config.camera()
    grid = phantom_grid(config.phantom)
    for attempt in range(config.max_retries + 1):
        rng = sample_rng(config.seed, plan, attempt)
        axes = np.asarray(config.phantom.organ_axes, dtype=float)
        if config.shape_jitter:
            axes = axes * (1.0 + rng.uniform(-config.shape_jitter, config.shape_jitter, size=3))
        spec = replace(config.phantom, organ_axes=tuple(float(a) for a in axes))
        initial = generate_phantom_mesh(spec)
        fld = _draw_field(rng, config, initial, plan.kind)
        try:
            target = apply_deformation(initial, fld)
        except ExcessiveDeformationError:
            log.info("%s: attempt %d rejected (triangle flip), resampling", plan.sample_id, attempt)
            continue
        volume = compose_attenuation_volume(spec, target, grid)
        img, raw = render_drr(volume, camera)
        # store exactly what the 16-bit image file holds so memory and disk agree
        img = np.round(img * 65535.0) / 65535.0
        return TrainingSample(plan.sample_id, plan.split, plan.kind, initial, target, img, camera,
                              fld, raw, tuple(float(a) for a in axes),
                              volume if config.save_volumes else None)
    raise ExcessiveDeformationError(f"{plan.sample_id}: no valid deformation after {config.max_retries + 1} attempts")


def _generate_star(args):
    return generate_sample(*args)


def build_dataset(config: DatasetConfig, workers: int = 1) -> list[TrainingSample]:
    config.validate()
    plans = plan_dataset(config)
    if workers > 1 and len(plans) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_star, [(config, p) for p in plans]))
    return [generate_sample(config, p) for p in plans]


def split_samples(samples):
    train = [s for s in samples if s.is_training]
    test = [s for s in samples if s.split == "test"]
    return train, test


# ----------------------------------------------------------------------------
# disk layout
# ----------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _rbf_text(fld: DeformationField | None) -> str:
    if fld is None or len(fld.centers) == 0:
        return ""
    parts = []
    for c, w, a in zip(fld.centers, fld.widths, fld.amplitudes):
        parts.append(":".join(_fmt(x) for x in (*c, w, *a)))
    return ";".join(parts)


def _parse_rbf(text: str, translation) -> DeformationField:
    if not text:
        return DeformationField(translation=translation)
    rows = np.array([[float(x) for x in part.split(":")] for part in text.split(";")])
    return DeformationField(translation, rows[:, :3], rows[:, 3], rows[:, 4:7])


def manifest_text(samples, paths: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    for s in samples:
        p = paths[s.sample_id]
        t = s.field.translation if s.field is not None else np.zeros(3)
        w.writerow([s.sample_id, s.split, s.kind, p["initial"], p["target"], p["drr"], p["raw"],
                    _fmt(t[0]), _fmt(t[1]), _fmt(t[2]), _rbf_text(s.field),
                    _fmt(s.raw.min()), _fmt(s.raw.max()), ":".join(_fmt(a) for a in s.axes)])
    return buf.getvalue()


def write_dataset(root, samples, camera: ProjectionCamera) -> Path:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    write_camera(root / "camera.txt", camera)
    paths = {}
    for s in samples:
        stem = f"samples/{s.sample_id}"
        p = {"initial": f"{stem}_initial.obj", "target": f"{stem}_target.obj",
             "drr": f"{stem}_drr.pgm", "raw": f"{stem}_raw"}
        write_obj(root / p["initial"], s.initial_mesh)
        write_obj(root / p["target"], s.target_mesh)
        write_pgm16(root / p["drr"], s.drr)
        write_volume(root / p["raw"], VoxelVolume(s.raw[:, :, None], (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)))
        if s.volume is not None:
            write_volume(root / f"{stem}_volume", s.volume)
        paths[s.sample_id] = p
    manifest = root / "manifest.csv"
    manifest.write_text(manifest_text(samples, paths))
    return manifest


def read_manifest(root) -> list[dict]:
    with open(Path(root) / "manifest.csv", newline="") as f:
        return list(csv.DictReader(f))


def load_dataset(root, splits=None) -> list[TrainingSample]:
    root = Path(root)
    camera = read_camera(root / "camera.txt")
    out = []
    for row in read_manifest(root):
        if splits is not None and row["split"] not in splits:
            continue
        t = np.array([float(row["tx"]), float(row["ty"]), float(row["tz"])])
        raw_path = root / row["raw"]
        raw = None
        if raw_path.with_suffix(".raw").exists():
            raw = read_volume(raw_path).values[:, :, 0]
        axes = tuple(float(a) for a in row["axes"].split(":")) if row.get("axes") else ()
        out.append(TrainingSample(
            row["sample_id"], row["split"], row["kind"],
            read_obj(root / row["initial"]), read_obj(root / row["target"]),
            read_pgm16(root / row["drr"]), camera, _parse_rbf(row["rbf"], t), raw, axes))
    return out
