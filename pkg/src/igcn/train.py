"""Training loop, checkpoints and timed inference."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine.checkpoint import load_checkpoint, save_checkpoint
from .engine.optim import AdamState, adam_step
from .mesh import MeshGraph
from .model import IgcnModel, ModelConfig

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "total", "l_pos", "l_map", "l_laplacian", "train_rmse_mm"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, epoch: int, last_good: dict):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 1000
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    l_pos: float
    l_map: float
    l_laplacian: float
    train_rmse_mm: float
    wall_time_s: float = 0.0

    def row(self) -> list:
        return [self.epoch] + [repr(float(getattr(self, k))) for k in LOG_FIELDS[1:]]


@dataclass
class TrainResult:
    model: IgcnModel
    scale: np.ndarray
    history: list = field(default_factory=list)
    adam: AdamState | None = None


def coordinate_scale(samples) -> np.ndarray:
    """Per-axis maximum absolute target coordinate over the training samples (mm)."""
    m = np.zeros(3)
    for s in samples:
        m = np.maximum(m, np.abs(s.target_mesh.vertices).max(axis=0))
    if np.any(m <= 0):
        raise ValueError("degenerate coordinate scale")
    return m


def train(model: IgcnModel, samples, config: TrainingConfig, scale=None, on_epoch=None,
          adam: AdamState | None = None) -> TrainResult:
    """Batch-size-1 Adam training over ``samples`` in a seeded per-epoch order.

    ``on_epoch(record, result)`` is called after every epoch (logging,
    checkpointing).  A non-finite loss raises :class:`TrainingDiverged` carrying
    the parameters of the last completed epoch.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    scale = coordinate_scale(samples) if scale is None else np.asarray(scale, dtype=float)
    adam = AdamState(lr=config.lr) if adam is None else adam
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    result = TrainResult(model, scale, [], adam)
    last_good = model.state_arrays()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        sq_err, n_vert = 0.0, 0
        for k in rng.permutation(len(samples)):
            s = samples[k]
            model.params.zero_grad()
            try:
                fwd = model.forward(s.drr, s.initial_mesh, s.camera, scale, training=True, rng=rng)
                total, parts = model.losses(fwd, s.initial_mesh, s.target_mesh.vertices, s.camera, scale)
            except FloatingPointError as exc:  # includes LossError
                raise TrainingDiverged(f"epoch {epoch}, sample {s.sample_id}: {exc}", epoch, last_good) from exc
            loss = float(total.value)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch}, sample {s.sample_id}: non-finite loss", epoch, last_good)
            total.backward()
            try:
                adam_step(model.params, adam)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch, last_good) from exc
            sums += [loss, parts["pos"], parts["map"], parts["laplacian"]]
            diff = fwd.vertices_mm(scale) - s.target_mesh.vertices
            sq_err += float((diff ** 2).sum())
            n_vert += len(diff)
        last_good = model.state_arrays()
        sums /= len(samples)
        rec = EpochRecord(epoch, *sums, train_rmse_mm=float(np.sqrt(sq_err / n_vert)),
                          wall_time_s=time.perf_counter() - t0)
        result.history.append(rec)
        log.debug("epoch %d total %.6g pos %.6g", epoch, rec.total, rec.l_pos)
        if on_epoch is not None:
            on_epoch(rec, result)
    return result


def predict(model: IgcnModel, initial: MeshGraph, drr, camera, scale):
    """Eval-mode forward pass; returns (predicted mesh, forward wall time in ms)."""
    t0 = time.perf_counter()
    fwd = model.forward(drr, initial, camera, scale, training=False)
    ms = (time.perf_counter() - t0) * 1e3
    return initial.with_vertices(fwd.vertices_mm(scale)), ms


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------

def write_log(path, history) -> None:
    """Deterministic per-epoch loss log (no timings)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for rec in history:
            w.writerow(rec.row())


def write_timing(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "wall_time_s"])
        for rec in history:
            w.writerow([rec.epoch, f"{rec.wall_time_s:.6f}"])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def save_model(path, model: IgcnModel, scale, adam: AdamState | None = None, extra: dict | None = None) -> None:
    meta = {"model": model.config.to_dict(), "scale": [float(s) for s in scale]}
    arrays = dict(model.state_arrays())
    if adam is not None:
        meta.update(adam_lr=adam.lr, adam_beta1=adam.beta1, adam_beta2=adam.beta2, adam_eps=adam.eps,
                    adam_step=adam.step)
        for name in model.params:
            if name in adam.m:
                arrays[f"adam.m.{name}"] = adam.m[name]
                arrays[f"adam.v.{name}"] = adam.v[name]
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def load_model(path):
    """Returns (model, scale, adam state or None, meta)."""
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    arrays, meta = load_checkpoint(path)
    model = IgcnModel(ModelConfig.from_dict(meta["model"]))
    model.load_arrays(arrays)
    adam = None
    if "adam_step" in meta:
        adam = AdamState(meta["adam_lr"], meta["adam_beta1"], meta["adam_beta2"], meta["adam_eps"], meta["adam_step"])
        for name in model.params:
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays[f"adam.m.{name}"]
                adam.v[name] = arrays[f"adam.v.{name}"]
    return model, np.asarray(meta["scale"]), adam, meta
