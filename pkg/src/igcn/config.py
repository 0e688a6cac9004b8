"""Run configuration: an INI file with sections, typed by the defaults below.

Values are parsed according to the type of their default (comma-separated
lists for tuples).  Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path

from .dataset import DatasetConfig
from .model import BackboneConfig, LossWeights, ModelConfig
from .phantom import PhantomSpec
from .train import TrainingConfig


class ConfigError(ValueError):
    pass


_P = PhantomSpec()
_D = DatasetConfig()
_B = BackboneConfig()
_M = ModelConfig()

DEFAULTS = {
    "run": {"seed": 0, "workers": 1},
    "paths": {"dataset_dir": "data", "checkpoint_dir": "checkpoints", "report_dir": "reports"},
    "phantom": {
        "organ_axes": _P.organ_axes, "organ_exponent": _P.organ_exponent, "n_vertices": _P.n_vertices,
        "body_axes": _P.body_axes, "body_center": _P.body_center, "spine_radius": _P.spine_radius,
        "spine_center": _P.spine_center, "body_attenuation": _P.body_attenuation,
        "organ_attenuation": _P.organ_attenuation, "spine_attenuation": _P.spine_attenuation,
        "grid_spacing": _P.grid_spacing, "z_half_extent": _P.z_half_extent,
    },
    "dataset": {
        "n_train": _D.n_train, "n_augment": _D.n_augment, "n_test": _D.n_test,
        "image_size": _D.image_size, "projection": _D.projection,
        "source_distance": _D.source_distance, "fov_mm": _D.fov_mm, "shape_jitter": _D.shape_jitter,
        "translation_mean": _D.translation_mean, "translation_std": _D.translation_std,
        "rbf_count": _D.rbf_count, "rbf_amplitude": _D.rbf_amplitude, "rbf_width": _D.rbf_width,
        "max_retries": _D.max_retries, "save_volumes": _D.save_volumes,
    },
    "backbone": {
        "widths": _B.widths, "convs_per_stage": _B.convs_per_stage,
        "exposed_stages": _B.exposed_stages, "head_stage": _B.head_stage,
    },
    "model": {
        "gcn_layers": _M.gcn_layers, "gcn_hidden": _M.gcn_hidden, "output": _M.output,
        "self_loops": _M.self_loops, "dropout": _M.dropout,
    },
    "loss": {"lambda_map": 10.0, "lambda_laplacian": 1.0},
    "training": {"epochs": 1000, "lr": 1e-4, "checkpoint_every": 0},
    "metrics": {"grid_spacing": 2.0},
}


def _coerce(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.replace(" ", "").split(",") if x)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS) if values is None else values

    # -- construction ---------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        rc = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            try:
                parser.read_string(text)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            for section in parser.sections():
                for key, text_value in parser.items(section):
                    rc.set(section, key, text_value)
        for item in overrides:
            rc.apply_override(item)
        rc.validate()
        return rc

    def set(self, section: str, key: str, text_value) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        value = text_value if not isinstance(text_value, str) else _coerce(default, text_value, f"{section}.{key}")
        self.values[section][key] = value

    def apply_override(self, item: str) -> None:
        lhs, sep, rhs = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        self.set(section, key, rhs)

    def __getitem__(self, section) -> dict:
        return self.values[section]

    # -- derived objects -------------------------------------------------
    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def phantom_spec(self) -> PhantomSpec:
        p = self.values["phantom"]
        return PhantomSpec(**p, seed=self.seed)

    def dataset_config(self) -> DatasetConfig:
        d = dict(self.values["dataset"])
        return DatasetConfig(**d, seed=self.seed, phantom=self.phantom_spec())

    def model_config(self, variant: str = "full") -> ModelConfig:
        b = self.values["backbone"]
        m = self.values["model"]
        backbone = BackboneConfig(input_size=self.values["dataset"]["image_size"], **b)
        weights = LossWeights(self.values["loss"]["lambda_map"], self.values["loss"]["lambda_laplacian"])
        return ModelConfig(backbone=backbone, mode=variant, weights=weights, **m)

    def training_config(self) -> TrainingConfig:
        t = self.values["training"]
        return TrainingConfig(epochs=t["epochs"], lr=t["lr"], seed=self.seed,
                              checkpoint_every=t["checkpoint_every"])

    def validate(self) -> None:
        try:
            self.dataset_config().validate()
            self.model_config().validate()
            self.training_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.values["metrics"]["grid_spacing"] <= 0:
            raise ConfigError("metrics.grid_spacing must be positive")

    def with_paper_scale(self) -> "RunConfig":
        rc = RunConfig(copy.deepcopy(self.values))
        big = DatasetConfig.paper_scale()
        rc.values["dataset"].update(n_train=big.n_train, n_augment=big.n_augment,
                                    n_test=big.n_test, image_size=big.image_size)
        rc.values["phantom"]["grid_spacing"] = big.phantom.grid_spacing
        rc.values["metrics"]["grid_spacing"] = 1.0
        return rc

    # -- output ----------------------------------------------------------
    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, items in self.values.items():
            parser[section] = {k: _render(v) for k, v in items.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def echo(self, directory) -> Path:
        """Write the effective configuration next to a command's outputs."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "effective_config.ini"
        path.write_text(self.to_ini())
        return path


def desk_config(**overrides) -> RunConfig:
    """Defaults plus dotted overrides given as keyword pairs, e.g. ``training__epochs=5``."""
    rc = RunConfig()
    for k, v in overrides.items():
        section, key = k.split("__", 1)
        rc.set(section, key, v)
    rc.validate()
    return rc


__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "desk_config"]
