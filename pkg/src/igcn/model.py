"""Image-to-graph network: CNN backbone, deformation-map head, warped feature
pooling and an 8-layer graph convolutional decoder, plus its losses.

All losses are computed in normalized units: 3-D coordinates divided per axis
by the dataset's coordinate scale, 2-D points divided by the image size.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from .camera import ProjectionCamera, normalize_pixel, project_vertices
from .engine import ops
from .engine.optim import ParameterStore
from .engine.tensor import Tensor
from .mesh import MeshGraph, normalized_operator, umbrella_matrix

MODES = ("full", "no-mapping")
OUTPUTS = ("absolute", "residual")


class LossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """VGG-style stages of 3x3 conv stacks with 2x max pooling between stages."""

    widths: tuple = (16, 32, 64, 128)
    convs_per_stage: int = 2
    exposed_stages: tuple = (1, 2, 3)
    head_stage: int = 1
    input_size: int = 128

    def validate(self):
        if not self.widths or min(self.widths) <= 0 or self.convs_per_stage < 1:
            raise ValueError("backbone needs at least one stage with positive widths")
        if not self.exposed_stages:
            raise ValueError("at least one stage must be exposed for pooling")
        if any(not 0 <= s < len(self.widths) for s in (*self.exposed_stages, self.head_stage)):
            raise ValueError("stage index out of range")
        # the head reads the pooled output of its stage
        if self.input_size % (2 ** (self.head_stage + 1)) or self.input_size % (2 ** (len(self.widths) - 1)):
            raise ValueError(f"input size {self.input_size} not divisible by the pooling factors")

    def stage_size(self, stage: int) -> int:
        return self.input_size // (2 ** stage)

    @property
    def field_size(self) -> int:
        return self.input_size // (2 ** (self.head_stage + 1))

    @property
    def pooled_width(self) -> int:
        return sum(self.widths[s] for s in self.exposed_stages)


@dataclass(frozen=True)
class LossWeights:
    map: float = 10.0
    laplacian: float = 1.0

    def __post_init__(self):
        if self.map < 0 or self.laplacian < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gcn_layers: int = 8
    gcn_hidden: int = 128
    mode: str = "full"
    output: str = "absolute"
    dropout: float = 0.5
    self_loops: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        self.backbone.validate()
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}")
        if self.gcn_layers < 1:
            raise ValueError("need at least one graph convolution layer")

    @property
    def effective_weights(self) -> LossWeights:
        if self.mode == "no-mapping":
            return LossWeights(map=0.0, laplacian=self.weights.laplacian)
        return self.weights

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        bb = {k: tuple(v) if isinstance(v, list) else v for k, v in bb.items()}
        w = d.pop("weights", {})
        return cls(backbone=BackboneConfig(**bb), weights=LossWeights(**w), **d)


@lru_cache(maxsize=8)
def _graph_context(tri_bytes: bytes, n: int, self_loops: bool):
    tris = np.frombuffer(tri_bytes, dtype=np.int64).reshape(-1, 3)
    mesh = MeshGraph(np.zeros((n, 3)), tris)
    return normalized_operator(mesh.adjacency, self_loops).matrix, umbrella_matrix(mesh)


def graph_context(mesh: MeshGraph, self_loops: bool = True):
    """(normalized operator, umbrella matrix), cached per connectivity."""
    return _graph_context(np.ascontiguousarray(mesh.triangles).tobytes(), mesh.n, self_loops)


@dataclass
class ForwardResult:
    coords: Tensor                # predicted vertices, normalized units
    projected: np.ndarray         # p_i, normalized image coordinates
    warped: Tensor                # M(p_i)
    field: Tensor | None
    stages: list = field(default_factory=list)
    features: Tensor | None = None

    def vertices_mm(self, scale) -> np.ndarray:
        return self.coords.value.astype(np.float64) * np.asarray(scale, dtype=np.float64)


class IgcnModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.config.validate()
        self.dtype = np.dtype(dtype)
        self.params = ParameterStore(dtype)
        rng = np.random.default_rng(seed)
        bb = self.config.backbone
        cin = 1
        for s, width in enumerate(bb.widths):
            for c in range(bb.convs_per_stage):
                name = f"conv{s}_{c}"
                self.params.add(f"{name}.w", (3, 3, cin, width), "glorot", rng)
                self.params.add(f"{name}.b", (width,), "zeros")
                cin = width
        fin = bb.pooled_width + 3
        for layer in range(self.config.gcn_layers):
            fout = 3 if layer == self.config.gcn_layers - 1 else self.config.gcn_hidden
            self.params.add(f"gcn{layer}.w", (fin, fout), "glorot", rng)
            self.params.add(f"gcn{layer}.b", (fout,), "zeros")
            fin = fout
        if self.config.mode == "full":
            # zero head: training starts from the identity mapping M(p) = p
            self.params.add("head.w", (1, 1, bb.widths[bb.head_stage], 2), "zeros")
            self.params.add("head.b", (2,), "zeros")

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------------
    # pieces of the forward pass
    # ------------------------------------------------------------------

    def extract_feature_maps(self, image):
        """Backbone pass; returns (exposed stage maps, deformation field or None)."""
        bb = self.config.backbone
        img = np.asarray(image.value if isinstance(image, Tensor) else image)
        if img.shape[:2] != (bb.input_size, bb.input_size):
            raise ops.ShapeError(f"image is {img.shape[:2]}, model expects {bb.input_size}x{bb.input_size}")
        if isinstance(image, Tensor):
            x = ops.reshape(image, (bb.input_size, bb.input_size, 1))
        else:
            x = Tensor(standardize(img).reshape(bb.input_size, bb.input_size, 1).astype(self.dtype))
        stages = []
        for s in range(len(bb.widths)):
            if s:
                x = ops.max_pool2d(x)
            for c in range(bb.convs_per_stage):
                x = ops.relu(ops.conv2d(x, self.params[f"conv{s}_{c}.w"], self.params[f"conv{s}_{c}.b"]))
            stages.append(x)
        fld = None
        if self.config.mode == "full":
            hin = ops.max_pool2d(stages[bb.head_stage])
            fld = ops.conv2d(hin, self.params["head.w"], self.params["head.b"])
        return [stages[s] for s in bb.exposed_stages], fld

    def gcn_forward(self, features: Tensor, operator, base=None) -> Tensor:
        x = features
        last = self.config.gcn_layers - 1
        for layer in range(self.config.gcn_layers):
            x = ops.graph_convolution(x, operator, self.params[f"gcn{layer}.w"], self.params[f"gcn{layer}.b"],
                                      activation=None if layer == last else "relu")
        if self.config.output == "residual":
            if base is None:
                raise ValueError("residual output needs the initial coordinates")
            x = ops.add(x, base)
        return x

    def forward(self, image, initial: MeshGraph, camera: ProjectionCamera, scale,
                training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        op, _ = graph_context(initial, self.config.self_loops)
        p = normalize_pixel(project_vertices(camera, initial.vertices), camera).astype(self.dtype)
        maps, fld = self.extract_feature_maps(image)
        warped = warp_projection(p, fld) if fld is not None else Tensor(p)
        feats = perceptual_pool(warped, maps)
        base = (initial.vertices / np.asarray(scale, dtype=np.float64)).astype(self.dtype)
        x = ops.concat([feats, Tensor(base)], axis=1)
        x = ops.dropout(x, self.config.dropout, training, rng)
        coords = self.gcn_forward(x, op, base)
        return ForwardResult(coords, p, warped, fld, maps, feats)

    def losses(self, result: ForwardResult, initial: MeshGraph, target, camera: ProjectionCamera, scale):
        """Returns (total tensor, dict of float components)."""
        target = np.asarray(target, dtype=np.float64)
        tgt = (target / np.asarray(scale, dtype=np.float64)).astype(self.dtype)
        _, umb = graph_context(initial, self.config.self_loops)
        l_pos = loss_pos(result.coords, tgt)
        l_lap = loss_laplacian(umb, result.coords, tgt)
        w = self.config.effective_weights
        if self.config.mode == "full":
            q = normalize_pixel(project_vertices(camera, target), camera).astype(self.dtype)
            l_map = loss_map(q, result.warped)
        else:
            l_map = Tensor(np.zeros((), dtype=self.dtype))
        total = loss_total(l_pos, l_map, l_lap, w)
        parts = {"pos": float(l_pos.value), "map": float(l_map.value), "laplacian": float(l_lap.value)}
        return total, parts

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def state_arrays(self) -> dict:
        return {name: t.value for name, t in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = [n for n in self.params if n not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters {missing}")
        for name in self.params:
            self.params.set_value(name, arrays[name])


# ----------------------------------------------------------------------------
# free functions
# ----------------------------------------------------------------------------

def standardize(image) -> np.ndarray:
    """Zero-mean, unit-variance copy of an image (mean-centred only if constant)."""
    img = np.asarray(image, dtype=np.float64)
    img = img - img.mean()
    sd = img.std()
    return img / sd if sd > 0 else img

def warp_projection(points, fld) -> Tensor:
    """``M(p) = p + field(p)``; ``points`` normalized to the unit square."""
    points = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    f = fld if isinstance(fld, Tensor) else Tensor(np.asarray(fld))
    h, w = f.shape[:2]
    scale = np.array([w, h], dtype=points.dtype)
    return ops.add(points, ops.bilinear_sample(f, ops.mul(points, scale)))


def perceptual_pool(points, maps) -> Tensor:
    """Concatenate bilinear samples of every map at the (normalized) points."""
    if not maps:
        raise ValueError("perceptual pooling needs at least one feature map")
    points = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    cols = []
    for m in maps:
        m = m if isinstance(m, Tensor) else Tensor(np.asarray(m))
        h, w = m.shape[:2]
        cols.append(ops.bilinear_sample(m, ops.mul(points, np.array([w, h], dtype=points.dtype))))
    return cols[0] if len(cols) == 1 else ops.concat(cols, axis=1)


def _check_pair(a, b):
    sa = a.shape if isinstance(a, Tensor) else np.shape(a)
    sb = b.shape if isinstance(b, Tensor) else np.shape(b)
    if sa != sb:
        raise ops.ShapeError(f"size mismatch {sa} vs {sb}")


def loss_pos(predicted, target) -> Tensor:
    """Mean squared distance between corresponding vertices."""
    _check_pair(predicted, target)
    return ops.mean_sq_rows(ops.sub(predicted, target))


def loss_map(target_points, warped) -> Tensor:
    """Mean squared distance between target projections and warped projections."""
    _check_pair(target_points, warped)
    return ops.mean_sq_rows(ops.sub(target_points, warped))


def loss_laplacian(umbrella, predicted, target) -> Tensor:
    """Mean squared difference of umbrella Laplacians over shared connectivity.

    ``umbrella`` is a MeshGraph or its precomputed umbrella matrix.
    """
    _check_pair(predicted, target)
    u = umbrella_matrix(umbrella) if isinstance(umbrella, MeshGraph) else umbrella
    t = target.value if isinstance(target, Tensor) else np.asarray(target)
    dtype = predicted.dtype if isinstance(predicted, Tensor) else np.asarray(predicted).dtype
    lt = np.asarray(u @ t).astype(dtype)
    return ops.mean_sq_rows(ops.sub(ops.spmm(u, predicted), lt))


def loss_total(l_pos, l_map, l_lap, weights: LossWeights = LossWeights()) -> Tensor:
    comps = {"pos": l_pos, "map": l_map, "laplacian": l_lap}
    for name, c in comps.items():
        v = c.value if isinstance(c, Tensor) else c
        if not np.all(np.isfinite(v)):
            raise LossError(f"non-finite {name} loss")
    l_pos, l_map, l_lap = (c if isinstance(c, Tensor) else Tensor(np.asarray(c)) for c in (l_pos, l_map, l_lap))
    dt = l_pos.dtype
    out = ops.add(l_pos, ops.mul(l_map, np.asarray(weights.map, dtype=dt)))
    return ops.add(out, ops.mul(l_lap, np.asarray(weights.laplacian, dtype=dt)))


def end_to_end_gradcheck(seed: int = 0, h: float = 1e-6, max_coords: int = 16) -> float:
    """Finite-difference check of the total loss through the whole network.

    Tiny double-precision setup: an 8-vertex box mesh, a 16x16 image,
    three narrow backbone stages, dropout active with a fixed mask and a
    random (nonzero) deformation head.  Returns the largest relative error.
    """
    from .camera import orthographic_camera
    from .engine.gradcheck import gradient_check
    from .phantom import box_mesh

    rng = np.random.default_rng(seed)
    bb = BackboneConfig(widths=(3, 4, 5), exposed_stages=(1, 2), head_stage=1, input_size=16)
    cfg = ModelConfig(backbone=bb, gcn_layers=8, gcn_hidden=6, mode="full", dropout=0.25)
    model = IgcnModel(cfg, seed=seed, dtype=np.float64)
    model.params.set_value("head.w", rng.normal(0.0, 0.02, size=model["head.w"].shape))
    model.params.set_value("head.b", rng.normal(0.0, 0.01, size=2))
    initial = box_mesh((-10.0, -9.0, -8.0), (9.0, 10.0, 11.0))
    initial = initial.with_vertices(initial.vertices + rng.normal(0.0, 0.7, size=(8, 3)))
    target = initial.vertices + rng.normal(0.0, 1.5, size=(8, 3)) + (0.0, 0.0, 2.0)
    camera = orthographic_camera(16, 16, 2.5)
    image = rng.uniform(size=(16, 16))
    scale = np.abs(target).max(axis=0)
    mask_seed = int(rng.integers(1 << 30))

    def loss():
        fwd = model.forward(image, initial, camera, scale, training=True,
                            rng=np.random.default_rng(mask_seed))
        return model.losses(fwd, initial, target, camera, scale)[0]

    params = [t for _, t in model.params.items()]
    return gradient_check(loss, params, h=h, max_coords=max_coords, rng=rng)
