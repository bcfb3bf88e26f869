"""Direction and distance kernels, the fused Str-Conv layer, and graph pooling.

This module is the plain-numpy evaluator. The trainable network in
:mod:`ascn.network` re-expresses the same computation on an autodiff tape and
is checked against these functions.

Shapes used throughout (J kernels, S supports, D input channels, M_max slots)::

    center_w     (J, D)       weight of the centre point feature
    support_dirs (J, S, 3)    support directions, unit length at init
    support_w    (J, S, D)    weight of each support
    dist_w       (J, S)       one scalar per distance support
    dist_b       (J,)         distance-kernel centre weight, used as a bias
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloudio import PointCloud
from .errors import DimensionMismatch, InvalidParam
from .spatial import FieldBatch, ReceptiveField, max_distance

NORM_EPS = 1e-12
MODES = ("str", "dir", "sum")


@dataclass(frozen=True, eq=False)
class DirectionKernel:
    center_weight: np.ndarray  # (D,)
    directions: np.ndarray  # (S, 3)
    weights: np.ndarray  # (S, D)

    @property
    def supports(self) -> int:
        return self.directions.shape[0]


@dataclass(frozen=True, eq=False)
class DistanceKernel:
    support_weights: np.ndarray  # (S,)
    center_weight: float


@dataclass(frozen=True)
class PoolConfig:
    rate: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.rate < 1:
            raise InvalidParam("pool rate must be >= 1")


@dataclass(eq=False)
class StrConvLayer:
    """One structural convolution layer: J paired kernels and a fusion MLP.

    ``mode`` selects the ablation variant: ``"str"`` concatenates direction
    and distance outputs into the MLP, ``"dir"`` feeds only direction outputs,
    ``"sum"`` adds the two per kernel and skips the MLP.
    """

    center_w: np.ndarray
    support_dirs: np.ndarray
    support_w: np.ndarray
    dist_w: np.ndarray
    dist_b: np.ndarray
    mlp_w1: np.ndarray | None = None
    mlp_b1: np.ndarray | None = None
    mlp_w2: np.ndarray | None = None
    mlp_b2: np.ndarray | None = None
    mode: str = "str"
    hidden_activation: str = "relu"

    @property
    def n_kernels(self) -> int:
        return self.center_w.shape[0]

    @property
    def n_supports(self) -> int:
        return self.support_dirs.shape[1]

    @property
    def d_in(self) -> int:
        return self.center_w.shape[1]

    @property
    def d_out(self) -> int:
        return self.n_kernels if self.mode == "sum" else self.mlp_w2.shape[1]

    @property
    def dir_kernels(self) -> list[DirectionKernel]:
        return [DirectionKernel(self.center_w[j], self.support_dirs[j], self.support_w[j])
                for j in range(self.n_kernels)]

    @property
    def dist_kernels(self) -> list[DistanceKernel]:
        return [DistanceKernel(self.dist_w[j], float(self.dist_b[j])) for j in range(self.n_kernels)]

    def check(self):
        j, s, d = self.support_w.shape
        if self.mode not in MODES:
            raise InvalidParam(f"unknown mode {self.mode!r}")
        shapes = {"center_w": (self.center_w.shape, (j, d)),
                  "support_dirs": (self.support_dirs.shape, (j, s, 3)),
                  "dist_w": (self.dist_w.shape, (j, s)),
                  "dist_b": (self.dist_b.shape, (j,))}
        if self.mode != "sum":
            q = 2 * j if self.mode == "str" else j
            h = self.mlp_w1.shape[1]
            shapes.update(mlp_w1=(self.mlp_w1.shape, (q, h)), mlp_b1=(self.mlp_b1.shape, (h,)),
                          mlp_b2=(self.mlp_b2.shape, (self.mlp_w2.shape[1],)))
            if self.mlp_w2.shape[0] != h:
                raise DimensionMismatch("mlp_w2 rows must equal the hidden width")
        for name, (got, want) in shapes.items():
            if got != want:
                raise DimensionMismatch(f"{name}: expected shape {want}, got {got}")


# ---------------------------------------------------------------------------
# per-field operations


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two 3-vectors; 0 when either is (near) zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def sim(f_m, w_s, d_mn, k_s) -> float:
    f_m = np.asarray(f_m, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64)
    if f_m.shape != w_s.shape:
        raise DimensionMismatch(f"feature {f_m.shape} vs weight {w_s.shape}")
    return float(np.dot(f_m, w_s)) * cosine_similarity(d_mn, k_s)


def conv_dir(rf: ReceptiveField, features: np.ndarray, kernel: DirectionKernel) -> float:
    """Centre term plus, per support, the best-matching slot (padded slots score 0)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != kernel.center_weight.shape[0]:
        raise DimensionMismatch(f"features have D={features.shape[1]}, "
                                f"kernel expects {kernel.center_weight.shape[0]}")
    out = float(np.dot(features[rf.center_index], kernel.center_weight))
    for s in range(kernel.supports):
        out += max(sim(features[m], kernel.weights[s], rf.directions[slot], kernel.directions[s])
                   for slot, m in enumerate(rf.neighbor_indices))
    return out


def conv_dist(rf: ReceptiveField, kernel: DistanceKernel) -> float:
    far = max_distance(rf)
    return kernel.center_weight + float(np.sum(kernel.support_weights * far))


# ---------------------------------------------------------------------------
# vectorised layer


def unit_directions(directions: np.ndarray) -> np.ndarray:
    """Normalise direction vectors; (near) zero vectors map to zero."""
    norm = np.sqrt(np.sum(directions * directions, axis=-1, keepdims=True))
    ok = norm >= NORM_EPS
    return np.where(ok, directions / np.where(ok, norm, 1.0), 0.0)


def kernel_responses(features: np.ndarray, fields: FieldBatch, layer: StrConvLayer):
    """Per-point direction and distance outputs, each (N, J)."""
    features = np.asarray(features, dtype=np.float64)
    j, s, d = layer.support_w.shape
    if features.ndim != 2 or features.shape[1] != d:
        raise DimensionMismatch(f"features must be (N, {d}), got {features.shape}")
    if features.shape[0] != len(fields):
        raise DimensionMismatch("one receptive field per point is required")
    g = features @ layer.support_w.reshape(j * s, d).T
    cos = unit_directions(fields.directions) @ unit_directions(layer.support_dirs.reshape(j * s, 3)).T
    best = (g[fields.neighbor_indices] * cos).max(axis=1)
    dir_out = features @ layer.center_w.T + best.reshape(-1, j, s).sum(axis=2)
    far = fields.max_distances()
    dist_out = layer.dist_b[None, :] + (far[:, None, None] * layer.dist_w[None]).sum(axis=2)
    return dir_out, dist_out


def _activate(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else x


def str_conv_layer(cloud: PointCloud, features: np.ndarray, fields: FieldBatch,
                   layer: StrConvLayer) -> np.ndarray:
    """Apply one Str-Conv layer to every point, returning (N, D_out)."""
    if len(fields) != len(cloud):
        raise DimensionMismatch("one receptive field per point is required")
    dir_out, dist_out = kernel_responses(features, fields, layer)
    if layer.mode == "sum":
        return dir_out + dist_out
    x = np.concatenate([dir_out, dist_out], axis=1) if layer.mode == "str" else dir_out
    hidden = _activate(x @ layer.mlp_w1 + layer.mlp_b1, layer.hidden_activation)
    return hidden @ layer.mlp_w2 + layer.mlp_b2


# ---------------------------------------------------------------------------
# pooling and aggregation


def pool_keep(n: int, rate: int, seed) -> np.ndarray:
    """Sorted indices of ``ceil(n / rate)`` points drawn without replacement."""
    if rate == 1:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=-(-n // rate), replace=False))


def neighbourhood_max(features: np.ndarray, fields: FieldBatch) -> np.ndarray:
    # padded slots hold the centre index, so they never change the max
    return np.maximum(features, features[fields.neighbor_indices].max(axis=1))


def graph_max_pool(cloud: PointCloud, features: np.ndarray, fields: FieldBatch,
                   cfg: PoolConfig = PoolConfig(), keep=None):
    """Channel-wise max over each receptive field, then random subsampling at ``cfg.rate``.

    ``keep`` overrides the random draw with explicit point indices.
    Returns ``(sub_cloud, pooled_features, kept_indices)``.
    """
    pooled = neighbourhood_max(np.asarray(features, dtype=np.float64), fields)
    if keep is None:
        keep = pool_keep(len(cloud), cfg.rate, cfg.seed)
    keep = np.asarray(keep, dtype=np.int64)
    return cloud.subset(keep), pooled[keep], keep


def global_max_aggregate(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 1:
        raise DimensionMismatch("need at least one feature row")
    return features.max(axis=0)


# ---------------------------------------------------------------------------
# initialisation


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def random_unit_vectors(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(tuple(shape) + (3,))
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    while np.any(n < 1e-6):
        bad = n[..., 0] < 1e-6
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def init_layer(J: int, S: int, D_in: int, D_out: int, seed, hidden: int | None = None,
               mode: str = "str") -> StrConvLayer:
    """Random layer: unit support directions, Glorot-uniform weights, zero MLP biases."""
    if min(J, S, D_in, D_out) < 1:
        raise InvalidParam("J, S, D_in and D_out must all be >= 1")
    if mode not in MODES:
        raise InvalidParam(f"unknown mode {mode!r}")
    if mode == "sum" and D_out != J:
        raise InvalidParam("mode 'sum' outputs one channel per kernel (D_out must equal J)")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in, fan_out):
        a = glorot_bound(fan_in, fan_out)
        return rng.uniform(-a, a, size=shape)

    layer = StrConvLayer(
        center_w=uniform((J, D_in), D_in, 1),
        support_dirs=random_unit_vectors(rng, (J, S)),
        support_w=uniform((J, S, D_in), D_in, 1),
        dist_w=uniform((J, S), S, 1),
        dist_b=uniform((J,), S, 1),
        mode=mode,
    )
    if mode != "sum":
        q = 2 * J if mode == "str" else J
        h = q if hidden is None else hidden
        layer.mlp_w1 = uniform((q, h), q, h)
        layer.mlp_b1 = np.zeros(h)
        layer.mlp_w2 = uniform((h, D_out), h, D_out)
        layer.mlp_b2 = np.zeros(D_out)
    layer.check()
    return layer
