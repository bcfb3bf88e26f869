"""The full classifier: Str-Conv and graph-pool stages, global max, MLP head.

Two forward paths exist. :func:`forward_cloud` evaluates with plain numpy
through :mod:`ascn.structconv`; :func:`forward_tape` records the same
computation on an autodiff tape for training. They agree to rounding.

Every conv stage rebuilds the k-NN index on the current (possibly pooled)
cloud and reselects neighbourhood sizes by eigenentropy before convolving.
"""

from __future__ import annotations

import hashlib
import json
import math
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import structconv as sc
from .adaptive import AdaptiveConfig, optimal_sizes_from_table
from .autodiff import ParamStore, Tape, adam_step, sgd_step
from .cloudio import Dataset, PointCloud
from .errors import ConfigError, CorruptModel, DegenerateCloud, NumericalError, VersionError
from .spatial import FieldBatch, SpatialIndex, fields_from_table

log = logging.getLogger(__name__)

DEFAULT_LAYOUT = "CPCPCPCC"
DEFAULT_WIDTHS = (16, 32, 64, 128, 128)
EVAL_EPOCH = 0
MAGIC = b"ASCN"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and seed. ``layout`` spells the stage order: C = Str-Conv, P = pool.

    ``fixed_m`` replaces adaptive selection with a constant neighbourhood size
    and ``mode`` picks the convolution variant ("str", "dir" or "sum").
    """

    widths: list[int] = field(default_factory=lambda: list(DEFAULT_WIDTHS))
    supports: int = 4
    m_min: int = 3
    m_max: int = 10
    pool_rate: int = 4
    hidden: int = 128
    num_classes: int = 3
    seed: int = 0
    layout: str = DEFAULT_LAYOUT
    mode: str = "str"
    fixed_m: int | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.validate()

    @property
    def adaptive(self) -> AdaptiveConfig:
        return AdaptiveConfig(self.m_min, self.m_max)

    @property
    def n_conv(self) -> int:
        return self.layout.count("C")

    @property
    def n_pool(self) -> int:
        return self.layout.count("P")

    def validate(self):
        if set(self.layout) - {"C", "P"} or not self.layout.startswith("C"):
            raise ConfigError(f"layout {self.layout!r} must be C/P letters starting with C")
        if "PP" in self.layout or not self.layout.endswith("C"):
            raise ConfigError("every pool stage must sit between two conv stages")
        if self.n_conv != len(self.widths):
            raise ConfigError(f"layout has {self.n_conv} conv stages but {len(self.widths)} widths")
        if min(self.widths) < 1 or self.supports < 1 or self.hidden < 1:
            raise ConfigError("widths, supports and hidden must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.pool_rate < 1:
            raise ConfigError("pool_rate must be >= 1")
        if self.mode not in sc.MODES:
            raise ConfigError(f"mode must be one of {sc.MODES}")
        try:
            AdaptiveConfig(self.m_min, self.m_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.fixed_m is not None and not 1 <= self.fixed_m <= self.m_max:
            raise ConfigError("fixed_m must lie in [1, m_max]")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ConfigError("class_names must have num_classes entries")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Model:
    config: ModelConfig
    params: ParamStore

    def conv_layer(self, i: int) -> sc.StrConvLayer:
        p = self.params
        pre = f"conv{i}."
        layer = sc.StrConvLayer(
            center_w=p[pre + "center_w"], support_dirs=p[pre + "support_dirs"],
            support_w=p[pre + "support_w"], dist_w=p[pre + "dist_w"], dist_b=p[pre + "dist_b"],
            mode=self.config.mode)
        if self.config.mode != "sum":
            layer.mlp_w1, layer.mlp_b1 = p[pre + "mlp_w1"], p[pre + "mlp_b1"]
            layer.mlp_w2, layer.mlp_b2 = p[pre + "mlp_w2"], p[pre + "mlp_b2"]
        return layer

    @property
    def stages(self) -> list[str]:
        return list(self.config.layout)


_LAYER_PARAMS = ("center_w", "support_dirs", "support_w", "dist_w", "dist_b",
                 "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    params = ParamStore()
    d_in = 1
    for i, width in enumerate(cfg.widths):
        layer = sc.init_layer(width, cfg.supports, d_in, width, seed=[cfg.seed, 1, i], mode=cfg.mode)
        for name in _LAYER_PARAMS:
            value = getattr(layer, name)
            if value is not None:
                params.add(f"conv{i}.{name}", value, unit_rows=(name == "support_dirs"))
        d_in = layer.d_out
    rng = np.random.default_rng([cfg.seed, 2])
    a1 = sc.glorot_bound(d_in, cfg.hidden)
    a2 = sc.glorot_bound(cfg.hidden, cfg.num_classes)
    params.add("head.w1", rng.uniform(-a1, a1, (d_in, cfg.hidden)))
    params.add("head.b1", np.zeros(cfg.hidden))
    params.add("head.w2", rng.uniform(-a2, a2, (cfg.hidden, cfg.num_classes)))
    params.add("head.b2", np.zeros(cfg.num_classes))
    model = Model(cfg, params)
    for i in range(cfg.n_conv):
        model.conv_layer(i).check()
    return model


# ---------------------------------------------------------------------------
# geometry


def stage_sizes(n: int, cfg: ModelConfig) -> list[int]:
    """Point count entering each conv stage for an input of ``n`` points."""
    sizes = []
    for op in cfg.layout:
        if op == "C":
            sizes.append(n)
        else:
            n = -(-n // cfg.pool_rate)
    return sizes


def _check_input(cloud: PointCloud, cfg: ModelConfig):
    n = len(cloud)
    if n < cfg.m_min + 1:
        raise DegenerateCloud(f"cloud has {n} points; need at least {cfg.m_min + 1}")


def _lone_point_fields(m_max: int) -> FieldBatch:
    # a stage pooled down to one point: every slot is padding, so only the
    # centre term and the distance bias survive
    return FieldBatch(np.zeros((1, m_max), dtype=np.int64), np.zeros((1, m_max, 3)),
                      np.zeros((1, m_max)), np.zeros(1, dtype=np.int64))


def _sizes_for(points: np.ndarray, table: np.ndarray, cfg: ModelConfig) -> np.ndarray | None:
    n, k = table.shape
    if cfg.fixed_m is not None:
        return np.full(n, min(cfg.fixed_m, k), dtype=np.int64)
    if k < cfg.m_min:
        return np.full(n, k, dtype=np.int64)
    return None


def stage_fields_many(point_sets: list[np.ndarray], cfg: ModelConfig) -> list[FieldBatch]:
    """Receptive fields for several clouds; eigen-analysis is batched across them."""
    tables = [SpatialIndex(PointCloud(p)).knn_table(cfg.m_max) if p.shape[0] > 1 else None
              for p in point_sets]
    sizes = [None if t is None else _sizes_for(p, t, cfg) for p, t in zip(point_sets, tables)]
    todo = [i for i, m in enumerate(sizes) if m is None and tables[i] is not None]
    if todo:
        # group by table width so every group stacks into one array
        by_width: dict[int, list[int]] = {}
        for i in todo:
            by_width.setdefault(tables[i].shape[1], []).append(i)
        for group in by_width.values():
            pts = np.concatenate([point_sets[i] for i in group])
            offsets = np.cumsum([0] + [point_sets[i].shape[0] for i in group])
            table = np.concatenate([tables[i] + off for i, off in zip(group, offsets)])
            m, _ = optimal_sizes_from_table(pts, table, cfg.adaptive)
            for i, lo, hi in zip(group, offsets[:-1], offsets[1:]):
                sizes[i] = m[lo:hi]
    return [_lone_point_fields(cfg.m_max) if t is None else fields_from_table(p, t, m, cfg.m_max)
            for p, t, m in zip(point_sets, tables, sizes)]


def stage_fields(points: np.ndarray, cfg: ModelConfig) -> FieldBatch:
    """Receptive fields for one conv stage: k-NN once, then per-point M."""
    return stage_fields_many([points], cfg)[0]


def merge_fields(fields: list[FieldBatch]) -> FieldBatch:
    offsets = np.cumsum([0] + [len(f) for f in fields[:-1]])
    return FieldBatch(
        np.concatenate([f.neighbor_indices + off for f, off in zip(fields, offsets)]),
        np.concatenate([f.directions for f in fields]),
        np.concatenate([f.distances for f in fields]),
        np.concatenate([f.valid_count for f in fields]))


def pool_seed(seed: int, stage: int, epoch: int) -> list[int]:
    return [int(seed), int(stage), int(epoch)]


def _select_keep(ids, n, cfg, stage, epoch, keep_ids):
    if keep_ids is None:
        return sc.pool_keep(n, cfg.pool_rate, pool_seed(cfg.seed, stage, epoch))
    wanted = np.asarray(sorted(keep_ids[stage]), dtype=np.int64)
    return np.flatnonzero(np.isin(ids, wanted))


@dataclass
class ForwardTrace:
    kept_ids: list[np.ndarray] = field(default_factory=list)
    sizes: list[int] = field(default_factory=list)
    m_star: list[np.ndarray] = field(default_factory=list)


def forward_cloud(model: Model, cloud: PointCloud, *, epoch: int = EVAL_EPOCH, keep_ids=None,
                  point_ids=None, trace: ForwardTrace | None = None,
                  first_fields: FieldBatch | None = None) -> np.ndarray:
    """Class logits for one cloud (numpy path).

    ``keep_ids`` fixes each pool stage's surviving points by their original
    ids (``point_ids``, default ``0..N-1``) instead of drawing them at random.
    """
    cfg = model.config
    _check_input(cloud, cfg)
    points = cloud.points
    ids = np.arange(len(cloud)) if point_ids is None else np.asarray(point_ids)
    feats = np.ones((len(cloud), 1))
    conv_i = pool_i = 0
    fields = None
    for op in cfg.layout:
        if op == "C":
            if conv_i == 0 and first_fields is not None:
                fields = first_fields
            else:
                fields = stage_fields(points, cfg)
            if trace is not None:
                trace.sizes.append(points.shape[0])
                trace.m_star.append(fields.valid_count.copy())
            feats = sc.str_conv_layer(PointCloud(points), feats, fields, model.conv_layer(conv_i))
            conv_i += 1
        else:
            keep = _select_keep(ids, points.shape[0], cfg, pool_i, epoch, keep_ids)
            feats = sc.neighbourhood_max(feats, fields)[keep]
            points, ids = points[keep], ids[keep]
            if trace is not None:
                trace.kept_ids.append(ids.copy())
            pool_i += 1
    g = sc.global_max_aggregate(feats)
    p = model.params
    h = np.maximum(g @ p["head.w1"] + p["head.b1"], 0.0)
    return h @ p["head.w2"] + p["head.b2"]


def _conv_on_tape(tape: Tape, nodes: dict, pre: str, feats, fields: FieldBatch, mode: str):
    j, s, d = nodes[pre + "support_w"].shape
    n = len(fields)
    w_t = tape.transpose(tape.reshape(nodes[pre + "support_w"], (j * s, d)))
    best = tape.match_max(tape.matmul(feats, w_t), fields.neighbor_indices, fields.directions,
                          tape.reshape(nodes[pre + "support_dirs"], (j * s, 3)))
    per_kernel = tape.sum(tape.reshape(best, (n, j, s)), axis=2)
    dir_out = tape.add(tape.matmul(feats, tape.transpose(nodes[pre + "center_w"])), per_kernel)
    far = fields.max_distances()[:, None, None]
    dist_out = tape.add(nodes[pre + "dist_b"],
                        tape.sum(tape.mul(tape.const(far), tape.reshape(nodes[pre + "dist_w"], (1, j, s))),
                                 axis=2))
    if mode == "sum":
        return tape.add(dir_out, dist_out)
    x = tape.concat([dir_out, dist_out], axis=1) if mode == "str" else dir_out
    hidden = tape.relu(tape.affine(x, nodes[pre + "mlp_w1"], nodes[pre + "mlp_b1"]))
    return tape.affine(hidden, nodes[pre + "mlp_w2"], nodes[pre + "mlp_b2"])


def forward_tape(model: Model, clouds, tape: Tape, *, epoch: int = EVAL_EPOCH, keep_ids=None,
                 point_ids=None, first_fields=None):
    """Record the forward pass of one cloud or a list of clouds on ``tape``.

    The clouds are stacked into one point set with block-wise neighbour
    indices; pooling and the global max stay per cloud. Returns a ``(C,)``
    logits node for a single cloud, ``(B, C)`` for a list. ``keep_ids`` and
    ``point_ids`` apply to the single-cloud form only.
    """
    single = isinstance(clouds, PointCloud)
    clouds = [clouds] if single else list(clouds)
    if not single and (keep_ids is not None or point_ids is not None):
        raise ConfigError("keep_ids/point_ids need a single cloud")
    if first_fields is not None and single and isinstance(first_fields, FieldBatch):
        first_fields = [first_fields]
    cfg = model.config
    for cloud in clouds:
        _check_input(cloud, cfg)
    nodes = {name: tape.param(name, value) for name, value in model.params.values.items()}
    pts = [c.points for c in clouds]
    ids = [np.arange(len(c)) if point_ids is None else np.asarray(point_ids) for c in clouds]
    feats = tape.const(np.ones((sum(len(c) for c in clouds), 1)))
    conv_i = pool_i = 0
    merged = None
    for op in cfg.layout:
        if op == "C":
            if conv_i == 0 and first_fields is not None:
                fields = list(first_fields)
            else:
                fields = stage_fields_many(pts, cfg)
            merged = merge_fields(fields)
            feats = _conv_on_tape(tape, nodes, f"conv{conv_i}.", feats, merged, cfg.mode)
            conv_i += 1
        else:
            window = np.concatenate([np.arange(len(merged))[:, None], merged.neighbor_indices], axis=1)
            pooled = tape.gather_max(feats, window)
            keeps, offset = [], 0
            for b in range(len(clouds)):
                k = _select_keep(ids[b], pts[b].shape[0], cfg, pool_i, epoch, keep_ids)
                keeps.append(k + offset)
                offset += pts[b].shape[0]
                pts[b], ids[b] = pts[b][k], ids[b][k]
            feats = tape.gather(pooled, np.concatenate(keeps))
            pool_i += 1
    counts = [p.shape[0] for p in pts]
    starts = np.cumsum([0] + counts[:-1])
    width = max(counts)
    segment = np.array([[st + min(i, c - 1) for i in range(width)] for st, c in zip(starts, counts)])
    g = tape.gather_max(feats, segment)
    h = tape.relu(tape.affine(g, nodes["head.w1"], nodes["head.b1"]))
    logits = tape.affine(h, nodes["head.w2"], nodes["head.b2"])
    return tape.reshape(logits, (-1,)) if single else logits


def batch_loss(tape: Tape, logits, labels) -> "Node":
    """Mean cross-entropy of a ``(B, C)`` logits node."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = tape.pick(tape.log_softmax(logits), (np.arange(labels.size), labels))
    return tape.mul(tape.sum(picked), -1.0 / labels.size)


def loss_and_grads(model: Model, clouds, labels, **kw):
    """Mean loss, logits and parameter gradients for one cloud or a batch."""
    tape = Tape()
    if isinstance(clouds, PointCloud):
        clouds, labels = [clouds], [labels]
        ff = kw.get("first_fields")
        if isinstance(ff, FieldBatch):
            kw["first_fields"] = [ff]
    logits = forward_tape(model, clouds, tape, **kw)
    loss = batch_loss(tape, logits, labels)
    return float(loss.value), logits.value, tape.backward(loss)


def predict(logits) -> int:
    return int(np.argmax(logits))


# ---------------------------------------------------------------------------
# training


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    vary_pool: bool = True
    schedule: str = "cosine"

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0 or self.batch_size < 1:
            raise ConfigError("need lr >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int, epochs: int) -> float:
        """Learning rate for a 1-based epoch; cosine decays to zero over the run."""
        if self.schedule == "constant" or epochs <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / epochs))

    def step(self, params: ParamStore, lr: float | None = None):
        lr = self.lr if lr is None else lr
        if self.name == "adam":
            adam_step(params, lr, self.beta1, self.beta2, self.eps)
        else:
            sgd_step(params, lr)


def train(model: Model, train_set: Dataset, epochs: int, optim: OptimConfig | None = None,
          seed: int = 0, log_fh=None, on_epoch=None) -> list[dict]:
    """Mini-batch training with cross-entropy loss; returns one record per epoch.

    Shuffling follows ``seed``. Pool subsets follow the model seed and, when
    ``optim.vary_pool`` is set, the epoch number. ``log_fh`` receives the
    records as JSON lines.
    """
    optim = optim or OptimConfig()
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    if train_set.num_classes != model.config.num_classes:
        raise ConfigError("dataset class count does not match the model")
    cfg = model.config
    first = {}
    records = []
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([int(seed), epoch]).permutation(len(train_set))
        pool_epoch = epoch if optim.vary_pool else 1
        lr = optim.lr_at(epoch, epochs)
        total_loss, correct, seen, skipped = 0.0, 0, 0, 0
        for start in range(0, len(order), optim.batch_size):
            batch = []
            for i in order[start:start + optim.batch_size]:
                item = train_set.items[i]
                if i not in first:
                    try:
                        _check_input(item.cloud, cfg)
                        first[i] = stage_fields(item.cloud.points, cfg)
                    except DegenerateCloud as exc:
                        log.warning("skipping item %d: %s", i, exc)
                        first[i] = None
                if first[i] is None:
                    skipped += 1
                    continue
                batch.append(i)
            if not batch:
                continue
            clouds = [train_set.items[i].cloud for i in batch]
            labels = [train_set.items[i].label for i in batch]
            loss, logits, grads = loss_and_grads(model, clouds, labels, epoch=pool_epoch,
                                                 first_fields=[first[i] for i in batch])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            model.params.zero_grad()
            model.params.accumulate(grads)
            optim.step(model.params, lr)
            total_loss += loss * len(batch)
            correct += int(np.sum(np.argmax(logits, axis=1) == np.asarray(labels)))
            seen += len(batch)
        rec = {"epoch": epoch, "loss": total_loss / max(seen, 1),
               "train_acc": 100.0 * correct / max(seen, 1)}
        if skipped:
            rec["skipped"] = skipped
        records.append(rec)
        log.info("epoch %d loss %.4f acc %.1f", epoch, rec["loss"], rec["train_acc"])
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()
        if on_epoch is not None:
            on_epoch(rec)
    return records


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Accuracy:
    correct: int
    total: int

    @property
    def percent(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0


@dataclass
class EvalResult:
    accuracy: Accuracy
    confusion: np.ndarray
    predictions: list[int]
    skipped: int = 0

    def to_dict(self, class_names=None) -> dict:
        return {"accuracy": self.accuracy.percent, "correct": self.accuracy.correct,
                "total": self.accuracy.total, "confusion": self.confusion.tolist(),
                "skipped": self.skipped, "class_names": list(class_names or [])}


def evaluate(model: Model, test_set: Dataset, workers: int = 1) -> EvalResult:
    """Accuracy and confusion matrix (rows truth, columns prediction).

    Clouds too small for the network count as wrong and are tallied in ``skipped``.
    """
    c = model.config.num_classes

    def one(item):
        try:
            return predict(forward_cloud(model, item.cloud))
        except DegenerateCloud:
            return -1

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, test_set.items))
    else:
        preds = [one(item) for item in test_set.items]
    confusion = np.zeros((c, c), dtype=np.int64)
    correct = skipped = 0
    for item, p in zip(test_set.items, preds):
        if p < 0:
            skipped += 1
            continue
        confusion[item.label, p] += 1
        correct += int(p == item.label)
    return EvalResult(Accuracy(correct, len(test_set)), confusion, preds, skipped)


# ---------------------------------------------------------------------------
# model files
#
#   b"ASCN" | u32 version | u64 config length | canonical JSON config
#   | little-endian float64 parameters in declared order | u64 checksum
# The checksum is an 8-byte BLAKE2b digest of everything before it.


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_bytes(model: Model) -> bytes:
    header = {"config": model.config.to_dict(),
              "params": [[name, list(v.shape)] for name, v in model.params.values.items()]}
    blob = _canonical(header)
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                       for v in model.params.values.values())
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + payload
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def model_from_bytes(data: bytes) -> Model:
    if len(data) < 24 or data[:4] != MAGIC:
        raise CorruptModel("not an ASCN model file")
    version, blob_len = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"model format version {version}, expected {FORMAT_VERSION}")
    body, digest = data[:-8], data[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CorruptModel("checksum mismatch (truncated or modified file)")
    try:
        header = json.loads(body[16:16 + blob_len].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptModel(f"bad config block: {exc}") from None
    model = build_model(cfg)
    offset = 16 + blob_len
    declared = [(name, tuple(shape)) for name, shape in header["params"]]
    expected = [(name, v.shape) for name, v in model.params.values.items()]
    if declared != expected:
        raise CorruptModel("parameter manifest does not match the config")
    for name, shape in declared:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(body):
            raise CorruptModel("parameter payload truncated")
        model.params.values[name][...] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape)
        offset = end
    if offset != len(body):
        raise CorruptModel("trailing bytes after parameter payload")
    return model


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
