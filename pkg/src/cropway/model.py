"""Two-head waypoint network: shared backbone, estimation head and clustering head.

Also holds target encoding, both training losses, checkpoint (de)serialization and
the two-phase training loop.
"""
import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from cropway.autograd import (
    DEFAULT_DTYPE,
    Adam,
    DiffTensor,
    Function,
    activation,
    backward,
    concat,
    conv2d,
    conv2d_transpose,
    dense,
    no_grad,
    reduce,
)
from cropway.config import derive_seed
from cropway.errors import CheckpointError, ClusteringError, ConfigError, DatasetError, ShapeError, TargetError
from cropway.fieldgen import Sample, WaypointSet

__all__ = [
    "GROUPS",
    "PHASES",
    "ModelConfig",
    "Model",
    "TrainConfig",
    "LossHistory",
    "build_model",
    "forward",
    "build_target",
    "decode_target",
    "estimation_loss",
    "clustering_loss",
    "cosine_sim",
    "save_checkpoint",
    "load_checkpoint",
    "train",
]

logger = logging.getLogger(__name__)

GROUPS = ("backbone", "estimation", "clustering")
PHASES = ("estimation", "clustering", "both")

MAGIC = b"CWAY"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    reduction_modules: int = 2
    channels: int = 16
    kernel_size: int = 5
    latent_dim: int = 3

    @property
    def compression(self) -> int:
        """Cell size K of the output maps."""
        return int(2 ** (self.reduction_modules + 1))

    def validate(self) -> "ModelConfig":
        if self.reduction_modules < 0:
            raise ConfigError(f"reduction_modules must be >= 0, got {self.reduction_modules}")
        if self.channels < 2:
            raise ConfigError(f"channels must be >= 2, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd number, got {self.kernel_size}")
        if self.latent_dim < 2:
            raise ConfigError(f"latent_dim must be >= 2, got {self.latent_dim}")
        return self


def _parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) of every parameter in initialization order."""
    k, c, d = config.kernel_size, config.channels, config.latent_dim
    hidden = max(1, c // 2)
    layout: List[Tuple[str, Tuple[int, ...], int]] = []

    def conv(name: str, c_in: int, c_out: int, size: int = k) -> None:
        layout.append((f"{name}/kernel", (size, size, c_in, c_out), size * size * c_in))
        layout.append((f"{name}/bias", (c_out,), size * size * c_in))

    def linear(name: str, n_in: int, n_out: int) -> None:
        layout.append((f"{name}/weights", (n_in, n_out), n_in))
        layout.append((f"{name}/bias", (n_out,), n_in))

    conv("backbone/stem", 1, c)
    for i in range(config.reduction_modules):
        conv(f"backbone/res{i}/conv", c, c)
        linear(f"backbone/res{i}/channel_attention/hidden", c, hidden)
        linear(f"backbone/res{i}/channel_attention/output", hidden, c)
        conv(f"backbone/res{i}/spatial_attention", 2, 1)
        conv(f"backbone/reduce{i}", c, c)
    conv("backbone/down", c, c)
    conv("backbone/bottleneck", c, c)
    conv("backbone/up", c, c)
    conv("estimation/output", c, 3, size=1)
    conv("clustering/conv0", c, c)
    conv("clustering/conv1", c, c)
    conv("clustering/latent", c, d, size=1)
    return layout


def _as_batch(grid: Any, dtype: Any) -> np.ndarray:
    """H×W, N×H×W or N×H×W×1 grid into an N×H×W×1 float array."""
    array = np.asarray(grid)
    if array.ndim == 2:
        array = array[None, :, :, None]
    elif array.ndim == 3:
        array = array[:, :, :, None]
    elif array.ndim != 4 or array.shape[3] != 1:
        raise ShapeError(f"grid must be H×W, N×H×W or N×H×W×1, got shape {array.shape}")
    return array.astype(dtype, copy=False)


class Model:
    """Named parameter tensors plus the network they define.

    Parameter names are prefixed with their group (``backbone/``, ``estimation/``,
    ``clustering/``); freezing a group turns off ``requires_grad`` on its tensors.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, DiffTensor]) -> None:
        self.config = config
        self.params = params
        self.frozen: Dict[str, bool] = {group: False for group in GROUPS}

    @property
    def compression(self) -> int:
        return self.config.compression

    @property
    def dtype(self) -> Any:
        return next(iter(self.params.values())).dtype

    def parameters(self, group: Optional[str] = None) -> Dict[str, DiffTensor]:
        if group is None:
            return dict(self.params)
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}, expected one of {GROUPS}")
        return {name: p for name, p in self.params.items() if name.startswith(group + "/")}

    def trainable(self) -> Dict[str, DiffTensor]:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def num_parameters(self, trainable_only: bool = True) -> int:
        tensors = self.trainable() if trainable_only else self.params
        return int(sum(p.data.size for p in tensors.values()))

    def freeze(self, group: str) -> None:
        for param in self.parameters(group).values():
            param.requires_grad = False
            param.grad = None
        self.frozen[group] = True

    def unfreeze(self, group: str) -> None:
        for param in self.parameters(group).values():
            param.requires_grad = True
        self.frozen[group] = False

    def _conv(self, x: DiffTensor, name: str, stride: int = 1) -> DiffTensor:
        return conv2d(x, self.params[f"{name}/kernel"], self.params[f"{name}/bias"], stride=stride)

    def _mlp(self, pooled: DiffTensor, prefix: str) -> DiffTensor:
        p = self.params
        hidden = activation(
            dense(pooled, p[f"{prefix}/hidden/weights"], p[f"{prefix}/hidden/bias"]),
            "relu",
        )
        return dense(hidden, p[f"{prefix}/output/weights"], p[f"{prefix}/output/bias"])

    def _channel_attention(self, x: DiffTensor, prefix: str) -> DiffTensor:
        avg = reduce(x, "mean", axes=(1, 2), keepdims=True)
        peak = reduce(x, "max", axes=(1, 2), keepdims=True)
        weights = activation(self._mlp(avg, prefix) + self._mlp(peak, prefix), "sigmoid")
        return x * weights

    def _spatial_attention(self, x: DiffTensor, name: str) -> DiffTensor:
        stacked = concat(
            [reduce(x, "mean", axes=3, keepdims=True), reduce(x, "max", axes=3, keepdims=True)],
            axis=3,
        )
        return x * activation(self._conv(stacked, name), "sigmoid")

    def _residual_module(self, x: DiffTensor, index: int) -> DiffTensor:
        prefix = f"backbone/res{index}"
        y = activation(self._conv(x, f"{prefix}/conv"), "mish")
        y = self._channel_attention(y, f"{prefix}/channel_attention")
        y = self._spatial_attention(y, f"{prefix}/spatial_attention")
        return x + y

    def features(self, grid: Any) -> DiffTensor:
        """Backbone features at (H/K)×(W/K)×C."""
        x = DiffTensor(_as_batch(grid, self.dtype))
        k = self.compression
        h, w = x.shape[1:3]
        if h % k or w % k:
            pad_h, pad_w = -h % k, -w % k
            raise ConfigError(
                f"input {h}×{w} is not divisible by K={k}; pad the grid by {pad_h} rows and {pad_w} columns"
            )
        x = activation(self._conv(x, "backbone/stem"), "mish")
        for i in range(self.config.reduction_modules):
            x = self._residual_module(x, i)
            x = activation(self._conv(x, f"backbone/reduce{i}", stride=2), "mish")
        down = activation(self._conv(x, "backbone/down", stride=2), "mish")
        inner = activation(self._conv(down, "backbone/bottleneck", stride=2), "mish")
        up = conv2d_transpose(
            inner,
            self.params["backbone/up/kernel"],
            self.params["backbone/up/bias"],
            stride=2,
            output_size=(down.shape[1], down.shape[2]),
        )
        return down + activation(up, "mish")

    def estimate(self, features: DiffTensor) -> DiffTensor:
        """Estimation head: channel 0 is p̂ in (0, 1), channels 1-2 are Δ̂ in (-1, 1)."""
        raw = self._conv(features, "estimation/output")
        return concat([activation(raw[..., 0:1], "sigmoid"), activation(raw[..., 1:3], "tanh")], axis=-1)

    def embed(self, features: DiffTensor) -> DiffTensor:
        """Clustering head: linear latent map with D channels."""
        x = activation(self._conv(features, "clustering/conv0"), "mish")
        x = activation(self._conv(x, "clustering/conv1"), "mish")
        return self._conv(x, "clustering/latent")

    def __call__(self, grid: Any) -> Tuple[DiffTensor, DiffTensor]:
        shared = self.features(grid)
        return self.estimate(shared), self.embed(shared)


def build_model(config: Optional[ModelConfig] = None, seed: int = 0, dtype: Any = DEFAULT_DTYPE) -> Model:
    """Fan-in scaled uniform weights drawn in layout order, zero biases."""
    config = (config or ModelConfig()).validate()
    rng = np.random.default_rng(derive_seed(seed, "init"))
    params: Dict[str, DiffTensor] = {}
    for name, shape, fan_in in _parameter_layout(config):
        if name.endswith("/bias"):
            value = np.zeros(shape)
        else:
            bound = np.sqrt(3.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = DiffTensor(value, requires_grad=True, dtype=dtype)
    model = Model(config, params)
    logger.debug("Built model with %d parameters, K=%d", model.num_parameters(), config.compression)
    return model


def forward(model: Model, grid: Any) -> Tuple[np.ndarray, np.ndarray]:
    """Estimation map (h×w×3) and latent map (h×w×D) for a single H×W grid."""
    with no_grad():
        est, latent = model(grid)
    if est.shape[0] != 1:
        raise ShapeError(f"forward expects a single grid, got a batch of {est.shape[0]}")
    return est.data[0], latent.data[0]


# Targets


def build_target(waypoints: WaypointSet, height: int, width: int, k: int) -> np.ndarray:
    """Encode waypoints as an (H/K)×(W/K)×3 grid of (p, Δx, Δy)."""
    if height % k or width % k:
        raise ConfigError(f"image {height}×{width} is not divisible by K={k}")
    target = np.zeros((height // k, width // k, 3))
    half = k / 2
    for x, y in np.asarray(waypoints.points, dtype=np.float64).reshape(-1, 2):
        if not (0 <= x < width and 0 <= y < height):
            raise TargetError(f"waypoint ({x:.2f}, {y:.2f}) lies outside the {width}×{height} image")
        col, row = int(x // k), int(y // k)
        if target[row, col, 0]:
            raise TargetError(f"two waypoints fall in cell (row {row}, col {col}); second one at ({x:.2f}, {y:.2f})")
        target[row, col] = (1.0, (x - col * k - half) / half, (y - row * k - half) / half)
    return target


def decode_target(target: np.ndarray, k: int, threshold: float = 0.5) -> np.ndarray:
    """Waypoint coordinates (M×2, row-major cell order) of the cells with p above ``threshold``."""
    rows, cols = np.nonzero(target[..., 0] > threshold)
    half = k / 2
    x = cols * k + half + target[rows, cols, 1] * half
    y = rows * k + half + target[rows, cols, 2] * half
    return np.stack([x, y], axis=1)


# Losses


def estimation_loss(pred: DiffTensor, target: np.ndarray, lam: float = 0.7) -> DiffTensor:
    """Weighted squared error: λ on waypoint cells, 1-λ elsewhere, averaged over cells and batch."""
    if not 0 < lam < 1:
        raise ConfigError(f"lam must lie in (0, 1), got {lam}")
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - DiffTensor(target, dtype=pred.dtype)
    per_cell = reduce(diff * diff, "sum", axes=-1)
    weights = np.where(target[..., 0] > 0.5, lam, 1.0 - lam)
    return reduce(per_cell * DiffTensor(weights, dtype=pred.dtype), "mean")


class _ContrastiveLoss(Function):
    def forward(self, features: np.ndarray, labels: Any = None) -> np.ndarray:  # type: ignore[override]
        labels = np.asarray(labels)
        m = len(labels)
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ClusteringError("cannot compare zero-norm latent features")
        units = features / norms
        sim = units @ units.T
        same = labels[:, None] == labels[None, :]
        pair = np.where(same, np.logaddexp(0, -sim), np.logaddexp(0, sim))
        np.fill_diagonal(pair, 0)
        self.norms, self.units, self.sim, self.same, self.m = norms, units, sim, same, m
        return np.asarray(pair.sum() / (m * (m - 1)), dtype=features.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        dsim = (expit(self.sim) - self.same) * (grad / (self.m * (self.m - 1)))
        np.fill_diagonal(dsim, 0)
        dunits = (dsim + dsim.T) @ self.units
        radial = np.sum(self.units * dunits, axis=1, keepdims=True)
        return ((dunits - self.units * radial) / self.norms,)


def clustering_loss(features: DiffTensor, labels: Any) -> DiffTensor:
    """Binary cross-entropy of sigmoid(cosine similarity) against the same-cluster indicator.

    Averaged over every ordered pair of distinct points.
    """
    labels = np.asarray(labels).reshape(-1)
    if features.ndim != 2 or features.shape[0] != labels.size:
        raise ShapeError(f"features must be M×D with M={labels.size}, got shape {features.shape}")
    if labels.size < 2:
        raise ClusteringError(f"clustering loss needs at least 2 points, got {labels.size}")
    if np.unique(labels).size < 2:
        raise ClusteringError("clustering loss needs points from both clusters")
    return _ContrastiveLoss.apply(features, labels=labels)


def cosine_sim(u: Any, v: Any) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ClusteringError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


# Checkpoints


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    """Little-endian binary dump of the config block and every named parameter as float32."""
    path = Path(path)
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<5I", FORMAT_VERSION, cfg.reduction_modules, cfg.channels, cfg.kernel_size, cfg.latent_dim))
    buf.write(struct.pack("<I", len(model.params)))
    for name, param in model.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", param.ndim))
        buf.write(struct.pack(f"<{param.ndim}I", *param.shape))
        buf.write(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data, self.pos, self.path = data, 0, path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file (needed {size} bytes at offset {self.pos})")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u32(self, count: int = 1) -> Tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_checkpoint(path: Union[str, Path]) -> Model:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            reader = _Reader(f.read(), path)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a cropway checkpoint (bad magic)")
    (version,) = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    r, c, k, d = reader.u32(4)
    try:
        model = build_model(ModelConfig(r, c, k, d))
    except ConfigError as e:
        raise CheckpointError(f"{path}: invalid config block: {e}") from e

    (count,) = reader.u32()
    seen = set()
    for _ in range(count):
        (name_len,) = reader.u32()
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: tensor name is not valid UTF-8") from e
        (rank,) = reader.u32()
        dims = reader.u32(rank) if rank else ()
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        expected = model.params[name].shape
        if tuple(dims) != expected:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tuple(dims)}, model expects {expected}")
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims)
        model.params[name].data = values.astype(np.float32)
        seen.add(name)
    missing = sorted(set(model.params) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: {len(reader.data) - reader.pos} trailing bytes after the last tensor")
    return model


# Training


@dataclass
class TrainConfig:
    lam: float = 0.7
    lr: float = 3e-4
    batch_size: int = 16
    epochs: int = 60
    phase: str = "both"
    seed: int = 0
    count_limit: Optional[int] = None

    def validate(self) -> "TrainConfig":
        if not 0 < self.lam < 1:
            raise ConfigError(f"lam must lie in (0, 1), got {self.lam}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.count_limit is not None and self.count_limit < 1:
            raise ConfigError(f"count_limit must be >= 1, got {self.count_limit}")
        return self


@dataclass
class LossHistory:
    """Mean training loss per epoch, one list per phase."""

    estimation: List[float] = field(default_factory=list)
    clustering: List[float] = field(default_factory=list)

    def rows(self) -> List[Tuple[str, int, float]]:
        out = [("estimation", i + 1, v) for i, v in enumerate(self.estimation)]
        out += [("clustering", i + 1, v) for i, v in enumerate(self.clustering)]
        return out

    def to_csv(self, path: Union[str, Path], run_config: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            if run_config is not None:
                f.write(f"# run_config: {json.dumps(run_config, sort_keys=True)}\n")
            writer = csv.writer(f)
            writer.writerow(["phase", "epoch", "loss"])
            for phase, epoch, loss in self.rows():
                writer.writerow([phase, epoch, repr(float(loss))])
        return path


def _configure_phase(model: Model, phase: str) -> None:
    if phase == "estimation":
        model.unfreeze("backbone")
        model.unfreeze("estimation")
        model.freeze("clustering")
    else:
        model.freeze("backbone")
        model.freeze("estimation")
        model.unfreeze("clustering")


def _clusterable(sample: Sample) -> bool:
    labels = np.asarray(sample.waypoints.labels)
    return labels.size >= 2 and np.unique(labels).size == 2


def _sample_loss(model: Model, sample: Sample, target: np.ndarray, phase: str, lam: float) -> DiffTensor:
    shared = model.features(sample.grid)
    if phase == "estimation":
        return estimation_loss(model.estimate(shared)[0], target, lam)
    latent = model.embed(shared)[0]
    k = model.compression
    cells = np.floor(np.asarray(sample.waypoints.points) / k).astype(int)
    gathered = latent[cells[:, 1], cells[:, 0]]
    return clustering_loss(gathered, sample.waypoints.labels)


def train(model: Model, dataset: Sequence[Sample], config: Optional[TrainConfig] = None) -> Tuple[Model, LossHistory]:
    """Estimation phase on backbone + estimation head, then clustering phase on the clustering head alone.

    Within a batch each image runs its own forward/backward pass and gradients are
    summed in batch order before one Adam step.
    """
    config = (config or TrainConfig()).validate()
    samples = list(dataset)
    if config.count_limit is not None:
        samples = samples[: config.count_limit]
    if not samples:
        raise DatasetError("cannot train on an empty dataset")

    k = model.compression
    targets = [build_target(s.waypoints, s.grid.shape[0], s.grid.shape[1], k) for s in samples]
    rng = np.random.default_rng(derive_seed(config.seed, "batching"))
    phases = ["estimation", "clustering"] if config.phase == "both" else [config.phase]
    history = LossHistory()

    for phase in phases:
        _configure_phase(model, phase)
        usable = list(range(len(samples)))
        if phase == "clustering":
            usable = [i for i in usable if _clusterable(samples[i])]
            skipped = len(samples) - len(usable)
            if skipped:
                logger.warning("Skipping %d images with fewer than two clusters in the clustering phase", skipped)
            if not usable:
                raise DatasetError("no image has waypoints from both clusters, cannot train the clustering head")
        optimizer = Adam(model.trainable(), lr=config.lr)
        losses = history.estimation if phase == "estimation" else history.clustering
        logger.info(
            "Training %s phase: %d images, %d epochs, %d trainable parameters",
            phase,
            len(usable),
            config.epochs,
            model.num_parameters(),
        )
        for epoch in range(config.epochs):
            order = rng.permutation(usable)
            batch_losses = []
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                optimizer.zero_grad()
                total = 0.0
                for i in batch:
                    loss = _sample_loss(model, samples[i], targets[i], phase, config.lam)
                    backward(loss * (1.0 / len(batch)))
                    total += loss.item()
                optimizer.step()
                batch_losses.append(total / len(batch))
                logger.debug(
                    "%s epoch %d batch %d loss %.6f", phase, epoch + 1, start // config.batch_size, total / len(batch)
                )
            losses.append(float(np.mean(batch_losses)))
            logger.info("%s epoch %d/%d loss %.6f", phase, epoch + 1, config.epochs, losses[-1])

    for group in GROUPS:
        model.unfreeze(group)
    return model, history
