"""Range-regression networks on CIR magnitudes: build, train, predict.

Three variants share one parameter dict layout:

* ``proposed``: embedding -> LSTM -> dense(128) -> dense(1)
* ``baseline``: dense(128) -> dense(1) on the normalized magnitude vector
* ``complex``: embedding -> GRU -> LSTM -> dense(128) -> dense(128) -> dense(1)

Every dense layer is followed by ReLU. Networks regress a min-max
normalized range; the model object carries the affine map back to meters.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .iqfile import atomic_write_text
from .nn import init

VARIANTS = ("proposed", "baseline", "complex")
FRONT_ENDS = ("embed", "dense")
PREDICT_BLOCK = 64
TRAIN_RECORD_HEADER = ("epoch", "train_rmse_m", "val_rmse_m")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss {loss})")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# Inputs


def normalization_scale(magnitudes, percentile: float = 99.9) -> float:
    """Global magnitude scale used by :func:`quantize_cir`; 1.0 for an all-zero set."""
    m = np.asarray(magnitudes, dtype=float)
    if m.size and m.min() < 0:
        raise ValueError("CIR magnitudes must be non-negative")
    s = float(np.percentile(m, percentile)) if m.size else 0.0
    return s if s > 0 else 1.0


def normalize_cir(magnitudes, scale: float) -> np.ndarray:
    m = np.asarray(magnitudes, dtype=float)
    if m.size and m.min() < 0:
        raise ValueError("CIR magnitudes must be non-negative")
    return np.clip(m / scale, 0.0, 1.0)


def quantize_cir(magnitudes, levels: int = 256, scale: float | None = None) -> np.ndarray:
    """Uniform quantization of CIR magnitudes to integer tokens in ``[0, levels)``.

    ``scale`` defaults to the 99.9th percentile of ``magnitudes`` themselves;
    pass the dataset-wide value to quantize individual samples consistently.
    """
    if levels < 2:
        raise ValueError("need at least two quantization levels")
    m = np.asarray(magnitudes, dtype=float)
    if scale is None:
        scale = normalization_scale(m)
    return np.floor(normalize_cir(m, scale) * (levels - 1)).astype(np.int64)


# ---------------------------------------------------------------------------
# Model


@dataclass
class ModelSpec:
    variant: str = "proposed"
    vocab_size: int = 256
    embed_dim: int = 128
    lstm_hidden: int = 128
    dense_dims: tuple = (128, 1)
    dropout_rate: float | None = None
    input_length: int = 100
    front_end: str = "embed"

    def __post_init__(self):
        self.dense_dims = tuple(int(d) for d in self.dense_dims)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.front_end not in FRONT_ENDS:
            raise ValueError(f"unknown front end {self.front_end!r}")
        if not self.dense_dims or self.dense_dims[-1] != 1:
            raise ValueError("the last dense layer must have width 1")
        if self.variant == "complex" and len(self.dense_dims) != 3:
            self.dense_dims = (self.dense_dims[0], self.dense_dims[0], 1)
        if self.dropout_rate is not None and not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        for name in ("vocab_size", "embed_dim", "lstm_hidden", "input_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def recurrent(self) -> bool:
        return self.variant != "baseline"

    @property
    def tokenized(self) -> bool:
        return self.recurrent and self.front_end == "embed"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_dims"] = list(self.dense_dims)
        return d


class RangingModel:
    """Parameters plus the fixed input/target normalization of one network."""

    def __init__(self, spec: ModelSpec, params: dict, cir_scale: float = 1.0,
                 target_offset: float = 0.0, target_scale: float = 1.0):
        self.spec = spec
        self.params = params
        self.cir_scale = cir_scale
        self.target_offset = target_offset
        self.target_scale = target_scale

    # -- structure ---------------------------------------------------------

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def manifest(self) -> dict:
        return {k: list(v.shape) for k, v in self.params.items()}

    def _dense_names(self) -> list[str]:
        return [f"dense{i + 1}" for i in range(len(self.spec.dense_dims))]

    # -- inputs ------------------------------------------------------------

    def encode(self, magnitudes) -> np.ndarray:
        """Network input for a (N, N_CIR) magnitude array."""
        m = np.asarray(magnitudes, dtype=float)
        if m.ndim != 2 or m.shape[1] != self.spec.input_length:
            raise nn.ShapeError(
                f"expected (N, {self.spec.input_length}) magnitudes, got {m.shape}")
        if self.spec.tokenized:
            return quantize_cir(m, self.spec.vocab_size, self.cir_scale)
        return normalize_cir(m, self.cir_scale)

    def to_meters(self, y) -> np.ndarray:
        return self.target_offset + self.target_scale * np.asarray(y)

    def to_normalized(self, ranges_m) -> np.ndarray:
        return (np.asarray(ranges_m, dtype=float) - self.target_offset) / self.target_scale

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False, rng=None):
        """Normalized predictions ``(B,)`` and a cache for :meth:`backward`."""
        p, spec = self.params, self.spec
        cache: dict = {"x": x}
        if spec.recurrent:
            lstm = nn.LstmParams(p["lstm.w"], p["lstm.u"], p["lstm.b"])
            if spec.variant == "proposed" and spec.front_end == "embed":
                # embedding followed by the input projection is a table lookup
                table = p["embed"] @ lstm.w.reshape(4 * spec.lstm_hidden, -1).T
                xw = nn.embedding_forward(table + lstm.b.reshape(-1), x)
                hs, cache["scan"] = nn.lstm_scan(lstm.u, xw)
                a = hs[:, -1]
            else:
                if spec.front_end == "embed":
                    seq = nn.embedding_forward(p["embed"], x)
                else:
                    seq = x[..., None] * p["proj.w"] + p["proj.b"]
                if spec.variant == "complex":
                    seq, cache["gru"] = nn.gru_forward(
                        nn.GruParams(p["gru.w"], p["gru.u"], p["gru.b"]), seq)
                hs, cache["lstm"] = nn.lstm_forward(lstm, seq)
                a = hs[:, -1]
        else:
            a = np.asarray(x, dtype=float)
        rate = spec.dropout_rate or 0.0
        a, cache["drop"] = nn.dropout(a, rate, rng, training=training and rate > 0)
        cache["acts"] = []
        for name in self._dense_names():
            z = nn.dense_forward(p[name + ".w"], p[name + ".b"], a)
            cache["acts"].append((a, z))
            a = nn.relu_forward(z)
        return a[:, 0], cache

    def backward(self, cache: dict, grad_out: np.ndarray) -> dict:
        p, spec = self.params, self.spec
        grads: dict = {}
        g = np.asarray(grad_out, dtype=float)[:, None]
        for name, (a_in, z) in zip(reversed(self._dense_names()), reversed(cache["acts"])):
            g = nn.relu_backward(z, g)
            grads[name + ".w"], grads[name + ".b"], g = nn.dense_backward(p[name + ".w"], a_in, g)
        g = nn.dropout_backward(cache["drop"], g)
        if spec.recurrent:
            x = cache["x"]
            gh = np.zeros(x.shape[:2] + (spec.lstm_hidden,))
            gh[:, -1] = g
            if "scan" in cache:
                da, grads["lstm.u"], _, _ = nn.lstm_scan_backward(cache["scan"], gh)
                per_token = nn.segment_sum(x, da, spec.vocab_size)
                h4 = 4 * spec.lstm_hidden
                grads["lstm.w"] = (per_token.T @ p["embed"]).reshape(p["lstm.w"].shape)
                grads["lstm.b"] = per_token.sum(axis=0).reshape(p["lstm.b"].shape)
                grads["embed"] = per_token @ p["lstm.w"].reshape(h4, -1)
                return {k: grads[k] for k in p}
            lg, g_seq, _, _ = nn.lstm_backward(cache["lstm"], gh)
            grads["lstm.w"], grads["lstm.u"], grads["lstm.b"] = lg.w, lg.u, lg.b
            if spec.variant == "complex":
                gg, g_seq, _ = nn.gru_backward(cache["gru"], g_seq)
                grads["gru.w"], grads["gru.u"], grads["gru.b"] = gg.w, gg.u, gg.b
            if spec.front_end == "embed":
                grads["embed"] = nn.embedding_backward(p["embed"].shape, x, g_seq)
            else:
                grads["proj.w"] = np.einsum("btd,bt->d", g_seq, x)
                grads["proj.b"] = g_seq.sum(axis=(0, 1))
        return {k: grads[k] for k in p}

    # -- inference ---------------------------------------------------------

    def predict_normalized(self, x: np.ndarray) -> np.ndarray:
        # fixed-size zero-padded blocks keep every matmul the same shape, so a
        # sample's output does not depend on what it is batched with
        n = len(x)
        out = np.empty(n)
        for lo in range(0, n, PREDICT_BLOCK):
            chunk = x[lo:lo + PREDICT_BLOCK]
            k = len(chunk)
            if k < PREDICT_BLOCK:
                pad = np.zeros((PREDICT_BLOCK - k,) + chunk.shape[1:], dtype=chunk.dtype)
                chunk = np.concatenate([chunk, pad])
            out[lo:lo + k] = self.forward(chunk, training=False)[0][:k]
        return out

    # -- persistence -------------------------------------------------------

    def meta(self) -> dict:
        return {"spec": self.spec.to_dict(), "cir_scale": self.cir_scale,
                "target_offset": self.target_offset, "target_scale": self.target_scale}

    def save(self, path) -> Path:
        return nn.save_checkpoint(path, self.params, self.meta())

    @classmethod
    def load(cls, path) -> "RangingModel":
        params, meta = nn.load_checkpoint(path)
        spec = ModelSpec(**meta["spec"])
        model = cls(spec, params, meta["cir_scale"], meta["target_offset"], meta["target_scale"])
        expected = build_model(spec, 0).manifest()
        if model.manifest() != expected:
            raise nn.CheckpointError(f"{path}: tensor layout does not match a {spec.variant} model")
        return model


def build_model(spec: ModelSpec, seed: int = 0) -> RangingModel:
    """Allocate and initialize a network; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    width = spec.input_length
    if spec.recurrent:
        if spec.front_end == "embed":
            p["embed"] = init.embedding_table(rng, spec.vocab_size, spec.embed_dim)
        else:
            p["proj.w"] = init.glorot_uniform(rng, spec.embed_dim, 1).ravel()
            p["proj.b"] = np.zeros(spec.embed_dim)
        d = spec.embed_dim
        if spec.variant == "complex":
            p["gru.w"], p["gru.u"], p["gru.b"] = init.recurrent_params(
                rng, 3, spec.lstm_hidden, d)
            d = spec.lstm_hidden
        p["lstm.w"], p["lstm.u"], p["lstm.b"] = init.recurrent_params(
            rng, 4, spec.lstm_hidden, d, forget_gate=1)
        width = spec.lstm_hidden
    for i, out in enumerate(spec.dense_dims):
        p[f"dense{i + 1}.w"] = init.glorot_uniform(rng, out, width)
        p[f"dense{i + 1}.b"] = np.zeros(out)
        width = out
    return RangingModel(spec, p)


# ---------------------------------------------------------------------------
# Data


@dataclass
class CirDataset:
    magnitudes: np.ndarray  # (N, N_CIR)
    ranges_m: np.ndarray  # (N,)
    frames: np.ndarray  # (N,)

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=float)
        self.ranges_m = np.asarray(self.ranges_m, dtype=float)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        n = len(self.magnitudes)
        if self.magnitudes.ndim != 2 or len(self.ranges_m) != n or len(self.frames) != n:
            raise ValueError("dataset arrays disagree in length")

    def __len__(self) -> int:
        return len(self.ranges_m)

    def subset(self, idx) -> "CirDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return CirDataset(self.magnitudes[idx], self.ranges_m[idx], self.frames[idx])


@dataclass
class TrainConfig:
    fractions: tuple = (0.6, 0.2, 0.2)
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    decay_steps: int = 1000
    decay_rate: float = 0.96
    staircase: bool = False
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    levels: int = 256
    chronological: bool = False
    loss: str = "mse"

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-9 \
                or min(self.fractions) < 0:
            raise ValueError(f"split fractions {self.fractions} must be three values summing to 1")
        if self.loss not in nn.losses.LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def make_optimizer(self):
        if self.optimizer == "adam":
            return nn.Adam(lr=self.learning_rate)
        if self.optimizer in ("sgd-decay", "sgd_decay"):
            return nn.SgdDecay(self.learning_rate, self.decay_steps, self.decay_rate,
                               self.staircase)
        raise ValueError(f"unknown optimizer {self.optimizer!r}; expected adam or sgd-decay")


def split_indices(n: int, fractions=(0.6, 0.2, 0.2), seed: int = 0,
                  chronological: bool = False):
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    order = np.arange(n) if chronological else np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split_dataset(samples: CirDataset, config: TrainConfig | None = None):
    config = config or TrainConfig()
    idx = split_indices(len(samples), config.fractions, config.seed, config.chronological)
    return tuple(samples.subset(i) for i in idx)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainRecord:
    train_rmse_m: list = field(default_factory=list)
    val_rmse_m: list = field(default_factory=list)
    wall_time_s: float = 0.0
    params: dict | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_rmse_m)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAIN_RECORD_HEADER)
        for i, (a, b) in enumerate(zip(self.train_rmse_m, self.val_rmse_m)):
            w.writerow([i + 1, repr(float(a)), repr(float(b))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainRecord":
        rec = cls()
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or tuple(rows[0]) != TRAIN_RECORD_HEADER:
            raise ValueError(f"{path}: not a training record")
        for row in rows[1:]:
            rec.train_rmse_m.append(float(row[1]))
            rec.val_rmse_m.append(float(row[2]))
        return rec


def fit_normalization(model: RangingModel, train: CirDataset, cir_scale: float | None = None):
    """Set input scale and min-max target map from the training split."""
    model.cir_scale = normalization_scale(train.magnitudes) if cir_scale is None else cir_scale
    lo, hi = float(train.ranges_m.min()), float(train.ranges_m.max())
    model.target_offset = lo
    model.target_scale = hi - lo if hi > lo else 1.0
    # start the output unit at the mean label so its ReLU is not dead at step 0
    last = model._dense_names()[-1]
    model.params[last + ".b"][:] = float(np.mean(model.to_normalized(train.ranges_m)))


def train(model: RangingModel, train_set: CirDataset, val_set: CirDataset,
          config: TrainConfig | None = None, *, cir_scale: float | None = None,
          normalize: bool = True, optimizer=None, progress=None) -> TrainRecord:
    """Mini-batch training for ``config.epochs`` epochs; the last epoch's weights are kept.

    Train loss per epoch is the RMSE over that epoch's mini-batch
    predictions (training mode); validation loss is an inference pass.
    """
    config = config or TrainConfig()
    t0 = time.perf_counter()
    record = TrainRecord()
    if config.epochs == 0:
        record.params = {k: v.copy() for k, v in model.params.items()}
        return record
    if normalize:
        fit_normalization(model, train_set, cir_scale)
    opt = optimizer or config.make_optimizer()
    loss_fn = nn.losses.LOSSES[config.loss]
    rng = np.random.default_rng([config.seed, 1])
    x_train = model.encode(train_set.magnitudes)
    y_train = model.to_normalized(train_set.ranges_m)
    x_val = model.encode(val_set.magnitudes) if len(val_set) else None
    n = len(y_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sq = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            pred, cache = model.forward(x_train[idx], training=True, rng=rng)
            loss, grad = loss_fn(pred, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            sq += float(np.sum((pred - y_train[idx]) ** 2))
            opt.step(model.params, model.backward(cache, grad))
        train_rmse = model.target_scale * np.sqrt(sq / n)
        if x_val is not None:
            val_pred = model.to_meters(model.predict_normalized(x_val))
            val_rmse = float(np.sqrt(np.mean((val_pred - val_set.ranges_m) ** 2)))
        else:
            val_rmse = float("nan")
        if not np.isfinite(train_rmse):
            raise TrainingDiverged(epoch, train_rmse)
        record.train_rmse_m.append(float(train_rmse))
        record.val_rmse_m.append(val_rmse)
        if progress:
            progress(epoch, train_rmse, val_rmse)
    record.wall_time_s = time.perf_counter() - t0
    record.params = {k: v.copy() for k, v in model.params.items()}
    return record


def predict(model: RangingModel, samples) -> np.ndarray:
    """Range estimates in meters for a dataset or an (N, N_CIR) magnitude array."""
    mags = samples.magnitudes if isinstance(samples, CirDataset) else samples
    return model.to_meters(model.predict_normalized(model.encode(mags)))


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class CollapseDiagnosis:
    collapsed: bool
    constant_output: bool
    prediction_std_m: float
    prediction_mean_m: float
    train_target_mean_m: float
    mean_gap_m: float

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return (f"mean_collapse={self.collapsed} constant_output={self.constant_output} "
                f"pred_std={self.prediction_std_m:.3f}m pred_mean={self.prediction_mean_m:.2f}m "
                f"train_mean={self.train_target_mean_m:.2f}m gap={self.mean_gap_m:.2f}m")


def detect_mean_collapse(predictions, train_targets, tolerance_abs: float = 0.5,
                         tolerance_mean: float = 1.0) -> CollapseDiagnosis:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(train_targets, dtype=float)
    if p.size == 0 or t.size == 0:
        raise ValueError("collapse diagnosis needs predictions and training targets")
    std = float(p.std())
    gap = float(abs(p.mean() - t.mean()))
    constant = std < tolerance_abs
    return CollapseDiagnosis(constant and gap < tolerance_mean, constant, std,
                             float(p.mean()), float(t.mean()), gap)


def strawman_predictions(train_set: CirDataset, n: int) -> np.ndarray:
    """Predict-the-training-mean reference."""
    return np.full(n, float(np.mean(train_set.ranges_m)))


def config_to_json(spec: ModelSpec, config: TrainConfig) -> str:
    return json.dumps({"model": spec.to_dict(), "train": asdict(config)}, indent=2,
                      sort_keys=True)
