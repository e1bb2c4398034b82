"""Minimal feed-forward classifier with manual backprop.

Dense rectifier MLP over flattened pixels, cross-entropy on hard labels or
temperature-scaled KL on soft targets, SGD-momentum / decoupled-decay Adam
optimizers, and a cosine-to-zero schedule. Everything is seeded and
single-threaded, so training is a pure function of (initial model, dataset,
config.seed). Evaluation over a frozen model is read-only and safe to share.

Checkpoint format: magic ``NMU1``, little-endian u32 layer count, then per
layer u32 (in_dim, out_dim), then per layer the raw little-endian f32 weight
matrix (row-major, out x in) followed by the f32 bias vector.
"""

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import CheckpointFormatError, ShapeMismatchError, ValidationError

MAGIC = b"NMU1"


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)


@dataclass
class Model:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def class_count(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [lyr.weight.shape[0] for lyr in self.layers]

    def copy(self) -> "Model":
        return Model([Layer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def params(self) -> list[np.ndarray]:
        out = []
        for lyr in self.layers:
            out.append(lyr.weight)
            out.append(lyr.bias)
        return out


def init_model(dims: list[int], seed: int, dtype=np.float32) -> Model:
    """Glorot-uniform weights (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    if len(dims) < 2:
        raise ValidationError("model needs at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        bias = np.zeros(fan_out, dtype=dtype)
        layers.append(Layer(weight, bias))
    return Model(layers)


def reinit_layer(model: Model, index: int, seed: int) -> None:
    """Re-initialize one layer in place with the standard init."""
    lyr = model.layers[index]
    fan_out, fan_in = lyr.weight.shape
    rng = np.random.default_rng(seed)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    lyr.weight[...] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    lyr.bias[...] = 0.0


# ---------------------------------------------------------------------------
# forward / losses


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits (B, K) for a pixel batch (B, d)."""
    x = np.atleast_2d(np.asarray(batch))
    if x.shape[1] != model.input_dim:
        raise ShapeMismatchError(
            f"batch has {x.shape[1]} features, model expects {model.input_dim}"
        )
    h = x.astype(model.layers[0].weight.dtype, copy=False)
    for lyr in model.layers[:-1]:
        h = np.maximum(h @ lyr.weight.T + lyr.bias, 0.0)
    last = model.layers[-1]
    return h @ last.weight.T + last.bias


def _forward_cached(model: Model, x: np.ndarray):
    """Forward pass keeping hidden activations for backprop."""
    acts = [x]
    for lyr in model.layers[:-1]:
        acts.append(np.maximum(acts[-1] @ lyr.weight.T + lyr.bias, 0.0))
    last = model.layers[-1]
    logits = acts[-1] @ last.weight.T + last.bias
    return logits, acts


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax; components in (0, 1], rows sum to 1."""
    z = np.asarray(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_hard(logits: np.ndarray, label: int) -> float:
    """Cross entropy of one sample: -ln softmax(logits)[label]."""
    return float(-log_softmax(logits)[..., label].squeeze())


def loss_soft(logits: np.ndarray, target: np.ndarray, temperature: float = 1.0) -> float:
    """Temperature-scaled KL from a target distribution to the model.

    T^2 * KL(target || softmax(logits / T)); zero exactly when the target
    equals the tempered softmax of the logits.
    """
    target = np.asarray(target, dtype=np.float64)
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    if target.ndim != 1 or abs(target.sum() - 1.0) > 1e-5 or (target < 0).any():
        raise ValidationError("soft target must be a probability distribution")
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / temperature)
    q = target
    ent = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum()
    return float(temperature ** 2 * (ent - (q * logp).sum()))


def _batch_mean_loss(model: Model, x, labels, soft_targets, temperature):
    logits = forward(model, x)
    if soft_targets is None:
        lp = log_softmax(logits)
        return float(-lp[np.arange(len(labels)), labels].mean())
    lp = log_softmax(logits / temperature)
    q = soft_targets
    ent = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum(axis=1)
    return float((temperature ** 2 * (ent - (q * lp).sum(axis=1))).mean())


# ---------------------------------------------------------------------------
# backward


def backward(model: Model, batch: np.ndarray, labels=None, soft_targets=None,
             temperature: float = 1.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Mean-loss gradients, one (dW, db) pair per layer.

    Hard labels give cross-entropy gradients; soft targets give gradients of
    the T^2-scaled KL loss. Shapes mirror the model exactly.
    """
    x = np.atleast_2d(np.asarray(batch)).astype(model.layers[0].weight.dtype, copy=False)
    if x.shape[1] != model.input_dim:
        raise ShapeMismatchError(
            f"batch has {x.shape[1]} features, model expects {model.input_dim}"
        )
    n = x.shape[0]
    logits, acts = _forward_cached(model, x)
    if soft_targets is None:
        delta = softmax(logits)
        delta[np.arange(n), np.asarray(labels)] -= 1.0
        delta /= n
    else:
        p = softmax(logits / temperature)
        delta = (temperature * (p - soft_targets) / n).astype(logits.dtype)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        lyr = model.layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ lyr.weight) * (acts[i] > 0)
    return grads


# ---------------------------------------------------------------------------
# optimizers and schedule


class SgdMomentum:
    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity = None

    def step(self, model: Model, grads, lr: float, weight_decay: float):
        params = model.params()
        flat = [g for pair in grads for g in pair]
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, flat, self.velocity):
            v *= self.momentum
            v += g
            p -= lr * v
            if weight_decay:
                p -= lr * weight_decay * p


class AdamW:
    """Adaptive moments with decoupled weight decay applied after the step."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, model: Model, grads, lr: float, weight_decay: float):
        params = model.params()
        flat = [g for pair in grads for g in pair]
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, flat, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay:
                p -= lr * weight_decay * p


OPTIMIZERS = {"sgd": SgdMomentum, "adamw": AdamW}


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine-to-zero: base_lr at step 0, exactly 0 at the last step."""
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass
class TrainingTrace:
    """Per-sample count of epochs in which the sample was classified correctly."""

    ids: np.ndarray
    counts: np.ndarray
    epochs: int

    def counts_for(self, ids: np.ndarray) -> np.ndarray:
        pos = {int(i): k for k, i in enumerate(self.ids)}
        try:
            idx = np.array([pos[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"trace does not cover instance id {exc}") from exc
        return self.counts[idx]


def predict_logits(model: Model, pixels: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Forward over a full array in chunks; returns (N, K) logits."""
    outs = [forward(model, pixels[i:i + chunk]) for i in range(0, len(pixels), chunk)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.class_count))


def train(model: Model, dataset, config: TrainConfig, trace_correctness: bool = False,
          *, temperature: float = 1.0, epoch_callback=None, audit_log=None):
    """Mini-batch training; returns (trained copy, TrainingTrace or None).

    The input model is never mutated. Batch order and all updates derive
    from config.seed, so identical inputs reproduce bit-identical parameters.
    Soft-labeled datasets are trained with the tempered KL loss.

    epoch_callback(epoch_index, model) fires after each epoch; audit_log, if
    given a list, receives the instance id of every sample consumed.
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot train on an empty dataset")
    model = model.copy()
    counts = np.zeros(n, dtype=np.uint32) if trace_correctness else None
    if config.epochs == 0:
        trace = TrainingTrace(dataset.ids.copy(), counts, 0) if trace_correctness else None
        return model, trace

    rng = np.random.default_rng(config.seed)
    opt = OPTIMIZERS[config.optimizer]()
    bs = config.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = config.epochs * steps_per_epoch
    soft = dataset.soft_labels
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if audit_log is not None:
                audit_log.extend(int(i) for i in dataset.ids[idx])
            lr = cosine_lr(step, total_steps, config.base_lr)
            if soft is None:
                grads = backward(model, dataset.pixels[idx], labels=dataset.labels[idx])
            else:
                grads = backward(model, dataset.pixels[idx], soft_targets=soft[idx],
                                 temperature=temperature)
            opt.step(model, grads, lr, config.weight_decay)
            step += 1
        if trace_correctness:
            pred = predict_logits(model, dataset.pixels).argmax(axis=1)
            counts += (pred == dataset.labels).astype(np.uint32)
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    trace = TrainingTrace(dataset.ids.copy(), counts, config.epochs) if trace_correctness else None
    return model, trace


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(model.layers)))
        for lyr in model.layers:
            out_dim, in_dim = lyr.weight.shape
            fh.write(struct.pack("<II", in_dim, out_dim))
        for lyr in model.layers:
            fh.write(lyr.weight.astype("<f4").tobytes(order="C"))
            fh.write(lyr.bias.astype("<f4").tobytes(order="C"))


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic in {path}")
    off = 4
    try:
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes = []
        for _ in range(count):
            in_dim, out_dim = struct.unpack_from("<II", blob, off)
            off += 8
            shapes.append((in_dim, out_dim))
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint header in {path}") from exc
    for (in_a, out_a), (in_b, _) in zip(shapes, shapes[1:]):
        if out_a != in_b:
            raise CheckpointFormatError("checkpoint layer dims do not chain")
    layers = []
    for in_dim, out_dim in shapes:
        need = 4 * (in_dim * out_dim + out_dim)
        if off + need > len(blob):
            raise CheckpointFormatError(f"truncated checkpoint payload in {path}")
        weight = np.frombuffer(blob, dtype="<f4", count=in_dim * out_dim, offset=off)
        off += 4 * in_dim * out_dim
        bias = np.frombuffer(blob, dtype="<f4", count=out_dim, offset=off)
        off += 4 * out_dim
        layers.append(Layer(weight.reshape(out_dim, in_dim).copy(), bias.copy()))
    if off != len(blob):
        raise CheckpointFormatError(f"trailing bytes in checkpoint {path}")
    model = Model(layers)
    if not all(np.isfinite(p).all() for p in model.params()):
        raise CheckpointFormatError(f"non-finite parameters in checkpoint {path}")
    return model
