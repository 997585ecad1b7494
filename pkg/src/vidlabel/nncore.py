"""Minimal deterministic neural-network core on float64 numpy arrays.

Everything trainable lives in a ParameterStore: named, insertion-ordered
arrays plus a step counter. Layers are functions of (inputs, params) that
return activations and a cache consumed by the matching backward call.
Finite-difference gradient checking drives every layer and model in the
test suite, which is why the core stays in 64-bit arithmetic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, NumericError, SchemaError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh", "softmax")
PROB_EPS = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PARAMS = "params.bin"
CHECKPOINT_FORMAT_VERSION = 1


class ParameterStore:
    """Named, shaped, insertion-ordered float64 arrays plus a step counter."""

    def __init__(self) -> None:
        self._arrays: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, values: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise ValueError(f"parameter {name!r} already exists")
        arr = np.array(values, dtype=np.float64)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._arrays.items())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._arrays.items()}

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for name, arr in self._arrays.items():
            dup.add(name, arr)
        dup.step = self.step
        return dup


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-parameter RNG from (global seed, name hash), so
    initialization does not depend on parameter creation order."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "big")])


def uniform_init(shape: tuple[int, ...], fan_in: int, fan_out: int,
                 rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def add_dense_params(store: ParameterStore, name: str, in_dim: int, out_dim: int,
                     seed: int) -> None:
    """Register {name}/W and {name}/b. Weights are uniform within the
    fan-based limit; biases start at zero."""
    rng = param_rng(seed, f"{name}/W")
    store.add(f"{name}/W", uniform_init((in_dim, out_dim), in_dim, out_dim, rng))
    store.add(f"{name}/b", np.zeros(out_dim))


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax shifted by the max along ``axis`` for stability."""
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# dense layer


@dataclass
class DenseCache:
    x: np.ndarray
    W: np.ndarray
    activation: str
    group: int
    z: np.ndarray
    y: np.ndarray


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray,
                  activation: str = "linear",
                  softmax_group: int | None = None) -> tuple[np.ndarray, DenseCache]:
    """y = act(x W + b). For activation="softmax" the last axis is split
    into groups of width ``softmax_group`` (default: the whole row) and each
    group is softmaxed independently."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(
            f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}"
        )
    if not np.isfinite(x).all():
        raise NumericError("dense_forward: non-finite input")

    z = x @ W + b
    group = W.shape[1]
    if activation == "linear":
        y = z
    elif activation == "relu":
        y = relu(z)
    elif activation == "sigmoid":
        y = sigmoid(z)
    elif activation == "tanh":
        y = np.tanh(z)
    else:  # softmax
        group = softmax_group or W.shape[1]
        if W.shape[1] % group != 0:
            raise ValueError(f"softmax group {group} does not divide width {W.shape[1]}")
        shaped = z.reshape(z.shape[0], -1, group)
        y = softmax(shaped, axis=-1).reshape(z.shape)
    return y, DenseCache(x=x, W=W, activation=activation, group=group, z=z, y=y)


def dense_backward(upstream: np.ndarray, cache: DenseCache
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dx) of the matching dense_forward call."""
    if upstream.shape != cache.y.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {cache.y.shape}")
    act = cache.activation
    if act == "linear":
        dz = upstream
    elif act == "relu":
        dz = upstream * (cache.z > 0.0)
    elif act == "sigmoid":
        dz = upstream * cache.y * (1.0 - cache.y)
    elif act == "tanh":
        dz = upstream * (1.0 - cache.y ** 2)
    else:  # softmax, per group: dz = y * (g - sum(g * y))
        g = upstream.reshape(upstream.shape[0], -1, cache.group)
        y = cache.y.reshape(g.shape)
        dz = (y * (g - (g * y).sum(axis=-1, keepdims=True))).reshape(upstream.shape)
    dW = cache.x.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ cache.W.T
    return dW, db, dx


# ---------------------------------------------------------------------------
# losses


def cross_entropy_multilabel(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-per-example binary cross entropy summed over labels.

    Probabilities are clamped to [1e-12, 1 - 1e-12]; the gradient is zero
    where the clamp is active.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: p {p.shape}, y {y.shape}")
    batch = p.shape[0]
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / batch
    dp = (pc - y) / (pc * (1.0 - pc)) / batch
    dp = np.where((p > PROB_EPS) & (p < 1.0 - PROB_EPS), dp, 0.0)
    return float(loss), dp


def l2_loss(p: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """loss = sum((p - t)^2) / (2 B)."""
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if p.shape != target.shape:
        raise ValueError(f"shape mismatch: p {p.shape}, target {target.shape}")
    batch = p.shape[0]
    diff = p - target
    loss = float((diff ** 2).sum() / (2.0 * batch))
    return loss, diff / batch


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults follow the frame-level recipe:
    learning rate 0.00025, batch size 256, evaluation every 25 steps."""

    learning_rate: float = 2.5e-4
    batch_size: int = 256
    seed: int = 0
    max_steps: int = 1000
    checkpoint_every: int = 1000
    eval_every: int = 25
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every < 0:
            raise ConfigError(f"lr_decay_every must be >= 0, got {self.lr_decay_every}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


class AdamOptimizer:
    """Adam with optional stepwise exponential learning-rate decay."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def learning_rate_at(self, step: int) -> float:
        lr = self.config.learning_rate
        if self.config.lr_decay_every > 0:
            lr *= self.config.lr_decay_factor ** (step // self.config.lr_decay_every)
        return lr

    def step(self, store: ParameterStore, grads: dict[str, np.ndarray]) -> None:
        """Apply one Adam update in place and increment the store's step."""
        t = store.step + 1
        lr = self.learning_rate_at(store.step)
        bc1 = 1.0 - ADAM_BETA1 ** t
        bc2 = 1.0 - ADAM_BETA2 ** t
        for name, arr in store.items():
            g = grads[name]
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if name not in self._m:
                self._m[name] = np.zeros_like(arr)
                self._v[name] = np.zeros_like(arr)
            m = self._m[name]
            v = self._v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g ** 2
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        store.step = t


# ---------------------------------------------------------------------------
# parameter EMA


@dataclass
class EmaState:
    """Exponential moving average of a ParameterStore, parameterized by a
    half-life in steps: decay = 2 ** (-1 / half_life)."""

    shadow: ParameterStore
    half_life: int

    @property
    def decay(self) -> float:
        return 2.0 ** (-1.0 / self.half_life)


def ema_init(target: ParameterStore, half_life: int) -> EmaState:
    if half_life < 1:
        raise ConfigError(f"half_life must be >= 1, got {half_life}")
    return EmaState(shadow=target.copy(), half_life=half_life)


def ema_update(ema: EmaState, target: ParameterStore) -> EmaState:
    """shadow <- d * shadow + (1 - d) * target, elementwise."""
    d = ema.decay
    for name, arr in target.items():
        shadow = ema.shadow[name]
        if shadow.shape != arr.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: shadow {shadow.shape} vs target {arr.shape}"
            )
        shadow *= d
        shadow += (1.0 - d) * arr
    ema.shadow.step = target.step
    return ema


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f: Callable[[ParameterStore], tuple[float, dict[str, np.ndarray]]],
                   store: ParameterStore, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(store)`` must return (scalar loss, grads-by-name). The relative
    error per element is |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
    """
    _, analytic = f(store)
    worst = 0.0
    for name in store.names():
        arr = store[name]
        ga = analytic[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            loss_plus = f(store)[0]
            arr[idx] = orig - h
            loss_minus = f(store)[0]
            arr[idx] = orig
            gfd = (loss_plus - loss_minus) / (2.0 * h)
            denom = max(abs(float(ga[idx])), abs(gfd), 1e-8)
            worst = max(worst, abs(float(ga[idx]) - gfd) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(store: ParameterStore, directory: Path | str, *,
                    ema: bool = False, dtype: str = "float64") -> Path:
    """Write manifest.json + params.bin (little-endian, manifest order).

    Both files are written atomically; the manifest goes last so a complete
    manifest implies a complete params file.
    """
    if dtype not in ("float64", "float32"):
        raise ConfigError(f"checkpoint dtype must be float64 or float32, got {dtype!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np_dtype = "<f8" if dtype == "float64" else "<f4"
    chunks = [arr.astype(np_dtype).tobytes(order="C") for _, arr in store.items()]
    _atomic_write(directory / CHECKPOINT_PARAMS, b"".join(chunks))
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": store.step,
        "dtype": dtype,
        "ema": ema,
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in store.items()
        ],
    }
    _atomic_write(directory / CHECKPOINT_MANIFEST,
                  (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    return directory


def load_checkpoint(directory: Path | str) -> tuple[ParameterStore, dict]:
    """Read a checkpoint directory back into a float64 ParameterStore."""
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise SchemaError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise SchemaError(
            f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
        )
    dtype = manifest["dtype"]
    np_dtype = "<f8" if dtype == "float64" else "<f4"
    itemsize = 8 if dtype == "float64" else 4
    buf = (directory / CHECKPOINT_PARAMS).read_bytes()
    expected = sum(
        int(np.prod(entry["shape"])) if entry["shape"] else 1
        for entry in manifest["arrays"]
    )
    if len(buf) != expected * itemsize:
        raise SchemaError(
            f"params.bin size {len(buf)} does not match manifest "
            f"({expected} elements of {dtype})"
        )
    store = ParameterStore()
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(buf, dtype=np_dtype, count=count, offset=offset * itemsize)
        store.add(entry["name"], flat.astype(np.float64).reshape(shape))
        offset += count
    store.step = int(manifest["step"])
    return store, manifest
