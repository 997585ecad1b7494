"""Model zoo: mixture-of-experts prediction head, video-level mixture
models, bidirectional two-layer recurrent stacks, and the residual booster.

Every model follows the same protocol: ``init_params(store, seed)``
registers named arrays, ``forward(store, ...)`` returns probabilities and
keeps a cache on the instance, ``backward(store, dprobs)`` returns the
full gradient dict for the store. Forward passes never mutate parameters;
training holds the single writer to a store.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import features as features_mod
from .errors import ConfigError, SchemaError
from .nncore import (
    ParameterStore,
    add_dense_params,
    dense_backward,
    dense_forward,
    param_rng,
    sigmoid,
    softmax,
    uniform_init,
)

logger = logging.getLogger(__name__)

INPUT_BLOCKS = ("mean", "std", "x3", "num_frames")

# Expert-tower widths of the published video-level family; desk runs scale
# them with a width factor. The middle 3Lw width 2035 is intentional.
MONN_PRESETS: dict[str, tuple[int, ...]] = {
    "monn2lw": (2305 * 6, 2305 * 3),
    "monn3lw": (2305 * 8, 2035, 2305 * 3),
    "monn3l": (4096, 4096, 4096),
    "monn4ln": (2048, 2048, 2048, 2048),
}

# Frame-level presets: per-direction units of the bidirectional first layer
# and units of the single-direction second layer.
RNN_PRESETS: dict[str, dict] = {
    "bilstm": {"cell": "lstm", "layer1_units": 600, "layer2_units": 1200},
    "bigru": {"cell": "gru", "layer1_units": 625, "layer2_units": 1250},
}


def _acc(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# configs


@dataclass
class MoNNConfig:
    vocab_size: int
    feature_dim: int
    num_experts: int = 3
    expert_hidden: tuple[int, ...] = (64, 32)
    input_features: tuple[str, ...] = ("mean", "std", "num_frames")
    truncate_labels: int | None = None

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not self.expert_hidden or any(w < 1 for w in self.expert_hidden):
            raise ConfigError(f"expert_hidden widths must be >= 1, got {self.expert_hidden}")
        for block in self.input_features:
            if block not in INPUT_BLOCKS:
                raise ConfigError(f"unknown input block {block!r}")
        if self.truncate_labels is not None and not 1 <= self.truncate_labels <= self.vocab_size:
            raise ConfigError(
                f"truncate_labels must be in [1, {self.vocab_size}], got {self.truncate_labels}"
            )

    @property
    def input_dim(self) -> int:
        return sum(1 if b == "num_frames" else self.feature_dim for b in self.input_features)


@dataclass
class RnnConfig:
    vocab_size: int
    feature_dim: int
    cell: str = "lstm"
    layer1_units: int = 600
    layer2_units: int = 1200
    num_experts: int = 2
    max_frames: int = 300
    final_state: str = "cell"  # "cell" or "hidden"; GRUs always use hidden

    def validate(self) -> None:
        if self.cell not in ("lstm", "gru"):
            raise ConfigError(f"cell must be lstm or gru, got {self.cell!r}")
        if self.layer1_units < 1 or self.layer2_units < 1:
            raise ConfigError("layer units must be >= 1")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.max_frames < 1:
            raise ConfigError(f"max_frames must be >= 1, got {self.max_frames}")
        if self.final_state not in ("cell", "hidden"):
            raise ConfigError(f"final_state must be cell or hidden, got {self.final_state!r}")


@dataclass
class LinearConfig:
    vocab_size: int
    feature_dim: int
    input_features: tuple[str, ...] = ("mean", "std", "num_frames")

    def validate(self) -> None:
        for block in self.input_features:
            if block not in INPUT_BLOCKS:
                raise ConfigError(f"unknown input block {block!r}")

    @property
    def input_dim(self) -> int:
        return sum(1 if b == "num_frames" else self.feature_dim for b in self.input_features)


@dataclass
class BoostConfig:
    vocab_size: int
    feature_dim: int
    hidden_units: int = 32
    input_features: tuple[str, ...] = ("mean", "std", "num_frames")

    def validate(self) -> None:
        if self.hidden_units < 1:
            raise ConfigError(f"hidden_units must be >= 1, got {self.hidden_units}")
        for block in self.input_features:
            if block not in INPUT_BLOCKS:
                raise ConfigError(f"unknown input block {block!r}")

    @property
    def input_dim(self) -> int:
        return sum(1 if b == "num_frames" else self.feature_dim for b in self.input_features)


def scaled_monn_hidden(preset: str, width_factor: float) -> tuple[int, ...]:
    """Preset tower widths scaled for desk-size runs (min width 1)."""
    if preset not in MONN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(MONN_PRESETS)}")
    if width_factor <= 0:
        raise ConfigError(f"width_factor must be > 0, got {width_factor}")
    return tuple(max(1, round(w * width_factor)) for w in MONN_PRESETS[preset])


def scaled_rnn_units(preset: str, width_factor: float) -> dict:
    if preset not in RNN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(RNN_PRESETS)}")
    if width_factor <= 0:
        raise ConfigError(f"width_factor must be > 0, got {width_factor}")
    base = RNN_PRESETS[preset]
    return {
        "cell": base["cell"],
        "layer1_units": max(1, round(base["layer1_units"] * width_factor)),
        "layer2_units": max(1, round(base["layer2_units"] * width_factor)),
    }


# ---------------------------------------------------------------------------
# feature assembly


def build_input(rows: Sequence[features_mod.VideoFeatures],
                input_features: Sequence[str]) -> np.ndarray:
    """Concatenate the configured feature blocks into a (B, I) matrix."""
    if not rows:
        raise ValueError("build_input() needs at least one row")
    columns = []
    for block in input_features:
        if block == "num_frames":
            columns.append(np.array([[float(r.num_frames)] for r in rows]))
        elif block in features_mod.FEATURE_FIELDS:
            columns.append(np.stack([getattr(r, block) for r in rows]))
        else:
            raise ConfigError(f"unknown input block {block!r}")
    return np.concatenate(columns, axis=1)


def build_targets(rows: Sequence[features_mod.VideoFeatures], vocab_size: int) -> np.ndarray:
    """0/1 label matrix (B, V)."""
    y = np.zeros((len(rows), vocab_size))
    for i, row in enumerate(rows):
        y[i, sorted(row.labels)] = 1.0
    return y


# ---------------------------------------------------------------------------
# MoE prediction head


class MoEHead:
    """Per-label mixture head.

    For each label: gate logits in R^(E+1) from one affine layer, softmaxed;
    expert logits in R^E from another affine layer, sigmoided. The output
    probability is the gate-weighted sum of the expert sigmoids; the extra
    (E+1)-th gate is a null expert contributing zero.
    """

    def __init__(self, prefix: str, gate_dim: int, expert_dim: int,
                 vocab_size: int, num_experts: int):
        self.prefix = prefix
        self.gate_dim = gate_dim
        self.expert_dim = expert_dim
        self.vocab_size = vocab_size
        self.num_experts = num_experts

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        v, e = self.vocab_size, self.num_experts
        return {
            f"{self.prefix}gate/W": (self.gate_dim, v * (e + 1)),
            f"{self.prefix}gate/b": (v * (e + 1),),
            f"{self.prefix}expert/W": (self.expert_dim, v * e),
            f"{self.prefix}expert/b": (v * e,),
        }

    def init_params(self, store: ParameterStore, seed: int) -> None:
        add_dense_params(store, f"{self.prefix}gate", self.gate_dim,
                         self.vocab_size * (self.num_experts + 1), seed)
        add_dense_params(store, f"{self.prefix}expert", self.expert_dim,
                         self.vocab_size * self.num_experts, seed)

    def forward(self, store: ParameterStore, gate_in: np.ndarray,
                expert_in: np.ndarray) -> tuple[np.ndarray, tuple]:
        v, e = self.vocab_size, self.num_experts
        gz = gate_in @ store[f"{self.prefix}gate/W"] + store[f"{self.prefix}gate/b"]
        gates = softmax(gz.reshape(-1, v, e + 1), axis=-1)
        ez = expert_in @ store[f"{self.prefix}expert/W"] + store[f"{self.prefix}expert/b"]
        experts = sigmoid(ez.reshape(-1, v, e))
        probs = (gates[:, :, :e] * experts).sum(axis=-1)
        cache = (gate_in, expert_in, gates, experts)
        return probs, cache

    def backward(self, store: ParameterStore, dprobs: np.ndarray, cache: tuple,
                 grads: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        gate_in, expert_in, gates, experts = cache
        v, e = self.vocab_size, self.num_experts
        batch = dprobs.shape[0]

        dgates = np.zeros_like(gates)
        dgates[:, :, :e] = dprobs[:, :, None] * experts
        dexperts = dprobs[:, :, None] * gates[:, :, :e]

        dez = (dexperts * experts * (1.0 - experts)).reshape(batch, v * e)
        dgz = (gates * (dgates - (dgates * gates).sum(axis=-1, keepdims=True))
               ).reshape(batch, v * (e + 1))

        _acc(grads, f"{self.prefix}expert/W", expert_in.T @ dez)
        _acc(grads, f"{self.prefix}expert/b", dez.sum(axis=0))
        _acc(grads, f"{self.prefix}gate/W", gate_in.T @ dgz)
        _acc(grads, f"{self.prefix}gate/b", dgz.sum(axis=0))
        dgate_in = dgz @ store[f"{self.prefix}gate/W"].T
        dexpert_in = dez @ store[f"{self.prefix}expert/W"].T
        return dgate_in, dexpert_in


def moe_head(features: np.ndarray, store: ParameterStore, vocab_size: int,
             num_experts: int, prefix: str = "") -> np.ndarray:
    """Standalone head over a single feature matrix (gate and expert sides
    share the input)."""
    head = MoEHead(prefix, features.shape[1], features.shape[1], vocab_size, num_experts)
    probs, _ = head.forward(store, features, features)
    return probs


# ---------------------------------------------------------------------------
# video-level models


class MoNNModel:
    """Relu expert tower ending in per-label expert logits, gated by a
    single affine layer straight from the input features."""

    kind = "monn"

    def __init__(self, config: MoNNConfig):
        config.validate()
        self.config = config
        dims = [config.input_dim, *config.expert_hidden]
        self._tower_dims = list(zip(dims[:-1], dims[1:]))
        self.head = MoEHead("head/", gate_dim=config.input_dim,
                            expert_dim=dims[-1], vocab_size=config.vocab_size,
                            num_experts=config.num_experts)
        self._cache = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, (din, dout) in enumerate(self._tower_dims):
            shapes[f"tower{i}/W"] = (din, dout)
            shapes[f"tower{i}/b"] = (dout,)
        shapes.update(self.head.param_shapes())
        return shapes

    def init_params(self, store: ParameterStore, seed: int) -> None:
        for i, (din, dout) in enumerate(self._tower_dims):
            add_dense_params(store, f"tower{i}", din, dout, seed)
        self.head.init_params(store, seed)

    def forward(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.config.input_dim:
            raise ValueError(
                f"input dim {x.shape[1]} != configured {self.config.input_dim}"
            )
        h = x
        tower_caches = []
        for i in range(len(self._tower_dims)):
            h, cache = dense_forward(h, store[f"tower{i}/W"], store[f"tower{i}/b"], "relu")
            tower_caches.append(cache)
        probs, head_cache = self.head.forward(store, x, h)
        k = self.config.truncate_labels
        if k is not None:
            probs = probs.copy()
            probs[:, k:] = 0.0
        self._cache = (tower_caches, head_cache)
        return probs

    def backward(self, store: ParameterStore, dprobs: np.ndarray) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise ValueError("backward() before forward()")
        tower_caches, head_cache = self._cache
        k = self.config.truncate_labels
        if k is not None:
            dprobs = dprobs.copy()
            dprobs[:, k:] = 0.0
        grads: dict[str, np.ndarray] = {}
        dgate_in, dtop = self.head.backward(store, dprobs, head_cache, grads)
        dh = dtop
        for i in reversed(range(len(self._tower_dims))):
            dW, db, dh = dense_backward(dh, tower_caches[i])
            _acc(grads, f"tower{i}/W", dW)
            _acc(grads, f"tower{i}/b", db)
        # dh is now the gradient w.r.t. the input via the tower; the gate path
        # adds dgate_in. Inputs are data, so the sum is only returned for checks.
        self._dx = dh + dgate_in
        return grads


class LinearModel:
    """Single affine layer with sigmoid output; the weak baseline the
    booster is designed to correct."""

    kind = "linear"

    def __init__(self, config: LinearConfig):
        config.validate()
        self.config = config
        self._cache = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "linear/W": (self.config.input_dim, self.config.vocab_size),
            "linear/b": (self.config.vocab_size,),
        }

    def init_params(self, store: ParameterStore, seed: int) -> None:
        add_dense_params(store, "linear", self.config.input_dim,
                         self.config.vocab_size, seed)

    def forward(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        probs, cache = dense_forward(x, store["linear/W"], store["linear/b"], "sigmoid")
        self._cache = cache
        return probs

    def backward(self, store: ParameterStore, dprobs: np.ndarray) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise ValueError("backward() before forward()")
        dW, db, dx = dense_backward(dprobs, self._cache)
        self._dx = dx
        return {"linear/W": dW, "linear/b": db}


# ---------------------------------------------------------------------------
# recurrent cells


class LstmCell:
    """Standard LSTM cell, gate order [i, f, o, g], forget bias init 1.0."""

    state_fields = 2

    def __init__(self, prefix: str, input_dim: int, units: int):
        self.prefix = prefix
        self.input_dim = input_dim
        self.units = units

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            f"{self.prefix}/Wx": (self.input_dim, 4 * self.units),
            f"{self.prefix}/Wh": (self.units, 4 * self.units),
            f"{self.prefix}/b": (4 * self.units,),
        }

    def init_params(self, store: ParameterStore, seed: int) -> None:
        u = self.units
        rng = param_rng(seed, f"{self.prefix}/Wx")
        store.add(f"{self.prefix}/Wx",
                  uniform_init((self.input_dim, 4 * u), self.input_dim, 4 * u, rng))
        rng = param_rng(seed, f"{self.prefix}/Wh")
        store.add(f"{self.prefix}/Wh", uniform_init((u, 4 * u), u, 4 * u, rng))
        b = np.zeros(4 * u)
        b[u:2 * u] = 1.0  # forget gate bias
        store.add(f"{self.prefix}/b", b)

    def step(self, store: ParameterStore, x: np.ndarray, h: np.ndarray,
             c: np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple]:
        u = self.units
        z = x @ store[f"{self.prefix}/Wx"] + h @ store[f"{self.prefix}/Wh"] \
            + store[f"{self.prefix}/b"]
        i = sigmoid(z[:, :u])
        f = sigmoid(z[:, u:2 * u])
        o = sigmoid(z[:, 2 * u:3 * u])
        g = np.tanh(z[:, 3 * u:])
        c2 = f * c + i * g
        tc = np.tanh(c2)
        h2 = o * tc
        return h2, c2, (x, h, c, i, f, o, g, tc)

    def step_backward(self, store: ParameterStore, dh2: np.ndarray, dc2: np.ndarray,
                      cache: tuple, grads: dict[str, np.ndarray]
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x, h, c, i, f, o, g, tc = cache
        do = dh2 * tc
        dc_total = dc2 + dh2 * o * (1.0 - tc ** 2)
        di = dc_total * g
        df = dc_total * c
        dg = dc_total * i
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            do * o * (1.0 - o),
            dg * (1.0 - g ** 2),
        ], axis=1)
        _acc(grads, f"{self.prefix}/Wx", x.T @ dz)
        _acc(grads, f"{self.prefix}/Wh", h.T @ dz)
        _acc(grads, f"{self.prefix}/b", dz.sum(axis=0))
        dx = dz @ store[f"{self.prefix}/Wx"].T
        dh = dz @ store[f"{self.prefix}/Wh"].T
        dc_prev = dc_total * f
        return dx, dh, dc_prev


class GruCell:
    """Standard GRU cell, gate order [r, u, n]; the reset gate multiplies
    the previous state before the candidate projection: n = tanh(x Wxn +
    (r*h) Whn + bn), h' = u*h + (1-u)*n."""

    state_fields = 1

    def __init__(self, prefix: str, input_dim: int, units: int):
        self.prefix = prefix
        self.input_dim = input_dim
        self.units = units

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            f"{self.prefix}/Wx": (self.input_dim, 3 * self.units),
            f"{self.prefix}/Wh": (self.units, 3 * self.units),
            f"{self.prefix}/b": (3 * self.units,),
        }

    def init_params(self, store: ParameterStore, seed: int) -> None:
        u = self.units
        rng = param_rng(seed, f"{self.prefix}/Wx")
        store.add(f"{self.prefix}/Wx",
                  uniform_init((self.input_dim, 3 * u), self.input_dim, 3 * u, rng))
        rng = param_rng(seed, f"{self.prefix}/Wh")
        store.add(f"{self.prefix}/Wh", uniform_init((u, 3 * u), u, 3 * u, rng))
        store.add(f"{self.prefix}/b", np.zeros(3 * u))

    def step(self, store: ParameterStore, x: np.ndarray, h: np.ndarray
             ) -> tuple[np.ndarray, tuple]:
        un = self.units
        Wh = store[f"{self.prefix}/Wh"]
        zx = x @ store[f"{self.prefix}/Wx"] + store[f"{self.prefix}/b"]
        r = sigmoid(zx[:, :un] + h @ Wh[:, :un])
        u = sigmoid(zx[:, un:2 * un] + h @ Wh[:, un:2 * un])
        rh = r * h
        n = np.tanh(zx[:, 2 * un:] + rh @ Wh[:, 2 * un:])
        h2 = u * h + (1.0 - u) * n
        return h2, (x, h, r, u, n, rh)

    def step_backward(self, store: ParameterStore, dh2: np.ndarray, cache: tuple,
                      grads: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        x, h, r, u, n, rh = cache
        un = self.units
        Wh = store[f"{self.prefix}/Wh"]
        du = dh2 * (h - n)
        dn = dh2 * (1.0 - u)
        dh = dh2 * u
        dzn = dn * (1.0 - n ** 2)
        drh = dzn @ Wh[:, 2 * un:].T
        dr = drh * h
        dh = dh + drh * r
        dzr = dr * r * (1.0 - r)
        dzu = du * u * (1.0 - u)
        dzx = np.concatenate([dzr, dzu, dzn], axis=1)
        _acc(grads, f"{self.prefix}/Wx", x.T @ dzx)
        _acc(grads, f"{self.prefix}/b", dzx.sum(axis=0))
        _acc(grads, f"{self.prefix}/Wh",
             np.concatenate([h.T @ dzr, h.T @ dzu, rh.T @ dzn], axis=1))
        dh = dh + dzr @ Wh[:, :un].T + dzu @ Wh[:, un:2 * un].T
        dx = dzx @ store[f"{self.prefix}/Wx"].T
        return dx, dh


def rnn_cell_step(cell, store: ParameterStore, x_t: np.ndarray, state):
    """Advance one cell step. State is (h, c) for LSTM cells and h for GRU
    cells; returns the new state in the same shape."""
    if isinstance(cell, LstmCell):
        h, c = state
        h2, c2, _ = cell.step(store, x_t, h, c)
        return h2, c2
    h2, _ = cell.step(store, x_t, state)
    return h2


# ---------------------------------------------------------------------------
# masked sequence layer (one direction)


class _SeqLayer:
    """Runs a cell over a padded (B, T, D) batch with a validity mask.

    Masked steps carry the state through unchanged and emit exact zeros,
    which makes the whole stack bit-exactly invariant to padding contents.
    """

    def __init__(self, cell):
        self.cell = cell

    def forward(self, store: ParameterStore, x: np.ndarray, mask: np.ndarray):
        batch, steps, _ = x.shape
        units = self.cell.units
        lstm = isinstance(self.cell, LstmCell)
        h = np.zeros((batch, units))
        c = np.zeros((batch, units)) if lstm else None
        outputs = np.zeros((batch, steps, units))
        caches = []
        for t in range(steps):
            m = mask[:, t][:, None]
            if lstm:
                h2, c2, cache = self.cell.step(store, x[:, t], h, c)
                c = np.where(m, c2, c)
            else:
                h2, cache = self.cell.step(store, x[:, t], h)
            h = np.where(m, h2, h)
            outputs[:, t] = np.where(m, h2, 0.0)
            caches.append(cache)
        return outputs, (h, c), caches

    def backward(self, store: ParameterStore, mask: np.ndarray, caches: list,
                 doutputs: np.ndarray, dfinal_h: np.ndarray,
                 dfinal_c: np.ndarray | None,
                 grads: dict[str, np.ndarray]) -> np.ndarray:
        batch, steps, units = doutputs.shape
        lstm = isinstance(self.cell, LstmCell)
        dh = np.array(dfinal_h, copy=True)
        dc = np.array(dfinal_c, copy=True) if lstm else None
        dx = np.zeros((batch, steps, self.cell.input_dim))
        for t in reversed(range(steps)):
            m = mask[:, t][:, None]
            dh_total = dh + np.where(m, doutputs[:, t], 0.0)
            mh = np.where(m, dh_total, 0.0)
            if lstm:
                mc = np.where(m, dc, 0.0)
                dx_t, dph, dpc = self.cell.step_backward(store, mh, mc, caches[t], grads)
                dc = np.where(m, dpc, dc)
            else:
                dx_t, dph = self.cell.step_backward(store, mh, caches[t], grads)
            dh = np.where(m, dph, dh_total)
            dx[:, t] = np.where(m, dx_t, 0.0)
        return dx


# ---------------------------------------------------------------------------
# bidirectional two-layer stack


class BiRnnModel:
    """Bidirectional first layer, single-direction second layer, and a
    two-expert prediction head on the last valid state of layer 2.

    Sequences are dynamic: each batch row is processed over its own length,
    and the final state for an LSTM second layer is the memory cell by
    default (configurable to the hidden state).
    """

    kind = "birnn"

    def __init__(self, config: RnnConfig):
        config.validate()
        self.config = config
        cell_cls = LstmCell if config.cell == "lstm" else GruCell
        self.l1f = _SeqLayer(cell_cls("l1f", config.feature_dim, config.layer1_units))
        self.l1b = _SeqLayer(cell_cls("l1b", config.feature_dim, config.layer1_units))
        self.l2 = _SeqLayer(cell_cls("l2", 2 * config.layer1_units, config.layer2_units))
        self.head = MoEHead("head/", gate_dim=config.layer2_units,
                            expert_dim=config.layer2_units,
                            vocab_size=config.vocab_size,
                            num_experts=config.num_experts)
        self._cache = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in (self.l1f, self.l1b, self.l2):
            shapes.update(layer.cell.param_shapes())
        shapes.update(self.head.param_shapes())
        return shapes

    def init_params(self, store: ParameterStore, seed: int) -> None:
        for layer in (self.l1f, self.l1b, self.l2):
            layer.cell.init_params(store, seed)
        self.head.init_params(store, seed)

    def forward(self, store: ParameterStore, x: np.ndarray,
                lengths: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lengths = np.asarray(lengths, dtype=np.int64)
        batch, steps, dim = x.shape
        if dim != self.config.feature_dim:
            raise ValueError(f"frame dim {dim} != configured {self.config.feature_dim}")
        if steps > self.config.max_frames:
            raise ValueError(f"sequence length {steps} exceeds max_frames {self.config.max_frames}")
        if lengths.shape != (batch,) or (lengths < 1).any() or (lengths > steps).any():
            raise ValueError("lengths must be in [1, T] for every batch row")

        trange = np.arange(steps)[None, :]
        mask = trange < lengths[:, None]
        # Valid positions map to their mirror inside the valid range; padded
        # positions map to index 0 and are zeroed through the mask.
        rev_idx = np.where(mask, lengths[:, None] - 1 - trange, 0)

        xr = np.take_along_axis(x, rev_idx[:, :, None], axis=1)
        out_f, _, caches_f = self.l1f.forward(store, x, mask)
        out_rb, _, caches_rb = self.l1b.forward(store, xr, mask)
        out_b = np.where(mask[:, :, None],
                         np.take_along_axis(out_rb, rev_idx[:, :, None], axis=1), 0.0)

        y1 = np.concatenate([out_f, out_b], axis=2)
        _, (h2, c2), caches_2 = self.l2.forward(store, y1, mask)
        if isinstance(self.l2.cell, LstmCell) and self.config.final_state == "cell":
            last = c2
        else:
            last = h2
        probs, head_cache = self.head.forward(store, last, last)
        self._cache = (x, mask, rev_idx, caches_f, caches_rb, caches_2, head_cache)
        return probs

    def backward(self, store: ParameterStore, dprobs: np.ndarray) -> dict[str, np.ndarray]:
        if self._cache is None:
            raise ValueError("backward() before forward()")
        x, mask, rev_idx, caches_f, caches_rb, caches_2, head_cache = self._cache
        batch, steps, _ = x.shape
        u1 = self.config.layer1_units
        u2 = self.config.layer2_units

        grads: dict[str, np.ndarray] = {}
        dgate_in, dexpert_in = self.head.backward(store, dprobs, head_cache, grads)
        dlast = dgate_in + dexpert_in

        lstm2 = isinstance(self.l2.cell, LstmCell)
        if lstm2 and self.config.final_state == "cell":
            dfinal_h, dfinal_c = np.zeros((batch, u2)), dlast
        else:
            dfinal_h = dlast
            dfinal_c = np.zeros((batch, u2)) if lstm2 else None
        dy1 = self.l2.backward(store, mask, caches_2, np.zeros((batch, steps, u2)),
                               dfinal_h, dfinal_c, grads)

        dout_f = dy1[:, :, :u1]
        dout_b = dy1[:, :, u1:]
        zeros_h = np.zeros((batch, u1))
        lstm1 = isinstance(self.l1f.cell, LstmCell)
        zeros_c = np.zeros((batch, u1)) if lstm1 else None
        self.l1f.backward(store, mask, caches_f, dout_f, zeros_h, zeros_c, grads)
        drev_out = np.where(mask[:, :, None],
                            np.take_along_axis(dout_b, rev_idx[:, :, None], axis=1), 0.0)
        self.l1b.backward(store, mask, caches_rb, drev_out, zeros_h, zeros_c, grads)
        return grads


# ---------------------------------------------------------------------------
# boosting network


class BoostModel:
    """Residual corrector: one relu hidden layer, tanh output in (-1, 1).

    Trained with an L2 loss against the residual (labels - base
    predictions); at inference the correction is added to the base
    predictions and the sum is clamped into [0, 1]. The base model receives
    no gradient.
    """

    kind = "boost"

    def __init__(self, config: BoostConfig):
        config.validate()
        self.config = config
        self._caches = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "boost/hidden/W": (self.config.input_dim, self.config.hidden_units),
            "boost/hidden/b": (self.config.hidden_units,),
            "boost/out/W": (self.config.hidden_units, self.config.vocab_size),
            "boost/out/b": (self.config.vocab_size,),
        }

    def init_params(self, store: ParameterStore, seed: int) -> None:
        add_dense_params(store, "boost/hidden", self.config.input_dim,
                         self.config.hidden_units, seed)
        add_dense_params(store, "boost/out", self.config.hidden_units,
                         self.config.vocab_size, seed)

    def forward(self, store: ParameterStore, x: np.ndarray) -> np.ndarray:
        h, c1 = dense_forward(x, store["boost/hidden/W"], store["boost/hidden/b"], "relu")
        out, c2 = dense_forward(h, store["boost/out/W"], store["boost/out/b"], "tanh")
        self._caches = (c1, c2)
        return out

    def backward(self, store: ParameterStore, dout: np.ndarray) -> dict[str, np.ndarray]:
        if self._caches is None:
            raise ValueError("backward() before forward()")
        c1, c2 = self._caches
        dW2, db2, dh = dense_backward(dout, c2)
        dW1, db1, _ = dense_backward(dh, c1)
        return {"boost/hidden/W": dW1, "boost/hidden/b": db1,
                "boost/out/W": dW2, "boost/out/b": db2}


def boost_wrap(p_base: np.ndarray, correction: np.ndarray) -> np.ndarray:
    """Final prediction: base plus correction, clamped into [0, 1]."""
    if p_base.shape != correction.shape:
        raise ValueError(
            f"shape mismatch: base {p_base.shape}, correction {correction.shape}"
        )
    return np.clip(p_base + correction, 0.0, 1.0)


# ---------------------------------------------------------------------------
# declarative model configs


def config_to_dict(config) -> dict:
    if isinstance(config, MoNNConfig):
        return {
            "kind": "monn",
            "vocab_size": config.vocab_size,
            "feature_dim": config.feature_dim,
            "num_experts": config.num_experts,
            "expert_hidden": list(config.expert_hidden),
            "input_features": list(config.input_features),
            "truncate_labels": config.truncate_labels,
        }
    if isinstance(config, RnnConfig):
        return {
            "kind": "birnn",
            "vocab_size": config.vocab_size,
            "feature_dim": config.feature_dim,
            "cell": config.cell,
            "layer1_units": config.layer1_units,
            "layer2_units": config.layer2_units,
            "num_experts": config.num_experts,
            "max_frames": config.max_frames,
            "final_state": config.final_state,
        }
    if isinstance(config, LinearConfig):
        return {
            "kind": "linear",
            "vocab_size": config.vocab_size,
            "feature_dim": config.feature_dim,
            "input_features": list(config.input_features),
        }
    raise ConfigError(f"unsupported config type {type(config).__name__}")


def config_from_dict(payload: dict):
    kind = payload.get("kind")
    if kind == "monn":
        return MoNNConfig(
            vocab_size=int(payload["vocab_size"]),
            feature_dim=int(payload["feature_dim"]),
            num_experts=int(payload.get("num_experts", 3)),
            expert_hidden=tuple(payload["expert_hidden"]),
            input_features=tuple(payload.get("input_features",
                                             ("mean", "std", "num_frames"))),
            truncate_labels=payload.get("truncate_labels"),
        )
    if kind == "birnn":
        return RnnConfig(
            vocab_size=int(payload["vocab_size"]),
            feature_dim=int(payload["feature_dim"]),
            cell=payload.get("cell", "lstm"),
            layer1_units=int(payload["layer1_units"]),
            layer2_units=int(payload["layer2_units"]),
            num_experts=int(payload.get("num_experts", 2)),
            max_frames=int(payload.get("max_frames", 300)),
            final_state=payload.get("final_state", "cell"),
        )
    if kind == "linear":
        return LinearConfig(
            vocab_size=int(payload["vocab_size"]),
            feature_dim=int(payload["feature_dim"]),
            input_features=tuple(payload.get("input_features",
                                             ("mean", "std", "num_frames"))),
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def build_model(config):
    """Instantiate a model from a config object or a config dict."""
    if isinstance(config, dict):
        config = config_from_dict(config)
    if isinstance(config, MoNNConfig):
        return MoNNModel(config)
    if isinstance(config, RnnConfig):
        return BiRnnModel(config)
    if isinstance(config, LinearConfig):
        return LinearModel(config)
    raise ConfigError(f"unsupported config type {type(config).__name__}")


def validate_store(model, store: ParameterStore) -> None:
    """Check that a loaded store matches a model's parameter spec."""
    expected = model.param_shapes()
    actual = store.shapes()
    if expected.keys() != actual.keys():
        missing = sorted(expected.keys() - actual.keys())
        extra = sorted(actual.keys() - expected.keys())
        raise SchemaError(
            f"checkpoint/model mismatch: missing {missing}, unexpected {extra}"
        )
    for name, shape in expected.items():
        if tuple(actual[name]) != tuple(shape):
            raise SchemaError(
                f"checkpoint/model mismatch for {name!r}: "
                f"checkpoint {tuple(actual[name])}, model {tuple(shape)}"
            )
