"""Minimal dense/conv neural-net kernel with hand-written reverse-mode
gradients, plus Adam.

Tensors are plain numpy arrays (shape + row-major data). The agent's
architecture is fixed, so there is no general autodiff graph: each layer
caches what it needs during `forward` and exposes `backward`, and a model is
a chain of layers. Gradients accumulate across samples until `zero_grads`.
Float32 is the training default; tests run float64 for finite-difference
checks.
"""

from __future__ import annotations

import json
from typing import Iterable, Mapping

import numpy as np

from .errors import NumericError, ParameterError, StateError

Params = dict[str, np.ndarray]


def ensure_finite(name: str, arr: np.ndarray | float) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


# -- initializers --------------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(
    rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# -- stateless forward ops ------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weights + bias


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-shifted softmax computed in float64; raises on non-finite output.

    Components are clamped into [1e-12, 1 - 1e-12] and renormalized so the
    output is a strictly interior distribution even for saturated logits
    (keeps log-probabilities finite downstream).
    """
    shifted = np.asarray(z, dtype=np.float64)
    shifted = shifted - shifted.max()
    e = np.exp(shifted)
    out = e / e.sum()
    out = np.clip(out, 1e-12, 1.0 - 1e-12)
    out /= out.sum()
    ensure_finite("softmax", out)
    return out


def _im2col_indices(c: int, h: int, w: int, kh: int, kw: int):
    """Gather indices mapping a zero-padded (C,H+kh-1,W+kw-1) image to
    same-padding patch columns of shape (H*W, C*kh*kw)."""
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    ci, ki, kj = ci.reshape(-1), ki.reshape(-1), kj.reshape(-1)
    oi, oj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    oi, oj = oi.reshape(-1), oj.reshape(-1)
    rows = oi[:, None] + ki[None, :]
    cols = oj[:, None] + kj[None, :]
    chan = np.broadcast_to(ci[None, :], rows.shape)
    return chan, rows, cols


def conv2d_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, padding: str = "same"
) -> np.ndarray:
    """Cross-correlation of a (C,H,W) input with (F,C,kh,kw) filters plus
    bias, preserving spatial dims (stride 1, same padding, odd kernels)."""
    if stride != 1 or padding != "same":
        raise ParameterError("only stride=1 with same padding is supported")
    f, c, kh, kw = weights.shape
    if x.ndim != 3 or x.shape[0] != c:
        raise ParameterError(f"input shape {x.shape} does not match filters {weights.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError("same padding requires odd kernel sizes")
    _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    chan, rows, cols = _im2col_indices(c, h, w, kh, kw)
    patches = padded[chan, rows, cols]  # (H*W, C*kh*kw)
    out = patches @ weights.reshape(f, -1).T + bias
    return out.T.reshape(f, h, w)


# -- layers ---------------------------------------------------------------------


class Layer:
    params: Params = {}
    grads: Params = {}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, g):  # pragma: no cover - interface
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, name: str, weights: np.ndarray, bias: np.ndarray):
        self.name = name
        self.w = weights
        self.b = bias
        self.params = {f"{name}.w": self.w, f"{name}.b": self.b}
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.grads = {f"{name}.w": self.dw, f"{name}.b": self.db}
        self._idx = None
        self._flat_idx = None
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        f, c, kh, kw = self.w.shape
        _, h, w = x.shape
        padded = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        if self._idx is None or self._idx[0] != x.shape:
            self._idx = (x.shape, _im2col_indices(c, h, w, kh, kw))
        chan, rows, cols = self._idx[1]
        patches = padded[chan, rows, cols]
        self._cache = (x.shape, padded.shape, patches)
        out = patches @ self.w.reshape(f, -1).T + self.b
        return out.T.reshape(f, h, w).astype(x.dtype, copy=False)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward before forward")
        x_shape, padded_shape, patches = self._cache
        f = self.w.shape[0]
        h, w = x_shape[1], x_shape[2]
        g2 = g.reshape(f, h * w).T  # (H*W, F)
        self.dw += (g2.T @ patches).reshape(self.w.shape)
        self.db += g2.sum(axis=0)
        dpatches = g2 @ self.w.reshape(f, -1)  # (H*W, C*kh*kw)
        if self._flat_idx is None:
            chan, rows, cols = self._idx[1]
            flat = (chan * padded_shape[1] + rows) * padded_shape[2] + cols
            self._flat_idx = flat.ravel()
        size = padded_shape[0] * padded_shape[1] * padded_shape[2]
        dpadded = np.bincount(
            self._flat_idx, weights=dpatches.ravel().astype(np.float64, copy=False),
            minlength=size,
        ).reshape(padded_shape)
        kh, kw = self.w.shape[2], self.w.shape[3]
        out = dpadded[:, kh // 2 : kh // 2 + h, kw // 2 : kw // 2 + w]
        return out.astype(g.dtype, copy=False)


class Dense(Layer):
    def __init__(self, name: str, weights: np.ndarray, bias: np.ndarray):
        self.name = name
        self.w = weights
        self.b = bias
        self.params = {f"{name}.w": self.w, f"{name}.b": self.b}
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.grads = {f"{name}.w": self.dw, f"{name}.b": self.db}
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("backward before forward")
        self.dw += self._x[:, None] * g[None, :]
        self.db += g
        return g @ self.w.T


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("backward before forward")
        return np.where(self._mask, g, 0.0)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(-1)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g.reshape(self._shape)


class Softmax(Layer):
    """Softmax over a vector; backward expects dL/dprobs."""

    def __init__(self):
        self._p = None

    def forward(self, z: np.ndarray) -> np.ndarray:
        self._p = softmax(z)
        return self._p

    def backward(self, gp: np.ndarray) -> np.ndarray:
        if self._p is None:
            raise StateError("backward before forward")
        p = self._p
        return (p * (gp - float(gp @ p))).astype(gp.dtype, copy=False)


class Chain(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()


def collect_params(layers: Iterable[Layer]) -> Params:
    out: Params = {}
    for layer in layers:
        out.update(layer.params)
    return out


def collect_grads(layers: Iterable[Layer]) -> Params:
    out: Params = {}
    for layer in layers:
        out.update(layer.grads)
    return out


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; moment state lives here."""

    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        # moments follow the parameter dtype (float32 training, float64 checks)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params: Params, grads: Params, lr: float) -> None:
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.step_count += 1
        t = self.step_count
        for key, p in params.items():
            g = grads[key].astype(p.dtype, copy=False)
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            np.sqrt(v_hat, out=v_hat)
            v_hat += self.eps
            m_hat *= lr
            m_hat /= v_hat
            p -= m_hat

    def state(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for key in self.m:
            self.m[key] = np.asarray(state["m"][key], dtype=self.m[key].dtype)
            self.v[key] = np.asarray(state["v"][key], dtype=self.v[key].dtype)


def decay_lr(lr0: float, episode_index: int, decay: float = 0.95) -> float:
    """Per-episode exponential decay of the initial learning rate."""
    return lr0 * decay**episode_index


# -- gradient utilities -----------------------------------------------------------


def global_norm(grads: Params) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_global_norm(grads: Params, max_norm: float) -> float:
    """Scale grads in place so their global norm is at most max_norm.
    Returns the pre-clip norm. max_norm <= 0 disables clipping."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoints -------------------------------------------------------------------


def params_fingerprint(params: Params) -> str:
    parts = [f"{k}:{','.join(map(str, v.shape))}" for k, v in sorted(params.items())]
    return ";".join(parts)


def save_checkpoint(path: str, params: Params, optimizer: Adam, meta: Mapping) -> None:
    """Versioned dump of parameters, optimizer moments and run metadata."""
    payload = {f"param/{k}": v for k, v in params.items()}
    payload.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
    payload.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    header = {
        "format_version": 1,
        "fingerprint": params_fingerprint(params),
        "adam_step_count": optimizer.step_count,
        "meta": dict(meta),
    }
    payload["header_json"] = np.array(json.dumps(header, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path: str, expected_fingerprint: str | None = None):
    """Returns (params, adam_state, meta); rejects architecture mismatch."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header_json"]))
        if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
            raise StateError(
                "checkpoint fingerprint mismatch: "
                f"expected {expected_fingerprint!r}, found {header['fingerprint']!r}"
            )
        params = {
            k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")
        }
        adam_state = {
            "step_count": header["adam_step_count"],
            "m": {k[len("adam_m/") :]: data[k] for k in data.files if k.startswith("adam_m/")},
            "v": {k[len("adam_v/") :]: data[k] for k in data.files if k.startswith("adam_v/")},
        }
    return params, adam_state, header["meta"]
