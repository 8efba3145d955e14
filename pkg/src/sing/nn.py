"""Differentiable numeric kernels and the Adam optimizer.

Everything is 64-bit numpy with hand-written backward passes. The
convention throughout: forward functions return their output plus whatever
cache the matching backward needs; backward functions take the upstream
gradient and return gradients in input order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SINGCKPT"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# dense affine map


def dense_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: W {W.shape}, b {b.shape}, x {x.shape}")
    return W @ x + b


def dense_backward(
    W: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, db, dx) of y = Wx + b given dL/dy."""
    return np.outer(upstream, x), upstream.copy(), W.T @ upstream


# ---------------------------------------------------------------------------
# LSTM cell; gate rows are stacked [input, forget, candidate, output]


def lstm_cell_forward(
    W_x: np.ndarray,
    W_h: np.ndarray,
    b: np.ndarray,
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, tuple]:
    hidden = h_prev.shape[0]
    if W_x.shape[0] != 4 * hidden or W_h.shape != (4 * hidden, hidden):
        raise ValueError(f"LSTM shapes inconsistent: W_x {W_x.shape}, W_h {W_h.shape}")
    if x.shape[0] != W_x.shape[1]:
        raise ValueError(f"input size {x.shape[0]} != {W_x.shape[1]}")
    pre = W_x @ x + W_h @ h_prev + b
    i = sigmoid(pre[:hidden])
    f = sigmoid(pre[hidden : 2 * hidden])
    g = np.tanh(pre[2 * hidden : 3 * hidden])
    o = sigmoid(pre[3 * hidden :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (W_x, W_h, x, h_prev, c_prev, i, f, g, o, tc)
    return h, c, cache


def lstm_cell_backward(
    cache: tuple, dh: np.ndarray, dc: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dh_prev, dc_prev, dW_x, dW_h, db)."""
    W_x, W_h, x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dct = dc + dh * o * (1.0 - tc * tc)
    di = dct * g
    df = dct * c_prev
    dg = dct * i
    dc_prev = dct * f
    dpre = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)]
    )
    dW_x = np.outer(dpre, x)
    dW_h = np.outer(dpre, h_prev)
    dx = W_x.T @ dpre
    dh_prev = W_h.T @ dpre
    return dx, dh_prev, dc_prev, dW_x, dW_h, dpre


# ---------------------------------------------------------------------------
# sparsemax: Euclidean projection onto the probability simplex


def sparsemax(q: np.ndarray) -> np.ndarray:
    """Project q onto {p : p >= 0, sum p = 1} by sort-and-threshold."""
    q = np.asarray(q, dtype=np.float64)
    size = q.shape[0]
    if size == 0:
        raise ValueError("sparsemax needs at least one entry")
    sorted_desc = np.sort(q)[::-1]
    cumulative = np.cumsum(sorted_desc)
    ks = np.arange(1, size + 1)
    feasible = 1.0 + ks * sorted_desc > cumulative
    k = int(ks[feasible][-1])
    tau = (cumulative[k - 1] - 1.0) / k
    return np.maximum(q - tau, 0.0)


def sparsemax_backward(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Jacobian-vector product on the support set of the projection."""
    support = p > 0.0
    mean_on_support = upstream[support].mean()
    dq = np.zeros_like(upstream)
    dq[support] = upstream[support] - mean_on_support
    return dq


# ---------------------------------------------------------------------------
# multi-label binary cross-entropy from logits


def bce_with_logits(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Stable BCE summed over entries; returns (loss, dloss/dx)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = float(np.sum(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))
    return loss, sigmoid(x) - y


# ---------------------------------------------------------------------------
# parameters and Adam


class ParamSet:
    """Named tensors with gradient accumulators and Adam moments."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.values[name].shape:
            raise ValueError(f"gradient shape {grad.shape} != {self.values[name].shape}")
        self.grads[name] += grad

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def adam_step(
    params: ParamSet,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update over every parameter; clears gradients."""
    params.step += 1
    t = params.step
    for name, value in params.values.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grads()


# ---------------------------------------------------------------------------
# checkpoint container

_ADAM_M = "adam/m/"
_ADAM_V = "adam/v/"
_ADAM_STEP = "adam/step"


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    if array.ndim == 1:
        rows, cols = array.shape[0], 0
    elif array.ndim == 2:
        rows, cols = array.shape
    else:
        raise ValueError(f"tensor {name!r} has rank {array.ndim}, expected 1 or 2")
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack("<II", rows, cols)
    return head + array.astype("<f8").tobytes()


def checkpoint_to_bytes(params: ParamSet) -> bytes:
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(params.values):
        entries.append((name, params.values[name]))
        entries.append((_ADAM_M + name, params.m[name]))
        entries.append((_ADAM_V + name, params.v[name]))
    entries.append((_ADAM_STEP, np.array([float(params.step)])))
    body = b"".join(_pack_tensor(name, arr) for name, arr in entries)
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(entries)) + body


def checkpoint_from_bytes(data: bytes) -> ParamSet:
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        n_values = rows * max(cols, 1)
        values = np.frombuffer(data, dtype="<f8", count=n_values, offset=pos).copy()
        pos += n_values * 8
        tensors[name] = values if cols == 0 else values.reshape(rows, cols)
    if pos != len(data):
        raise ValueError("trailing bytes after last tensor")

    params = ParamSet()
    for name, array in tensors.items():
        if name.startswith((_ADAM_M, _ADAM_V)) or name == _ADAM_STEP:
            continue
        params.add(name, array)
        if _ADAM_M + name in tensors:
            params.m[name] = np.asarray(tensors[_ADAM_M + name], dtype=np.float64)
        if _ADAM_V + name in tensors:
            params.v[name] = np.asarray(tensors[_ADAM_V + name], dtype=np.float64)
    if _ADAM_STEP in tensors:
        params.step = int(tensors[_ADAM_STEP][0])
    return params


def save_checkpoint(params: ParamSet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(params))


def load_checkpoint(path: str | Path) -> ParamSet:
    return checkpoint_from_bytes(Path(path).read_bytes())
