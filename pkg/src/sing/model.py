"""The generation model: LSTM backbone plus SSM-driven attention.

At step t the attention weights are the sparsemax projection of the first
t entries of row t of a user-supplied self-similarity matrix; the attention
vector is the weighted sum of the previous input samples. A linear combiner
merges it with the LSTM output into 128 logits. The ablated baseline is the
same LSTM with the attention path removed and a plain dense head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sing import config as cfgio
from sing import nn
from sing.midi_io import N_PITCHES, PianoRoll
from sing.structure import SelfSimilarityMatrix


@dataclass
class ModelConfig:
    hidden_size: int = 128
    combiner_mode: str = "dense"  # "dense" or "per_pitch"
    seed_len: int = 10
    top_k: int = 50
    max_notes: int = 3
    pitch_lo: int = 20
    pitch_hi: int = 107
    attention_enabled: bool = True
    lstm_output_sparsemax: bool = False  # optional hook, off by default

    def __post_init__(self):
        if not 0 <= self.pitch_lo <= self.pitch_hi <= 127:
            raise ValueError(f"pitch range [{self.pitch_lo}, {self.pitch_hi}] invalid")
        if not 1 <= self.max_notes <= self.top_k:
            raise ValueError("need 1 <= max_notes <= top_k")
        if self.combiner_mode not in ("dense", "per_pitch"):
            raise ValueError(f"unknown combiner mode {self.combiner_mode!r}")
        if self.combiner_mode == "per_pitch" and self.hidden_size != N_PITCHES:
            raise ValueError("per_pitch combiner requires hidden_size == 128")
        if self.seed_len < 1:
            raise ValueError("seed_len must be >= 1")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")

    def to_text(self) -> str:
        return cfgio.format_kv(
            {
                "hidden_size": self.hidden_size,
                "combiner_mode": self.combiner_mode,
                "seed_len": self.seed_len,
                "top_k": self.top_k,
                "max_notes": self.max_notes,
                "pitch_lo": self.pitch_lo,
                "pitch_hi": self.pitch_hi,
                "attention_enabled": self.attention_enabled,
                "lstm_output_sparsemax": self.lstm_output_sparsemax,
            }
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = cfgio.parse_kv(text)
        kwargs = {}
        for fname, caster in (
            ("hidden_size", int),
            ("combiner_mode", str),
            ("seed_len", int),
            ("top_k", int),
            ("max_notes", int),
            ("pitch_lo", int),
            ("pitch_hi", int),
            ("attention_enabled", cfgio.parse_bool),
            ("lstm_output_sparsemax", cfgio.parse_bool),
        ):
            if fname in kv:
                kwargs[fname] = caster(kv[fname])
        return cls(**kwargs)


@dataclass
class StepTrace:
    """Everything recorded while predicting one sample."""

    t: int
    z: np.ndarray  # LSTM output fed to the head/combiner
    d: np.ndarray  # 128 combined logits
    prob: np.ndarray  # sigmoid(d)
    a: np.ndarray | None = None  # attention vector
    w: np.ndarray | None = None  # sparsemax weights over steps < t
    fed_back: bool | None = None  # scheduled-sampling draw for the next input
    _combine_cache: tuple | None = field(default=None, repr=False)
    _z_raw: np.ndarray | None = field(default=None, repr=False)


class Model:
    """Parameter container; the functions below do the actual math."""

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator | None = None,
        params: nn.ParamSet | None = None,
    ):
        self.cfg = cfg
        if params is not None:
            self.params = params
            return
        if rng is None:
            raise ValueError("need an rng to initialize parameters")
        hidden = cfg.hidden_size
        p = nn.ParamSet()
        p.add("lstm.W_x", nn.init_uniform(rng, (4 * hidden, N_PITCHES), N_PITCHES))
        p.add("lstm.W_h", nn.init_uniform(rng, (4 * hidden, hidden), hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
        p.add("lstm.b", bias)
        if cfg.attention_enabled:
            if cfg.combiner_mode == "dense":
                p.add(
                    "combine.W",
                    nn.init_uniform(rng, (N_PITCHES, N_PITCHES + hidden), N_PITCHES + hidden),
                )
                p.add("combine.b", np.zeros(N_PITCHES))
            else:
                p.add("combine.w_a", nn.init_uniform(rng, (1,), 2))
                p.add("combine.w_z", nn.init_uniform(rng, (1,), 2))
                p.add("combine.b", np.zeros(1))
        else:
            p.add("head.W", nn.init_uniform(rng, (N_PITCHES, hidden), hidden))
            p.add("head.b", np.zeros(N_PITCHES))
        self.params = p

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        hidden = self.cfg.hidden_size
        return np.zeros(hidden), np.zeros(hidden)


def attention_step(
    S: SelfSimilarityMatrix | np.ndarray, t: int, history: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sparsemax the first t entries of row t of S, then weight the history.

    history is (t, 128): the input samples at steps 0..t-1 in order.
    Returns (weights over those steps, 128-dim attention vector).
    """
    values = S.values if isinstance(S, SelfSimilarityMatrix) else np.asarray(S)
    if t < 1:
        raise ValueError("attention needs at least one past step (t >= 1)")
    if t >= values.shape[0]:
        raise ValueError(f"SSM of size {values.shape[0]} has no row {t}")
    history = np.asarray(history, dtype=np.float64)
    if history.shape != (t, N_PITCHES):
        raise ValueError(f"history must be ({t}, 128), got {history.shape}")
    w = nn.sparsemax(values[t, :t])
    return w, w @ history


def combine_forward(
    params: nn.ParamSet, mode: str, a: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, tuple]:
    """Merge attention vector and LSTM output into 128 logits."""
    if mode == "dense":
        az = np.concatenate([a, z])
        d = nn.dense_forward(params["combine.W"], params["combine.b"], az)
        return d, ("dense", az, a.shape[0])
    w_a = params["combine.w_a"][0]
    w_z = params["combine.w_z"][0]
    d = w_a * a + w_z * z + params["combine.b"][0]
    return d, ("per_pitch", a, z)


def combine_backward(
    params: nn.ParamSet, cache: tuple, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulates combiner parameter gradients; returns (da, dz)."""
    if cache[0] == "dense":
        _, az, n_a = cache
        dW, db, daz = nn.dense_backward(params["combine.W"], az, upstream)
        params.accumulate("combine.W", dW)
        params.accumulate("combine.b", db)
        return daz[:n_a], daz[n_a:]
    _, a, z = cache
    params.accumulate("combine.w_a", np.array([float(upstream @ a)]))
    params.accumulate("combine.w_z", np.array([float(upstream @ z)]))
    params.accumulate("combine.b", np.array([float(upstream.sum())]))
    return params["combine.w_a"][0] * upstream, params["combine.w_z"][0] * upstream


def forward_step(
    model: Model,
    prev_sample: np.ndarray,
    S: SelfSimilarityMatrix | np.ndarray | None,
    t: int,
    history: np.ndarray,
    state: tuple[np.ndarray, np.ndarray],
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray], StepTrace, tuple]:
    """Advance the LSTM on the previous sample and emit logits for sample t.

    Returns (d, new_state, trace, lstm_cache). With attention enabled the
    logits combine the SSM-attention vector with the LSTM output; otherwise
    the dense head maps the LSTM output alone and S is ignored.
    """
    p = model.params
    h, c, lstm_cache = nn.lstm_cell_forward(
        p["lstm.W_x"], p["lstm.W_h"], p["lstm.b"], np.asarray(prev_sample, np.float64), *state
    )
    z_raw = h
    z = nn.sparsemax(z_raw) if model.cfg.lstm_output_sparsemax else z_raw
    if model.cfg.attention_enabled:
        if S is None:
            raise ValueError("attention model needs an SSM")
        w, a = attention_step(S, t, history)
        d, combine_cache = combine_forward(p, model.cfg.combiner_mode, a, z)
        trace = StepTrace(
            t=t, z=z, d=d, prob=nn.sigmoid(d), a=a, w=w, _combine_cache=combine_cache, _z_raw=z_raw
        )
    else:
        d = nn.dense_forward(p["head.W"], p["head.b"], z)
        trace = StepTrace(t=t, z=z, d=d, prob=nn.sigmoid(d), _z_raw=z_raw)
    return d, (h, c), trace, lstm_cache


def head_backward(model: Model, trace: StepTrace, upstream: np.ndarray) -> np.ndarray:
    """Backprop logits -> LSTM output for one step; accumulates param grads."""
    p = model.params
    if model.cfg.attention_enabled:
        _, dz = combine_backward(p, trace._combine_cache, upstream)
    else:
        dW, db, dz = nn.dense_backward(p["head.W"], trace.z, upstream)
        p.accumulate("head.W", dW)
        p.accumulate("head.b", db)
    if model.cfg.lstm_output_sparsemax:
        dz = nn.sparsemax_backward(trace.z, dz)
    return dz


def sample_notes(d: np.ndarray, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw up to max_notes pitches from the top-k of sigmoid(d).

    Pitches outside [pitch_lo, pitch_hi] are masked out. The k highest
    probabilities (ties to the lower pitch) are renormalized into a
    categorical; max_notes draws with replacement give 1..max_notes distinct
    active pitches.
    """
    probs = nn.sigmoid(np.asarray(d, dtype=np.float64))
    allowed = np.arange(cfg.pitch_lo, cfg.pitch_hi + 1)
    # stable sort on (-prob, pitch): lexsort uses the last key as primary
    order = np.lexsort((allowed, -probs[allowed]))
    top = allowed[order[: cfg.top_k]]
    mass = probs[top]
    total = mass.sum()
    if total <= 0.0:
        top = allowed  # degenerate logits: uniform over the allowed range
        weights = np.full(len(allowed), 1.0 / len(allowed))
    else:
        weights = mass / total
    draws = rng.choice(top, size=cfg.max_notes, replace=True, p=weights)
    sample = np.zeros(N_PITCHES, dtype=np.uint8)
    sample[np.unique(draws)] = 1
    return sample


def generate(
    model: Model,
    seed: np.ndarray,
    S: SelfSimilarityMatrix,
    rng: np.random.Generator,
    tempo: float = 120.0,
    source_id: str = "generated",
) -> PianoRoll:
    """Continue a seed out to the template SSM's length.

    seed is (seed_len, 128) binary, sample-major. The output roll copies the
    seed and appends one sampled step at a time until it spans n samples.
    """
    cfg = model.cfg
    seed = np.asarray(seed)
    n = S.n
    if seed.shape != (cfg.seed_len, N_PITCHES):
        raise ValueError(f"seed must be ({cfg.seed_len}, 128), got {seed.shape}")
    if n <= cfg.seed_len:
        raise ValueError(f"template length {n} must exceed seed length {cfg.seed_len}")
    out = np.zeros((n, N_PITCHES), dtype=np.uint8)
    out[: cfg.seed_len] = seed
    state = model.initial_state()
    for i in range(cfg.seed_len - 1):  # warm up on all but the last seed sample
        h, c, _ = nn.lstm_cell_forward(
            model.params["lstm.W_x"],
            model.params["lstm.W_h"],
            model.params["lstm.b"],
            out[i].astype(np.float64),
            *state,
        )
        state = (h, c)
    for t in range(cfg.seed_len, n):
        d, state, _, _ = forward_step(model, out[t - 1], S, t, out[:t].astype(np.float64), state)
        out[t] = sample_notes(d, cfg, rng)
    return PianoRoll(data=out.T.copy(), tempo=tempo, source_id=source_id)


def save_model(model: Model, checkpoint_path: str | Path) -> None:
    nn.save_checkpoint(model.params, checkpoint_path)


def load_model(checkpoint_path: str | Path, cfg: ModelConfig) -> Model:
    return Model(cfg, params=nn.load_checkpoint(checkpoint_path))
