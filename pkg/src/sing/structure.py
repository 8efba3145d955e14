"""Chroma vectors, self-similarity matrices, and structural distance.

A self-similarity matrix (SSM) here is the n x n matrix of pairwise cosine
similarities between the 12-dimensional chroma vectors of a piece's
samples. Silent samples (zero chroma) get similarity 0 to everything,
including themselves, so the cosine is always defined.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sing.midi_io import PianoRoll

N_CHROMA = 12
SSM_MAGIC = b"SINGSSM\x00"
DEGENERATE_STD = 1e-12


@dataclass
class SelfSimilarityMatrix:
    values: np.ndarray  # (n, n) float64, symmetric, entries in [0, 1]
    role: str = "template"  # "template" or "generated"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"SSM must be square, got {self.values.shape}")
        if self.role not in ("template", "generated"):
            raise ValueError(f"unknown SSM role {self.role!r}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class SynthSpec:
    """Recipe for a synthetic block SSM.

    Each block (start, end, level) paints the square region
    [start, end) x [start, end); later blocks overwrite earlier ones and
    the diagonal is forced to 1 on realization.
    """

    length: int
    blocks: list[tuple[int, int, float]] = field(default_factory=list)
    background: float = 0.0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError(f"background {self.background} outside [0, 1]")
        for start, end, level in self.blocks:
            if not 0 <= start < end <= self.length:
                raise ValueError(f"block ({start}, {end}) outside 0..{self.length}")
            if not 0.0 <= level <= 1.0:
                raise ValueError(f"block level {level} outside [0, 1]")


def chroma(roll: PianoRoll) -> np.ndarray:
    """Fold a piano roll into per-sample pitch-class counts, (12, n)."""
    data = roll.data.astype(np.float64)
    out = np.zeros((N_CHROMA, roll.n_samples))
    for cls in range(N_CHROMA):
        out[cls] = data[cls::N_CHROMA].sum(axis=0)
    return out


def ssm(chroma_seq: np.ndarray, role: str = "template") -> SelfSimilarityMatrix:
    """Pairwise cosine similarity between chroma columns.

    Zero columns score 0 against everything (their diagonal included);
    non-silent diagonal entries are exactly 1.
    """
    cols = np.asarray(chroma_seq, dtype=np.float64)
    if cols.ndim != 2 or cols.shape[0] != N_CHROMA:
        raise ValueError(f"chroma must be (12, n), got {cols.shape}")
    norms = np.linalg.norm(cols, axis=0)
    nonzero = norms > 0.0
    unit = np.where(nonzero, norms, 1.0)
    normalized = cols / unit
    values = normalized.T @ normalized
    values = (values + values.T) / 2.0
    np.clip(values, 0.0, 1.0, out=values)
    values[~nonzero, :] = 0.0
    values[:, ~nonzero] = 0.0
    values[np.diag_indices_from(values)] = np.where(nonzero, 1.0, 0.0)
    return SelfSimilarityMatrix(values=values, role=role)


def _values(matrix: SelfSimilarityMatrix | np.ndarray) -> np.ndarray:
    if isinstance(matrix, SelfSimilarityMatrix):
        return matrix.values
    return np.asarray(matrix, dtype=np.float64)


def standardize(matrix: SelfSimilarityMatrix | np.ndarray) -> np.ndarray:
    """Shift to zero mean and scale to unit variance over all n^2 entries.

    Uses the population standard deviation. Near-constant input (std below
    1e-12) standardizes to the all-zero matrix.
    """
    values = _values(matrix)
    if values.shape[0] < 2:
        raise ValueError("standardize needs n >= 2")
    std = float(values.std())
    if std < DEGENERATE_STD:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def standardized_mse(
    template: SelfSimilarityMatrix | np.ndarray, generated: SelfSimilarityMatrix | np.ndarray
) -> float:
    """MSE between the standardized template and generated SSMs.

    Equals 2(1 - correlation) for non-degenerate inputs, so statistically
    unrelated matrices score about 2 and affinely related ones score 0.
    """
    return mse(standardize(template), standardize(generated))


def synth_ssm(spec: SynthSpec) -> SelfSimilarityMatrix:
    """Realize a synthetic SSM: background, block overwrites, unit diagonal."""
    values = np.full((spec.length, spec.length), spec.background, dtype=np.float64)
    for start, end, level in spec.blocks:
        values[start:end, start:end] = level
    values[np.diag_indices_from(values)] = 1.0
    return SelfSimilarityMatrix(values=values, role="template")


def parse_synth_spec(text: str) -> SynthSpec:
    """Read a SynthSpec from `length=`, `background=`, `block=` lines."""
    length: int | None = None
    background = 0.0
    blocks: list[tuple[int, int, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key == "length":
                length = int(value)
            elif key == "background":
                background = float(value)
            elif key == "block":
                start_s, end_s, level_s = value.split(",")
                blocks.append((int(start_s), int(end_s), float(level_s)))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if length is None:
        raise ValueError("spec must set length=<int>")
    return SynthSpec(length=length, blocks=blocks, background=background)


def format_synth_spec(spec: SynthSpec) -> str:
    lines = [f"length={spec.length}", f"background={spec.background}"]
    lines += [f"block={s},{e},{v}" for s, e, v in spec.blocks]
    return "\n".join(lines) + "\n"


def render_pgm(matrix: SelfSimilarityMatrix | np.ndarray) -> bytes:
    """Render a [0, 1] matrix as a binary PGM (P5) image, row 0 on top.

    Values are clamped to [0, 1] and mapped to 0..255 with round-half-up.
    """
    values = np.clip(_values(matrix), 0.0, 1.0)
    pixels = np.floor(values * 255.0 + 0.5).astype(np.uint8)
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def ssm_to_bytes(matrix: SelfSimilarityMatrix) -> bytes:
    header = SSM_MAGIC + struct.pack("<I", matrix.n)
    return header + matrix.values.astype("<f4").tobytes()


def ssm_from_bytes(data: bytes, role: str = "template") -> SelfSimilarityMatrix:
    if data[: len(SSM_MAGIC)] != SSM_MAGIC:
        raise ValueError("not an SSM container (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(SSM_MAGIC))
    payload = data[len(SSM_MAGIC) + 4 :]
    if len(payload) != n * n * 4:
        raise ValueError("SSM payload size mismatch")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, n)
    return SelfSimilarityMatrix(values=values, role=role)


def save_ssm(matrix: SelfSimilarityMatrix, path: str | Path) -> None:
    Path(path).write_bytes(ssm_to_bytes(matrix))


def load_ssm(path: str | Path, role: str = "template") -> SelfSimilarityMatrix:
    return ssm_from_bytes(Path(path).read_bytes(), role=role)
