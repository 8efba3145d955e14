"""Variable-length batching.

Long pieces are sliced into equal segments, a 16-point log-spaced grid of
standard lengths is fit between the k-th shortest segment and the maximum
length, and every segment is padded or truncated to its nearest grid length
in log distance. Segments needing an edit larger than the configured
fraction (default 4%) are excluded. Batches are length-homogeneous and
capped in size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sing.midi_io import N_PITCHES, PianoRoll

GRID_K = 10
GRID_COUNT = 16
GRID_MAX_LEN = 700
BATCH_CAP = 100
MAX_EDIT_FRACTION = 0.04


@dataclass
class LengthGrid:
    lengths: list[int]  # increasing sample counts, ratio constant in log space
    min_len: int
    max_len: int
    k: int


@dataclass
class Assignment:
    piece_id: str
    segment_index: int
    source_length: int
    target_length: int
    edit: str  # "pad" | "truncate" | "none"
    edit_fraction: float


@dataclass
class BatchPlan:
    assignments: list[Assignment]
    batches: list[list[int]] = field(default_factory=list)  # indices into assignments


def segment_lengths(n: int, max_len: int) -> list[int]:
    """Lengths of the equal segments a piece of n samples is sliced into.

    Pieces at or under max_len stay whole; longer ones split into
    ceil(n / max_len) segments of floor(n / m) samples, trailing remainder
    dropped.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if n <= max_len:
        return [n]
    m = math.ceil(n / max_len)
    return [n // m] * m


def slice_long(roll: PianoRoll, max_len: int) -> list[PianoRoll]:
    """Slice a piano roll into consecutive equal-length segments."""
    parts = segment_lengths(roll.n_samples, max_len)
    if len(parts) == 1:
        return [roll]
    seg = parts[0]
    return [
        PianoRoll(
            data=roll.data[:, i * seg : (i + 1) * seg],
            tempo=roll.tempo,
            source_id=f"{roll.source_id}#{i}" if roll.source_id else f"#{i}",
        )
        for i in range(len(parts))
    ]


def build_grid(
    piece_lengths: list[int],
    k: int = GRID_K,
    count: int = GRID_COUNT,
    max_len: int = GRID_MAX_LEN,
) -> LengthGrid:
    """Log-spaced standard lengths from the k-th shortest piece up to max_len."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if count < 2:
        raise ValueError("grid needs at least 2 points")
    if len(piece_lengths) < k:
        raise ValueError(f"need at least {k} pieces, got {len(piece_lengths)}")
    min_len = sorted(piece_lengths)[k - 1]
    if min_len < 1:
        raise ValueError("piece lengths must be positive")
    if min_len > max_len:
        raise ValueError(f"k-th shortest length {min_len} exceeds max_len {max_len}")
    ratio = max_len / min_len
    lengths = [
        int(math.floor(min_len * ratio ** (i / (count - 1)) + 0.5)) for i in range(count)
    ]
    return LengthGrid(lengths=lengths, min_len=min_len, max_len=max_len, k=k)


def assign(roll_length: int, grid: LengthGrid) -> tuple[int, str, float] | None:
    """Nearest grid length in log distance, or None when the edit exceeds 4%.

    Returns (target_length, edit, edit_fraction); ties in log distance go to
    the smaller target.
    """
    return assign_with_bound(roll_length, grid, MAX_EDIT_FRACTION)


def assign_with_bound(
    roll_length: int, grid: LengthGrid, max_edit_fraction: float
) -> tuple[int, str, float] | None:
    if roll_length < 1:
        raise ValueError("roll_length must be >= 1")
    log_len = math.log(roll_length)
    best_target = grid.lengths[0]
    best_dist = abs(log_len - math.log(best_target))
    for target in grid.lengths[1:]:
        dist = abs(log_len - math.log(target))
        if dist < best_dist:  # ties keep the earlier (smaller) target
            best_dist = dist
            best_target = target
    fraction = abs(roll_length - best_target) / roll_length
    if fraction > max_edit_fraction:
        return None
    if roll_length > best_target:
        edit = "truncate"
    elif roll_length < best_target:
        edit = "pad"
    else:
        edit = "none"
    return best_target, edit, fraction


def apply_edit(roll: PianoRoll, target_length: int) -> PianoRoll:
    """Pad with silent samples or drop trailing samples to hit the target."""
    n = roll.n_samples
    if n == target_length:
        return roll
    if n > target_length:
        data = roll.data[:, :target_length]
    else:
        pad = np.zeros((N_PITCHES, target_length - n), dtype=np.uint8)
        data = np.concatenate([roll.data, pad], axis=1)
    return PianoRoll(data=data, tempo=roll.tempo, source_id=roll.source_id)


def make_batches(
    assignments: list[Assignment], batch_cap: int, rng: np.random.Generator
) -> BatchPlan:
    """Group assignments by target length into shuffled batches of <= cap."""
    if batch_cap < 1:
        raise ValueError("batch_cap must be >= 1")
    groups: dict[int, list[int]] = {}
    for idx, item in enumerate(assignments):
        groups.setdefault(item.target_length, []).append(idx)
    batches: list[list[int]] = []
    for target in sorted(groups):
        members = np.array(groups[target], dtype=np.int64)
        rng.shuffle(members)
        for start in range(0, len(members), batch_cap):
            batches.append([int(i) for i in members[start : start + batch_cap]])
    order = rng.permutation(len(batches))
    batches = [batches[int(i)] for i in order]
    return BatchPlan(assignments=list(assignments), batches=batches)


def plan_to_text(plan: BatchPlan) -> str:
    lines = [
        f"{a.piece_id},{a.segment_index},{a.target_length},{a.edit},{a.edit_fraction!r}"
        for a in plan.assignments
    ]
    lines += ["batch: " + " ".join(str(i) for i in batch) for batch in plan.batches]
    return "\n".join(lines) + "\n"


def plan_from_text(text: str) -> BatchPlan:
    assignments: list[Assignment] = []
    batches: list[list[int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("batch:"):
            body = line[len("batch:") :].split()
            batches.append([int(tok) for tok in body])
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        piece_id, segment_s, target_s, edit, fraction_s = parts
        if edit not in ("pad", "truncate", "none"):
            raise ValueError(f"line {lineno}: unknown edit {edit!r}")
        target = int(target_s)
        fraction = float(fraction_s)
        source = _source_length(target, edit, fraction)
        assignments.append(
            Assignment(piece_id, int(segment_s), source, target, edit, fraction)
        )
    for batch in batches:
        for idx in batch:
            if not 0 <= idx < len(assignments):
                raise ValueError(f"batch references assignment {idx} out of range")
    return BatchPlan(assignments=assignments, batches=batches)


def _source_length(target: int, edit: str, fraction: float) -> int:
    if edit == "none" or fraction == 0.0:
        return target
    # |source - target| / source = fraction, sign given by the edit kind
    source = target / (1 - fraction) if edit == "truncate" else target / (1 + fraction)
    return int(round(source))


def save_plan(plan: BatchPlan, path: str | Path) -> None:
    Path(path).write_text(plan_to_text(plan))


def load_plan(path: str | Path) -> BatchPlan:
    return plan_from_text(Path(path).read_text())
