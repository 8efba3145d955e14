"""Training loop: scheduled sampling, combined loss, Adam, model selection.

The per-piece loss sums binary cross-entropy over the generated steps and
adds the mean squared error between the template SSM and the SSM of the
continuous per-step note probabilities (seed steps contribute their target
chroma). Sampled fed-back inputs are constants: no gradient flows through
the sampling step.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sing import nn
from sing.batching import BatchPlan, apply_edit, make_batches, build_grid, slice_long
from sing.midi_io import N_PITCHES, PianoRoll
from sing.model import Model, ModelConfig, StepTrace, forward_step, head_backward, sample_notes
from sing.structure import N_CHROMA, SelfSimilarityMatrix, chroma, ssm

log = logging.getLogger(__name__)

PITCH_CLASSES = np.arange(N_PITCHES) % N_CHROMA


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    p_feedback: float = 0.8
    lr: float = 0.001
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_feedback <= 1.0:
            raise ValueError("p_feedback must be in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    n_batches: int = 0
    n_pieces: int = 0


@dataclass
class TrainItem:
    """One edited segment ready for training or evaluation."""

    piece_id: str
    segment_index: int
    roll: PianoRoll
    template: SelfSimilarityMatrix

    @property
    def label(self) -> str:
        return f"{self.piece_id}[{self.segment_index}]"


@dataclass
class PieceTrace:
    """Forward pass record for one piece: traces plus backward caches."""

    n: int
    seed_len: int
    inputs: np.ndarray  # (n-1, 128) inputs as fed (seed, then scheduled)
    steps: list[StepTrace]  # generated steps, t = seed_len .. n-1
    lstm_caches: list = field(repr=False, default_factory=list)


@dataclass
class PieceLoss:
    total: float
    bce: float
    structural: float


def scheduled_step(
    d: np.ndarray,
    target_sample: np.ndarray,
    cfg: ModelConfig,
    rng: np.random.Generator,
    p_feedback: float,
) -> tuple[np.ndarray, bool]:
    """Pick the next input: the model's own sample (probability p) or truth."""
    if rng.random() < p_feedback:
        return sample_notes(d, cfg, rng).astype(np.float64), True
    return np.asarray(target_sample, dtype=np.float64), False


def forward_piece(
    model: Model,
    target: PianoRoll,
    S: SelfSimilarityMatrix,
    p_feedback: float,
    rng: np.random.Generator,
) -> PieceTrace:
    """Run the scheduled-sampling forward pass over a whole piece."""
    cfg = model.cfg
    n = target.n_samples
    if S.n != n:
        raise ValueError(f"SSM size {S.n} != piece length {n}")
    if n <= cfg.seed_len:
        raise ValueError(f"piece length {n} must exceed seed length {cfg.seed_len}")
    target_samples = target.data.T.astype(np.float64)  # (n, 128)
    inputs = np.zeros((n - 1, N_PITCHES))
    inputs[: cfg.seed_len] = target_samples[: cfg.seed_len]

    state = model.initial_state()
    caches: list = []
    steps: list[StepTrace] = []
    p = model.params
    for t in range(1, cfg.seed_len):  # warm-up: no prediction needed yet
        h, c, cache = nn.lstm_cell_forward(
            p["lstm.W_x"], p["lstm.W_h"], p["lstm.b"], inputs[t - 1], *state
        )
        state = (h, c)
        caches.append(cache)
    for t in range(cfg.seed_len, n):
        d, state, trace, cache = forward_step(model, inputs[t - 1], S, t, inputs[:t], state)
        caches.append(cache)
        if t <= n - 2:
            inputs[t], trace.fed_back = scheduled_step(
                d, target_samples[t], cfg, rng, p_feedback
            )
        steps.append(trace)
    return PieceTrace(n=n, seed_len=cfg.seed_len, inputs=inputs, steps=steps, lstm_caches=caches)


def _fold_columns(matrix: np.ndarray) -> np.ndarray:
    """(128, m) -> (12, m): sum rows by pitch class."""
    out = np.zeros((N_CHROMA, matrix.shape[1]))
    for cls in range(N_CHROMA):
        out[cls] = matrix[cls::N_CHROMA].sum(axis=0)
    return out


def piece_loss(
    model: Model,
    trace: PieceTrace,
    target: PianoRoll,
    S: SelfSimilarityMatrix,
    with_grad: bool = True,
) -> PieceLoss:
    """Combined loss; when with_grad, accumulates parameter gradients.

    BCE is summed over generated steps against the target samples. The
    structural term compares the template against the SSM of the continuous
    probability columns (target chroma for seed steps).
    """
    n, seed_len = trace.n, trace.seed_len
    if target.n_samples != n or S.n != n:
        raise ValueError("trace, target, and SSM lengths disagree")
    target_samples = target.data.T.astype(np.float64)

    bce_total = 0.0
    d_grads: list[np.ndarray] = []
    for trace_step in trace.steps:
        loss_t, grad_t = nn.bce_with_logits(trace_step.d, target_samples[trace_step.t])
        bce_total += loss_t
        d_grads.append(grad_t)

    # Structural term on chroma of [target seed | predicted probabilities].
    prob_cols = np.stack([s.prob for s in trace.steps], axis=1)  # (128, n - seed_len)
    cols = np.concatenate([target_samples[:seed_len].T, prob_cols], axis=1)
    U = _fold_columns(cols)
    norms = np.linalg.norm(U, axis=0)
    nonzero = norms > 0.0
    V = U / np.where(nonzero, norms, 1.0)
    V[:, ~nonzero] = 0.0
    G = V.T @ V
    diff = G - S.values
    structural = float(np.mean(diff**2))
    total = bce_total + structural

    if with_grad:
        dG = 2.0 * diff / (n * n)
        dV = V @ (dG + dG.T)
        # normalization backward, generated columns only (seed is constant)
        vg = V[:, seed_len:]
        dvg = dV[:, seed_len:]
        nz_gen = nonzero[seed_len:]
        du = (dvg - vg * np.sum(vg * dvg, axis=0)) / np.where(nz_gen, norms[seed_len:], 1.0)
        du[:, ~nz_gen] = 0.0
        dcols = du[PITCH_CLASSES, :]  # unfold pitch classes back to 128 rows
        for idx, trace_step in enumerate(trace.steps):
            prob = trace_step.prob
            d_grads[idx] += dcols[:, idx] * prob * (1.0 - prob)
        _backward_through_time(model, trace, d_grads)
    return PieceLoss(total=total, bce=bce_total, structural=structural)


def _backward_through_time(
    model: Model, trace: PieceTrace, d_grads: list[np.ndarray]
) -> None:
    p = model.params
    hidden = model.cfg.hidden_size
    dz_by_step = {}
    for trace_step, dd in zip(trace.steps, d_grads):
        dz_by_step[trace_step.t] = head_backward(model, trace_step, dd)
    dW_x = np.zeros_like(p["lstm.W_x"])
    dW_h = np.zeros_like(p["lstm.W_h"])
    db = np.zeros_like(p["lstm.b"])
    dh = np.zeros(hidden)
    dc = np.zeros(hidden)
    for t in range(trace.n - 1, 0, -1):
        if t in dz_by_step:
            dh = dh + dz_by_step[t]
        _, dh, dc, dW_x_t, dW_h_t, db_t = nn.lstm_cell_backward(
            trace.lstm_caches[t - 1], dh, dc
        )
        dW_x += dW_x_t
        dW_h += dW_h_t
        db += db_t
    p.accumulate("lstm.W_x", dW_x)
    p.accumulate("lstm.W_h", dW_h)
    p.accumulate("lstm.b", db)


def train_epoch(
    model: Model,
    plan: BatchPlan,
    items: list[TrainItem],
    tcfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochReport:
    """One pass over the plan: per batch, sum piece gradients, one Adam step."""
    if len(items) != len(plan.assignments):
        raise ValueError("items must align with plan assignments")
    started = time.perf_counter()
    losses: list[float] = []
    for batch in plan.batches:
        for idx in batch:
            item = items[idx]
            try:
                trace = forward_piece(model, item.roll, item.template, tcfg.p_feedback, rng)
                loss = piece_loss(model, trace, item.roll, item.template, with_grad=True)
            except (ValueError, FloatingPointError) as exc:
                raise TrainingError(
                    f"non-finite forward pass on piece {item.label} (epoch {epoch}): {exc}"
                ) from exc
            if not math.isfinite(loss.total):
                raise TrainingError(
                    f"non-finite loss on piece {item.label} (epoch {epoch})"
                )
            losses.append(loss.total)
        nn.adam_step(model.params, tcfg.lr)
    elapsed = time.perf_counter() - started
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    if not losses:
        log.warning("epoch %d saw an empty plan; loss undefined", epoch)
    return EpochReport(
        epoch=epoch,
        train_loss=mean_loss,
        val_loss=float("nan"),
        seconds=elapsed,
        n_batches=len(plan.batches),
        n_pieces=len(losses),
    )


def validate(
    model: Model,
    items: list[TrainItem],
    tcfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """Mean piece loss under the training regime (same p_feedback), no grads."""
    if not items:
        return float("nan")
    losses = []
    for item in items:
        trace = forward_piece(model, item.roll, item.template, tcfg.p_feedback, rng)
        losses.append(piece_loss(model, trace, item.roll, item.template, with_grad=False).total)
    return float(np.mean(losses))


def select_best(reports: list[EpochReport]) -> int:
    """Index of the report with the lowest validation loss (ties: earliest)."""
    scored = [r for r in reports if math.isfinite(r.val_loss)]
    if not scored:
        raise ValueError("no report carries a finite validation loss")
    best = scored[0]
    for report in scored[1:]:
        if report.val_loss < best.val_loss:
            best = report
    return reports.index(best)


def train(
    model: Model,
    plan: BatchPlan,
    items: list[TrainItem],
    val_items: list[TrainItem],
    tcfg: TrainConfig,
    checkpoint_dir: str | Path,
    rng: np.random.Generator,
) -> tuple[list[EpochReport], Path]:
    """Full training run; writes per-epoch checkpoints, a CSV, and best.ckpt."""
    ckpt_dir = Path(checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (ckpt_dir / "model_config.txt").write_text(model.cfg.to_text())
    csv_path = ckpt_dir / "report.csv"
    with open(csv_path, "w", newline="") as handle:
        csv.writer(handle).writerow(["epoch", "train_loss", "val_loss", "seconds"])
    reports: list[EpochReport] = []
    ckpt_paths: list[Path] = []
    for epoch in range(tcfg.epochs):
        report = train_epoch(model, plan, items, tcfg, rng, epoch=epoch)
        report.val_loss = validate(model, val_items, tcfg, rng)
        reports.append(report)
        path = ckpt_dir / f"epoch_{epoch}.ckpt"
        nn.save_checkpoint(model.params, path)
        ckpt_paths.append(path)
        with open(csv_path, "a", newline="") as handle:
            csv.writer(handle).writerow(
                [report.epoch, repr(report.train_loss), repr(report.val_loss),
                 f"{report.seconds:.3f}"]
            )
        log.info(
            "epoch %d: train %.4f val %.4f (%.1fs)",
            epoch,
            report.train_loss,
            report.val_loss,
            report.seconds,
        )
    best_idx = select_best(reports)
    best_path = ckpt_dir / "best.ckpt"
    best_path.write_bytes(ckpt_paths[best_idx].read_bytes())
    return reports, best_path


def prepare_corpus(
    rolls: list[PianoRoll],
    rng: np.random.Generator,
    k: int = 10,
    count: int = 16,
    max_len: int = 700,
    batch_cap: int = 100,
    max_edit_fraction: float = 0.04,
    with_items: bool = True,
) -> tuple[BatchPlan, list[TrainItem], list[str]]:
    """Slice, grid, assign, and batch a corpus; returns excluded segment ids.

    Items are aligned index-for-index with the returned plan's assignments;
    each carries the edited roll and the SSM computed from it. Pass
    with_items=False to plan without materializing rolls and SSMs.
    """
    from sing.batching import Assignment, assign_with_bound

    segments: list[tuple[str, int, PianoRoll]] = []
    for roll in rolls:
        parts = slice_long(roll, max_len)
        for seg_idx, seg in enumerate(parts):
            segments.append((roll.source_id, seg_idx, seg))
    grid = build_grid([seg.n_samples for _, _, seg in segments], k=k, count=count, max_len=max_len)

    assignments: list[Assignment] = []
    items: list[TrainItem] = []
    excluded: list[str] = []
    for piece_id, seg_idx, seg in segments:
        result = assign_with_bound(seg.n_samples, grid, max_edit_fraction)
        if result is None:
            excluded.append(f"{piece_id}[{seg_idx}]")
            continue
        target_len, edit, fraction = result
        assignments.append(
            Assignment(piece_id, seg_idx, seg.n_samples, target_len, edit, fraction)
        )
        if with_items:
            edited = apply_edit(seg, target_len)
            items.append(
                TrainItem(
                    piece_id=piece_id,
                    segment_index=seg_idx,
                    roll=edited,
                    template=ssm(chroma(edited)),
                )
            )
    plan = make_batches(assignments, batch_cap, rng)
    return plan, items, excluded


def items_from_plan(
    plan: BatchPlan, rolls_by_id: dict[str, PianoRoll], max_len: int = 700
) -> list[TrainItem]:
    """Rebuild edited training items for a stored plan from source rolls."""
    items: list[TrainItem] = []
    for assignment in plan.assignments:
        if assignment.piece_id not in rolls_by_id:
            raise KeyError(f"plan references unknown piece {assignment.piece_id!r}")
        roll = rolls_by_id[assignment.piece_id]
        segs = slice_long(roll, max_len)
        if assignment.segment_index >= len(segs):
            raise ValueError(
                f"plan references segment {assignment.segment_index} of "
                f"{assignment.piece_id!r}, which has {len(segs)} segments"
            )
        edited = apply_edit(segs[assignment.segment_index], assignment.target_length)
        items.append(
            TrainItem(
                piece_id=assignment.piece_id,
                segment_index=assignment.segment_index,
                roll=edited,
                template=ssm(chroma(edited)),
            )
        )
    return items
