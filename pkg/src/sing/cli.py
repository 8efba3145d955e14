"""Command-line entry point for the whole pipeline.

Verbs: preprocess, batch-plan, train, generate, evaluate, render-ssm,
synth-ssm. Every verb accepts --seed; all randomness derives from it, so
repeated invocations with identical inputs and seed produce identical
output bytes. A --config file of ``key = value`` lines overrides built-in
defaults, and explicit flags override the config.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from sing import batching, evaluation, midi_io, structure, training
from sing import config as cfgio
from sing.model import Model, ModelConfig, generate, load_model
from sing.structure import chroma, ssm

log = logging.getLogger(__name__)

_CONFIG_KEYS = {
    "grid.k": ("grid_k", int),
    "grid.count": ("grid_count", int),
    "grid.max_len": ("max_len", int),
    "batch.cap": ("batch_cap", int),
    "edit.max_fraction": ("max_edit", float),
    "model.hidden_size": ("hidden", int),
    "model.combiner_mode": ("combiner", str),
    "model.seed_len": ("seed_len", int),
    "model.top_k": ("top_k", int),
    "model.max_notes": ("max_notes", int),
    "model.pitch_lo": ("pitch_lo", int),
    "model.pitch_hi": ("pitch_hi", int),
    "train.p_feedback": ("p_feedback", float),
    "train.lr": ("lr", float),
    "train.epochs": ("epochs", int),
}


def _load_config(argv: list[str]) -> dict[str, object]:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    path = Path(known.config)
    if not path.exists():
        raise FileNotFoundError(path)
    overrides: dict[str, object] = {}
    for key, value in cfgio.parse_kv(path.read_text()).items():
        if key not in _CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        dest, caster = _CONFIG_KEYS[key]
        overrides[dest] = caster(value)
    return overrides


def _build_parser(defaults: dict[str, object]) -> argparse.ArgumentParser:
    def dflt(dest: str, fallback):
        return defaults.get(dest, fallback)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file overriding defaults")
    common.add_argument("--seed", type=int, default=0, help="RNG seed for all randomness")
    common.add_argument("--jobs", type=int, default=1, help="worker hint (outputs are identical for any value)")

    def model_flags(p: argparse.ArgumentParser, with_arch: bool = True):
        if with_arch:
            p.add_argument("--hidden", type=int, default=dflt("hidden", 128), help="LSTM hidden size")
            p.add_argument(
                "--combiner",
                choices=["dense", "per_pitch"],
                default=dflt("combiner", "dense"),
                help="how attention and LSTM outputs merge",
            )
            p.add_argument("--ablated", action="store_true", help="attention-free baseline model")
        p.add_argument("--seed-len", type=int, default=dflt("seed_len", 10), help="samples fed before generation")
        p.add_argument("--top-k", type=int, default=dflt("top_k", 50), help="sample from the k most probable pitches")
        p.add_argument("--max-notes", type=int, default=dflt("max_notes", 3), help="categorical draws per sample")
        p.add_argument("--pitch-lo", type=int, default=dflt("pitch_lo", 20), help="lowest sampleable pitch")
        p.add_argument("--pitch-hi", type=int, default=dflt("pitch_hi", 107), help="highest sampleable pitch")

    def batching_flags(p: argparse.ArgumentParser):
        p.add_argument("--grid-k", type=int, default=dflt("grid_k", 10), help="rank of the shortest standard length")
        p.add_argument("--grid-count", type=int, default=dflt("grid_count", 16), help="number of standard lengths")
        p.add_argument("--max-len", type=int, default=dflt("max_len", 700), help="slice pieces longer than this")
        p.add_argument("--batch-cap", type=int, default=dflt("batch_cap", 100), help="max pieces per batch")
        p.add_argument(
            "--max-edit",
            type=float,
            default=dflt("max_edit", 0.04),
            help="exclude pieces needing a larger pad/truncate fraction",
        )

    parser = argparse.ArgumentParser(
        prog="sing",
        description="Self-similarity-guided music generation pipeline.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("preprocess", parents=[common], formatter_class=fmt,
                       help="MIDI directory -> piano rolls and SSMs")
    p.add_argument("--in", dest="input_path", required=True, help="directory of .mid/.midi files")
    p.add_argument("--out", dest="output_path", required=True, help="output directory")

    p = sub.add_parser("batch-plan", parents=[common], formatter_class=fmt,
                       help="piano rolls -> variable-length batch plan")
    p.add_argument("--in", dest="input_path", required=True, help="directory of .proll files")
    p.add_argument("--out", dest="output_path", required=True, help="plan file to write")
    batching_flags(p)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="plan + corpus -> checkpoints and report CSV")
    p.add_argument("--in", dest="input_path", required=True, help="directory of .proll files")
    p.add_argument("--plan", required=True, help="batch plan from batch-plan")
    p.add_argument("--out", dest="output_path", required=True, help="checkpoint directory")
    p.add_argument("--val", help="validation .proll directory (default: training corpus)")
    p.add_argument("--epochs", type=int, default=dflt("epochs", 30), help="training epochs")
    p.add_argument("--lr", type=float, default=dflt("lr", 0.001), help="Adam learning rate")
    p.add_argument(
        "--p-feedback",
        type=float,
        default=dflt("p_feedback", 0.8),
        help="probability of feeding back the model's own sample",
    )
    p.add_argument("--max-len", type=int, default=dflt("max_len", 700), help="must match the plan's slicing length")
    model_flags(p)

    p = sub.add_parser("generate", parents=[common], formatter_class=fmt,
                       help="checkpoint + seed + template SSM -> piano roll and MIDI")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--in", dest="input_path", required=True, help="seed .proll (first seed-len samples used)")
    p.add_argument("--template", required=True, help="template .ssm steering the structure")
    p.add_argument("--out", dest="output_path", required=True, help="output prefix (writes .proll and .mid)")
    p.add_argument("--model-config", help="model config file (default: next to checkpoint)")
    p.add_argument("--ablated", action="store_true",
                   help="assert the checkpoint is the attention-free model")

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt,
                       help="checkpoint(s) + test corpus -> standardized-MSE CSV")
    p.add_argument("--in", dest="input_path", required=True, help="directory of test .proll files")
    p.add_argument("--out", dest="output_path", required=True, help="CSV file to write")
    p.add_argument("--generator", choices=["sing", "ablated", "random"], default="sing",
                   help="which generator to score")
    p.add_argument("--checkpoint", help="model checkpoint (sing/ablated generators)")
    p.add_argument("--model-config", help="model config file (default: next to checkpoint)")
    p.add_argument("--generations", type=int, default=3, help="generations per test piece")
    p.add_argument("--ablated", action="store_true", help="shorthand for --generator ablated")
    model_flags(p, with_arch=False)
    batching_flags(p)

    p = sub.add_parser("render-ssm", parents=[common], formatter_class=fmt,
                       help="SSM container -> PGM image")
    p.add_argument("--in", dest="input_path", required=True, help=".ssm file")
    p.add_argument("--out", dest="output_path", required=True, help=".pgm file to write")

    p = sub.add_parser("synth-ssm", parents=[common], formatter_class=fmt,
                       help="block spec text -> synthetic SSM container")
    p.add_argument("--in", dest="input_path", required=True, help="length=/background=/block= text file")
    p.add_argument("--out", dest="output_path", required=True, help=".ssm file to write")

    return parser


def _require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def _load_rolls(directory: str | Path) -> list[midi_io.PianoRoll]:
    directory = _require(directory)
    rolls = [midi_io.load_proll(p) for p in sorted(directory.glob("*.proll"))]
    if not rolls:
        raise FileNotFoundError(f"no .proll files in {directory}")
    return rolls


def _model_config_for(checkpoint: Path, explicit: str | None) -> ModelConfig:
    cfg_path = Path(explicit) if explicit else checkpoint.parent / "model_config.txt"
    return ModelConfig.from_text(_require(cfg_path).read_text())


def _cmd_preprocess(args) -> int:
    in_dir = _require(args.input_path)
    out_dir = Path(args.output_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    midi_paths = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    if not midi_paths:
        raise FileNotFoundError(f"no MIDI files in {in_dir}")
    written = skipped = 0
    for path in midi_paths:
        try:
            parsed = midi_io.parse_midi(path.read_bytes())
            tempo = midi_io.estimate_tempo(parsed.events)
            roll = midi_io.to_piano_roll(parsed.events, tempo, source_id=path.stem)
        except (midi_io.MidiParseError, ValueError) as exc:
            log.warning("excluded %s: %s", path.name, exc)
            skipped += 1
            continue
        for warning in parsed.warnings:
            log.info("%s: %s", path.name, warning)
        midi_io.save_proll(roll, out_dir / f"{path.stem}.proll")
        structure.save_ssm(ssm(chroma(roll)), out_dir / f"{path.stem}.ssm")
        written += 1
    print(f"preprocess: wrote {written} piece(s) to {out_dir}, excluded {skipped}")
    return 0


def _cmd_batch_plan(args) -> int:
    rolls = _load_rolls(args.input_path)
    rng = np.random.default_rng(args.seed)
    plan, _, excluded = training.prepare_corpus(
        rolls,
        rng,
        k=args.grid_k,
        count=args.grid_count,
        max_len=args.max_len,
        batch_cap=args.batch_cap,
        max_edit_fraction=args.max_edit,
        with_items=False,
    )
    batching.save_plan(plan, args.output_path)
    for label in excluded:
        log.warning("excluded %s: edit beyond %.0f%%", label, args.max_edit * 100)
    print(
        f"batch-plan: {len(plan.assignments)} assignment(s) in {len(plan.batches)} "
        f"batch(es), {len(excluded)} excluded -> {args.output_path}"
    )
    return 0


def _cmd_train(args) -> int:
    rolls = _load_rolls(args.input_path)
    plan = batching.load_plan(_require(args.plan))
    rolls_by_id = {roll.source_id: roll for roll in rolls}
    items = training.items_from_plan(plan, rolls_by_id, max_len=args.max_len)

    cfg = ModelConfig(
        hidden_size=args.hidden,
        combiner_mode=args.combiner,
        seed_len=args.seed_len,
        top_k=args.top_k,
        max_notes=args.max_notes,
        pitch_lo=args.pitch_lo,
        pitch_hi=args.pitch_hi,
        attention_enabled=not args.ablated,
    )
    tcfg = training.TrainConfig(
        p_feedback=args.p_feedback, lr=args.lr, epochs=args.epochs, seed=args.seed
    )
    rng = np.random.default_rng(args.seed)
    model = Model(cfg, rng=rng)

    if args.val:
        val_items = _plain_items(_load_rolls(args.val), cfg.seed_len)
    else:
        val_items = items
    reports, best_path = training.train(
        model, plan, items, val_items, tcfg, args.output_path, rng
    )
    best_epoch = training.select_best(reports)
    print(
        f"train: {len(reports)} epoch(s), best epoch {best_epoch} "
        f"(val {reports[best_epoch].val_loss:.4f}) -> {best_path}"
    )
    return 0


def _plain_items(rolls, seed_len: int) -> list[training.TrainItem]:
    items = []
    for roll in rolls:
        if roll.n_samples <= seed_len:
            log.warning("validation piece %s too short, skipped", roll.source_id)
            continue
        items.append(
            training.TrainItem(
                piece_id=roll.source_id,
                segment_index=0,
                roll=roll,
                template=ssm(chroma(roll)),
            )
        )
    return items


def _cmd_generate(args) -> int:
    ckpt = _require(args.checkpoint)
    cfg = _model_config_for(ckpt, args.model_config)
    if args.ablated and cfg.attention_enabled:
        raise ValueError("--ablated given but the checkpoint is an attention model")
    model = load_model(ckpt, cfg)
    seed_roll = midi_io.load_proll(_require(args.input_path))
    if seed_roll.n_samples < cfg.seed_len:
        raise ValueError(
            f"seed piece has {seed_roll.n_samples} samples, need {cfg.seed_len}"
        )
    template = structure.load_ssm(_require(args.template))
    rng = np.random.default_rng(args.seed)
    seed = seed_roll.data.T[: cfg.seed_len]
    roll = generate(
        model, seed, template, rng, tempo=seed_roll.tempo, source_id=Path(args.output_path).stem
    )
    out_prefix = Path(args.output_path)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    proll_path = out_prefix.with_suffix(".proll")
    midi_path = out_prefix.with_suffix(".mid")
    midi_io.save_proll(roll, proll_path)
    midi_path.write_bytes(midi_io.to_midi(roll))
    print(f"generate: wrote {proll_path} and {midi_path}")
    return 0


def _cmd_evaluate(args) -> int:
    rolls = _load_rolls(args.input_path)
    rng = np.random.default_rng(args.seed)
    if args.ablated:
        args.generator = "ablated"
    if args.generator == "random":
        cfg = ModelConfig(
            seed_len=args.seed_len,
            top_k=args.top_k,
            max_notes=args.max_notes,
            pitch_lo=args.pitch_lo,
            pitch_hi=args.pitch_hi,
        )
        model = None
    else:
        if not args.checkpoint:
            raise ValueError(f"generator {args.generator!r} needs --checkpoint")
        ckpt = _require(args.checkpoint)
        cfg = _model_config_for(ckpt, args.model_config)
        expected_attention = args.generator == "sing"
        if cfg.attention_enabled != expected_attention:
            raise ValueError(
                f"checkpoint is {'an attention' if cfg.attention_enabled else 'an ablated'} "
                f"model but --generator={args.generator}"
            )
        model = load_model(ckpt, cfg)
    _, items, excluded = training.prepare_corpus(
        rolls,
        rng,
        k=args.grid_k,
        count=args.grid_count,
        max_len=args.max_len,
        batch_cap=args.batch_cap,
        max_edit_fraction=args.max_edit,
    )
    for label in excluded:
        log.warning("excluded %s from evaluation", label)
    run = evaluation.evaluate(
        args.generator, items, cfg, rng, model=model, generations=args.generations
    )
    Path(args.output_path).write_text(evaluation.eval_run_to_csv(run))
    print(
        f"evaluate[{run.generator}]: mean standardized MSE {run.mean:.4f} over "
        f"{len(run.piece_ids)} piece(s) x {args.generations} -> {args.output_path}"
    )
    return 0


def _cmd_render_ssm(args) -> int:
    matrix = structure.load_ssm(_require(args.input_path))
    Path(args.output_path).write_bytes(structure.render_pgm(matrix))
    print(f"render-ssm: wrote {args.output_path}")
    return 0


def _cmd_synth_ssm(args) -> int:
    spec = structure.parse_synth_spec(_require(args.input_path).read_text())
    structure.save_ssm(structure.synth_ssm(spec), args.output_path)
    print(f"synth-ssm: wrote {args.output_path} ({spec.length} samples)")
    return 0


_HANDLERS = {
    "preprocess": _cmd_preprocess,
    "batch-plan": _cmd_batch_plan,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "render-ssm": _cmd_render_ssm,
    "synth-ssm": _cmd_synth_ssm,
}


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    level = os.environ.get("SING_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")
    try:
        defaults = _load_config(argv)
        parser = _build_parser(defaults)
        args = parser.parse_args(argv)
        return _HANDLERS[args.verb](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, training.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
