import numpy as np
import pytest

from sing.evaluation import EvalRun, eval_run_to_csv, evaluate, random_baseline
from sing.midi_io import PianoRoll
from sing.model import Model, ModelConfig
from sing.structure import chroma, ssm
from sing.training import TrainItem


def block_piece(n: int, rng: np.random.Generator, source_id: str = "piece") -> TrainItem:
    """Two-section piece: chroma-stable halves with disjoint pitch classes."""
    root = int(rng.integers(36, 60))
    chords = [[root, root + 4, root + 7], [root + 2, root + 5, root + 9]]
    data = np.zeros((128, n), dtype=np.uint8)
    for s in range(n):
        chord = chords[0] if s < n // 2 else chords[1]
        for pitch in chord:
            data[pitch + 12 * int(rng.integers(0, 2)), s] = 1
    roll = PianoRoll(data=data, tempo=120.0, source_id=source_id)
    return TrainItem(source_id, 0, roll, ssm(chroma(roll)))


class TestRandomBaseline:
    def test_three_distinct_pitches_in_range(self):
        cfg = ModelConfig()
        roll = random_baseline(50, cfg, np.random.default_rng(0))
        counts = roll.data.sum(axis=0)
        assert np.all(counts == 3)
        assert roll.data[:20].sum() == 0
        assert roll.data[108:].sum() == 0

    def test_deterministic_for_fixed_seed(self):
        cfg = ModelConfig()
        a = random_baseline(30, cfg, np.random.default_rng(7))
        b = random_baseline(30, cfg, np.random.default_rng(7))
        assert a == b

    def test_pitch_histogram_uniform_within_three_sigma(self):
        cfg = ModelConfig()
        rng = np.random.default_rng(1)
        n = 100_000
        roll = random_baseline(n, cfg, rng)
        counts = roll.data[20:108].sum(axis=1)
        p = 3.0 / 88.0
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)


class TestEvaluate:
    def test_identity_generator_scores_zero(self, monkeypatch):
        rng = np.random.default_rng(2)
        items = [block_piece(32, rng, f"p{i}") for i in range(3)]
        cfg = ModelConfig(hidden_size=4, seed_len=4)
        model = Model(cfg, rng=np.random.default_rng(3))

        originals = {item.label: item.roll for item in items}

        def replay(model_, seed, template, rng_, tempo=120.0, source_id=""):
            for item in items:
                if item.template.n == template.n and np.array_equal(
                    item.template.values, template.values
                ):
                    return item.roll
            raise AssertionError("unknown template")

        monkeypatch.setattr("sing.evaluation.generate", replay)
        run = evaluate("sing", items, cfg, np.random.default_rng(4), model=model)
        assert run.mean == pytest.approx(0.0, abs=1e-12)
        assert all(len(scores) == 3 for scores in run.mses)

    def test_random_baseline_near_two_on_block_templates(self):
        rng = np.random.default_rng(5)
        items = [block_piece(256, rng, f"p{i}") for i in range(2)]
        cfg = ModelConfig(seed_len=10)
        run = evaluate("random", items, cfg, np.random.default_rng(6))
        assert run.mean == pytest.approx(2.0, abs=0.15)

    def test_short_pieces_skipped_and_logged(self):
        rng = np.random.default_rng(7)
        items = [block_piece(32, rng, "ok"), block_piece(32, rng, "short")]
        items[1].roll.data = items[1].roll.data[:, :8]
        items[1] = TrainItem("short", 0,
                             PianoRoll(data=items[1].roll.data, tempo=120.0, source_id="short"),
                             ssm(chroma(PianoRoll(data=items[1].roll.data, tempo=120.0))))
        cfg = ModelConfig(seed_len=10)
        run = evaluate("random", items, cfg, np.random.default_rng(8))
        assert run.piece_ids == ["ok[0]"]
        assert run.skipped == ["short[0]"]

    def test_unknown_generator_rejected(self):
        with pytest.raises(ValueError):
            evaluate("oracle", [], ModelConfig(), np.random.default_rng(0))

    def test_model_generator_requires_model(self):
        with pytest.raises(ValueError):
            evaluate("sing", [], ModelConfig(), np.random.default_rng(0), model=None)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        items = [block_piece(40, rng, "p0")]
        cfg = ModelConfig(hidden_size=8, seed_len=4)
        model = Model(cfg, rng=np.random.default_rng(10))
        run_a = evaluate("sing", items, cfg, np.random.default_rng(11), model=model)
        run_b = evaluate("sing", items, cfg, np.random.default_rng(11), model=model)
        assert run_a.mses == run_b.mses

    def test_mean_is_arithmetic_mean_of_stored_values(self):
        run = EvalRun(generator="random")
        run.piece_ids = ["a", "b"]
        run.mses = [[1.0, 2.0, 3.0], [2.0, 2.0, 2.0]]
        assert run.mean == pytest.approx(2.0)


class TestCsv:
    def test_rows_and_summary(self):
        run = EvalRun(generator="sing")
        run.piece_ids = ["x[0]"]
        run.mses = [[0.5, 1.5, 1.0]]
        text = eval_run_to_csv(run)
        lines = text.strip().splitlines()
        assert lines[0] == "piece_id,generation_index,std_mse"
        assert lines[1].startswith("x[0],0,")
        assert lines[-1].startswith("mean,sing,")
