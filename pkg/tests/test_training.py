import math

import numpy as np
import pytest

from inpaintvad.checkpoint import load_checkpoint
from inpaintvad.data import GeneratorConfig, build_test_set, generate_dataset
from inpaintvad.evaluation import EvalConfig, score_dataset
from inpaintvad.model import init_params
from inpaintvad.training import Adam, TrainConfig, TrainLogRecord, read_log, sample_batch, train

SMALL = GeneratorConfig(frame_size=16, n_frames=8, n_digits=1, sprite_size=10)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(12, seed=5, config=SMALL)


def small_config(**kw):
    base = dict(steps=3, batch_size=2, context_length=3, n_bins=32, hidden=4, log_interval=1)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(n_bins=100), dict(batch_size=0), dict(learning_rate=-1.0),
                                    dict(loss_scope="some"), dict(mask_periods=(0, 5)), dict(hidden=0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_hyper_carries_fields(self):
        h = small_config(use_attention=False).hyper(16, 16, 1)
        assert (h.height, h.hidden, h.context_length, h.n_bins, h.use_attention) == (16, 4, 3, 32, False)


class TestInitialization:
    def test_zero_steps_equals_init(self, small_data):
        cfg = small_config(steps=0)
        params, records = train(cfg, small_data)
        ref = init_params(cfg.hyper(16, 16, 1), np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
        assert records == []
        assert params.equals(ref)

    def test_same_seed_bit_identical_init(self):
        h = small_config().hyper(16, 16, 1)
        a = init_params(h, np.random.default_rng(3))
        b = init_params(h, np.random.default_rng(3))
        assert a.equals(b)

    def test_fan_in_variance(self):
        # a 3x3 bank over 32 input channels: second encoder layer at hidden=32
        cfg = TrainConfig(hidden=32, n_bins=32)
        samples = []
        for seed in range(10):
            params = init_params(cfg.hyper(16, 16, 1), np.random.default_rng(seed))
            w = params["encoder.1.weight"].data
            assert w.shape[1:] == (32, 3, 3)
            samples.append(w.ravel())
        var = np.concatenate(samples).astype(np.float64).var()
        target = 1.0 / (3 * 3 * 32)
        assert abs(var - target) / target < 0.2

    @pytest.mark.parametrize("k", [32, 256])
    def test_uniform_start(self, small_data, k):
        params, _ = train(small_config(steps=0, n_bins=k), small_data)
        scored = score_dataset(params, small_data[:3], EvalConfig(scope="all"))
        for s in scored:
            assert abs(s.score.mean_nll - math.log(k)) < 1e-6


class TestTraining:
    def test_zero_learning_rate_keeps_params(self, small_data):
        params0, _ = train(small_config(steps=0), small_data)
        params1, records = train(small_config(steps=1, learning_rate=0.0), small_data)
        assert params1.equals(params0)
        assert len(records) == 1 and records[0].step == 1

    def test_log_cadence(self, small_data):
        _, records = train(small_config(steps=5, log_interval=2), small_data)
        assert [r.step for r in records] == [2, 4, 5]
        for r in records:
            assert math.isfinite(r.nll) and r.nll >= 0 and r.wall_ms >= 0 and r.grad_norm >= 0

    def test_same_seed_bit_identical(self, small_data):
        a, ra = train(small_config(), small_data)
        b, rb = train(small_config(), small_data)
        assert a.equals(b)
        assert [r.nll for r in ra] == [r.nll for r in rb]

    def test_different_seed_differs(self, small_data):
        a, _ = train(small_config(seed=0), small_data)
        b, _ = train(small_config(seed=1), small_data)
        assert not a.equals(b)

    def test_rejects_corrupted_data(self):
        mixed = build_test_set(2, 2, seed=1, config=SMALL)
        with pytest.raises(ValueError, match="anomaly-free"):
            train(small_config(), mixed)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            train(small_config(), [])

    def test_accepts_arrays(self, small_data):
        arr = np.stack([s.frames[..., 0] for s in small_data])
        a, _ = train(small_config(), arr)
        b, _ = train(small_config(), small_data)
        assert a.equals(b)

    def test_masked_only_scope_runs(self, small_data):
        _, records = train(small_config(loss_scope="masked_only"), small_data)
        assert math.isfinite(records[-1].nll)

    def test_resume_is_bit_exact(self, small_data, tmp_path):
        full, full_rec = train(small_config(steps=6, checkpoint_interval=3), small_data)
        state = tmp_path / "state.npz"
        train(small_config(steps=3, checkpoint_interval=3), small_data, state_path=state)
        resumed, rec = train(small_config(steps=6, checkpoint_interval=3), small_data, resume_from=state)
        assert resumed.equals(full)
        assert [r.nll for r in rec] == [r.nll for r in full_rec[3:]]

    def test_resume_rejects_other_hyper(self, small_data, tmp_path):
        state = tmp_path / "state.npz"
        train(small_config(steps=1), small_data, state_path=state)
        with pytest.raises(ValueError, match="hyperparameters"):
            train(small_config(steps=2, hidden=5), small_data, resume_from=state)

    def test_log_and_checkpoint_files(self, small_data, tmp_path):
        log, ck = tmp_path / "train.log", tmp_path / "model.ivck"
        params, records = train(small_config(steps=4, log_interval=2), small_data,
                                log_path=log, checkpoint_path=ck)
        lines = log.read_text().splitlines()
        assert len(lines) == 2 and all(len(line.split("\t")) == 4 for line in lines)
        assert [r.step for r in read_log(log)] == [2, 4]
        assert load_checkpoint(ck).equals(params)

    def test_beats_uniform_after_200_steps(self):
        data = generate_dataset(40, seed=8, config=GeneratorConfig(frame_size=16, n_digits=1, sprite_size=10))
        cfg = TrainConfig(steps=200, n_bins=32, hidden=8, context_length=4, log_interval=10,
                          learning_rate=3e-3)
        _, records = train(cfg, data)
        assert records[-1].nll < math.log(32)
        first = np.mean([r.nll for r in records[:2]])
        last = np.mean([r.nll for r in records[-2:]])
        assert last < first


class TestPieces:
    def test_sample_batch_shapes(self, small_data):
        frames = np.stack([s.frames for s in small_data])
        cfg = small_config()
        context, masked, visible, target = sample_batch(frames, cfg, np.random.default_rng(0))
        assert context.shape == (2, 3, 16, 16, 1)
        assert masked.shape == (2, 16, 16, 1)
        assert visible.shape == (2, 16, 16)
        assert target.shape == (2, 16, 16, 1)
        assert np.all(masked[~visible] == 0)

    def test_adam_first_step_moves_by_lr(self):
        h = small_config().hyper(16, 16, 1)
        params = init_params(h, np.random.default_rng(0))
        before = {k: v.data.copy() for k, v in params}
        for _, t in params:
            t.grad = np.full(t.shape, 0.5, dtype=t.data.dtype)
        Adam(1e-2).step(params)
        for k, t in params:
            np.testing.assert_allclose(before[k] - t.data, 1e-2, rtol=1e-4)

    def test_log_line_format(self):
        line = TrainLogRecord(7, 1.25, 3.0, 0.5).to_line()
        assert line == "7\t1.250000\t3.0\t0.5"
