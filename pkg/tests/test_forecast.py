import numpy as np
import pytest

from evifuse import forecast as fc
from evifuse.dataset import InputConfig, InputVariant, build_samples, normalize, split, synth_generate
from evifuse.forecast import (
    CellState,
    ForecastError,
    TrainingConfig,
    TrainingDivergedError,
    backward,
    cell_forward,
    forward_sequence,
    grad_check,
    init_params,
    load_checkpoint,
    mse_loss,
    predict,
    save_checkpoint,
    train,
    zero_params,
    zero_state,
)
from oracles import lstm_step_reference


def _layer_dict(params, l):
    layer = params.layers[l]
    return {name: getattr(layer, name) for name in ("wi", "wf", "wc", "wo", "ui", "uf", "uc", "uo", "bi", "bf", "bc", "bo")}


def _zero_recurrent(params, seq, targets):
    g = backward(params, seq, targets)
    for layer in g.layers:
        for name in ("ui", "uf", "uc", "uo"):
            getattr(layer, name)[...] = 0.0
    return g


class TestCellForward:
    def test_all_zero(self):
        p = zero_params(3, 4)
        st = fc._cell(p.layers[0], np.zeros(3), np.zeros(4), np.zeros(4))
        for gate in (st.i, st.f, st.o):
            np.testing.assert_array_equal(gate, 0.5)
        new, h = cell_forward(p, 0, np.zeros(3), CellState(np.zeros(4), np.zeros(4)))
        np.testing.assert_array_equal(new.c, 0.0)
        np.testing.assert_array_equal(h, 0.0)

    def test_forget_gate_saturation_preserves_cell(self):
        p = zero_params(1, 1)
        layer = p.layers[0]
        layer.bf[:] = 20.0
        layer.bi[:] = layer.bo[:] = layer.bc[:] = -20.0
        new, h = cell_forward(p, 0, np.zeros(1), CellState(np.zeros(1), np.array([0.7])))
        assert new.c[0] == pytest.approx(0.7, abs=1e-7)
        assert h[0] == pytest.approx(0.0, abs=1e-7)

    def test_matches_reference_step(self):
        rng = np.random.default_rng(11)
        p = init_params(1, 1, seed=5, scale=1.0)
        for _ in range(20):
            x, h, c = rng.normal(size=1), rng.uniform(-1, 1, 1), rng.normal(size=1)
            new, out = cell_forward(p, 0, x, CellState(h, c))
            h_ref, c_ref = lstm_step_reference(x, h, c, _layer_dict(p, 0))
            np.testing.assert_allclose(new.c, c_ref, rtol=0, atol=1e-14)
            np.testing.assert_allclose(out, h_ref, rtol=0, atol=1e-14)

    def test_errors(self):
        p = zero_params(2, 3)
        state = CellState(np.zeros(3), np.zeros(3))
        with pytest.raises(ForecastError):
            cell_forward(p, 0, np.zeros(5), state)
        with pytest.raises(ForecastError):
            cell_forward(p, 0, np.array([np.nan, 0.0]), state)
        with pytest.raises(ForecastError):
            cell_forward(p, 1, np.zeros(3), state)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        p = init_params(3, 5, seed=2, scale=3.0)
        state = CellState(np.zeros(5), np.zeros(5))
        for _ in range(50):
            prev_c = state.c
            state, h = cell_forward(p, 0, rng.normal(scale=5, size=3), state)
            assert np.all(np.abs(h) < 1)
            assert np.all(np.abs(state.c) <= np.abs(prev_c) + 1)


class TestForwardSequence:
    def test_zero_params(self):
        p = zero_params(4, 3, 2)
        preds, _ = forward_sequence(p, np.random.default_rng(1).normal(size=(6, 4)))
        np.testing.assert_array_equal(preds, 0.0)

    def test_length_one_is_one_cell_plus_head(self):
        p = init_params(2, 3, 2, seed=4, scale=0.7)
        x = np.array([0.3, -0.8])
        preds, final = forward_sequence(p, x[None])
        s0, h0 = cell_forward(p, 0, x, CellState(np.zeros(3), np.zeros(3)))
        s1, h1 = cell_forward(p, 1, h0, CellState(np.zeros(3), np.zeros(3)))
        assert preds[0] == h1 @ p.head_w + p.head_b[0]
        np.testing.assert_array_equal(final[1].h, s1.h)

    def test_manual_unroll(self):
        p = init_params(1, 2, 2, seed=9, scale=0.9)
        seq = np.array([[0.2], [-0.5], [0.9]])
        hs = [np.zeros(2), np.zeros(2)]
        cs = [np.zeros(2), np.zeros(2)]
        expected = []
        for x in seq:
            inp = x
            for l in range(2):
                hs[l], cs[l] = lstm_step_reference(inp, hs[l], cs[l], _layer_dict(p, l))
                inp = hs[l]
            expected.append(hs[1] @ p.head_w + p.head_b[0])
        preds, _ = forward_sequence(p, seq)
        np.testing.assert_allclose(preds, expected, rtol=0, atol=1e-12)

    def test_batch_matches_individual(self):
        rng = np.random.default_rng(3)
        p = init_params(3, 4, seed=1, scale=0.5)
        batch = rng.normal(size=(5, 7, 3))
        preds, _ = forward_sequence(p, batch)
        for k in range(5):
            np.testing.assert_allclose(preds[k], forward_sequence(p, batch[k])[0], atol=1e-14)

    def test_initial_state_carries(self):
        p = init_params(2, 3, seed=8, scale=0.5)
        seq = np.random.default_rng(4).normal(size=(6, 2))
        full, _ = forward_sequence(p, seq)
        first, state = forward_sequence(p, seq[:3])
        second, _ = forward_sequence(p, seq[3:], state)
        np.testing.assert_allclose(np.concatenate([first, second]), full, atol=1e-14)

    def test_errors(self):
        p = zero_params(2, 3)
        with pytest.raises(ForecastError):
            forward_sequence(p, np.zeros((0, 2)))
        with pytest.raises(ForecastError):
            forward_sequence(p, np.zeros((3, 4)))


class TestLoss:
    @pytest.mark.parametrize("p, y, expected", [([1, 2], [1, 2], 0.0), ([0, 0], [1, 1], 1.0), ([1, 3], [2, 1], 2.5)])
    def test_values(self, p, y, expected):
        assert mse_loss(p, y) == expected

    def test_errors(self):
        with pytest.raises(ForecastError):
            mse_loss([1, 2], [1])
        with pytest.raises(ForecastError):
            mse_loss([], [])


class TestBackward:
    def test_zero_everything_gives_zero_gradient(self):
        p = zero_params(3, 4, 2)
        g = backward(p, np.zeros((5, 3)), np.zeros(5))
        np.testing.assert_array_equal(g.to_vector(), 0.0)

    def test_finite_differences_two_steps(self):
        rng = np.random.default_rng(21)
        p = init_params(2, 3, seed=3, scale=0.5)
        seq, targets = rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2)
        assert grad_check(p, seq, targets, eps=1e-5) <= 1e-4

    def test_finite_differences_batch_last_step(self):
        rng = np.random.default_rng(22)
        p = init_params(4, 3, 2, seed=3, scale=0.5)
        x, y = rng.uniform(0, 1, (6, 5, 4)), rng.uniform(0, 1, 6)
        assert grad_check(p, x, y) <= 1e-4

    def test_mutation_detected(self):
        rng = np.random.default_rng(21)
        p = init_params(2, 3, seed=3, scale=0.5)
        seq, targets = rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, 3)
        assert grad_check(p, seq, targets, grad_fn=_zero_recurrent) > 1e-2

    def test_zero_eps_rejected(self):
        p = zero_params(1, 1)
        with pytest.raises(ForecastError):
            grad_check(p, np.zeros((2, 1)), np.zeros(2), eps=0.0)

    def test_duplicated_batch_same_gradient(self):
        rng = np.random.default_rng(5)
        p = init_params(3, 4, seed=6, scale=0.4)
        x, y = rng.normal(size=(1, 4, 3)), rng.normal(size=1)
        g1 = backward(p, x, y).to_vector()
        g2 = backward(p, np.concatenate([x, x, x]), np.concatenate([y, y, y])).to_vector()
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)

    def test_truncation(self):
        rng = np.random.default_rng(5)
        p = init_params(3, 4, seed=6, scale=0.4)
        x, y = rng.normal(size=(2, 6, 3)), rng.normal(size=2)
        full = backward(p, x, y).to_vector()
        np.testing.assert_array_equal(backward(p, x, y, truncation=6).to_vector(), full)
        np.testing.assert_array_equal(backward(p, x, y, truncation=60).to_vector(), full)
        assert not np.allclose(backward(p, x, y, truncation=2).to_vector(), full)
        # the head sees no recurrence, so truncation leaves it alone
        np.testing.assert_array_equal(backward(p, x, y, truncation=1).head_w, backward(p, x, y).head_w)


class TestTrain:
    def test_constant_zero_target(self):
        x = np.zeros((20, 1, 4))
        y = np.zeros(20)
        hist = []
        train((x, y), TrainingConfig(epochs=200, hidden_size=4, seed=1), hist)
        # random init starts near zero output
        assert hist[0] < 1e-2
        assert hist[-1] < 1e-6

    def test_loss_trend_on_linear_series(self):
        t = np.arange(60, dtype=float)
        series = 0.2 + 0.01 * t
        x = np.stack([series[k : k + 3] for k in range(55)])[:, :, None]
        y = series[3:58]
        hist = []
        train((x, y), TrainingConfig(epochs=150, learning_rate=0.01, hidden_size=4, seed=3), hist)
        for prev, cur in zip(hist, hist[1:]):
            assert cur <= prev * 1.05
        assert hist[-1] < hist[0]

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        data = (rng.uniform(size=(30, 3, 2)), rng.uniform(size=30))
        cfg = TrainingConfig(epochs=20, hidden_size=5, seed=42)
        a, b = train(data, cfg), train(data, cfg)
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())
        c = train(data, TrainingConfig(epochs=20, hidden_size=5, seed=43))
        assert not np.array_equal(a.to_vector(), c.to_vector())

    def test_divergence_reports_epoch(self):
        rng = np.random.default_rng(0)
        data = (rng.uniform(size=(30, 3, 2)) * 50, rng.uniform(size=30) * 1e3)
        with pytest.raises(TrainingDivergedError) as info:
            train(data, TrainingConfig(epochs=200, learning_rate=50.0, hidden_size=4))
        assert 0 <= info.value.epoch <= 200

    def test_clip_norm_keeps_training_finite(self):
        rng = np.random.default_rng(0)
        data = (rng.uniform(size=(30, 3, 2)) * 50, rng.uniform(size=30) * 1e3)
        p = train(data, TrainingConfig(epochs=30, learning_rate=0.01, hidden_size=4, clip_norm=5.0))
        assert np.all(np.isfinite(p.to_vector()))

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(learning_rate=0.0), dict(hidden_size=0), dict(truncation_length=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ForecastError):
            TrainingConfig(**kw)


class TestPredict:
    def test_zero_params(self):
        p = zero_params(4, 3)
        np.testing.assert_array_equal(predict(p, np.ones((7, 2, 4))), 0.0)

    def test_training_loss_matches_prediction_error(self):
        rng = np.random.default_rng(1)
        x, y = rng.uniform(size=(40, 2, 3)), rng.uniform(size=40)
        hist = []
        p = train((x, y), TrainingConfig(epochs=50, hidden_size=6, seed=2), hist)
        assert mse_loss(predict(p, x), y) <= hist[-1] + 1e-9

    def test_beats_naive_on_synthetic_series(self):
        records = synth_generate(7, 21 * 24)
        train_recs, test_recs = split(records, 0.8)
        _, spec = normalize(train_recs)
        cfg = InputConfig(InputVariant.WINDOWED, 5)
        p = train(build_samples(train_recs, cfg, spec), TrainingConfig(seed=1))
        everything = build_samples(records, cfg, spec)
        held_out = everything.target_times >= test_recs[0].timestamp
        x, y = everything.inputs[held_out], everything.targets[held_out]
        lstm_mae = np.mean(np.abs(predict(p, x) - y))
        naive_mae = np.mean(np.abs(x[:, -1, 0] - y))
        assert lstm_mae < naive_mae

    def test_dimension_mismatch(self):
        with pytest.raises(ForecastError):
            predict(zero_params(4, 3), np.ones((2, 1, 3)))


def test_checkpoint_round_trip(tmp_path):
    p = init_params(4, 5, 2, seed=13, scale=0.3)
    cfg = TrainingConfig(hidden_size=5, num_layers=2, seed=13)
    path = tmp_path / "model.json"
    save_checkpoint(path, p, cfg, extra={"variant": 3})
    q, cfg2, extra = load_checkpoint(path)
    np.testing.assert_array_equal(q.to_vector(), p.to_vector())
    assert cfg2 == cfg and extra == {"variant": 3}
    x = np.random.default_rng(0).normal(size=(3, 5, 4))
    np.testing.assert_array_equal(predict(q, x), predict(p, x))


def test_zero_state_shapes():
    p = zero_params(2, 3, 2)
    assert len(zero_state(p)) == 2
    assert zero_state(p, 4)[0].h.shape == (4, 3)
