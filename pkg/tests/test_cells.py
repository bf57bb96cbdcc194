import numpy as np
import pytest

from seqlab.cells import (
    NetworkConfig,
    ParamSet,
    backward,
    forward,
    forward_hidden,
    initial_stack_state,
    lstm_step,
    param_count,
    param_shapes,
    step_stack,
    tanh_rnn_step,
)
from seqlab.numerics import Rng


def random_net(seed, input_dim=3, levels=2, hidden=4, bidirectional=True,
               cell="lstm", output_dim=3, scale=0.4):
    cfg = NetworkConfig(input_dim=input_dim, levels=levels, hidden=hidden,
                        bidirectional=bidirectional, cell=cell, output_dim=output_dim)
    params = ParamSet.zeros(cfg).init_uniform(Rng(seed), scale)
    return cfg, params


def fd_param_grad(loss_fn, vec, eps=1e-5):
    """Central finite differences of loss_fn over every parameter."""
    g = np.zeros_like(vec)
    for i in range(vec.shape[0]):
        w = vec.copy()
        w[i] += eps
        up = loss_fn(w)
        w[i] -= 2 * eps
        down = loss_fn(w)
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


class TestSteps:
    def test_lstm_step_all_zero(self):
        cfg, params = random_net(0, levels=1, bidirectional=False)
        p = ParamSet.zeros(cfg).layers[0].fwd
        h, c, gates = lstm_step(np.zeros(3), np.zeros(4), np.zeros(4), p)
        np.testing.assert_array_equal(gates["i"], np.full(4, 0.5))
        np.testing.assert_array_equal(gates["f"], np.full(4, 0.5))
        np.testing.assert_array_equal(gates["o"], np.full(4, 0.5))
        np.testing.assert_array_equal(c, np.zeros(4))
        np.testing.assert_array_equal(h, np.zeros(4))

    def test_lstm_step_zero_params_nonzero_cell(self):
        cfg, _ = random_net(0, levels=1, bidirectional=False)
        p = ParamSet.zeros(cfg).layers[0].fwd
        c_prev = np.array([1.0, -2.0, 0.5, 3.0])
        h, c, _ = lstm_step(np.zeros(3), np.zeros(4), c_prev, p)
        np.testing.assert_allclose(c, 0.5 * c_prev, rtol=0, atol=0)
        np.testing.assert_allclose(h, 0.5 * np.tanh(0.5 * c_prev), rtol=0, atol=1e-16)

    def test_lstm_memory_preservation(self):
        # saturated forget gate copies the cell through exactly
        cfg, _ = random_net(0, levels=1, bidirectional=False)
        p = ParamSet.zeros(cfg).layers[0].fwd
        p.b_f += 500.0
        p.b_i -= 500.0
        c_prev = np.array([0.3, -1.7, 4.0, -0.25])
        h, c, gates = lstm_step(np.zeros(3), np.zeros(4), c_prev, p)
        assert (gates["f"] == 1.0).all()
        assert (gates["i"] < 1e-100).all()
        np.testing.assert_array_equal(c, c_prev)

    def test_tanh_step_zero_params(self):
        cfg = NetworkConfig(3, 1, 4, False, cell="tanh", output_dim=2)
        p = ParamSet.zeros(cfg).layers[0].fwd
        np.testing.assert_array_equal(
            tanh_rnn_step(np.ones(3), np.ones(4), p), np.zeros(4)
        )

    def test_tanh_step_bias_only(self):
        cfg = NetworkConfig(3, 1, 4, False, cell="tanh", output_dim=2)
        p = ParamSet.zeros(cfg).layers[0].fwd
        p.b_h += np.array([0.1, -0.7, 2.0, 0.0])
        np.testing.assert_array_equal(
            tanh_rnn_step(np.zeros(3), np.zeros(4), p), np.tanh(p.b_h)
        )

    def test_step_dimension_mismatch(self):
        cfg, params = random_net(1, levels=1, bidirectional=False)
        with pytest.raises(ValueError):
            lstm_step(np.zeros(5), np.zeros(4), np.zeros(4), params.layers[0].fwd)

    def test_tanh_random_instance_scalar_recomputation(self):
        cfg = NetworkConfig(2, 1, 3, False, cell="tanh", output_dim=2)
        params = ParamSet.zeros(cfg).init_uniform(Rng(40), 0.6)
        p = params.layers[0].fwd
        x = Rng(41).gaussian(0, 1, 4 * 2).reshape(4, 2)
        h_prev = np.zeros(3)
        for t in range(4):
            manual = np.empty(3)
            for i in range(3):
                acc = p.b_h[i]
                for d in range(2):
                    acc += p.w_xh[i, d] * x[t, d]
                for j in range(3):
                    acc += p.w_hh[i, j] * h_prev[j]
                manual[i] = np.tanh(acc)
            got = tanh_rnn_step(x[t], h_prev, p)
            np.testing.assert_allclose(got, manual, atol=1e-14)
            h_prev = got

    def test_forward_matches_stepwise(self):
        # the batched recursion and the public single-step agree exactly
        cfg, params = random_net(5, levels=1, bidirectional=False, cell="lstm")
        x = Rng(6).gaussian(0, 1, 5 * 3).reshape(5, 3)
        h_f, _, _ = forward_hidden(x, params, cfg)
        h_prev, c_prev = np.zeros(4), np.zeros(4)
        for t in range(5):
            h_prev, c_prev, _ = lstm_step(x[t], h_prev, c_prev, params.layers[0].fwd)
            np.testing.assert_array_equal(h_f[t], h_prev)

    def test_step_stack_matches_forward(self):
        cfg, params = random_net(7, levels=2, bidirectional=False)
        x = Rng(8).gaussian(0, 1, 4 * 3).reshape(4, 3)
        h_f, _, _ = forward_hidden(x, params, cfg)
        state = initial_stack_state(cfg)
        for t in range(4):
            top, state = step_stack(x[t], state, params, cfg)
            np.testing.assert_array_equal(top, h_f[t])


class TestParamSet:
    def test_flatten_unflatten_roundtrip(self):
        cfg, params = random_net(9)
        vec = params.flatten()
        again = ParamSet.unflatten(cfg, vec)
        np.testing.assert_array_equal(again.flatten(), vec)
        np.testing.assert_array_equal(again.layers[1].bwd.w_hc, params.layers[1].bwd.w_hc)

    def test_views_alias_vector(self):
        cfg, params = random_net(10)
        params.vec[:] = 0.0
        assert (params.layers[0].fwd.w_xi == 0).all()
        params.layers[0].fwd.b_i += 1.0
        assert params.vec.sum() == cfg.hidden

    def test_count_matches_shapes(self):
        for cfg in [
            NetworkConfig(3, 2, 4, True, "lstm", 5),
            NetworkConfig(2, 3, 2, False, "lstm", 4),
            NetworkConfig(5, 1, 6, True, "tanh", 3),
            NetworkConfig(4, 2, 3, False, "tanh", 2),
        ]:
            total = sum(int(np.prod(s)) for _, s in param_shapes(cfg))
            assert param_count(cfg) == total
            assert ParamSet.zeros(cfg).flatten().shape[0] == total

    def test_count_tiny_enumeration(self):
        # D=2, one unidirectional LSTM level, H=3, output 2:
        # 4 input mats 3x2 + 4 recurrent mats 3x3 + 3 peepholes + 4 biases
        # = 24 + 36 + 9 + 12 = 81, plus projection 2*3 + 2 = 8
        cfg = NetworkConfig(2, 1, 3, False, "lstm", 2)
        assert param_count(cfg) == 89

    def test_count_paper_configs(self):
        # frozen regression values from the tensor enumeration above
        one_level = NetworkConfig(123, 1, 250, True, "lstm", 62)
        assert param_count(one_level) == 780_562
        assert round(param_count(one_level) / 1e6, 1) == 0.8
        three_level = NetworkConfig(123, 3, 250, True, "lstm", 62)
        assert param_count(three_level) == 3_787_562
        assert round(param_count(three_level) / 1e6, 1) == 3.8
        wide = NetworkConfig(123, 1, 622, True, "lstm", 62)
        assert param_count(wide) == 3_793_018
        assert round(param_count(wide) / 1e6, 1) == 3.8


class TestForward:
    def test_zero_params_zero_logits(self):
        cfg = NetworkConfig(3, 1, 4, True, "lstm", 5)
        params = ParamSet.zeros(cfg)
        x = Rng(11).gaussian(0, 1, 6 * 3).reshape(6, 3)
        logits, _ = forward(x, params, cfg)
        np.testing.assert_array_equal(logits, np.zeros((6, 5)))

    def test_empty_sequence_rejected(self):
        cfg, params = random_net(12)
        with pytest.raises(ValueError):
            forward(np.zeros((0, 3)), params, cfg)

    def test_width_mismatch_rejected(self):
        cfg, params = random_net(12)
        with pytest.raises(ValueError):
            forward(np.zeros((4, 7)), params, cfg)

    @pytest.mark.parametrize("cell", ["lstm", "tanh"])
    def test_causality_unidirectional(self, cell):
        cfg, params = random_net(13, bidirectional=False, cell=cell)
        rng = Rng(14)
        x = rng.gaussian(0, 1, 6 * 3).reshape(6, 3)
        logits, _ = forward(x, params, cfg)
        x2 = x.copy()
        x2[4:] += rng.gaussian(0, 5, 2 * 3).reshape(2, 3)
        logits2, _ = forward(x2, params, cfg)
        np.testing.assert_array_equal(logits[:4], logits2[:4])
        assert not np.array_equal(logits[4:], logits2[4:])

    @pytest.mark.parametrize("cell", ["lstm", "tanh"])
    def test_time_reversal_symmetry(self, cell):
        # Swapping the forward/backward blocks everywhere and reversing the
        # input must reverse the logits in time. Above level 0 the layer
        # input is the concatenation [fwd | bwd] of the level below, so the
        # input-to-gate matrices must swap their column halves as well.
        cfg, params = random_net(15, cell=cell)
        H = cfg.hidden
        x = Rng(16).gaussian(0, 1, 5 * 3).reshape(5, 3)
        logits, _ = forward(x, params, cfg)

        swapped = params.copy()
        for n, layer in enumerate(swapped.layers):
            layer.fwd, layer.bwd = layer.bwd, layer.fwd
            if n > 0:
                for dirp in (layer.fwd, layer.bwd):
                    for name in vars(dirp):
                        if name.startswith("w_x"):
                            w = getattr(dirp, name)
                            w[:] = np.hstack([w[:, H:], w[:, :H]])
        w_f = swapped.out.w_fwd.copy()
        swapped.out.w_fwd[:] = swapped.out.w_bwd
        swapped.out.w_bwd[:] = w_f
        logits_rev, _ = forward(x[::-1], swapped, cfg)
        assert np.abs(logits_rev - logits[::-1]).max() < 1e-12

    def test_gates_strictly_inside_unit_interval(self):
        cfg, params = random_net(17, levels=1, bidirectional=False)
        x = Rng(18).gaussian(0, 3, 50 * 3).reshape(50, 3)
        _, _, cache = forward_hidden(x, params, cfg)
        dc = cache.layers[0].fwd
        for gate in (dc.i, dc.f, dc.o):
            assert (gate > 0).all() and (gate < 1).all()
        assert np.isfinite(dc.c).all()

    def test_long_sequence_stays_finite(self):
        # bounded inputs over a thousand steps: cells may grow but not blow up
        cfg, params = random_net(30, levels=2, bidirectional=True)
        x = Rng(31).gaussian(0, 1, 1000 * 3).reshape(1000, 3)
        logits, cache = forward(x, params, cfg)
        assert np.isfinite(logits).all()
        for layer in cache.layers:
            assert np.isfinite(layer.fwd.c).all()
            assert np.isfinite(layer.bwd.c).all()


class TestBackward:
    def test_zero_dlogits_zero_grads(self):
        cfg, params = random_net(19)
        x = Rng(20).gaussian(0, 1, 4 * 3).reshape(4, 3)
        _, cache = forward(x, params, cfg)
        grads, _ = backward(params, cfg, cache, np.zeros((4, 3)))
        assert (grads.flatten() == 0).all()

    @pytest.mark.parametrize(
        "levels,bidirectional,cell,T",
        [
            (1, False, "lstm", 4),
            (2, True, "lstm", 5),
            (3, True, "lstm", 6),
            (1, True, "tanh", 4),
            (2, False, "tanh", 5),
        ],
    )
    def test_param_grads_match_finite_differences(self, levels, bidirectional, cell, T):
        cfg = NetworkConfig(3, levels, 4, bidirectional, cell, 3)
        params = ParamSet.zeros(cfg).init_uniform(Rng(100 + levels), 0.4)
        rng = Rng(200 + levels)
        x = rng.gaussian(0, 1, T * 3).reshape(T, 3)
        dlogits = rng.gaussian(0, 1, T * 3).reshape(T, 3)

        def loss(vec):
            logits, _ = forward(x, ParamSet(cfg, vec), cfg)
            return float((dlogits * logits).sum())

        _, cache = forward(x, params, cfg)
        grads, _ = backward(params, cfg, cache, dlogits)
        fd = fd_param_grad(loss, params.flatten())
        assert rel_err(grads.flatten(), fd).max() < 1e-4

    def test_input_grads_match_finite_differences(self):
        cfg, params = random_net(21, levels=2)
        rng = Rng(22)
        x = rng.gaussian(0, 1, 3 * 3).reshape(3, 3)
        dlogits = rng.gaussian(0, 1, 3 * 3).reshape(3, 3)
        _, cache = forward(x, params, cfg)
        _, dinput = backward(params, cfg, cache, dlogits, want_dinput=True)

        fd = np.zeros_like(x)
        eps = 1e-5
        for t in range(3):
            for d in range(3):
                xp = x.copy()
                xp[t, d] += eps
                up = float((dlogits * forward(xp, params, cfg)[0]).sum())
                xp[t, d] -= 2 * eps
                down = float((dlogits * forward(xp, params, cfg)[0]).sum())
                fd[t, d] = (up - down) / (2 * eps)
        assert rel_err(dinput, fd).max() < 1e-4

    def test_dlogits_shape_mismatch(self):
        cfg, params = random_net(23)
        x = Rng(24).gaussian(0, 1, 4 * 3).reshape(4, 3)
        _, cache = forward(x, params, cfg)
        with pytest.raises(ValueError):
            backward(params, cfg, cache, np.zeros((4, 7)))
