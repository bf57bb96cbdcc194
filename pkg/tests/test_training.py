import json
import math

import numpy as np
import pytest

from seqlab.cells import NetworkConfig
from seqlab.data import Utterance
from seqlab.models import CtcModel
from seqlab.numerics import Rng
from seqlab.training import (
    Checkpoint,
    CheckpointError,
    NonFiniteGradientError,
    OptimizerState,
    TrainingError,
    TrainSchedule,
    TrainSettings,
    apply_weight_noise,
    checkpoint_load,
    checkpoint_save,
    early_stop_controller,
    gradient_check,
    run_training,
    sgd_step,
    train_epoch,
)


def tiny_ctc(seed=0, K=2, D=2, H=3, levels=1, scale=1.0):
    # scale > 1 pushes weights away from the near-zero-gradient regime where
    # finite differences drown in rounding noise
    cfg = NetworkConfig(D, levels, H, True, "lstm", K + 1)
    model = CtcModel(cfg, K)
    return model, model.init_params(Rng(seed)) * scale


def tiny_utts(seed, n, D=2, K=2, T=6, U=2):
    rng = Rng(seed)
    out = []
    for i in range(n):
        x = rng.gaussian(0, 1, T * D).reshape(T, D)
        z = tuple(int(v) for v in rng.integers(0, K - 1, U))
        out.append(Utterance(id=f"u{i}", features=x, targets=z))
    return out


class TestSgdStep:
    def test_zero_grads_zero_velocity_no_change(self):
        params = np.array([1.0, -2.0, 3.0])
        state = OptimizerState(0.1, 0.9, np.zeros(3))
        sgd_step(params, np.zeros(3), state)
        np.testing.assert_array_equal(params, [1.0, -2.0, 3.0])

    def test_zero_momentum_is_plain_sgd(self):
        params = np.array([1.0, 1.0])
        g = np.array([0.5, -0.25])
        sgd_step(params, g, OptimizerState(1.0, 0.0, np.zeros(2)))
        np.testing.assert_array_equal(params, np.array([1.0, 1.0]) - g)

    def test_two_steps_constant_gradient(self):
        # v1 = -eta*g, w1 = w - eta*g; v2 = -mu*eta*g - eta*g,
        # w2 = w - eta*g*(2 + mu)
        eta, mu = 0.01, 0.9
        params = np.zeros(4)
        g = np.array([1.0, -2.0, 0.5, 3.0])
        state = OptimizerState(eta, mu, np.zeros(4))
        sgd_step(params, g, state)
        sgd_step(params, g, state)
        np.testing.assert_allclose(params, -eta * g * (2 + mu), atol=1e-15)

    def test_nan_grads_refused(self):
        params = np.zeros(2)
        with pytest.raises(NonFiniteGradientError):
            sgd_step(params, np.array([1.0, np.nan]), OptimizerState(0.1, 0.9, np.zeros(2)))
        np.testing.assert_array_equal(params, np.zeros(2))


class TestWeightNoise:
    def test_sigma_zero_exact_copy(self):
        params = np.array([1.0, 2.0, 3.0])
        rng = Rng(1)
        before = rng.state_vector()
        out = apply_weight_noise(params, 0.0, rng)
        np.testing.assert_array_equal(out, params)
        assert out is not params
        np.testing.assert_array_equal(rng.state_vector(), before)

    def test_clean_params_untouched(self):
        params = np.zeros(100)
        out = apply_weight_noise(params, 0.075, Rng(2))
        assert (params == 0).all()
        assert (out != 0).any()

    def test_empirical_std(self):
        # 10^4 draws of one weight: sample std within 5% of sigma
        sigma = 0.075
        rng = Rng(3)
        draws = np.array([apply_weight_noise(np.zeros(1), sigma, rng)[0]
                          for _ in range(10_000)])
        assert abs(draws.std() - sigma) / sigma < 0.05

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            apply_weight_noise(np.zeros(2), -0.1, Rng(4))


class TestTrainEpoch:
    def test_zero_learning_rate_keeps_params(self):
        model, vec = tiny_ctc(10)
        utts = tiny_utts(11, 4)
        before = vec.copy()
        stats = train_epoch(model, vec, OptimizerState(0.0, 0.9), utts, Rng(12))
        np.testing.assert_array_equal(vec, before)
        assert stats.trained == 4 and stats.skipped == 0
        assert math.isfinite(stats.mean_logprob)

    def test_same_seed_identical_params(self):
        results = []
        for _ in range(2):
            model, vec = tiny_ctc(13)
            train_epoch(model, vec, OptimizerState(1e-3, 0.9), tiny_utts(14, 5), Rng(15))
            results.append(vec)
        np.testing.assert_array_equal(results[0], results[1])

    def test_overfits_single_sequence(self):
        model, vec = tiny_ctc(16)
        utt = tiny_utts(17, 1, T=8, U=2)
        first = model.log_prob(vec, utt[0])
        opt = OptimizerState(5e-2, 0.9)
        rng = Rng(18)
        for _ in range(200):
            train_epoch(model, vec, opt, utt, rng)
        assert model.log_prob(vec, utt[0]) > first

    def test_infeasible_sequence_skipped_and_logged(self):
        model, vec = tiny_ctc(19)
        bad = Utterance(id="bad", features=np.zeros((1, 2)), targets=(0, 1))  # U > T
        good = tiny_utts(20, 1)[0]
        lines = []
        stats = train_epoch(model, vec, OptimizerState(1e-3, 0.9), [bad, good],
                            Rng(21), log=lines.append)
        assert stats.skipped == 1 and stats.trained == 1
        assert any("bad" in ln for ln in lines)

    def test_all_skipped_is_error(self):
        model, vec = tiny_ctc(22)
        bad = Utterance(id="bad", features=np.zeros((1, 2)), targets=(0, 1))
        with pytest.raises(TrainingError):
            train_epoch(model, vec, OptimizerState(1e-3, 0.9), [bad], Rng(23))

    def test_noise_drawn_once_per_sequence_and_applied_to_copy(self):
        model, vec = tiny_ctc(24)
        utts = tiny_utts(25, 3)
        seen = []
        captured = []

        class Spy:
            """Wraps the family to observe the evaluation point per call."""
            def __init__(self, inner):
                self.inner = inner

            def loss_and_grad(self, w, utt):
                captured.append((utt.id, w.copy()))
                return self.inner.loss_and_grad(w, utt)

        pre = vec.copy()
        opt = OptimizerState(1e-3, 0.9)
        train_epoch(Spy(model), vec, opt, utts, Rng(26), noise_sigma=0.075,
                    noise_hook=lambda uid, noisy: seen.append((uid, noisy.copy())))
        # exactly one noise draw per sequence, and the gradient was evaluated
        # at exactly that noisy point
        assert [uid for uid, _ in seen] == [uid for uid, _ in captured]
        for (_, noisy), (_, evaled) in zip(seen, captured):
            np.testing.assert_array_equal(noisy, evaled)
        noise_vectors = [noisy - pre for _, noisy in seen[:1]]
        assert np.abs(noise_vectors[0]).max() > 0

    def test_clean_weights_change_only_by_sgd_update(self):
        # one instrumented step: post == pre + (mu*v - eta*g), no residual noise
        model, vec = tiny_ctc(27)
        utt = tiny_utts(28, 1)[0]
        eta, mu = 1e-3, 0.9
        v0 = Rng(29).gaussian(0, 0.01, vec.shape[0])
        grads = []

        class Spy:
            def loss_and_grad(self, w, u):
                out = model.loss_and_grad(w, u)
                grads.append(out[1].copy())
                return out

        pre = vec.copy()
        opt = OptimizerState(eta, mu, v0.copy())
        train_epoch(Spy(), vec, opt, [utt], Rng(30), noise_sigma=0.075)
        expect = pre + (mu * v0 - eta * grads[0])
        np.testing.assert_array_equal(vec, expect)


class TestEarlyStopController:
    def make(self, phases="two_phase", patience=2):
        return TrainSchedule(phases=phases, patience=patience)

    def test_improving_logprob_continues(self):
        sched = self.make()
        for lp in (-5.0, -4.0, -3.5):
            action, improved = early_stop_controller(sched, lp, None)
            assert action == "continue" and improved

    def test_patience_trace_switches_after_fourth_eval(self):
        # dev log-prob [-5, -4, -4.5, -4.6] with patience 2: improvements at
        # evals 1-2, stalls at 3-4, switch at eval 4 restoring the eval-2 best
        sched = self.make(patience=2)
        actions = [early_stop_controller(sched, lp, None)[0]
                   for lp in (-5.0, -4.0, -4.5, -4.6)]
        assert actions == ["continue", "continue", "continue", "switch_to_noise"]
        assert sched.best_dev_logprob == -4.0

    def test_noise_free_only_never_switches(self):
        sched = self.make(phases="noise_free", patience=2)
        actions = [early_stop_controller(sched, lp, None)[0]
                   for lp in (-5.0, -6.0, -7.0)]
        assert actions == ["continue", "continue", "stop_and_restore"]

    def test_noise_phase_tracks_error_rate(self):
        sched = self.make(patience=2)
        sched.phase = "with_noise"
        assert early_stop_controller(sched, -3.0, 0.4)[0] == "continue"
        assert early_stop_controller(sched, -3.0, 0.3)[0] == "continue"
        assert sched.best_dev_per == 0.3
        assert early_stop_controller(sched, -2.0, 0.31)[0] == "continue"
        assert early_stop_controller(sched, -1.0, 0.35)[0] == "stop_and_restore"


class TestGradientCheck:
    def test_linear_model_machine_epsilon(self):
        # a purely linear map has exact central differences
        class Linear:
            def log_prob(self, w, utt):
                return float(w @ utt.features[0])

            def loss_and_grad(self, w, utt):
                return self.log_prob(w, utt), -utt.features[0]

        utt = Utterance(id="l", features=np.array([[0.3, -1.2, 2.0]]), targets=())
        report = gradient_check(Linear(), np.array([0.1, 0.2, 0.3]), [utt])
        assert report.max_rel_err < 1e-10

    def test_blstm_ctc_tiny_instance(self):
        model, vec = tiny_ctc(31, levels=2, scale=8.0)
        report = gradient_check(model, vec, tiny_utts(32, 2, T=4), eps=1e-5)
        assert report.max_rel_err < 1e-4
        assert report.checked == vec.shape[0]

    def test_detects_corrupted_gradient(self):
        model, vec = tiny_ctc(33)

        class Corrupted:
            def log_prob(self, w, utt):
                return model.log_prob(w, utt)

            def loss_and_grad(self, w, utt):
                lp, g = model.loss_and_grad(w, utt)
                g = g.copy()
                g[7] *= 2.0  # fault injection
                return lp, g

        report = gradient_check(Corrupted(), vec, tiny_utts(34, 1), eps=1e-5)
        assert report.max_rel_err > 0.1

    def test_sampled_subset(self):
        model, vec = tiny_ctc(35, scale=8.0)
        report = gradient_check(model, vec, tiny_utts(36, 1), sample=20, seed=1)
        assert report.checked == 20
        assert report.max_rel_err < 1e-4


class TestCheckpoint:
    def make_ck(self, n=17):
        rng = Rng(37)
        return Checkpoint(
            config={"model": "ctc", "hidden": "3"},
            params=rng.gaussian(0, 1, n),
            velocity=rng.gaussian(0, 1, n),
            rng_state=rng.state_vector(),
            sched_state=TrainSchedule().state_vector(),
            norm_ref="norm.txt",
        )

    def test_roundtrip_bit_identical(self, tmp_path):
        ck = self.make_ck()
        path = tmp_path / "a.ckpt"
        checkpoint_save(path, ck)
        loaded = checkpoint_load(path)
        np.testing.assert_array_equal(loaded.params, ck.params)
        np.testing.assert_array_equal(loaded.velocity, ck.velocity)
        np.testing.assert_array_equal(loaded.rng_state, ck.rng_state)
        np.testing.assert_array_equal(loaded.sched_state, ck.sched_state)
        assert loaded.config == ck.config
        assert loaded.norm_ref == "norm.txt"
        path2 = tmp_path / "b.ckpt"
        checkpoint_save(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_names_byte_counts(self, tmp_path):
        path = tmp_path / "a.ckpt"
        checkpoint_save(path, self.make_ck())
        raw = path.read_bytes()
        path.write_bytes(raw[:-24])
        with pytest.raises(CheckpointError, match=r"expected \d+ bytes"):
            checkpoint_load(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        checkpoint_save(path, self.make_ck())
        raw = path.read_bytes().replace(b"seqlab-checkpoint 1", b"seqlab-checkpoint 9", 1)
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="version 9"):
            checkpoint_load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "nope.ckpt")

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "a.ckpt"
        path.write_bytes(b"not a checkpoint\n---\nxx")
        with pytest.raises(CheckpointError):
            checkpoint_load(path)


def read_metrics(out_dir):
    return (out_dir / "metrics.jsonl").read_text()


class TestRunTraining:
    def settings(self, **kw):
        base = dict(learning_rate=1e-3, momentum=0.9, phases="two_phase",
                    noise_sigma=0.05, patience=2, max_epochs=4,
                    dev_eval_every=1, beam_width=4, seed=5)
        base.update(kw)
        return TrainSettings(**base)

    def test_metrics_line_count_equals_epochs(self, tmp_path):
        model, _ = tiny_ctc(38)
        result = run_training(model, self.settings(phases="noise_free", max_epochs=3),
                              tiny_utts(39, 3), tiny_utts(40, 2), tmp_path / "run")
        lines = read_metrics(result.out_dir).splitlines()
        assert len(lines) == len(result.metrics)
        rec = json.loads(lines[0])
        assert set(rec) == {"epoch", "phase", "train_logprob", "dev_logprob", "dev_per"}

    def test_rerun_is_byte_identical(self, tmp_path):
        model, _ = tiny_ctc(41)
        a = run_training(model, self.settings(), tiny_utts(42, 3), tiny_utts(43, 2),
                         tmp_path / "a")
        b = run_training(model, self.settings(), tiny_utts(42, 3), tiny_utts(43, 2),
                         tmp_path / "b")
        assert read_metrics(a.out_dir) == read_metrics(b.out_dir)
        np.testing.assert_array_equal(a.params, b.params)
        assert (a.out_dir / "best.ckpt").read_bytes() == (b.out_dir / "best.ckpt").read_bytes()

    def test_two_phase_switch_happens(self, tmp_path):
        model, _ = tiny_ctc(44)
        result = run_training(model, self.settings(max_epochs=3),
                              tiny_utts(45, 3), tiny_utts(46, 2), tmp_path / "run")
        phases = [m["phase"] for m in result.metrics]
        assert "noise_free" in phases and "with_noise" in phases
        assert (result.out_dir / "best_noise_free.ckpt").exists()
        assert (result.out_dir / "best.ckpt").exists()

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        model, _ = tiny_ctc(47)
        train, dev = tiny_utts(48, 3), tiny_utts(49, 2)
        full = run_training(model, self.settings(max_epochs=4, phases="noise_free"),
                            train, dev, tmp_path / "full",
                            config_text={"model": "ctc"})
        # stop the same run after 2 epochs, then resume it in place
        part = run_training(model, self.settings(max_epochs=2, phases="noise_free"),
                            train, dev, tmp_path / "part",
                            config_text={"model": "ctc"})
        resumed = run_training(model, self.settings(max_epochs=4, phases="noise_free"),
                               train, dev, tmp_path / "part",
                               config_text={"model": "ctc"},
                               resume_path=tmp_path / "part" / "last.ckpt")
        assert read_metrics(full.out_dir) == read_metrics(part.out_dir)
        np.testing.assert_array_equal(full.params, resumed.params)

    def test_resume_config_mismatch_rejected(self, tmp_path):
        model, _ = tiny_ctc(50)
        run_training(model, self.settings(max_epochs=1, phases="noise_free"),
                     tiny_utts(51, 2), tiny_utts(52, 1), tmp_path / "run",
                     config_text={"model": "ctc"})
        with pytest.raises(CheckpointError, match="config"):
            run_training(model, self.settings(max_epochs=2, phases="noise_free"),
                         tiny_utts(51, 2), tiny_utts(52, 1), tmp_path / "run",
                         config_text={"model": "transducer"},
                         resume_path=tmp_path / "run" / "last.ckpt")
