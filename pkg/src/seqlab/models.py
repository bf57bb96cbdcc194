"""Trainable model families. Each family holds the architecture only;
weights travel as flat float64 vectors so the optimizer, weight noise and
checkpointing stay generic. All families expose the same surface:

    param_count, init_params(rng), loss_and_grad(vec, utt) -> (logp, grad),
    log_prob(vec, utt) -> logp, decode(vec, features, width) -> labels
    (decode only where the family defines an output sequence).
"""

from __future__ import annotations

import numpy as np

from . import cells, ctc, decoding, transducer
from .cells import NetworkConfig, ParamSet
from .numerics import Rng

INIT_SCALE = 0.1  # uniform initial weight range


class CtcModel:
    """Recurrent stack with a K+1 softmax output trained on collapsed
    alignment likelihood."""

    kind = "ctc"

    def __init__(self, config: NetworkConfig, num_labels: int):
        if config.output_dim != num_labels + 1:
            raise ValueError(
                f"output_dim {config.output_dim} must be num_labels+1 = {num_labels + 1}"
            )
        self.config = config
        self.num_labels = num_labels

    @property
    def param_count(self) -> int:
        return cells.param_count(self.config)

    def init_params(self, rng: Rng) -> np.ndarray:
        return rng.uniform(-INIT_SCALE, INIT_SCALE, self.param_count)

    def params(self, vec) -> ParamSet:
        return ParamSet(self.config, vec)

    def log_posteriors(self, vec, features):
        logits, cache = cells.forward(features, self.params(vec), self.config)
        return ctc.log_softmax(logits), cache

    def log_prob(self, vec, utt) -> float:
        log_post, _ = self.log_posteriors(vec, utt.features)
        return ctc.ctc_log_prob(log_post, utt.targets)[0]

    def loss_and_grad(self, vec, utt):
        params = self.params(vec)
        logits, cache = cells.forward(utt.features, params, self.config)
        log_post = ctc.log_softmax(logits)
        lattices = ctc.ctc_log_prob(log_post, utt.targets)
        dlogits = ctc.ctc_grad(log_post, utt.targets, lattices)  # raises if -inf
        grads, _ = cells.backward(params, self.config, cache, dlogits)
        return lattices[0], grads.flatten()

    def decode(self, vec, features, width: int, u_cap: int = 10):
        hyps = self.decode_nbest(vec, features, width)
        return hyps[0].labels if hyps else ()

    def decode_nbest(self, vec, features, width: int, u_cap: int = 10,
                     merge_hook=None):
        # u_cap is part of the shared decode surface; per-frame posteriors
        # emit at most one label per frame, so it has nothing to bound here
        log_post, _ = self.log_posteriors(vec, features)
        return decoding.beam_search_ctc(log_post, width, merge_hook=merge_hook)

    def input_sensitivity(self, vec, features, t: int, k: int):
        return decoding.input_sensitivity(self.params(vec), self.config, features, t, k)


class TransducerModel:
    """Acoustic stack + label-history network joined by the feedforward
    output network."""

    kind = "transducer"

    def __init__(self, acoustic_config: NetworkConfig, num_labels: int,
                 prediction_levels: int = 1):
        self.acoustic_config = acoustic_config
        self.pred_config = transducer.prediction_config(
            num_labels, acoustic_config.hidden, prediction_levels
        )
        self.num_labels = num_labels

    @property
    def param_count(self) -> int:
        return transducer.TransducerParams.count(self.acoustic_config, self.pred_config)

    def init_params(self, rng: Rng) -> np.ndarray:
        return rng.uniform(-INIT_SCALE, INIT_SCALE, self.param_count)

    def params(self, vec) -> transducer.TransducerParams:
        return transducer.TransducerParams(self.acoustic_config, self.pred_config, vec)

    def log_prob(self, vec, utt) -> float:
        return transducer.transducer_log_prob(self.params(vec), utt.features, utt.targets)[0]

    def loss_and_grad(self, vec, utt):
        return transducer.transducer_loss_and_grad(self.params(vec), utt.features, utt.targets)

    def scorer(self, vec, features) -> "TransducerScorer":
        return TransducerScorer(self.params(vec), features)

    def decode(self, vec, features, width: int, u_cap: int = 10):
        hyps = self.decode_nbest(vec, features, width, u_cap=u_cap)
        return hyps[0].labels if hyps else ()

    def decode_nbest(self, vec, features, width: int, u_cap: int = 10,
                     merge_hook=None, on_cap=None):
        sc = self.scorer(vec, features)
        return decoding.beam_search_transducer(
            sc, features.shape[0], width, u_cap=u_cap,
            merge_hook=merge_hook, on_cap=on_cap,
        )


class TransducerScorer:
    """Incremental node scorer used by beam search: per-frame acoustic
    vectors precomputed once, label-history state advanced lazily."""

    def __init__(self, tp: transducer.TransducerParams, features):
        self.tp = tp
        h_f, h_b, _ = cells.forward_hidden(features, tp.acoustic, tp.acoustic_config)
        self.l = transducer.acoustic_collapse(h_f, h_b, tp.joint)
        self.num_labels = tp.num_labels

    def start(self):
        state = cells.initial_stack_state(self.tp.pred_config)
        onehot = np.zeros(self.num_labels + 1)
        onehot[self.num_labels] = 1.0  # start symbol
        p, state = cells.step_stack(onehot, state, self.tp.prediction, self.tp.pred_config)
        return (p, state)

    def advance(self, pred_state, label: int):
        onehot = np.zeros(self.num_labels + 1)
        onehot[label] = 1.0
        p, state = cells.step_stack(onehot, pred_state[1], self.tp.prediction,
                                    self.tp.pred_config)
        return (p, state)

    def dist(self, t: int, pred_state) -> np.ndarray:
        return transducer.joint_log_softmax(self.l[t], pred_state[0], self.tp.joint)


class PredictionLm:
    """Next-label model used to pretrain the transducer's label-history
    network: the same unidirectional stack plus a removable softmax head,
    trained with cross-entropy on z_{u+1} given p_u (end of sequence maps to
    the blank/start symbol)."""

    kind = "prediction_lm"

    def __init__(self, num_labels: int, hidden: int, levels: int = 1):
        self.config = transducer.prediction_config(num_labels, hidden, levels)
        self.num_labels = num_labels

    @property
    def param_count(self) -> int:
        return cells.param_count(self.config)  # head included

    def init_params(self, rng: Rng) -> np.ndarray:
        return rng.uniform(-INIT_SCALE, INIT_SCALE, self.param_count)

    def params(self, vec) -> ParamSet:
        return ParamSet(self.config, vec)

    def _targets_row(self, targets):
        return list(targets) + [self.num_labels]  # end token = blank id

    def log_prob(self, vec, utt) -> float:
        onehots = transducer.prediction_inputs(utt.targets, self.num_labels)
        logits, _ = cells.forward(onehots, self.params(vec), self.config)
        lsm = ctc.log_softmax(logits)
        return float(sum(lsm[u, v] for u, v in enumerate(self._targets_row(utt.targets))))

    def loss_and_grad(self, vec, utt):
        params = self.params(vec)
        onehots = transducer.prediction_inputs(utt.targets, self.num_labels)
        logits, cache = cells.forward(onehots, params, self.config)
        lsm = ctc.log_softmax(logits)
        rows = self._targets_row(utt.targets)
        logp = float(sum(lsm[u, v] for u, v in enumerate(rows)))
        dlogits = np.exp(lsm)
        for u, v in enumerate(rows):
            dlogits[u, v] -= 1.0
        grads, _ = cells.backward(params, self.config, cache, dlogits)
        return logp, grads.flatten()

    decode = None  # no output sequence of its own


def assemble_pretrained(ctc_model: CtcModel, ctc_vec, lm: PredictionLm, lm_vec,
                        rng: Rng) -> tuple[TransducerModel, np.ndarray]:
    """Transducer initialised from trained donors; only the output network
    starts from random weights. Returns (model, parameter vector)."""
    model = TransducerModel(ctc_model.config, ctc_model.num_labels,
                            prediction_levels=lm.config.levels)
    tp = transducer.assemble_pretrained(
        ctc_model.params(ctc_vec), ctc_model.config,
        lm.params(lm_vec), lm.config, rng, INIT_SCALE,
    )
    return model, tp.vec
