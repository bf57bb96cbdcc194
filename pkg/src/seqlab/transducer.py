"""Joint acoustic/label-history sequence model ("transducer"): a label
prediction network over previously emitted labels, a feedforward output
network combining acoustic and prediction hidden states into Pr(k|t,u), the
forward-backward log-likelihood over the frame-by-emission lattice, its exact
gradient, and assembly from pretrained donor networks.

Lattice convention: alpha(t,u) is the log mass of consuming frames 0..t-1
while emitting the first u labels and now sitting at node (t,u). A blank at
(t,u) advances to (t+1,u); emitting the next label advances to (t,u+1); the
sequence probability is alpha(T-1,U) plus a final mandatory blank.

Parameter layout (frozen, checkpoints depend on it): acoustic stack blocks
first (no output projection), then the prediction stack blocks (no
projection), then the output network fields in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb
from typing import Optional

import numpy as np

from . import cells
from .cells import NetworkConfig, ParamSet
from .ctc import InfeasibleTargetError, log_softmax
from .numerics import NEG_INF, Rng, log_add


def prediction_config(num_labels: int, hidden: int, levels: int = 1) -> NetworkConfig:
    """Label-history network: unidirectional LSTM over one-hot label inputs
    (K+1 wide; the blank id doubles as the start-of-sequence symbol)."""
    return NetworkConfig(
        input_dim=num_labels + 1,
        levels=levels,
        hidden=hidden,
        bidirectional=False,
        cell="lstm",
        output_dim=num_labels + 1,
    )


def prediction_inputs(target, num_labels: int) -> np.ndarray:
    """One-hot input sequence [start, z_1, ..., z_U] (start reuses blank id)."""
    z = [int(v) for v in target]
    for v in z:
        if not 0 <= v < num_labels:
            raise ValueError(f"invalid label {v}: must be in [0, {num_labels})")
    onehots = np.zeros((len(z) + 1, num_labels + 1))
    onehots[0, num_labels] = 1.0
    for u, v in enumerate(z):
        onehots[u + 1, v] = 1.0
    return onehots


def prediction_forward(target, params: ParamSet, config: NetworkConfig):
    """Hidden vectors p_0..p_U of the label-history network.

    p_0 is the response to the start symbol, p_u to label z_u. Returns
    ((U+1, H) array, cache for backpropagation).
    """
    onehots = prediction_inputs(target, config.input_dim - 1)
    p_top, _, cache = cells.forward_hidden(onehots, params, config)
    return p_top, cache


@dataclass
class JointParams:
    """Output network: linear acoustic collapse l_t, tanh combiner h_{t,u},
    and the K+1 softmax layer."""

    w_fl: np.ndarray
    w_bl: Optional[np.ndarray]
    b_l: np.ndarray
    w_lh: np.ndarray
    w_pb: np.ndarray
    b_h: np.ndarray
    w_hy: np.ndarray
    b_y: np.ndarray


def joint_shapes(hidden: int, num_labels: int, acoustic_bidirectional: bool):
    yield "w_fl", (hidden, hidden)
    if acoustic_bidirectional:
        yield "w_bl", (hidden, hidden)
    yield "b_l", (hidden,)
    yield "w_lh", (hidden, hidden)
    yield "w_pb", (hidden, hidden)
    yield "b_h", (hidden,)
    yield "w_hy", (num_labels + 1, hidden)
    yield "b_y", (num_labels + 1,)


def joint_count(hidden: int, num_labels: int, acoustic_bidirectional: bool) -> int:
    return sum(
        int(np.prod(s)) for _, s in joint_shapes(hidden, num_labels, acoustic_bidirectional)
    )


class TransducerParams:
    """All transducer weights as structured views over one flat vector."""

    def __init__(self, acoustic_config: NetworkConfig, pred_config: NetworkConfig,
                 vec: np.ndarray):
        if acoustic_config.hidden != pred_config.hidden:
            raise ValueError(
                "acoustic and prediction hidden widths differ: "
                f"{acoustic_config.hidden} vs {pred_config.hidden}"
            )
        num_labels = pred_config.input_dim - 1
        n_ac = cells.param_count(acoustic_config, projection=False)
        n_pr = cells.param_count(pred_config, projection=False)
        n_jt = joint_count(acoustic_config.hidden, num_labels,
                           acoustic_config.bidirectional)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (n_ac + n_pr + n_jt,):
            raise ValueError(
                f"parameter vector length mismatch: expected {n_ac + n_pr + n_jt}, "
                f"got {vec.shape}"
            )
        self.acoustic_config = acoustic_config
        self.pred_config = pred_config
        self.num_labels = num_labels
        self.vec = vec
        self.acoustic = ParamSet(acoustic_config, vec[:n_ac], projection=False)
        self.prediction = ParamSet(pred_config, vec[n_ac : n_ac + n_pr], projection=False)
        views = {"w_bl": None}
        offset = n_ac + n_pr
        for name, shape in joint_shapes(acoustic_config.hidden, num_labels,
                                        acoustic_config.bidirectional):
            size = int(np.prod(shape))
            views[name] = vec[offset : offset + size].reshape(shape)
            offset += size
        self.joint = JointParams(**views)

    @classmethod
    def count(cls, acoustic_config, pred_config) -> int:
        num_labels = pred_config.input_dim - 1
        return (
            cells.param_count(acoustic_config, projection=False)
            + cells.param_count(pred_config, projection=False)
            + joint_count(acoustic_config.hidden, num_labels,
                          acoustic_config.bidirectional)
        )

    @classmethod
    def zeros(cls, acoustic_config, pred_config) -> "TransducerParams":
        return cls(acoustic_config, pred_config,
                   np.zeros(cls.count(acoustic_config, pred_config)))


def acoustic_collapse(h_fwd, h_bwd, jp: JointParams) -> np.ndarray:
    """Linear layer collapsing the top acoustic hidden sequences into l_t.
    A function of t alone, computed once per frame."""
    l = h_fwd @ jp.w_fl.T + jp.b_l
    if h_bwd is not None:
        l = l + h_bwd @ jp.w_bl.T
    return l


def joint_log_softmax(l_t, p_u, jp: JointParams) -> np.ndarray:
    """Log distribution over K+1 symbols at one (frame, emission) node."""
    h = np.tanh(jp.w_lh @ np.asarray(l_t) + jp.w_pb @ np.asarray(p_u) + jp.b_h)
    return log_softmax(jp.w_hy @ h + jp.b_y)


def joint_grid(l: np.ndarray, p_seq: np.ndarray, jp: JointParams):
    """All (T, U+1) node distributions at once.

    Returns (log_probs (T,U+1,K+1), tanh activations (T,U+1,H)) with the
    tanh layer retained for the backward pass.
    """
    a = l @ jp.w_lh.T
    b = p_seq @ jp.w_pb.T
    h = np.tanh(a[:, None, :] + b[None, :, :] + jp.b_h)
    y = h @ jp.w_hy.T + jp.b_y
    return log_softmax(y), h


def transducer_lattice(log_grid: np.ndarray, target):
    """Forward-backward over the (T)x(U+1) lattice.

    Returns (log_prob, alpha, beta). alpha(t,u) excludes the emission at
    (t,u); beta(t,u) includes it, so alpha+beta is the through-node mass.
    """
    log_grid = np.asarray(log_grid, dtype=np.float64)
    T, width, symbols = log_grid.shape
    num_labels = symbols - 1
    blank = num_labels
    z = [int(v) for v in target]
    for v in z:
        if not 0 <= v < num_labels:
            raise ValueError(f"invalid label {v}: must be in [0, {num_labels})")
    U = len(z)
    if width != U + 1:
        raise ValueError(f"grid has {width} emission levels but target needs {U + 1}")

    alpha = np.full((T, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for u in range(1, U + 1):
        alpha[0, u] = alpha[0, u - 1] + log_grid[0, u - 1, z[u - 1]]
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + log_grid[t - 1, 0, blank]
        for u in range(1, U + 1):
            alpha[t, u] = log_add(
                alpha[t - 1, u] + log_grid[t - 1, u, blank],
                alpha[t, u - 1] + log_grid[t, u - 1, z[u - 1]],
            )

    beta = np.full((T, U + 1), NEG_INF)
    beta[T - 1, U] = log_grid[T - 1, U, blank]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = log_grid[T - 1, u, z[u]] + beta[T - 1, u + 1]
    for t in range(T - 2, -1, -1):
        beta[t, U] = log_grid[t, U, blank] + beta[t + 1, U]
        for u in range(U - 1, -1, -1):
            beta[t, u] = log_add(
                log_grid[t, u, blank] + beta[t + 1, u],
                log_grid[t, u, z[u]] + beta[t, u + 1],
            )

    log_prob = alpha[T - 1, U] + log_grid[T - 1, U, blank]
    return float(log_prob), alpha, beta


def transducer_grid_grad(log_grid: np.ndarray, target, lattice=None) -> np.ndarray:
    """Gradient of -log Pr(target) with respect to the pre-softmax node
    logits y_{t,u}. Each node's row sums to zero (softmax Jacobian folded
    against the node's path-visit mass)."""
    log_grid = np.asarray(log_grid, dtype=np.float64)
    T, width, symbols = log_grid.shape
    blank = symbols - 1
    z = [int(v) for v in target]
    U = len(z)
    if lattice is None:
        lattice = transducer_lattice(log_grid, target)
    log_prob, alpha, beta = lattice
    if log_prob == NEG_INF:
        raise InfeasibleTargetError(f"target has zero probability (T={T}, U={U})")

    occ = np.zeros((T, width, symbols))
    # blank transitions (t,u) -> (t+1,u); the final node's blank terminates
    for u in range(U + 1):
        for t in range(T):
            if t + 1 < T:
                w = alpha[t, u] + log_grid[t, u, blank] + beta[t + 1, u] - log_prob
            elif u == U:
                w = alpha[t, u] + log_grid[t, u, blank] - log_prob
            else:
                continue
            if w != NEG_INF:
                occ[t, u, blank] = np.exp(w)
    # label transitions (t,u) -> (t,u+1)
    for u in range(U):
        for t in range(T):
            w = alpha[t, u] + log_grid[t, u, z[u]] + beta[t, u + 1] - log_prob
            if w != NEG_INF:
                occ[t, u, z[u]] += np.exp(w)
    node_mass = occ.sum(axis=2, keepdims=True)
    return np.exp(log_grid) * node_mass - occ


def transducer_brute_force(log_grid: np.ndarray, target, max_paths: int = 10**6) -> float:
    """Oracle log-probability by enumerating every monotone lattice path.

    A path assigns each label a frame (non-decreasing) and closes every frame
    with one blank at the emission level reached there.
    """
    log_grid = np.asarray(log_grid, dtype=np.float64)
    T, width, symbols = log_grid.shape
    blank = symbols - 1
    z = [int(v) for v in target]
    U = len(z)
    if width != U + 1:
        raise ValueError(f"grid has {width} emission levels but target needs {U + 1}")
    if comb(T + U, U) > max_paths:
        raise ValueError(f"instance too large: C({T + U},{U}) paths exceeds {max_paths}")
    total = NEG_INF
    for frames in combinations_with_replacement(range(T), U):
        lp = 0.0
        for u, t in enumerate(frames):
            lp += log_grid[t, u, z[u]]
        counts = np.searchsorted(frames, np.arange(T), side="right")
        for t in range(T):
            lp += log_grid[t, counts[t], blank]
        total = log_add(total, lp)
    return float(total)


# ---------------------------------------------------------------------------
# full-model forward and gradient


def transducer_log_prob(tp: TransducerParams, x, target):
    """Sequence log-probability under the full model; returns
    (log_prob, lattice alpha, lattice beta)."""
    h_f, h_b, _ = cells.forward_hidden(x, tp.acoustic, tp.acoustic_config)
    p_seq, _ = prediction_forward(target, tp.prediction, tp.pred_config)
    l = acoustic_collapse(h_f, h_b, tp.joint)
    log_grid, _ = joint_grid(l, p_seq, tp.joint)
    return transducer_lattice(log_grid, target)


def transducer_loss_and_grad(tp: TransducerParams, x, target):
    """(log_prob, flat gradient of -log_prob over the full parameter vector).

    Raises InfeasibleTargetError when the target has zero probability.
    """
    acfg, pcfg, jp = tp.acoustic_config, tp.pred_config, tp.joint
    h_f, h_b, acache = cells.forward_hidden(x, tp.acoustic, acfg)
    p_seq, pcache = prediction_forward(target, tp.prediction, pcfg)
    l = acoustic_collapse(h_f, h_b, jp)
    log_grid, h_nodes = joint_grid(l, p_seq, jp)
    lattice = transducer_lattice(log_grid, target)
    log_prob = lattice[0]
    d_y = transducer_grid_grad(log_grid, target, lattice)

    grads = TransducerParams.zeros(acfg, pcfg)
    gj = grads.joint
    gj.w_hy += np.einsum("tuk,tuh->kh", d_y, h_nodes)
    gj.b_y += d_y.sum(axis=(0, 1))
    d_h = (d_y @ jp.w_hy) * (1.0 - h_nodes**2)
    d_a = d_h.sum(axis=1)             # gradient on w_lh @ l_t per frame
    d_b = d_h.sum(axis=0)             # gradient on w_pb @ p_u per position
    gj.w_lh += d_a.T @ l
    gj.w_pb += d_b.T @ p_seq
    gj.b_h += d_h.sum(axis=(0, 1))
    d_l = d_a @ jp.w_lh
    d_p = d_b @ jp.w_pb

    gj.w_fl += d_l.T @ h_f
    gj.b_l += d_l.sum(axis=0)
    d_top_f = d_l @ jp.w_fl
    d_top_b = None
    if h_b is not None:
        gj.w_bl += d_l.T @ h_b
        d_top_b = d_l @ jp.w_bl
    cells.backward_hidden(tp.acoustic, acfg, acache, d_top_f, d_top_b,
                          grads=grads.acoustic)
    cells.backward_hidden(tp.prediction, pcfg, pcache, d_p, None,
                          grads=grads.prediction)
    return log_prob, grads.vec


def assemble_pretrained(ctc_params: ParamSet, ctc_config: NetworkConfig,
                        pred_params: ParamSet, pred_config: NetworkConfig,
                        rng: Rng, init_scale: float = 0.1) -> TransducerParams:
    """Build a transducer from a trained acoustic network and a trained
    label-prediction network.

    Recurrent blocks are copied verbatim; both donors' output heads are
    dropped; only the output network starts from fresh uniform weights.
    """
    if ctc_config.hidden != pred_config.hidden:
        raise ValueError(
            f"donor widths incompatible: acoustic H={ctc_config.hidden}, "
            f"prediction H={pred_config.hidden}"
        )
    tp = TransducerParams.zeros(ctc_config, pred_config)
    n_ac = cells.param_count(ctc_config, projection=False)
    n_pr = cells.param_count(pred_config, projection=False)
    # stack blocks are a prefix of the donor vectors (projections flatten last)
    tp.vec[:n_ac] = ctc_params.flatten()[:n_ac]
    tp.vec[n_ac : n_ac + n_pr] = pred_params.flatten()[:n_pr]
    n_joint = tp.vec.shape[0] - n_ac - n_pr
    tp.vec[n_ac + n_pr :] = rng.uniform(-init_scale, init_scale, n_joint)
    return tp
