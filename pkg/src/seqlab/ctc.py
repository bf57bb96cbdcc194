"""Blank-augmented per-frame output distribution over label sequences:
alignment collapse, forward-backward log-likelihood over the
blank-interleaved target, its gradient with respect to the logits, and an
exhaustive path-enumeration oracle for desk-scale verification.

The softmax layer is K+1 wide: labels 0..K-1 plus the blank symbol at index
K. A length-T path over the K+1 symbols collapses to a labelling by merging
adjacent repeats and then deleting blanks; the sequence probability is the
sum over every path that collapses to the target.
"""

from __future__ import annotations

import itertools

import numpy as np

from .numerics import NEG_INF, log_add


class InfeasibleTargetError(Exception):
    """Raised where a gradient is requested for a zero-probability target."""


def log_softmax(logits) -> np.ndarray:
    """Row-wise log softmax over all K+1 entries (blank included)."""
    y = np.asarray(logits, dtype=np.float64)
    m = y.max(axis=-1, keepdims=True)
    z = y - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def collapse_alignment(path, blank: int) -> list:
    """Merge adjacent repeats, then delete blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev:
            if s != blank:
                out.append(s)
            prev = s
    return out


def extended_target(target, blank: int) -> np.ndarray:
    """Interleave the target with blanks: (blank, z1, blank, ..., zU, blank)."""
    z = list(target)
    ext = np.full(2 * len(z) + 1, blank, dtype=np.int64)
    ext[1::2] = z
    return ext


def _check_target(target, num_labels: int) -> None:
    for z in target:
        if not 0 <= int(z) < num_labels:
            raise ValueError(f"invalid target label {z}: must be in [0, {num_labels})")


def ctc_log_prob(log_post: np.ndarray, target):
    """Log-probability of `target` under per-frame posteriors.

    `log_post` is (T, K+1) of log probabilities with blank last. Returns
    (log_prob, alpha, beta); alpha/beta are the (T, 2U+1) forward/backward
    lattices over the blank-interleaved target, both including the emission
    at their own timestep. Infeasible targets (too few frames for the
    required blanks between repeats) give -inf rather than an error.
    """
    log_post = np.asarray(log_post, dtype=np.float64)
    T, width = log_post.shape
    num_labels = width - 1
    blank = num_labels
    _check_target(target, num_labels)
    ext = extended_target(target, blank)
    S = ext.shape[0]

    # skip transition s-2 -> s allowed when s is a label differing from the
    # label two slots back (blanks never allow skips)
    can_skip = np.zeros(S, dtype=bool)
    for s in range(2, S):
        can_skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = log_post[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_post[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        for s in range(S):
            a = prev[s]
            if s >= 1:
                a = log_add(a, prev[s - 1])
            if can_skip[s]:
                a = log_add(a, prev[s - 2])
            if a != NEG_INF:
                alpha[t, s] = a + log_post[t, ext[s]]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = log_post[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_post[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        for s in range(S):
            b = nxt[s]
            if s + 1 < S:
                b = log_add(b, nxt[s + 1])
            if s + 2 < S and can_skip[s + 2]:
                b = log_add(b, nxt[s + 2])
            if b != NEG_INF:
                beta[t, s] = b + log_post[t, ext[s]]

    lp = alpha[T - 1, S - 1]
    if S > 1:
        lp = log_add(lp, alpha[T - 1, S - 2])
    return float(lp), alpha, beta


def ctc_grad(log_post: np.ndarray, target, lattices=None) -> np.ndarray:
    """Gradient of -log Pr(target) with respect to the pre-softmax logits.

    The softmax Jacobian is folded in: each row equals the posterior minus
    the lattice occupancy per symbol, so rows sum to zero.
    """
    log_post = np.asarray(log_post, dtype=np.float64)
    T, width = log_post.shape
    blank = width - 1
    if lattices is None:
        lp, alpha, beta = ctc_log_prob(log_post, target)
    else:
        lp, alpha, beta = lattices
    if lp == NEG_INF:
        raise InfeasibleTargetError(
            f"target has zero probability (T={T}, U={len(list(target))})"
        )
    ext = extended_target(target, blank)
    # alpha and beta both include the emission at t, so occupancy divides
    # one emission factor back out
    occ_states = alpha + beta - log_post[:, ext] - lp
    occupancy = np.zeros((T, width))
    for s in range(ext.shape[0]):
        occupancy[:, ext[s]] += np.exp(occ_states[:, s])
    return np.exp(log_post) - occupancy


def brute_force_table(log_post: np.ndarray, max_paths: int = 10**6) -> dict:
    """Enumerate every length-T path and pool path probabilities by the
    labelling each collapses to. Returns {labelling tuple: log prob}."""
    log_post = np.asarray(log_post, dtype=np.float64)
    T, width = log_post.shape
    blank = width - 1
    if width ** T > max_paths:
        raise ValueError(f"instance too large: {width}^{T} paths exceeds {max_paths}")
    table: dict = {}
    for path in itertools.product(range(width), repeat=T):
        lp = float(sum(log_post[t, k] for t, k in enumerate(path)))
        key = tuple(collapse_alignment(path, blank))
        table[key] = log_add(table.get(key, NEG_INF), lp)
    return table


def ctc_brute_force(log_post: np.ndarray, target, max_paths: int = 10**6) -> float:
    """Oracle log-probability by exhaustive path enumeration."""
    num_labels = np.asarray(log_post).shape[1] - 1
    _check_target(target, num_labels)
    return brute_force_table(log_post, max_paths).get(tuple(int(z) for z in target), NEG_INF)
