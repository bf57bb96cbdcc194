"""Decoding and scoring: best-path and beam-search decoders producing n-best
lists, Levenshtein scoring with optional label-set mapping, and input
sensitivity maps.

Both beam engines share the same discipline: process frames left to right;
within a frame, hypotheses expand by label emissions and close with a blank
into the next frame; hypotheses with identical label sequences merge by
summing probabilities; the `width` most probable survive each step; the
final list is sorted by unnormalised log probability. Ties break everywhere
toward the lower label id, then the shorter sequence (plain tuple order).

The label-history engine walks the frame-by-emission lattice and may emit
several labels per frame (capped); the per-frame-posterior engine uses
collapsed-alignment transitions (tracking blank/non-blank mass per prefix,
so repeats and merges score exactly), because a sequence's probability there
is the sum over collapsing alignments, one symbol per frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cells
from .ctc import collapse_alignment
from .numerics import NEG_INF, log_add


@dataclass(frozen=True)
class Hypothesis:
    labels: tuple
    log_prob: float
    pred_state: object = field(default=None, compare=False)


def _rank_key(item):
    labels, log_prob = item
    return (-log_prob, labels)


def _finish(scored: dict, limit: Optional[int] = None) -> list:
    """Sorted hypothesis list, -inf mass dropped, duplicates impossible."""
    items = [(lab, float(lp)) for lab, lp in scored.items() if lp > NEG_INF]
    items.sort(key=_rank_key)
    if limit is not None:
        items = items[:limit]
    return [Hypothesis(labels=lab, log_prob=lp) for lab, lp in items]


def best_path_decode(log_post) -> tuple:
    """Most active output per frame (ties to the lowest id), collapsed."""
    log_post = np.asarray(log_post)
    blank = log_post.shape[1] - 1
    path = np.argmax(log_post, axis=1)
    return tuple(collapse_alignment(path, blank))


def beam_search_ctc(log_post, width: int, merge_hook=None) -> list:
    """Beam search over per-frame posteriors (blank last).

    Each prefix carries separate mass for alignments ending in blank vs.
    ending in its last label, which makes repeat extension exact: with no
    pruning the final score of a prefix equals its full collapsed-alignment
    probability.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    log_post = np.asarray(log_post, dtype=np.float64)
    T, symbols = log_post.shape
    num_labels = symbols - 1

    def merge(store, labels, slot, add):
        if add == NEG_INF:
            return
        pair = store.setdefault(labels, [NEG_INF, NEG_INF])
        old = pair[slot]
        pair[slot] = log_add(old, add)
        if merge_hook is not None and old != NEG_INF:
            merge_hook(labels, old, add, pair[slot])

    beams = {(): [0.0, NEG_INF]}  # labels -> [blank-ending, label-ending]
    for t in range(T):
        row = log_post[t]
        new: dict = {}
        for labels, (lb, lnb) in beams.items():
            total = log_add(lb, lnb)
            merge(new, labels, 0, total + row[num_labels])
            if labels:
                # same frame label repeats the run: no new output symbol
                merge(new, labels, 1, lnb + row[labels[-1]])
            for k in range(num_labels):
                if labels and k == labels[-1]:
                    contrib = lb + row[k]  # a repeat needs the blank branch
                else:
                    contrib = total + row[k]
                merge(new, labels + (k,), 1, contrib)
        ranked = sorted(
            ((lab, log_add(p[0], p[1])) for lab, p in new.items()),
            key=_rank_key,
        )[:width]
        beams = {lab: new[lab] for lab, lp in ranked if lp > NEG_INF}
    return _finish({lab: log_add(p[0], p[1]) for lab, p in beams.items()})


def beam_search_transducer(scorer, num_frames: int, width: int, u_cap: int = 10,
                           merge_hook=None, on_cap=None) -> list:
    """Beam search over the frame-by-emission lattice.

    `scorer` supplies: start() -> state, dist(t, state) -> K+1 log
    distribution (blank last), advance(state, label) -> state. States are a
    function of the emitted prefix, so merging by label sequence is exact.
    Within a frame a hypothesis may emit up to `u_cap` labels before a
    forced blank (`on_cap` is called with the frame index when that guard
    engages); emission rounds also stop once the best open candidate cannot
    reach the current beam.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    num_labels = scorer.num_labels
    blank = num_labels

    def merge(store, labels, add):
        if add == NEG_INF:
            return
        old = store.get(labels, NEG_INF)
        store[labels] = log_add(old, add)
        if merge_hook is not None and old != NEG_INF:
            merge_hook(labels, old, add, store[labels])

    hyps = {(): (0.0, scorer.start())}
    for t in range(num_frames):
        # label-history states are a function of the label sequence alone;
        # one registry per frame serves every emission round
        states = {labels: st for labels, (_, st) in hyps.items()}
        dists: dict = {}
        closed: dict = {}
        cur = {labels: lp for labels, (lp, _) in hyps.items()}
        for round_no in range(u_cap + 1):
            cand: dict = {}
            for labels, lp in cur.items():
                d = dists.get(labels)
                if d is None:
                    d = scorer.dist(t, states[labels])
                    dists[labels] = d
                merge(closed, labels, lp + d[blank])
                if round_no < u_cap:
                    for k in range(num_labels):
                        ext = lp + d[k]
                        if ext > NEG_INF:
                            # within a round the extension has a unique parent
                            merge(cand, labels + (k,), ext)
            if round_no == u_cap:
                if cur and on_cap is not None:
                    on_cap(t)
                break
            if not cand:
                break
            if len(closed) >= width:
                kth = sorted(closed.values(), reverse=True)[width - 1]
                # open candidates only lose mass by emitting further; once
                # none can reach the beam the frame is settled
                if max(cand.values()) < kth:
                    break
            cur = dict(sorted(cand.items(), key=_rank_key)[:width])
            for labels in cur:
                if labels not in states:
                    states[labels] = scorer.advance(states[labels[:-1]], labels[-1])
        hyps = {}
        for labels, lp in sorted(closed.items(), key=_rank_key)[:width]:
            if lp > NEG_INF:
                hyps[labels] = (lp, states[labels])
    return _finish({lab: lp for lab, (lp, _) in hyps.items()})


# ---------------------------------------------------------------------------
# scoring


def edit_distance(a, b) -> int:
    """Minimal insertions + deletions + substitutions between two sequences."""
    a = list(a)
    b = list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (x != y),
            )
        prev = cur
    return prev[-1]


class LabelMapping:
    """Total map from model label ids to scoring label ids."""

    def __init__(self, table: dict):
        self.table = {int(k): int(v) for k, v in table.items()}

    @classmethod
    def from_file(cls, path) -> "LabelMapping":
        table = {}
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(
                        f"{path}:{lineno}: expected 'model_label scoring_label', got {line!r}"
                    )
                try:
                    src, dst = int(parts[0]), int(parts[1])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: non-integer label: {line!r}") from exc
                table[src] = dst
        return cls(table)

    def apply(self, labels):
        try:
            return tuple(self.table[int(v)] for v in labels)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} has no scoring mapping") from exc


def score_per(refs, hyps, mapping: Optional[LabelMapping] = None) -> float:
    """Corpus error rate: total edit distance over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    total_dist = 0
    total_len = 0
    for ref, hyp in zip(refs, hyps):
        if mapping is not None:
            ref = mapping.apply(ref)
            hyp = mapping.apply(hyp)
        total_dist += edit_distance(ref, hyp)
        total_len += len(ref)
    if total_len == 0:
        return 0.0 if total_dist == 0 else float("inf")
    return total_dist / total_len


# ---------------------------------------------------------------------------
# input sensitivity


def input_sensitivity(params, config, features, t: int, k: int) -> np.ndarray:
    """|d logit_t[k] / d x| over the whole input, as a (T, D) heat map."""
    features = np.asarray(features, dtype=np.float64)
    T = features.shape[0]
    if not 0 <= t < T:
        raise ValueError(f"timestep {t} out of range [0, {T})")
    if not 0 <= k < config.output_dim:
        raise ValueError(f"output index {k} out of range [0, {config.output_dim})")
    _, cache = cells.forward(features, params, config)
    dlogits = np.zeros((T, config.output_dim))
    dlogits[t, k] = 1.0
    _, dinput = cells.backward(params, config, cache, dlogits, want_dinput=True)
    return np.abs(dinput)
