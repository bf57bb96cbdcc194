"""Recurrent cells and deep (bi)directional stacks: forward activations and
exact gradients by backpropagation through time.

Two cell kinds are supported: tanh units and LSTM memory cells with diagonal
cell-to-gate (peephole) connections, where the input and forget gates observe
the previous cell value and the output gate observes the current one.

Parameters live in one flat float64 vector; the structured views built by
`ParamSet` alias that vector, so optimizer updates on the flat vector are
visible through the per-layer fields and vice versa. The flattening order is
frozen (checkpoints depend on it): levels bottom-up, forward direction before
backward; within an LSTM direction the gate matrices in gate order i, f, c, o
(input-to-gate before recurrent), then the three peephole vectors (i, f, o),
then the biases (i, f, c, o); the output projection (forward matrix, backward
matrix, shared bias) comes last.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .numerics import Rng, logistic

CELL_KINDS = ("lstm", "tanh")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description for one recurrent stack."""

    input_dim: int
    levels: int
    hidden: int
    bidirectional: bool
    cell: str = "lstm"
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.levels < 1 or self.hidden < 1:
            raise ValueError(f"invalid network config: {self}")
        if self.output_dim < 1:
            raise ValueError(f"invalid output_dim: {self.output_dim}")
        if self.cell not in CELL_KINDS:
            raise ValueError(f"unknown cell kind: {self.cell!r}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1


@dataclass
class LstmDirParams:
    # declaration order == flattening order
    w_xi: np.ndarray
    w_hi: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    p_ci: np.ndarray
    p_cf: np.ndarray
    p_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray


@dataclass
class TanhDirParams:
    w_xh: np.ndarray
    w_hh: np.ndarray
    b_h: np.ndarray


@dataclass
class LayerParams:
    fwd: object
    bwd: Optional[object]


@dataclass
class OutputParams:
    w_fwd: np.ndarray
    w_bwd: Optional[np.ndarray]
    b: np.ndarray


def _dir_shapes(cell: str, in_dim: int, hidden: int):
    if cell == "lstm":
        return [
            ("w_xi", (hidden, in_dim)),
            ("w_hi", (hidden, hidden)),
            ("w_xf", (hidden, in_dim)),
            ("w_hf", (hidden, hidden)),
            ("w_xc", (hidden, in_dim)),
            ("w_hc", (hidden, hidden)),
            ("w_xo", (hidden, in_dim)),
            ("w_ho", (hidden, hidden)),
            ("p_ci", (hidden,)),
            ("p_cf", (hidden,)),
            ("p_co", (hidden,)),
            ("b_i", (hidden,)),
            ("b_f", (hidden,)),
            ("b_c", (hidden,)),
            ("b_o", (hidden,)),
        ]
    return [
        ("w_xh", (hidden, in_dim)),
        ("w_hh", (hidden, hidden)),
        ("b_h", (hidden,)),
    ]


def param_shapes(config: NetworkConfig, projection: bool = True):
    """Yield (name, shape) for every tensor in frozen flattening order."""
    in_dim = config.input_dim
    dir_names = ("fwd", "bwd")[: config.directions]
    for n in range(config.levels):
        for d in dir_names:
            for field, shape in _dir_shapes(config.cell, in_dim, config.hidden):
                yield f"l{n}.{d}.{field}", shape
        in_dim = config.hidden * config.directions
    if projection:
        yield "out.w_fwd", (config.output_dim, config.hidden)
        if config.bidirectional:
            yield "out.w_bwd", (config.output_dim, config.hidden)
        yield "out.b", (config.output_dim,)


def param_count(config: NetworkConfig, projection: bool = True) -> int:
    """Closed-form tensor-size total; equals len(ParamSet.flatten())."""
    h = config.hidden
    ndir = config.directions
    in_dim = config.input_dim
    total = 0
    for _ in range(config.levels):
        if config.cell == "lstm":
            per_dir = 4 * h * in_dim + 4 * h * h + 3 * h + 4 * h
        else:
            per_dir = h * in_dim + h * h + h
        total += ndir * per_dir
        in_dim = ndir * h
    if projection:
        total += ndir * config.output_dim * h + config.output_dim
    return total


class ParamSet:
    """All weights of one stack, as structured views over a flat vector."""

    def __init__(self, config: NetworkConfig, vec: np.ndarray, projection: bool = True):
        expected = param_count(config, projection)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] != expected:
            raise ValueError(
                f"parameter vector length mismatch: expected {expected}, "
                f"got {vec.shape}"
            )
        self.config = config
        self.projection = projection
        self.vec = vec
        views = {}
        offset = 0
        for name, shape in param_shapes(config, projection):
            size = int(np.prod(shape))
            views[name] = vec[offset : offset + size].reshape(shape)
            offset += size
        dir_cls = LstmDirParams if config.cell == "lstm" else TanhDirParams
        fnames = [f.name for f in fields(dir_cls)]
        self.layers = []
        for n in range(config.levels):
            fwd = dir_cls(**{f: views[f"l{n}.fwd.{f}"] for f in fnames})
            bwd = None
            if config.bidirectional:
                bwd = dir_cls(**{f: views[f"l{n}.bwd.{f}"] for f in fnames})
            self.layers.append(LayerParams(fwd=fwd, bwd=bwd))
        self.out = None
        if projection:
            self.out = OutputParams(
                w_fwd=views["out.w_fwd"],
                w_bwd=views.get("out.w_bwd"),
                b=views["out.b"],
            )
        self._views = views

    @classmethod
    def zeros(cls, config: NetworkConfig, projection: bool = True) -> "ParamSet":
        return cls(config, np.zeros(param_count(config, projection)), projection)

    @classmethod
    def unflatten(cls, config: NetworkConfig, vec, projection: bool = True) -> "ParamSet":
        """Rebuild from a flat vector (copies, so the source stays untouched)."""
        return cls(config, np.array(vec, dtype=np.float64), projection)

    def flatten(self) -> np.ndarray:
        return self.vec

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, self.vec.copy(), self.projection)

    def init_uniform(self, rng: Rng, scale: float = 0.1) -> "ParamSet":
        self.vec[:] = rng.uniform(-scale, scale, self.vec.shape[0])
        return self

    def names(self):
        return [name for name, _ in param_shapes(self.config, self.projection)]

    def view(self, name: str) -> np.ndarray:
        return self._views[name]


# ---------------------------------------------------------------------------
# single steps


def _lstm_gates(x_t, h_prev, c_prev, p: LstmDirParams):
    """Shared step kernel; the batch recursion reuses it so that stepwise
    and whole-sequence evaluation agree bit for bit."""
    i = logistic(p.w_xi @ x_t + p.w_hi @ h_prev + p.p_ci * c_prev + p.b_i)
    f = logistic(p.w_xf @ x_t + p.w_hf @ h_prev + p.p_cf * c_prev + p.b_f)
    g = np.tanh(p.w_xc @ x_t + p.w_hc @ h_prev + p.b_c)
    c = f * c_prev + i * g
    o = logistic(p.w_xo @ x_t + p.w_ho @ h_prev + p.p_co * c + p.b_o)
    tc = np.tanh(c)
    h = o * tc
    return i, f, g, c, o, tc, h


def lstm_step(x_t, h_prev, c_prev, p: LstmDirParams):
    """One LSTM step. Returns (h_t, c_t, gate record).

    Gate order matters: input and forget gates read the previous cell value
    through their peepholes, the output gate reads the freshly updated one.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x_t.shape[0] != p.w_xi.shape[1] or h_prev.shape[0] != p.w_hi.shape[1]:
        raise ValueError(
            f"lstm_step dimension mismatch: x {x_t.shape}, h {h_prev.shape}, "
            f"weights {p.w_xi.shape}/{p.w_hi.shape}"
        )
    i, f, g, c, o, tc, h = _lstm_gates(x_t, h_prev, c_prev, p)
    return h, c, {"i": i, "f": f, "g": g, "o": o, "tanh_c": tc}


def tanh_rnn_step(x_t, h_prev, p: TanhDirParams) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[0] != p.w_xh.shape[1] or h_prev.shape[0] != p.w_hh.shape[1]:
        raise ValueError(
            f"tanh_rnn_step dimension mismatch: x {x_t.shape}, h {h_prev.shape}, "
            f"weights {p.w_xh.shape}/{p.w_hh.shape}"
        )
    return np.tanh(p.w_xh @ x_t + p.w_hh @ h_prev + p.b_h)


# ---------------------------------------------------------------------------
# one direction over a full sequence (run order; callers reverse for the
# backward-in-time direction)


@dataclass
class LstmDirCache:
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    c: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


@dataclass
class TanhDirCache:
    h: np.ndarray


def _lstm_dir_forward(x_seq: np.ndarray, p: LstmDirParams):
    T = x_seq.shape[0]
    H = p.b_i.shape[0]
    i = np.empty((T, H))
    f = np.empty((T, H))
    g = np.empty((T, H))
    c = np.empty((T, H))
    o = np.empty((T, H))
    tc = np.empty((T, H))
    h = np.empty((T, H))
    h_prev = np.zeros(H)
    c_prev = np.zeros(H)
    for t in range(T):
        i[t], f[t], g[t], c[t], o[t], tc[t], h[t] = _lstm_gates(
            x_seq[t], h_prev, c_prev, p
        )
        h_prev = h[t]
        c_prev = c[t]
    return h, LstmDirCache(i=i, f=f, g=g, c=c, o=o, tanh_c=tc, h=h)


def _lstm_dir_backward(x_seq, p: LstmDirParams, cache: LstmDirCache, dh_out,
                       gp: LstmDirParams, want_dx: bool):
    T, H = cache.h.shape
    di = np.empty((T, H))
    df = np.empty((T, H))
    dg = np.empty((T, H))
    do = np.empty((T, H))
    dh_rec = np.zeros(H)
    dc_carry = np.zeros(H)
    zeros = np.zeros(H)
    for t in range(T - 1, -1, -1):
        c_prev = cache.c[t - 1] if t > 0 else zeros
        dh = dh_out[t] + dh_rec
        # The output gate's pre-activation depends on c_t both through the
        # cell path (h = o * tanh(c)) and through its own peephole p_co,
        # so do feeds back into dc at the *same* timestep; the input/forget
        # peepholes read c_{t-1} and therefore contribute to the carry that
        # flows to t-1, together with the forget-gate path dc * f.
        do[t] = dh * cache.tanh_c[t] * cache.o[t] * (1.0 - cache.o[t])
        dc = (
            dh * cache.o[t] * (1.0 - cache.tanh_c[t] ** 2)
            + dc_carry
            + do[t] * p.p_co
        )
        di[t] = dc * cache.g[t] * cache.i[t] * (1.0 - cache.i[t])
        df[t] = dc * c_prev * cache.f[t] * (1.0 - cache.f[t])
        dg[t] = dc * cache.i[t] * (1.0 - cache.g[t] ** 2)
        dh_rec = p.w_hi.T @ di[t] + p.w_hf.T @ df[t] + p.w_hc.T @ dg[t] + p.w_ho.T @ do[t]
        dc_carry = dc * cache.f[t] + di[t] * p.p_ci + df[t] * p.p_cf
    h_prev_seq = np.vstack([zeros, cache.h[:-1]])
    c_prev_seq = np.vstack([zeros, cache.c[:-1]])
    gp.w_xi += di.T @ x_seq
    gp.w_hi += di.T @ h_prev_seq
    gp.w_xf += df.T @ x_seq
    gp.w_hf += df.T @ h_prev_seq
    gp.w_xc += dg.T @ x_seq
    gp.w_hc += dg.T @ h_prev_seq
    gp.w_xo += do.T @ x_seq
    gp.w_ho += do.T @ h_prev_seq
    gp.p_ci += (di * c_prev_seq).sum(axis=0)
    gp.p_cf += (df * c_prev_seq).sum(axis=0)
    gp.p_co += (do * cache.c).sum(axis=0)
    gp.b_i += di.sum(axis=0)
    gp.b_f += df.sum(axis=0)
    gp.b_c += dg.sum(axis=0)
    gp.b_o += do.sum(axis=0)
    if not want_dx:
        return None
    return di @ p.w_xi + df @ p.w_xf + dg @ p.w_xc + do @ p.w_xo


def _tanh_dir_forward(x_seq: np.ndarray, p: TanhDirParams):
    T = x_seq.shape[0]
    H = p.b_h.shape[0]
    h = np.empty((T, H))
    h_prev = np.zeros(H)
    for t in range(T):
        h[t] = np.tanh(p.w_xh @ x_seq[t] + p.w_hh @ h_prev + p.b_h)
        h_prev = h[t]
    return h, TanhDirCache(h=h)


def _tanh_dir_backward(x_seq, p: TanhDirParams, cache: TanhDirCache, dh_out,
                       gp: TanhDirParams, want_dx: bool):
    T, H = cache.h.shape
    da = np.empty((T, H))
    dh_rec = np.zeros(H)
    for t in range(T - 1, -1, -1):
        dh = dh_out[t] + dh_rec
        da[t] = dh * (1.0 - cache.h[t] ** 2)
        dh_rec = p.w_hh.T @ da[t]
    h_prev_seq = np.vstack([np.zeros(H), cache.h[:-1]])
    gp.w_xh += da.T @ x_seq
    gp.w_hh += da.T @ h_prev_seq
    gp.b_h += da.sum(axis=0)
    if not want_dx:
        return None
    return da @ p.w_xh


_DIR_FORWARD = {"lstm": _lstm_dir_forward, "tanh": _tanh_dir_forward}
_DIR_BACKWARD = {"lstm": _lstm_dir_backward, "tanh": _tanh_dir_backward}


# ---------------------------------------------------------------------------
# deep stack


@dataclass
class LayerCache:
    inputs: np.ndarray          # (T, in_dim), natural time order
    fwd: object                 # direction cache, run order == time order
    bwd: Optional[object]       # direction cache in *reversed* run order


@dataclass
class StackCache:
    layers: list
    top_fwd: np.ndarray         # (T, H), natural time order
    top_bwd: Optional[np.ndarray]


def forward_hidden(x, params: ParamSet, config: NetworkConfig):
    """Run the stack without the output projection.

    Returns (top forward hidden seq, top backward hidden seq or None, cache).
    Initial hidden and cell states are zero vectors in both directions; the
    backward direction is evaluated as a forward recursion on reversed time.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"input must be a nonempty TxD sequence, got shape {x.shape}")
    if x.shape[1] != config.input_dim:
        raise ValueError(
            f"input width {x.shape[1]} does not match config input_dim {config.input_dim}"
        )
    dir_fwd = _DIR_FORWARD[config.cell]
    layer_caches = []
    seq = x
    h_f = h_b = None
    for layer in params.layers:
        h_f, cache_f = dir_fwd(seq, layer.fwd)
        cache_b = None
        if layer.bwd is not None:
            h_b_rev, cache_b = dir_fwd(seq[::-1], layer.bwd)
            h_b = h_b_rev[::-1]
        layer_caches.append(LayerCache(inputs=seq, fwd=cache_f, bwd=cache_b))
        seq = h_f if layer.bwd is None else np.hstack([h_f, h_b])
    return h_f, (h_b if config.bidirectional else None), StackCache(
        layers=layer_caches, top_fwd=h_f, top_bwd=h_b if config.bidirectional else None
    )


def forward(x, params: ParamSet, config: NetworkConfig):
    """Full forward pass; returns (logits (T, output_dim), cache)."""
    if params.out is None:
        raise ValueError("forward() needs a ParamSet with an output projection")
    h_f, h_b, cache = forward_hidden(x, params, config)
    logits = h_f @ params.out.w_fwd.T + params.out.b
    if h_b is not None:
        logits = logits + h_b @ params.out.w_bwd.T
    return logits, cache


def backward_hidden(params: ParamSet, config: NetworkConfig, cache: StackCache,
                    d_top_fwd, d_top_bwd, grads: Optional[ParamSet] = None,
                    want_dinput: bool = False):
    """Backpropagate gradients on the top hidden sequences down the stack.

    Accumulates into `grads` (allocated when None) and returns
    (grads, dinput or None).
    """
    if grads is None:
        grads = ParamSet.zeros(config, projection=params.projection)
    dir_bwd = _DIR_BACKWARD[config.cell]
    H = config.hidden
    d_f = np.asarray(d_top_fwd, dtype=np.float64)
    d_b = None if d_top_bwd is None else np.asarray(d_top_bwd, dtype=np.float64)
    for n in range(config.levels - 1, -1, -1):
        lc = cache.layers[n]
        lp = params.layers[n]
        gp = grads.layers[n]
        want_dx = want_dinput or n > 0
        dx = dir_bwd(lc.inputs, lp.fwd, lc.fwd, d_f, gp.fwd, want_dx)
        if lp.bwd is not None:
            # the reversed-time direction ran on reversed inputs, so feed it
            # reversed output gradients and un-reverse its input gradient
            dx_b = dir_bwd(lc.inputs[::-1], lp.bwd, lc.bwd, d_b[::-1], gp.bwd, want_dx)
            if want_dx:
                dx = dx + dx_b[::-1]
        if n > 0:
            if config.bidirectional:
                d_f = dx[:, :H]
                d_b = dx[:, H:]
            else:
                d_f = dx
    return grads, (dx if want_dinput else None)


def backward(params: ParamSet, config: NetworkConfig, cache: StackCache,
             dlogits, want_dinput: bool = False):
    """Exact gradients of sum_t dlogits_t . y_t for every parameter.

    Returns (grads ParamSet, dinput (T, input_dim) or None).
    """
    if params.out is None:
        raise ValueError("backward() needs a ParamSet with an output projection")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    T = cache.top_fwd.shape[0]
    if dlogits.shape != (T, config.output_dim):
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match (T={T}, "
            f"output_dim={config.output_dim})"
        )
    grads = ParamSet.zeros(config, projection=True)
    grads.out.w_fwd += dlogits.T @ cache.top_fwd
    grads.out.b += dlogits.sum(axis=0)
    d_top_fwd = dlogits @ params.out.w_fwd
    d_top_bwd = None
    if config.bidirectional:
        grads.out.w_bwd += dlogits.T @ cache.top_bwd
        d_top_bwd = dlogits @ params.out.w_bwd
    return backward_hidden(params, config, cache, d_top_fwd, d_top_bwd,
                           grads=grads, want_dinput=want_dinput)


# ---------------------------------------------------------------------------
# incremental stepping (unidirectional stacks, e.g. label-history networks)


def initial_stack_state(config: NetworkConfig):
    if config.bidirectional:
        raise ValueError("incremental stepping requires a unidirectional stack")
    H = config.hidden
    if config.cell == "lstm":
        return [(np.zeros(H), np.zeros(H)) for _ in range(config.levels)]
    return [np.zeros(H) for _ in range(config.levels)]


def step_stack(x_t, state, params: ParamSet, config: NetworkConfig):
    """Advance a unidirectional stack one timestep; returns (top_h, new state)."""
    new_state = []
    inp = np.asarray(x_t, dtype=np.float64)
    for n, layer in enumerate(params.layers):
        if config.cell == "lstm":
            h_prev, c_prev = state[n]
            h, c, _ = lstm_step(inp, h_prev, c_prev, layer.fwd)
            new_state.append((h, c))
        else:
            h = tanh_rnn_step(inp, state[n], layer.fwd)
            new_state.append(h)
        inp = h
    return inp, new_state
