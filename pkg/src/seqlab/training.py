"""Training: per-sequence stochastic gradient descent with heavy-ball
momentum, per-sequence Gaussian weight noise, the two-phase early-stopping
schedule (best dev log-probability without noise, then best dev error rate
with noise), finite-difference gradient checking, and bit-exact binary
checkpoints.

Determinism contract: (seed, data, config) fully determine every metric and
weight. The run RNG is consumed in a fixed order (parameter init, then per
epoch one shuffle plus one noise draw per sequence in the noise phase) and
its state rides in every checkpoint, so an interrupted run resumed from
`last.ckpt` reproduces the uninterrupted stream exactly.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .ctc import InfeasibleTargetError
from .decoding import edit_distance
from .numerics import Rng

CHECKPOINT_MAGIC = "seqlab-checkpoint"
CHECKPOINT_VERSION = 1
SCHED_LEN = 7

PHASE_NOISE_FREE = "noise_free"
PHASE_WITH_NOISE = "with_noise"
PHASE_CHOICES = ("two_phase", PHASE_NOISE_FREE, PHASE_WITH_NOISE)


class NonFiniteGradientError(Exception):
    """A gradient contained NaN or infinity; the update step was refused."""


class TrainingError(Exception):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# optimizer and weight noise


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    velocity: np.ndarray = None

    def ensure_velocity(self, n: int) -> None:
        if self.velocity is None:
            self.velocity = np.zeros(n)
        elif self.velocity.shape != (n,):
            raise ValueError(
                f"velocity length {self.velocity.shape} does not match params ({n},)"
            )


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """Heavy-ball update in place: v <- mu*v - eta*g; w <- w + v."""
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.isfinite(grads).all():
        raise NonFiniteGradientError("gradient contains NaN or infinite entries")
    state.ensure_velocity(params.shape[0])
    state.velocity *= state.momentum
    state.velocity -= state.learning_rate * grads
    params += state.velocity
    return params, state


def apply_weight_noise(params: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """Gaussian-perturbed copy; the clean parameters are left untouched.
    sigma zero copies without consuming the stream."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return params.copy()
    return params + rng.gaussian(0.0, sigma, params.shape[0])


# ---------------------------------------------------------------------------
# schedule


@dataclass
class TrainSchedule:
    """Mutable schedule state; the two-phase switch and both best-metric
    trackers live here so checkpoints can resume mid-schedule."""

    phases: str = "two_phase"
    noise_sigma: float = 0.075
    patience: int = 10
    dev_eval_every: int = 1
    max_epochs: int = 100  # per phase
    phase: str = PHASE_NOISE_FREE
    epoch: int = 0
    epoch_in_phase: int = 0
    evals_since_improve: int = 0
    best_dev_logprob: float = -math.inf
    best_dev_per: float = math.inf
    finished: bool = False

    def __post_init__(self):
        if self.phases not in PHASE_CHOICES:
            raise ValueError(f"unknown phase plan {self.phases!r}")
        if self.phases == PHASE_WITH_NOISE:
            self.phase = PHASE_WITH_NOISE

    @property
    def sigma_now(self) -> float:
        return self.noise_sigma if self.phase == PHASE_WITH_NOISE else 0.0

    def state_vector(self) -> np.ndarray:
        return np.array(
            [
                1.0 if self.phase == PHASE_WITH_NOISE else 0.0,
                float(self.epoch),
                float(self.epoch_in_phase),
                float(self.evals_since_improve),
                self.best_dev_logprob,
                self.best_dev_per,
                1.0 if self.finished else 0.0,
            ]
        )

    def restore(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (SCHED_LEN,):
            raise ValueError(f"schedule state length mismatch: {vec.shape}")
        self.phase = PHASE_WITH_NOISE if vec[0] == 1.0 else PHASE_NOISE_FREE
        self.epoch = int(vec[1])
        self.epoch_in_phase = int(vec[2])
        self.evals_since_improve = int(vec[3])
        self.best_dev_logprob = float(vec[4])
        self.best_dev_per = float(vec[5])
        self.finished = vec[6] == 1.0


def early_stop_controller(sched: TrainSchedule, dev_logprob: Optional[float],
                          dev_per: Optional[float]):
    """Returns (action, improved): action is one of continue,
    switch_to_noise, stop_and_restore.

    The noise-free phase chases dev log-probability; the noise phase chases
    dev error rate. Patience counts evaluations without improvement.
    """
    if sched.phase == PHASE_NOISE_FREE:
        improved = dev_logprob is not None and dev_logprob > sched.best_dev_logprob
        if improved:
            sched.best_dev_logprob = dev_logprob
            sched.evals_since_improve = 0
        else:
            sched.evals_since_improve += 1
        if sched.evals_since_improve >= sched.patience:
            if sched.phases == "two_phase":
                return "switch_to_noise", improved
            return "stop_and_restore", improved
        return "continue", improved
    improved = dev_per is not None and dev_per < sched.best_dev_per
    if improved:
        sched.best_dev_per = dev_per
        sched.evals_since_improve = 0
    else:
        sched.evals_since_improve += 1
    if sched.evals_since_improve >= sched.patience:
        return "stop_and_restore", improved
    return "continue", improved


# ---------------------------------------------------------------------------
# epoch loop and evaluation


@dataclass
class EpochStats:
    mean_logprob: float
    trained: int
    skipped: int


def train_epoch(family, params: np.ndarray, opt: OptimizerState, utts,
                rng: Rng, noise_sigma: float = 0.0, log=None,
                noise_hook=None) -> EpochStats:
    """One pass over the training set in a freshly shuffled order.

    Per sequence: draw one noise copy (noise phase only), compute the loss
    gradient at the (noisy) evaluation point, update the clean weights.
    Infeasible targets and non-finite gradients skip the sequence.
    """
    if len(utts) == 0:
        raise TrainingError("training set is empty")
    order = rng.permutation(len(utts))
    total = 0.0
    trained = 0
    skipped = 0
    for idx in order:
        utt = utts[int(idx)]
        eval_point = params
        if noise_sigma > 0:
            eval_point = apply_weight_noise(params, noise_sigma, rng)
            if noise_hook is not None:
                noise_hook(utt.id, eval_point)
        try:
            logp, grad = family.loss_and_grad(eval_point, utt)
            sgd_step(params, grad, opt)
        except (InfeasibleTargetError, NonFiniteGradientError) as exc:
            skipped += 1
            if log is not None:
                log(f"skipping sequence {utt.id}: {exc}")
            continue
        total += logp
        trained += 1
    if trained == 0:
        raise TrainingError("every sequence in the epoch was skipped")
    return EpochStats(mean_logprob=total / trained, trained=trained, skipped=skipped)


def evaluate(family, params: np.ndarray, utts, beam_width: int = 100,
             u_cap: int = 10):
    """(mean log-probability, error rate or None) over a held-out set.
    Consumes no randomness, so it never perturbs the training stream."""
    total = 0.0
    counted = 0
    dist = 0
    ref_len = 0
    decode = getattr(family, "decode", None)
    for utt in utts:
        lp = family.log_prob(params, utt)
        if lp > -math.inf:
            total += lp
            counted += 1
        if decode is not None:
            hyp = family.decode(params, utt.features, beam_width, u_cap=u_cap)
            dist += edit_distance(utt.targets, hyp)
            ref_len += len(utt.targets)
    mean_lp = total / counted if counted else -math.inf
    per = None
    if decode is not None:
        per = dist / ref_len if ref_len else (0.0 if dist == 0 else math.inf)
    return mean_lp, per


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    checked: int
    rows: Optional[list] = None  # (index, analytic, numeric) when requested


def gradient_check(family, params: np.ndarray, utts, eps: float = 1e-5,
                   sample: Optional[int] = None, seed: int = 0,
                   keep_rows: bool = False) -> GradCheckReport:
    """Central finite differences against the analytic gradient of the summed
    loss, on every parameter or a seeded sample of them. Relative error per
    entry is |a - n| / max(1e-8, |a| + |n|)."""

    def loss(vec):
        return -sum(family.log_prob(vec, u) for u in utts)

    analytic = np.zeros_like(params)
    for utt in utts:
        _, g = family.loss_and_grad(params, utt)
        analytic += g

    n = params.shape[0]
    if sample is None or sample >= n:
        indices = np.arange(n)
    else:
        indices = Rng(seed).permutation(n)[:sample]
    worst = GradCheckReport(0.0, -1, 0.0, 0.0, len(indices))
    rows = [] if keep_rows else None
    for i in indices:
        w = params.copy()
        w[i] += eps
        up = loss(w)
        w[i] -= 2 * eps
        down = loss(w)
        numeric = (up - down) / (2 * eps)
        a = float(analytic[int(i)])
        if rows is not None:
            rows.append((int(i), a, float(numeric)))
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if err >= worst.max_rel_err:
            worst = GradCheckReport(float(err), int(i), a, float(numeric),
                                    len(indices))
    worst.rows = rows
    return worst


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict                  # flat str->str description, order preserved
    params: np.ndarray
    velocity: np.ndarray
    rng_state: np.ndarray
    sched_state: np.ndarray
    norm_ref: str = "none"
    version: int = CHECKPOINT_VERSION


def checkpoint_save(path, ck: Checkpoint) -> None:
    sections = [
        np.asarray(ck.params, dtype=np.float64),
        np.asarray(ck.velocity, dtype=np.float64),
        np.asarray(ck.rng_state, dtype=np.float64),
        np.asarray(ck.sched_state, dtype=np.float64),
    ]
    blob = b"".join(s.astype("<f8").tobytes() for s in sections)
    lines = [f"{CHECKPOINT_MAGIC} {ck.version}"]
    for key, value in ck.config.items():
        lines.append(f"config.{key}: {value}")
    lines.append(f"norm_stats: {ck.norm_ref}")
    lines.append(f"params_len: {sections[0].shape[0]}")
    lines.append(f"velocity_len: {sections[1].shape[0]}")
    lines.append(f"rng_len: {sections[2].shape[0]}")
    lines.append(f"sched_len: {sections[3].shape[0]}")
    lines.append(f"blob_bytes: {len(blob)}")
    header = ("\n".join(lines) + "\n---\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(blob)


def checkpoint_load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"\n---\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing header/blob separator")
    header = raw[:cut].decode("ascii", errors="replace").splitlines()
    blob = raw[cut + len(marker):]
    if not header or not header[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version = int(header[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed version line") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    config = {}
    fields_ = {}
    for line in header[1:]:
        key, _, value = line.partition(": ")
        if key.startswith("config."):
            config[key[len("config."):]] = value
        else:
            fields_[key] = value
    try:
        lens = [int(fields_[k]) for k in ("params_len", "velocity_len", "rng_len", "sched_len")]
        blob_bytes = int(fields_["blob_bytes"])
        norm_ref = fields_["norm_stats"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header field: {exc}") from exc
    if len(blob) != blob_bytes or blob_bytes != 8 * sum(lens):
        raise CheckpointError(
            f"{path}: blob length mismatch: expected {8 * sum(lens)} bytes "
            f"(declared {blob_bytes}), found {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    out = []
    offset = 0
    for n in lens:
        out.append(flat[offset : offset + n].copy())
        offset += n
    return Checkpoint(config=config, params=out[0], velocity=out[1],
                      rng_state=out[2], sched_state=out[3],
                      norm_ref=norm_ref, version=version)


# ---------------------------------------------------------------------------
# full run orchestration


@dataclass
class TrainSettings:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    phases: str = "two_phase"
    noise_sigma: float = 0.075
    patience: int = 10
    max_epochs: int = 100
    dev_eval_every: int = 1
    beam_width: int = 100
    u_cap: int = 10
    seed: int = 0


@dataclass
class RunResult:
    params: np.ndarray
    best_path: Path
    metrics: list
    out_dir: Path


def _metrics_line(epoch, phase, train_logprob, dev_logprob, dev_per) -> str:
    record = {
        "epoch": epoch,
        "phase": phase,
        "train_logprob": train_logprob,
        "dev_logprob": dev_logprob,
        "dev_per": dev_per,
    }
    return json.dumps(record)


def run_training(family, settings: TrainSettings, train_utts, dev_utts,
                 out_dir, config_text: Optional[dict] = None,
                 norm_ref: str = "none", rng: Optional[Rng] = None,
                 init_vec: Optional[np.ndarray] = None,
                 resume_path=None, log=None, noise_hook=None,
                 stop_after_epoch: Optional[int] = None) -> RunResult:
    """Run the full schedule, writing checkpoints and the metrics stream.

    `config_text` is stored verbatim in every checkpoint header; on resume it
    must match the resumed checkpoint's. `last.ckpt` is written after every
    epoch; the per-phase best checkpoints feed the phase switch and the
    final restore, and the overall winner is copied to `best.ckpt`.
    `stop_after_epoch` interrupts the run at that (global) epoch boundary
    without concluding the schedule: resuming from `last.ckpt` then
    reproduces the uninterrupted run exactly.
    """
    import time

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = dict(config_text or {})
    say = log if log is not None else lambda msg: None

    sched = TrainSchedule(
        phases=settings.phases,
        noise_sigma=settings.noise_sigma,
        patience=settings.patience,
        dev_eval_every=settings.dev_eval_every,
        max_epochs=settings.max_epochs,
    )
    opt = OptimizerState(settings.learning_rate, settings.momentum)
    if rng is None:
        rng = Rng(settings.seed)

    metrics_path = out_dir / "metrics.jsonl"
    if resume_path is not None:
        ck = checkpoint_load(resume_path)
        if ck.config != config_text:
            raise CheckpointError(
                f"{resume_path}: checkpoint config does not match this run's config"
            )
        params = ck.params.copy()
        opt.velocity = ck.velocity.copy()
        rng.restore(ck.rng_state)
        sched.restore(ck.sched_state)
        norm_ref = ck.norm_ref
        if sched.finished:
            raise CheckpointError(f"{resume_path}: training already finished")
        metrics_fh = open(metrics_path, "a", encoding="ascii")
    else:
        params = init_vec.copy() if init_vec is not None else family.init_params(rng)
        opt.ensure_velocity(params.shape[0])
        metrics_fh = open(metrics_path, "w", encoding="ascii")

    def snapshot(path):
        checkpoint_save(path, Checkpoint(
            config=config_text, params=params, velocity=opt.velocity,
            rng_state=rng.state_vector(), sched_state=sched.state_vector(),
            norm_ref=norm_ref,
        ))

    def restore_params_from(path):
        ck = checkpoint_load(path)
        params[:] = ck.params
        opt.velocity[:] = ck.velocity

    best_for = {
        PHASE_NOISE_FREE: out_dir / "best_noise_free.ckpt",
        PHASE_WITH_NOISE: out_dir / "best_with_noise.ckpt",
    }
    metrics = []

    def finish():
        # prefer the noise phase's best error-rate snapshot; fall back to the
        # best log-prob snapshot, then to the current state
        for phase in (PHASE_WITH_NOISE, PHASE_NOISE_FREE):
            path = best_for[phase]
            if path.exists():
                restore_params_from(path)
                shutil.copyfile(path, out_dir / "best.ckpt")
                break
        else:
            snapshot(out_dir / "best.ckpt")
        sched.finished = True

    def switch_to_noise():
        if best_for[PHASE_NOISE_FREE].exists():
            restore_params_from(best_for[PHASE_NOISE_FREE])
        sched.phase = PHASE_WITH_NOISE
        sched.epoch_in_phase = 0
        sched.evals_since_improve = 0
        say(f"switching to weight-noise phase (sigma={sched.noise_sigma}) "
            f"from the best dev log-prob point")

    try:
        while not sched.finished:
            if sched.epoch_in_phase >= settings.max_epochs:
                if sched.phase == PHASE_NOISE_FREE and sched.phases == "two_phase":
                    switch_to_noise()
                    snapshot(out_dir / "last.ckpt")
                    continue
                # budget exhausted mid-schedule: keep last.ckpt resumable
                # (a larger --max-epochs continues this exact stream)
                snapshot(out_dir / "last.ckpt")
                finish()
                break
            t0 = time.perf_counter()
            stats = train_epoch(family, params, opt, train_utts, rng,
                                noise_sigma=sched.sigma_now, log=say,
                                noise_hook=noise_hook)
            sched.epoch += 1
            sched.epoch_in_phase += 1
            dev_logprob = dev_per = None
            action = "continue"
            if sched.epoch % settings.dev_eval_every == 0:
                dev_logprob, dev_per = evaluate(family, params, dev_utts,
                                                settings.beam_width, settings.u_cap)
                action, improved = early_stop_controller(sched, dev_logprob, dev_per)
                if improved:
                    snapshot(best_for[sched.phase])
            line = _metrics_line(sched.epoch, sched.phase, stats.mean_logprob,
                                 dev_logprob, dev_per)
            metrics_fh.write(line + "\n")
            metrics_fh.flush()
            metrics.append(json.loads(line))
            say(f"epoch {sched.epoch} [{sched.phase}] train_logprob "
                f"{stats.mean_logprob:.6f} dev_logprob {dev_logprob} dev_per "
                f"{dev_per} skipped {stats.skipped} seconds "
                f"{time.perf_counter() - t0:.2f}")
            if action == "switch_to_noise":
                switch_to_noise()
            elif action == "stop_and_restore":
                finish()
            snapshot(out_dir / "last.ckpt")
            if (stop_after_epoch is not None and not sched.finished
                    and sched.epoch >= stop_after_epoch):
                say(f"interrupted after epoch {sched.epoch}; resume from last.ckpt")
                break
    finally:
        metrics_fh.close()
    return RunResult(params=params, best_path=out_dir / "best.ckpt",
                     metrics=metrics, out_dir=out_dir)
