"""Dataset ingestion, feature normalisation, and the synthetic
alignment-free labelling task.

File formats (frozen, plain text):
  manifest  one `id feat_path lab_path` triple per line, paths relative to
            the manifest's directory
  feat      T lines of D space-separated decimal reals
  lab       one line of space-separated integer label ids (may be empty)

The synthesizer writes exactly these formats so the loader path is exercised
end to end. Floats are written with repr (shortest round-trip), so a written
dataset reloads bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .numerics import Rng


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Utterance:
    id: str
    features: np.ndarray      # (T, D)
    targets: tuple            # label ids, length U

    def __post_init__(self):
        object.__setattr__(self, "features",
                           np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "targets", tuple(int(v) for v in self.targets))


def _parse_feat_file(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                raise DataError(f"{path}:{lineno}: empty feature row")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise DataError(
                    f"{path}:{lineno}: expected {width} values, found {len(tokens)}"
                )
            try:
                row = [float(tok) for tok in tokens]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value")
            if not all(np.isfinite(row)):
                raise DataError(f"{path}:{lineno}: non-finite feature value")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: feature file is empty")
    return np.array(rows, dtype=np.float64)


def _parse_lab_file(path: Path, num_labels: int) -> tuple:
    text = path.read_text(encoding="ascii")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) > 1:
        raise DataError(f"{path}: expected a single label line, found {len(lines)}")
    tokens = lines[0].split() if lines else []
    labels = []
    for tok in tokens:
        try:
            v = int(tok)
        except ValueError:
            raise DataError(f"{path}:1: non-integer label {tok!r}")
        if not 0 <= v < num_labels:
            raise DataError(
                f"{path}:1: label {v} out of range [0, {num_labels})"
            )
        labels.append(v)
    return tuple(labels)


def load_dataset(manifest_path, num_labels: int) -> list:
    """Parse a manifest and every file it references, strictly."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    utts = []
    with open(manifest_path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(
                    f"{manifest_path}:{lineno}: expected 'id feat_path lab_path', "
                    f"got {line.strip()!r}"
                )
            utt_id, feat_rel, lab_rel = parts
            feat_path = base / feat_rel
            lab_path = base / lab_rel
            if not feat_path.exists():
                raise DataError(f"{manifest_path}:{lineno}: missing feature file {feat_path}")
            if not lab_path.exists():
                raise DataError(f"{manifest_path}:{lineno}: missing label file {lab_path}")
            utts.append(Utterance(
                id=utt_id,
                features=_parse_feat_file(feat_path),
                targets=_parse_lab_file(lab_path, num_labels),
            ))
    return utts


def format_feature_row(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def write_dataset(out_dir, name: str, utts) -> Path:
    """Write utterances in the manifest/feat/lab format; returns the
    manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    (out_dir / "labs").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / f"{name}.manifest"
    with open(manifest, "w", encoding="ascii") as mf:
        for utt in utts:
            feat_rel = f"feats/{utt.id}.feat"
            lab_rel = f"labs/{utt.id}.lab"
            with open(out_dir / feat_rel, "w", encoding="ascii") as fh:
                for row in utt.features:
                    fh.write(format_feature_row(row) + "\n")
            with open(out_dir / lab_rel, "w", encoding="ascii") as fh:
                fh.write(" ".join(str(v) for v in utt.targets) + "\n")
            mf.write(f"{utt.id} {feat_rel} {lab_rel}\n")
    return manifest


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_normalizer(utts) -> NormStats:
    """Per-dimension mean and standard deviation pooled over every frame of
    the training set. A dimension with (numerically) zero variance is an
    error: silently dropping or passing it through would corrupt decoding
    against checkpointed stats."""
    if not utts:
        raise DataError("cannot fit a normalizer on an empty training set")
    frames = np.vstack([u.features for u in utts])
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    floor = 1e-12 * np.maximum(1.0, np.abs(mean))
    dead = np.nonzero(std <= floor)[0]
    if dead.size:
        raise DataError(f"zero variance in feature dimension(s) {dead.tolist()}")
    return NormStats(mean=mean, std=std)


def apply_normalizer(utts, stats: NormStats) -> list:
    return [
        Utterance(id=u.id, features=(u.features - stats.mean) / stats.std,
                  targets=u.targets)
        for u in utts
    ]


def save_norm_stats(path, stats: NormStats) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_feature_row(stats.mean) + "\n")
        fh.write(format_feature_row(stats.std) + "\n")


def load_norm_stats(path) -> NormStats:
    try:
        rows = _parse_feat_file(Path(path))
    except DataError as exc:
        raise DataError(f"bad normalisation stats: {exc}") from exc
    if rows.shape[0] != 2:
        raise DataError(f"{path}: expected 2 rows (mean, std), found {rows.shape[0]}")
    return NormStats(mean=rows[0], std=rows[1])


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SynthSpec:
    """Alignment-free event-sequence task: each utterance hides an ordered
    sequence of class-specific patterns at undisclosed positions inside
    background noise; targets list the classes only."""

    seed: int
    num_classes: int
    dim: int
    n_train: int
    n_dev: int
    n_test: int
    t_range: tuple = (40, 80)
    events_range: tuple = (2, 5)
    duration_range: tuple = (3, 8)
    noise_level: float = 0.3
    flip_prob: float = 0.0       # chance an event renders as -pattern
    markov_labels: bool = False  # class walks +1/+2 mod K instead of iid

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")
        if self.dim < 1:
            raise DataError(f"feature dim must be >= 1, got {self.dim}")
        for name in ("t_range", "events_range", "duration_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise DataError(f"empty or invalid {name}: ({lo}, {hi})")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise DataError("every split needs at least one utterance")
        if self.noise_level < 0:
            raise DataError(f"noise level must be >= 0, got {self.noise_level}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DataError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        m_max = self.events_range[1]
        d_max = self.duration_range[1]
        # worst case must fit the shortest utterance, counting one separator
        # frame between adjacent events (same-class neighbours need it for
        # the collapse rule to stay invertible)
        need = m_max * d_max + (m_max - 1)
        if need > self.t_range[0]:
            raise DataError(
                f"events cannot fit: worst case needs {need} frames, "
                f"minimum utterance length is {self.t_range[0]}"
            )


def _render_utterance(rng: Rng, spec: SynthSpec, patterns: np.ndarray,
                      utt_id: str) -> Utterance:
    T = rng.integer(*spec.t_range)
    m = rng.integer(*spec.events_range)
    if spec.markov_labels:
        # first-order event grammar: it gives a label-history model real
        # transition structure to exploit (only 2 of K successors occur)
        classes = [rng.integer(0, spec.num_classes - 1)]
        for _ in range(m - 1):
            classes.append((classes[-1] + rng.integer(1, 2)) % spec.num_classes)
    else:
        classes = [int(v) for v in rng.integers(0, spec.num_classes - 1, m)]
    durations = [int(v) for v in rng.integers(*spec.duration_range, m)]
    # one separator frame between consecutive events, then spread the slack
    # uniformly over the m+1 gaps (order-preserving, non-overlapping)
    occupied = sum(durations) + (m - 1)
    slack = T - occupied
    cuts = np.sort(rng.integers(0, slack, m))
    gaps = np.diff(np.concatenate([[0], cuts, [slack]]))
    features = spec.noise_level * rng.gaussian(0.0, 1.0, T * spec.dim).reshape(T, spec.dim)
    pos = 0
    for j in range(m):
        pos += int(gaps[j]) + (1 if j > 0 else 0)
        scale = 1.0
        if spec.flip_prob > 0:
            # class identity survives a polarity flip, so recognising flipped
            # events takes more than a linear per-frame match
            if rng.uniform(0.0, 1.0, 1)[0] < spec.flip_prob:
                scale = -1.0
        features[pos : pos + durations[j]] += scale * patterns[classes[j]]
        pos += durations[j]
    return Utterance(id=utt_id, features=features, targets=tuple(classes))


def synthesize(spec: SynthSpec):
    """Deterministic (seeded) train/dev/test datasets."""
    spec.validate()
    rng = Rng(spec.seed)
    patterns = rng.uniform(-1.0, 1.0, spec.num_classes * spec.dim).reshape(
        spec.num_classes, spec.dim
    )
    splits = []
    for split, count in (("train", spec.n_train), ("dev", spec.n_dev),
                         ("test", spec.n_test)):
        splits.append([
            _render_utterance(rng, spec, patterns, f"{split}-{i:04d}")
            for i in range(count)
        ])
    return tuple(splits)
