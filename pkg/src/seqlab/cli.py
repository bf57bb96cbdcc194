"""Command-line entry point.

Commands: synth, train, decode, eval, gradcheck, params, sensitivity.

Exit codes: 0 success, 2 configuration or usage error, 3 data or file
error, 4 numeric failure (failed gradient check, non-finite training).

The experiment configuration is a flat text file of `key: value` lines
(`#` starts a comment); unknown keys are rejected and every field is
validated before any compute. Relative paths inside a config resolve
against the config file's directory. Command-line overrides exist only for
seed, data paths, beam width, the epoch budget, and resuming.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as data_mod
from .cells import NetworkConfig
from .ctc import InfeasibleTargetError
from .data import DataError, SynthSpec
from .decoding import LabelMapping, score_per
from .models import CtcModel, PredictionLm, TransducerModel, assemble_pretrained
from .numerics import Rng
from .training import (
    CheckpointError,
    NonFiniteGradientError,
    TrainingError,
    TrainSettings,
    checkpoint_load,
    gradient_check,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true/false, got {text!r}")


REQUIRED = object()

# key -> (parser, default); REQUIRED defaults must be present in the file
CONFIG_SCHEMA = {
    "model": (str, REQUIRED),
    "cell": (str, "lstm"),
    "levels": (int, REQUIRED),
    "hidden": (int, REQUIRED),
    "bidirectional": (_parse_bool, REQUIRED),
    "input_dim": (int, REQUIRED),
    "num_labels": (int, REQUIRED),
    "learning_rate": (float, 1e-4),
    "momentum": (float, 0.9),
    "phases": (str, "two_phase"),
    "noise_sigma": (float, 0.075),
    "patience": (int, 10),
    "max_epochs": (int, 100),
    "dev_eval_every": (int, 1),
    "beam_width": (int, 100),
    "u_cap": (int, 10),
    "seed": (int, REQUIRED),
    "train_manifest": (str, None),
    "dev_manifest": (str, None),
    "out_dir": (str, None),
    "prediction_levels": (int, 1),
    "prediction_epochs": (int, 20),
    "prediction_patience": (int, 10),
    "pretrain_ctc_checkpoint": (str, None),
}

MODEL_KINDS = ("ctc", "transducer", "transducer_pretrained")


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if not sep or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key: value', got {raw!r}")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    for key, (parser, default) in CONFIG_SCHEMA.items():
        if key not in values:
            if default is REQUIRED:
                raise ConfigError(f"{path}: missing required key {key!r}")
            values[key] = default
    _validate_config(values, path)
    values["_dir"] = path.parent
    return values


def _validate_config(cfg: dict, path) -> None:
    if cfg["model"] not in MODEL_KINDS:
        raise ConfigError(f"{path}: model must be one of {MODEL_KINDS}, got {cfg['model']!r}")
    if cfg["cell"] not in ("lstm", "tanh"):
        raise ConfigError(f"{path}: cell must be lstm or tanh")
    if cfg["phases"] not in ("two_phase", "noise_free", "with_noise"):
        raise ConfigError(f"{path}: phases must be two_phase, noise_free or with_noise")
    for key in ("levels", "hidden", "input_dim", "num_labels", "max_epochs",
                "patience", "dev_eval_every", "beam_width", "prediction_levels",
                "prediction_epochs", "prediction_patience"):
        if cfg[key] is not None and cfg[key] < 1:
            raise ConfigError(f"{path}: {key} must be >= 1, got {cfg[key]}")
    for key in ("learning_rate", "noise_sigma"):
        if cfg[key] < 0:
            raise ConfigError(f"{path}: {key} must be >= 0")
    if cfg["u_cap"] < 1:
        raise ConfigError(f"{path}: u_cap must be >= 1")
    if cfg["seed"] < 0:
        raise ConfigError(f"{path}: seed must be >= 0")


def config_path(cfg: dict, key: str) -> Path:
    value = cfg[key]
    if value is None:
        raise ConfigError(f"config is missing {key!r} (required by this command)")
    p = Path(value)
    return p if p.is_absolute() else cfg["_dir"] / p


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(
        input_dim=cfg["input_dim"],
        levels=cfg["levels"],
        hidden=cfg["hidden"],
        bidirectional=cfg["bidirectional"],
        cell=cfg["cell"],
        output_dim=cfg["num_labels"] + 1,
    )


def build_family(cfg: dict):
    net = network_config(cfg)
    if cfg["model"] == "ctc":
        return CtcModel(net, cfg["num_labels"])
    return TransducerModel(net, cfg["num_labels"],
                           prediction_levels=cfg["prediction_levels"])


CHECKPOINT_CONFIG_KEYS = (
    "model", "cell", "levels", "hidden", "bidirectional", "input_dim",
    "num_labels", "prediction_levels", "learning_rate", "momentum", "phases",
    "noise_sigma", "patience", "dev_eval_every", "beam_width", "u_cap", "seed",
)


def checkpoint_config_text(cfg: dict) -> dict:
    out = {}
    for key in CHECKPOINT_CONFIG_KEYS:
        v = cfg[key]
        out[key] = "true" if v is True else "false" if v is False else str(v)
    return out


def family_from_checkpoint_config(conf: dict):
    """Rebuild the model family from a checkpoint's config.<key> header."""
    try:
        cfg = {
            "model": conf["model"],
            "cell": conf["cell"],
            "levels": int(conf["levels"]),
            "hidden": int(conf["hidden"]),
            "bidirectional": conf["bidirectional"] == "true",
            "input_dim": int(conf["input_dim"]),
            "num_labels": int(conf["num_labels"]),
            "prediction_levels": int(conf.get("prediction_levels", 1)),
        }
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config incomplete or malformed: {exc}")
    if cfg["model"] not in MODEL_KINDS:
        raise CheckpointError(f"checkpoint names unknown model {cfg['model']!r}")
    return build_family(cfg), cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        num_classes=args.classes,
        dim=args.dim,
        n_train=args.train,
        n_dev=args.dev,
        n_test=args.test,
        t_range=(args.t_min, args.t_max),
        events_range=(args.events_min, args.events_max),
        duration_range=(args.duration_min, args.duration_max),
        noise_level=args.noise,
        flip_prob=args.flip_prob,
        markov_labels=args.markov_labels,
    )
    splits = data_mod.synthesize(spec)
    out = Path(args.out)
    for name, utts in zip(("train", "dev", "test"), splits):
        manifest = data_mod.write_dataset(out, name, utts)
        frames = sum(u.features.shape[0] for u in utts)
        print(f"{name}: {len(utts)} utterances, {frames} frames -> {manifest}")
    return EXIT_OK


def _load_split(cfg: dict, key: str):
    return data_mod.load_dataset(config_path(cfg, key), cfg["num_labels"])


def settings_from_config(cfg: dict, args) -> TrainSettings:
    return TrainSettings(
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        phases=cfg["phases"],
        noise_sigma=cfg["noise_sigma"],
        patience=cfg["patience"],
        max_epochs=args.max_epochs if args.max_epochs else cfg["max_epochs"],
        dev_eval_every=cfg["dev_eval_every"],
        beam_width=cfg["beam_width"],
        u_cap=cfg["u_cap"],
        seed=cfg["seed"],
    )


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key, value in (("train_manifest", args.train_manifest),
                       ("dev_manifest", args.dev_manifest),
                       ("out_dir", args.out_dir)):
        if value is not None:
            cfg[key] = value
    if args.beam_width is not None:
        cfg["beam_width"] = args.beam_width

    train_utts = _load_split(cfg, "train_manifest")
    dev_utts = _load_split(cfg, "dev_manifest")
    if not train_utts:
        raise DataError("training manifest lists no utterances")
    out_dir = config_path(cfg, "out_dir")
    out_dir.mkdir(parents=True, exist_ok=True)

    stats = data_mod.fit_normalizer(train_utts)
    data_mod.save_norm_stats(out_dir / "norm.txt", stats)
    train_utts = data_mod.apply_normalizer(train_utts, stats)
    dev_utts = data_mod.apply_normalizer(dev_utts, stats)

    settings = settings_from_config(cfg, args)
    config_text = checkpoint_config_text(cfg)
    rng = Rng(cfg["seed"])
    init_vec = None
    family = build_family(cfg)

    if cfg["model"] == "transducer_pretrained" and args.resume is None:
        donor_path = config_path(cfg, "pretrain_ctc_checkpoint")
        donor_ck = checkpoint_load(donor_path)
        donor_family, donor_cfg = family_from_checkpoint_config(donor_ck.config)
        if not isinstance(donor_family, CtcModel):
            raise ConfigError(f"{donor_path}: pretrain donor is not a ctc checkpoint")
        for key in ("cell", "levels", "hidden", "bidirectional", "input_dim",
                    "num_labels"):
            if donor_cfg[key] != cfg[key]:
                raise ConfigError(
                    f"{donor_path}: donor {key}={donor_cfg[key]} does not match "
                    f"config {key}={cfg[key]}"
                )
        print(f"pretraining the label prediction network "
              f"({cfg['prediction_epochs']} epoch budget)")
        lm = PredictionLm(cfg["num_labels"], cfg["hidden"], cfg["prediction_levels"])
        lm_settings = TrainSettings(
            learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
            phases="noise_free", patience=cfg["prediction_patience"],
            max_epochs=cfg["prediction_epochs"],
            dev_eval_every=cfg["dev_eval_every"], beam_width=1, seed=cfg["seed"],
        )
        lm_result = run_training(lm, lm_settings, train_utts, dev_utts,
                                 out_dir / "prediction_pretrain",
                                 config_text={"model": "prediction_lm"},
                                 rng=rng, log=print)
        lm_best = checkpoint_load(lm_result.best_path)
        _, init_vec = assemble_pretrained(donor_family, donor_ck.params,
                                          lm, lm_best.params, rng)

    result = run_training(family, settings, train_utts, dev_utts, out_dir,
                          config_text=config_text, norm_ref="norm.txt",
                          rng=rng, init_vec=init_vec,
                          resume_path=args.resume, log=print,
                          stop_after_epoch=args.stop_after)
    print(f"best checkpoint: {result.best_path}")
    return EXIT_OK


def _load_model(checkpoint_path):
    ck = checkpoint_load(checkpoint_path)
    family, cfg = family_from_checkpoint_config(ck.config)
    stats = None
    if ck.norm_ref != "none":
        stats_path = Path(checkpoint_path).parent / ck.norm_ref
        if not stats_path.exists():
            raise DataError(f"normalisation stats not found: {stats_path}")
        stats = data_mod.load_norm_stats(stats_path)
    return family, cfg, ck, stats


def cmd_decode(args) -> int:
    family, cfg, ck, stats = _load_model(args.checkpoint)
    utts = data_mod.load_dataset(args.manifest, cfg["num_labels"])
    for utt in utts:
        if utt.features.shape[1] != cfg["input_dim"]:
            raise DataError(
                f"utterance {utt.id}: feature width {utt.features.shape[1]} does "
                f"not match checkpoint input_dim {cfg['input_dim']}"
            )
    if stats is not None:
        utts = data_mod.apply_normalizer(utts, stats)
    width = args.beam_width
    lines = []
    for utt in utts:
        hyps = family.decode_nbest(ck.params, utt.features, width, u_cap=args.u_cap)
        if args.nbest > 1:
            for rank, hyp in enumerate(hyps[: args.nbest], start=1):
                tokens = [utt.id, str(rank), *map(str, hyp.labels), repr(hyp.log_prob)]
                lines.append(" ".join(tokens))
        else:
            labels = hyps[0].labels if hyps else ()
            lp = hyps[0].log_prob if hyps else float("-inf")
            lines.append(" ".join([utt.id, *map(str, labels), repr(lp)]))
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def parse_transcription(path) -> dict:
    """Default decode output: `id label... log_prob` per line."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) < 2:
            raise DataError(f"{path}:{lineno}: expected 'id labels... log_prob'")
        try:
            float(tokens[-1])
            labels = tuple(int(v) for v in tokens[1:-1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed transcription line")
        out[tokens[0]] = labels
    return out


def cmd_eval(args) -> int:
    refs = data_mod.load_dataset(args.manifest, args.num_labels)
    hyps_by_id = parse_transcription(args.hyps)
    mapping = None
    if args.map:
        mapping = LabelMapping.from_file(args.map)
        missing = [k for k in range(args.num_labels) if k not in mapping.table]
        if missing:
            raise DataError(f"{args.map}: no scoring mapping for model label(s) {missing}")
    missing_ids = [u.id for u in refs if u.id not in hyps_by_id]
    if missing_ids:
        raise DataError(f"hypotheses missing for utterance id(s): {missing_ids}")
    ref_seqs = [u.targets for u in refs]
    hyp_seqs = [hyps_by_id[u.id] for u in refs]
    from .decoding import edit_distance

    for u, hyp in zip(refs, hyp_seqs):
        ref = mapping.apply(u.targets) if mapping else u.targets
        h = mapping.apply(hyp) if mapping else hyp
        print(f"{u.id} {edit_distance(ref, h)} {len(ref)}")
    per = score_per(ref_seqs, hyp_seqs, mapping)
    print(f"PER {per!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = read_config(args.config)
    family = build_family(cfg)
    rng = Rng(cfg["seed"])
    # draw parameters away from zero: near-zero weights leave gradients in
    # the band where central differences drown in rounding noise
    vec = rng.uniform(-0.8, 0.8, family.param_count)
    x = rng.gaussian(0.0, 1.0, args.frames * cfg["input_dim"]).reshape(
        args.frames, cfg["input_dim"])
    u = min(args.labels, args.frames)
    targets = tuple(int(v) for v in rng.integers(0, cfg["num_labels"] - 1, u))
    utt = data_mod.Utterance(id="gradcheck", features=x, targets=targets)
    report = gradient_check(family, vec, [utt], eps=args.eps,
                            sample=args.samples, seed=cfg["seed"])
    print(f"checked {report.checked} parameters, eps {args.eps!r}")
    print(f"max relative error {report.max_rel_err!r} at parameter "
          f"{report.worst_index} (analytic {report.analytic!r}, "
          f"numeric {report.numeric!r})")
    if report.max_rel_err < args.tolerance:
        print(f"PASS (tolerance {args.tolerance!r})")
        return EXIT_OK
    print(f"FAIL (tolerance {args.tolerance!r})")
    return EXIT_NUMERIC


def cmd_params(args) -> int:
    cfg = read_config(args.config)
    family = build_family(cfg)
    print(family.param_count)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    family, cfg, ck, stats = _load_model(args.checkpoint)
    if not isinstance(family, CtcModel):
        raise ConfigError("sensitivity maps need a ctc checkpoint")
    utts = data_mod.load_dataset(args.manifest, cfg["num_labels"])
    if stats is not None:
        utts = data_mod.apply_normalizer(utts, stats)
    matches = [u for u in utts if u.id == args.utterance]
    if not matches:
        raise DataError(f"utterance id {args.utterance!r} not in {args.manifest}")
    utt = matches[0]
    heat = family.input_sensitivity(ck.params, utt.features, args.frame, args.output_index)
    lines = "".join(data_mod.format_feature_row(row) + "\n" for row in heat)
    if args.output:
        Path(args.output).write_text(lines, encoding="ascii")
    else:
        sys.stdout.write(lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqlab",
        description="deep recurrent sequence labelling: training, decoding, scoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelling dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--dev", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--t-min", type=int, default=40)
    p.add_argument("--t-max", type=int, default=80)
    p.add_argument("--events-min", type=int, default=2)
    p.add_argument("--events-max", type=int, default=5)
    p.add_argument("--duration-min", type=int, default=3)
    p.add_argument("--duration-max", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--flip-prob", type=float, default=0.0)
    p.add_argument("--markov-labels", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model per an experiment config")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--train-manifest")
    p.add_argument("--dev-manifest")
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--stop-after", type=int,
                   help="interrupt at this epoch boundary (resumable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-decode a dataset with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--beam-width", type=int, default=100)
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--u-cap", type=int, default=10)
    p.add_argument("--output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against a reference dataset")
    p.add_argument("manifest")
    p.add_argument("hyps")
    p.add_argument("--num-labels", type=int, required=True)
    p.add_argument("--map", help="label mapping file: 'model_label scoring_label' lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("config")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--labels", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="print the model's parameter count")
    p.add_argument("config")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("sensitivity", help="input sensitivity heat map")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("utterance")
    p.add_argument("frame", type=int)
    p.add_argument("output_index", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_sensitivity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteGradientError, InfeasibleTargetError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
