"""Command-line entry points: mix, train, eval, separate, probe, gradcheck, params."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import CheckpointError, load_checkpoint
from .data import GENERATORS, Manifest, load_examples, synth_corpus
from .losses import LossConfig
from .model import VARIANTS, SeparationModel, param_count, preset_config

log = logging.getLogger("tasnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
OUTPUT_ROOT_ENV = "TASNET_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"--out not given and ${OUTPUT_ROOT_ENV} is unset")
    return Path(root) / default_name


def _write_run_config(out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    with open(out / "run_config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


# -- commands -------------------------------------------------------------------


def cmd_mix(args) -> int:
    if args.snr_min > args.snr_max:
        raise ConfigError(f"--snr-min {args.snr_min} exceeds --snr-max {args.snr_max}")
    out = _out_dir(args, "corpus")
    manifests = synth_corpus(out, args.n, seed=args.seed, kind=args.kind, n_speakers=args.speakers,
                             seconds=args.seconds, rate=args.rate, snr_range=(args.snr_min, args.snr_max),
                             source_dir=args.source_dir)
    _write_run_config(out, args)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} examples -> {out / (split + '.jsonl')}")
    return EXIT_OK


def _model_config(args):
    overrides = {}
    if args.N is not None:
        overrides["N"] = args.N
    return preset_config(args.preset, args.variant, args.depth, **overrides)


def cmd_train(args) -> int:
    from .training import NonFiniteError, TrainState, resume, train, train_preset

    out = _out_dir(args, "train")
    dtype = np.float64 if args.float64 else np.float32
    overrides = {"seed": args.seed, "dtype": "float64" if args.float64 else "float32",
                 "loss": LossConfig(beta=args.beta, alpha=args.alpha)}
    for key, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr0", "lr"),
                      ("segment_seconds", "segment_seconds"), ("clip_norm", "clip")):
        if getattr(args, attr) is not None:
            overrides[key] = getattr(args, attr)
    cfg = train_preset(args.preset, **overrides)
    if args.resume:
        model, state, _ = resume(args.resume)
    else:
        model = SeparationModel(_model_config(args), seed=args.seed, dtype=dtype)
        state = TrainState(lr=cfg.lr0, seed=cfg.seed)
    print(f"model: {model.config.encoder_variant}, I={model.config.I}, {model.num_parameters()} parameters")
    if args.train is None or args.val is None:
        raise ConfigError("--train and --val manifests are required")
    try:
        train_ex = load_examples(Manifest.load(args.train))
        val_ex = load_examples(Manifest.load(args.val))
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    _write_run_config(out, args)
    try:
        state = train(model, train_ex, val_ex, cfg, out, state)
    except NonFiniteError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    print(f"done: {state.epoch} epochs, {state.step} steps, best val {state.best_val_loss:.4f}, lr {state.lr:g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, summary_table

    if not args.testset:
        raise ConfigError("at least one --testset tag=manifest is required")
    sets = []
    for spec in args.testset:
        tag, sep, path = spec.partition("=")
        if not sep or not tag:
            raise ConfigError(f"--testset expects tag=manifest, got {spec!r}")
        try:
            sets.append((tag, Manifest.load(path)))
        except OSError as exc:
            raise DataError(str(exc)) from exc
    model = None if args.identity else load_checkpoint(args.checkpoint).model
    model_id = "identity" if args.identity else str(args.checkpoint)
    reports = evaluate(model, sets, identity=args.identity, model_id=model_id)
    out = _out_dir(args, "eval")
    _write_run_config(out, args)
    for rep in reports.values():
        rep.write(out, csv_export=args.csv)
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    missing = [m for r in reports.values() for m in r.missing]
    if missing:
        log.warning("%d missing files were skipped", len(missing))
        return EXIT_DATA
    return EXIT_OK


def cmd_separate(args) -> int:
    from .wavio import WavError, wav_read, wav_write

    try:
        audio = wav_read(args.input)
    except (OSError, WavError) as exc:
        raise DataError(str(exc)) from exc
    model = load_checkpoint(args.checkpoint).model
    out = _out_dir(args, "separated")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for c, est in enumerate(model.separate(audio)):
        path = out / f"{stem}_s{c + 1}.wav"
        wav_write(path, est)
        print(path)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .evaluation import probe_gates
    from .wavio import wav_read

    stats = probe_gates(args.checkpoint, wav_read(args.input))
    text = json.dumps({"checkpoint": str(args.checkpoint), "layers": stats}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    failed = 0
    for r in run_suite(args.instances, args.seed):
        status = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status} {r.name:32s} worst rel err {r.worst:.2e} (tol {r.tol:g}, {r.instances} instances)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(args)
    print(param_count(cfg))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--variant", choices=VARIANTS, default="linear")
    p.add_argument("--depth", type=int, default=None, help="encoder/decoder depth I")
    p.add_argument("--N", type=int, default=None, help="override latent channels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tasnet", description=__doc__)
    parser.add_argument("--config", help="JSON or YAML file whose keys mirror the command's flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="generate a synthetic two-speaker corpus")
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-min", type=float, default=-5.0)
    p.add_argument("--snr-max", type=float, default=5.0)
    p.add_argument("--rate", type=int, default=8000)
    p.add_argument("--kind", choices=GENERATORS, default="tones")
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--source-dir", help="speaker directories of WAVs, for --kind file-backed")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train a separation model")
    _add_model_flags(p)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--out")
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--float64", action="store_true", help="64-bit mode (bit-exact resume)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cross-dataset SI-SNRi/SDRi evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--testset", action="append", default=[], metavar="TAG=MANIFEST")
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--identity", action="store_true", help="debug: use the mixture as every estimate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", help="separate a WAV file into one WAV per source")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("probe", help="per-channel gate statistics of a glu checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="print the exact parameter count of a configuration")
    _add_model_flags(p)
    p.set_defaults(func=cmd_params)
    return parser


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        defaults = _load_config_file(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(defaults) - known
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
