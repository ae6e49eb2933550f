"""Command-line front end: train | eval | gradcheck | convert | synth.

Exit codes: 0 success, 1 check failure, 2 bad configuration, 3 I/O or data
error, 4 checkpoint/data mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import gradcheck
from .data import (
    EVAL_SESSION,
    TRAIN_SESSION,
    TrialFormatError,
    apply_scaler,
    convert_csv_manifest,
    fit_scaler,
    load_trialset,
    save_trialset,
    synth_trials,
)
from .model import CheckpointError, EEGEncoder, ModelConfig, load_checkpoint
from .tensor import ContractError, DimensionError
from .training import (
    TrainConfig,
    evaluate,
    scaler_from_extras,
    train,
    write_history_csv,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISMATCH = 4


def build_id() -> str:
    """Content hash of the package sources, recorded in run manifests."""
    digest = hashlib.sha1()
    pkg_dir = Path(__file__).parent
    for path in sorted(pkg_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:12]


def _eval_threads() -> int:
    raw = os.environ.get("DSTS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    defaults = ModelConfig()
    p.add_argument("--branches", type=int, default=defaults.n_branches, help="parallel dropout+DSTS branches")
    p.add_argument("--layers", type=int, default=defaults.n_layers, help="transformer layers per branch")
    p.add_argument("--heads", type=int, default=defaults.n_heads, help="attention heads")
    p.add_argument("--k-clip", type=int, default=defaults.k_clip, help="relative-position clipping distance")
    p.add_argument("--tcn-blocks", type=int, default=defaults.tcn_blocks)
    p.add_argument("--tcn-kernel", type=int, default=defaults.tcn_kernel)
    p.add_argument("--dropout", type=float, default=defaults.dropout_p, help="dropout at all dropout sites")
    p.add_argument("--conv1-stride", type=int, default=defaults.conv1_stride_t,
                   help="temporal stride of the first conv (kernel-size-64 reading keeps this at 1)")
    p.add_argument("--no-transformer-path", action="store_true", help="ablation: TCN pathway only")
    p.add_argument("--vanilla-transformer", action="store_true",
                   help="ablation: post-norm blocks, ReLU FFN, learned absolute positions")
    p.add_argument("--shared-head", action="store_true", help="one head MLP shared across branches")


def _model_config_from_args(args) -> ModelConfig:
    config = ModelConfig(
        n_branches=args.branches,
        n_layers=args.layers,
        n_heads=args.heads,
        k_clip=args.k_clip,
        tcn_blocks=args.tcn_blocks,
        tcn_kernel=args.tcn_kernel,
        dropout_p=args.dropout,
        conv1_stride_t=args.conv1_stride,
        use_transformer_path=not args.no_transformer_path,
        transformer_variant="vanilla" if args.vanilla_transformer else "stable",
        shared_head=args.shared_head,
    )
    config.validate()
    return config


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    group = p.add_mutually_exclusive_group(required=required)
    group.add_argument("--data", type=Path, help="EEGTRIAL1 file")
    group.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic trials instead")
    p.add_argument("--difficulty", type=float, default=0.0, help="synthetic noise scale")


def _load_trials(args, session: int, synth_session: int | None = None):
    if args.synthetic is not None:
        return synth_trials(args.synthetic, seed=args.seed, difficulty=args.difficulty,
                            session_id=session if synth_session is None else synth_session)
    trials = load_trialset(args.data)
    return trials.filter(session_id=session)


def _apply_manifest(args) -> None:
    """Feed a previous run's manifest back in, restoring every setting."""
    with open(args.manifest) as f:
        manifest = json.load(f)
    model = manifest["model_config"]
    args.branches = model["n_branches"]
    args.layers = model["n_layers"]
    args.heads = model["n_heads"]
    args.k_clip = model["k_clip"]
    args.tcn_blocks = model["tcn_blocks"]
    args.tcn_kernel = model["tcn_kernel"]
    args.dropout = model["dropout_p"]
    args.conv1_stride = model["conv1_stride_t"]
    args.no_transformer_path = not model["use_transformer_path"]
    args.vanilla_transformer = model["transformer_variant"] == "vanilla"
    args.shared_head = model["shared_head"]
    tc = manifest["train_config"]
    args.batch_size = tc["batch_size"]
    args.epochs = tc["epochs"]
    args.lr = tc["lr"]
    args.label_smoothing = tc["label_smoothing"]
    args.weight_decay = tc["mlp_weight_decay"]
    args.seed = manifest["seed"]
    data = manifest["data"]
    args.data = Path(data["path"]) if data["path"] else None
    args.synthetic = data["synthetic"]
    args.difficulty = data["difficulty"]
    args.subject = data["subject"]
    args.merge_subjects = data["merge_subjects"]
    args.scaler = data["scaler_mode"]


def cmd_train(args) -> int:
    try:
        if args.manifest is not None:
            _apply_manifest(args)
        elif args.data is None and args.synthetic is None:
            print("error: provide --data, --synthetic, or --manifest", file=sys.stderr)
            return EXIT_CONFIG
        model_config = _model_config_from_args(args)
        train_config = TrainConfig(
            batch_size=args.batch_size,
            epochs=args.epochs,
            lr=args.lr,
            label_smoothing=args.label_smoothing,
            dropout=args.dropout,
            mlp_weight_decay=args.weight_decay,
            seed=args.seed,
        )
        train_config.validate()
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: cannot apply manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        trials = _load_trials(args, TRAIN_SESSION)
    except (OSError, TrialFormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.synthetic is None:
        subjects = trials.subjects()
        if args.subject is not None:
            trials = trials.filter(subject_id=args.subject)
        elif len(subjects) > 1 and not args.merge_subjects:
            print(f"error: data has subjects {subjects}; pass --subject or --merge-subjects", file=sys.stderr)
            return EXIT_CONFIG
    if len(trials) == 0:
        print("error: no training trials after filtering", file=sys.stderr)
        return EXIT_IO
    if trials.channels != model_config.in_channels or trials.samples != model_config.in_time:
        print(
            f"error: trials are {trials.channels}x{trials.samples}, model expects "
            f"{model_config.in_channels}x{model_config.in_time}",
            file=sys.stderr,
        )
        return EXIT_IO

    scaler = fit_scaler(trials, mode=args.scaler)
    trials = apply_scaler(trials, scaler)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = EEGEncoder(model_config, np.random.default_rng([args.seed, 0]))
    state, history = train(model, trials, train_config, checkpoint_dir=out_dir, scaler=scaler)
    write_history_csv(out_dir / "history.csv", history)

    manifest = {
        "model_config": dataclasses.asdict(model_config),
        "train_config": dataclasses.asdict(train_config),
        "data": {
            "path": str(args.data) if args.data else None,
            "synthetic": args.synthetic,
            "difficulty": args.difficulty,
            "subject": args.subject,
            "merge_subjects": bool(args.merge_subjects),
            "scaler_mode": args.scaler,
        },
        "seed": args.seed,
        "build_id": build_id(),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    final = history[-1]
    print(f"trained {len(history)} epochs; final loss {final.loss:.4f}, train acc {final.train_acc:.4f}")
    print(f"outputs in {out_dir}/: checkpoint.bin, checkpoint_best.bin, history.csv, manifest.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, extras = load_checkpoint(args.checkpoint)
    except OSError as exc:
        print(f"error: cannot read checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckpointError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    session = TRAIN_SESSION if args.session == "train" else EVAL_SESSION
    try:
        trials = _load_trials(args, session)
    except (OSError, TrialFormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.subject is not None:
        trials = trials.filter(subject_id=args.subject)
    if len(trials) == 0:
        print("error: no trials to evaluate after filtering", file=sys.stderr)
        return EXIT_IO

    config = model.config
    if trials.channels != config.in_channels or trials.samples != config.in_time:
        print(
            f"error: checkpoint expects {config.in_channels}x{config.in_time} trials, "
            f"data is {trials.channels}x{trials.samples}",
            file=sys.stderr,
        )
        return EXIT_MISMATCH

    scaler = scaler_from_extras(extras)
    if scaler is not None:
        trials = apply_scaler(trials, scaler)
    report = evaluate(model, trials, n_threads=_eval_threads())
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = gradcheck.run(op_names=args.op or None)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    failures = []
    for name, err in results.items():
        status = "PASS" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:24s} max rel err {err:.3e}  {status}")
        if err >= gradcheck.TOLERANCE:
            failures.append(name)
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} gradient checks passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        n = convert_csv_manifest(args.manifest, args.out)
    except (OSError, json.JSONDecodeError, TrialFormatError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {n} trials to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        if args.session == "both":
            half = args.n // 2
            first = synth_trials(half, seed=args.seed, difficulty=args.difficulty, session_id=TRAIN_SESSION)
            second = synth_trials(args.n - half, seed=args.seed + 1, difficulty=args.difficulty,
                                  session_id=EVAL_SESSION)
            trials = data_mod.TrialSet(first.trials + second.trials)
        else:
            session = TRAIN_SESSION if args.session == "train" else EVAL_SESSION
            trials = synth_trials(args.n, seed=args.seed, difficulty=args.difficulty, session_id=session)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        save_trialset(args.out, trials)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(trials)} synthetic trials to {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegencoder", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write checkpoint/history/manifest")
    _add_data_flags(p_train, required=False)
    _add_model_flags(p_train)
    p_train.add_argument("--manifest", type=Path, default=None,
                         help="reproduce a previous run from its manifest.json (overrides other flags)")
    p_train.add_argument("--out", type=Path, required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    p_train.add_argument("--batch-size", type=int, default=TrainConfig().batch_size)
    p_train.add_argument("--lr", type=float, default=TrainConfig().lr)
    p_train.add_argument("--label-smoothing", type=float, default=TrainConfig().label_smoothing)
    p_train.add_argument("--weight-decay", type=float, default=TrainConfig().mlp_weight_decay,
                         help="decoupled decay on head-MLP parameters")
    p_train.add_argument("--subject", type=int, default=None, help="train on one subject's trials")
    p_train.add_argument("--merge-subjects", action="store_true", help="pool all subjects' training sessions")
    p_train.add_argument("--scaler", choices=["per_channel", "global"], default="per_channel")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint; prints an accuracy/kappa report")
    _add_data_flags(p_eval)
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--session", choices=["train", "eval"], default="eval",
                        help="which session tag to evaluate (default: eval)")
    p_eval.add_argument("--subject", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=0, help="seed for --synthetic data")
    p_eval.add_argument("--out", type=Path, default=None, help="write the JSON report here too")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference verification of all differentiable ops")
    p_grad.add_argument("--op", action="append", metavar="NAME",
                        help="restrict to one op (repeatable); default: all")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_conv = sub.add_parser("convert", help="convert CSV trials + JSON manifest to EEGTRIAL1")
    p_conv.add_argument("--manifest", type=Path, required=True)
    p_conv.add_argument("--out", type=Path, required=True)
    p_conv.set_defaults(func=cmd_convert)

    p_synth = sub.add_parser("synth", help="write a synthetic EEGTRIAL1 dataset")
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--difficulty", type=float, default=0.0)
    p_synth.add_argument("--session", choices=["train", "eval", "both"], default="train")
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
