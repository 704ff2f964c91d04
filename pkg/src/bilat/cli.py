"""Command-line front end: train, eval, attack, diag, labeldemo.

All randomness flows from --seed: it picks the train/test split, the training
run, and the per-attack evaluation streams. Exit codes: 0 success, 1 bad
configuration or flags, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import attacks, data, evaluation, labels, nn, persist, training
from .config import ConfigError, RunConfig, load_dataset, load_run_config
from .rng import stable_token

__all__ = ["run_cli", "script_entry"]

TEST_FRACTION = 0.25


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we report exit 1
        raise _UsageError(f"{self.prog}: {message}")


def _attack_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, stable_token(name)]).generate_state(1)[0])


def _splits(spec: str, take, seed: int) -> data.DatasetSplits:
    return data.split_dataset(load_dataset(spec, take), TEST_FRACTION, seed=seed)


def _load_checkpoint_with_context(args):
    """Model plus dataset/seed context, flags overriding the recorded values."""
    model, extra = persist.load_checkpoint(args.checkpoint)
    spec = args.dataset or extra.get("dataset")
    if not spec:
        raise ConfigError("no --dataset given and the checkpoint records none")
    seed = args.seed if args.seed is not None else int(extra.get("seed", 0))
    take = args.take if args.take is not None else extra.get("take")
    return model, spec, take, seed


def _write_json(path: str, doc) -> None:
    persist.atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


# ----------------------------------------------------------------- train

def _train_config_from_flags(args) -> RunConfig:
    seed = args.seed if args.seed is not None else 0
    eps_px = args.eps_px if args.eps_px is not None else 8.0
    method = training.TrainMethod(args.method or "standard")
    attack = None
    label_adv = None
    if method is not training.TrainMethod.STANDARD:
        step = attacks.pixels_to_scale(args.step_size_px) \
            if args.step_size_px is not None else None
        attack = training.make_train_attack(attacks.pixels_to_scale(eps_px),
                                            steps=args.steps, step_size=step,
                                            seed=seed)
    if method in (training.TrainMethod.BAT, training.TrainMethod.MADRY_LA):
        label_adv = labels.LabelAdvConfig(beta=args.beta if args.beta is not None else 9.0,
                                          gamma=args.gamma if args.gamma is not None else 0.01)
    train = training.TrainConfig(method=method, arch=args.arch,
                                 epochs=args.epochs, batch_size=args.batch_size,
                                 lr_schedule=((0, args.lr),), attack=attack,
                                 label_adv=label_adv, seed=seed)
    return RunConfig(train=train, dataset=args.dataset, take=args.take,
                     eps_px=eps_px, seed=seed,
                     out_dir=args.out if args.out else "runs/out")


def _cmd_train(args) -> int:
    shaping = [name for name, val in [
        ("--method", args.method), ("--beta", args.beta), ("--gamma", args.gamma),
        ("--steps", args.steps), ("--step-size-px", args.step_size_px),
        ("--eps-px", args.eps_px)] if val is not None]
    if args.config:
        if shaping:
            raise ConfigError(f"{', '.join(shaping)} conflict with --config; "
                              "edit the config file instead")
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed,
                          train=replace(cfg.train, seed=args.seed))
        if args.dataset:
            cfg = replace(cfg, dataset=args.dataset)
        if args.take is not None:
            cfg = replace(cfg, take=args.take)
        if args.out:
            cfg = replace(cfg, out_dir=args.out)
    else:
        if not args.dataset:
            raise ConfigError("train needs --config or --dataset")
        cfg = _train_config_from_flags(args)

    splits = _splits(cfg.dataset, cfg.take, cfg.seed)
    model, history = training.train(cfg.train, splits)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.json")
    persist.save_checkpoint(ckpt, model, extra={
        "train_config": training.encode_train_config(cfg.train),
        "dataset": cfg.dataset, "take": cfg.take, "seed": cfg.seed})
    _write_json(os.path.join(cfg.out_dir, "history.json"),
                [s.as_dict() for s in history])
    print(f"checkpoint: {ckpt}")
    if history:
        print(f"final epoch: loss {history[-1].train_loss:.4f} "
              f"clean test accuracy {history[-1].clean_test_accuracy:.4f}")
    return 0


# ------------------------------------------------------------------ eval

def _cmd_eval(args) -> int:
    model, spec, take, seed = _load_checkpoint_with_context(args)
    splits = _splits(spec, take, seed)
    suite = tuple(args.suite.split(",")) if args.suite else attacks.SUITE_DEFAULT
    eps = attacks.pixels_to_scale(args.eps_px)
    if args.surrogate:
        surrogate, _ = persist.load_checkpoint(args.surrogate)
        table = {}
        for name in suite:
            cfg_a = attacks.parse_attack_name(name, eps, seed=_attack_seed(seed, name))
            table[name] = evaluation.evaluate_blackbox(model, surrogate,
                                                       splits.test, cfg_a)
        clean = training.accuracy(model, splits.test)
        report = evaluation.EvalReport(
            clean_accuracy=clean, attack_accuracy=table,
            label_leaking=("FGSM" in table and table["FGSM"] > clean),
            metadata={"transfer_from": args.surrogate, "eps_x": eps,
                      "seed": seed, "suite": list(suite),
                      "n_examples": len(splits.test)})
    else:
        report = evaluation.evaluate_whitebox(model, splits.test, suite,
                                              eps_x=eps, seed=seed,
                                              workers=args.workers)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        evaluation.save_report(report,
                               json_path=os.path.join(args.out, "report.json"),
                               csv_path=os.path.join(args.out, "report.csv"))
    print(report.to_csv(), end="")
    return 0


# ---------------------------------------------------------------- attack

def _cmd_attack(args) -> int:
    model, spec, take, seed = _load_checkpoint_with_context(args)
    splits = _splits(spec, take, seed)
    x, y = splits.test.x, splits.test.y
    eps = attacks.pixels_to_scale(args.eps_px)
    suite = tuple(args.suite.split(",")) if args.suite else attacks.SUITE_DEFAULT
    arrays = {"x": x, "y": y}
    for name in suite:
        cfg_a = attacks.parse_attack_name(name, eps, seed=_attack_seed(seed, name))
        adv = attacks.pgd_attack(model, x, y, cfg_a)
        arrays[f"adv_{name}"] = adv
        acc = float((nn.predict(model, adv) == y).mean())
        print(f"{name}: accuracy {acc:.4f}, "
              f"max|delta| {np.abs(adv - x).max():.6f} (budget {eps:.6f})")
    out = args.out if args.out else "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "adversarial.npz")
    np.savez(path, **arrays)
    print(f"examples: {path}")
    return 0


# ------------------------------------------------------------------ diag

def _cmd_diag(args) -> int:
    model, spec, take, seed = _load_checkpoint_with_context(args)
    splits = _splits(spec, take, seed)
    stats = evaluation.gradient_magnitude_stats(model, splits.test)
    x0, c0 = splits.test.x[0], int(splits.test.y[0])
    bc = evaluation.first_order_bound_check(
        model, x0, c0, attacks.pixels_to_scale(args.eps_px), 0.0, seed=seed)
    doc = {"gradient_stats": {k: s.as_dict() for k, s in stats.items()},
           "bound_check": {"lhs": bc.lhs, "rhs": bc.rhs, "slack": bc.slack}}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "diagnostics.json"), doc)
    print(json.dumps(doc, indent=2))
    return 0


# ------------------------------------------------------------- labeldemo

def _parse_vector(text: str, flag: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.split(",")])
    except ValueError as err:
        raise ConfigError(f"{flag}: {err}") from err


def _cmd_labeldemo(args) -> int:
    cfg = labels.LabelAdvConfig(beta=args.beta,
                                gamma=args.gamma if args.gamma is not None else 0.01)
    if args.v is not None:
        v = _parse_vector(args.v, "--v")
        if np.any(v < 0):
            raise ConfigError("--v entries must be >= 0")
        g = labels.LabelGradient(v, args.c)
    else:
        probs = _parse_vector(args.probs, "--probs")
        if np.any(probs <= 0):
            raise ConfigError("--probs entries must be positive")
        g = labels.label_gradient(np.log(probs), args.c)
    eps_main = labels.epsilon_y_budget(g, cfg)
    y_main = labels.adversarial_label_main(g, eps_main, cfg)
    y_app, eps_app = labels.adversarial_label_appendix(g, cfg.beta)
    print(json.dumps({
        "main": {"eps_y": eps_main, "y_prime": y_main.tolist()},
        "appendix": {"eps_y": eps_app, "y_prime": y_app.tolist()},
    }, indent=2))
    return 0


# ---------------------------------------------------------------- parser

def _add_data_flags(p, required_checkpoint=True):
    p.add_argument("--checkpoint", required=required_checkpoint,
                   help="model checkpoint written by train")
    p.add_argument("--dataset", help="cifar10:<path> | blobs:<k=v,...> | digits:<k=v,...> "
                                     "(default: what the checkpoint records)")
    p.add_argument("--take", type=int, help="per-class cap applied after loading")
    p.add_argument("--seed", type=int, help="split/attack seed "
                                            "(default: recorded in the checkpoint)")
    p.add_argument("--eps-px", type=float, default=8.0,
                   help="attack budget in 0-255 pixel units (default 8)")
    p.add_argument("--out", help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="bilat", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="RunConfig JSON (training flags then conflict)")
    p.add_argument("--dataset")
    p.add_argument("--take", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--method", choices=[m.value for m in training.TrainMethod])
    p.add_argument("--arch", default="mlp")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--eps-px", type=float, help="training attack budget, 0-255 units")
    p.add_argument("--steps", type=int, help="training attack steps")
    p.add_argument("--step-size-px", type=float, help="training attack step, 0-255 units")
    p.add_argument("--beta", type=float, help="groundtruth/runner-up probability ratio")
    p.add_argument("--gamma", type=float, help="label-adversary smoothing constant")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="run the attack suite and write a report")
    _add_data_flags(p)
    p.add_argument("--suite", help="comma-separated attack names (FGSM,CE20,...)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--surrogate", help="checkpoint whose gradients drive a transfer attack")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attack", help="write adversarial examples to an npz archive")
    _add_data_flags(p)
    p.add_argument("--suite", help="comma-separated attack names")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("diag", help="gradient-magnitude stats and first-order bound")
    _add_data_flags(p)
    p.set_defaults(func=_cmd_diag)

    p = sub.add_parser("labeldemo", help="print adversarial labels for a probability vector")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--probs", help="comma-separated clean probabilities")
    group.add_argument("--v", help="comma-separated label-gradient entries (-log p)")
    p.add_argument("--c", type=int, required=True, help="groundtruth class index")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=_cmd_labeldemo)
    return parser


def run_cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(str(err), file=sys.stderr)
        print("run with --help for usage", file=sys.stderr)
        return 1
    except SystemExit as err:  # argparse --help exits itself
        return int(err.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def script_entry() -> None:
    raise SystemExit(run_cli())
