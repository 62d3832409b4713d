"""Command-line interface: keygen, train, eval, attacks, inspect, run."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .experiment import (
    ExperimentConfig,
    finetune_report,
    key_estimation_report,
    load_dataset,
    run_experiment,
)
from .keys import generate_key, load_key, save_key
from .protected import load_model, evaluate
from .attacks import random_key_eval


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON file")
    parser.add_argument("--seed", type=int, help="override every seed field with this value")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--data", help="dataset directory (overrides config and KEYLOCK_DATA_DIR)")
    parser.add_argument("--json", action="store_true", help="emit machine-readable JSON on stdout")


def _load_config(args, require=True) -> ExperimentConfig | None:
    if not args.config:
        if require:
            raise SystemExit("error: --config is required for this command")
        return None
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seeds.data_order = cfg.seeds.init = args.seed
        cfg.seeds.wrong_keys = cfg.seeds.attacker_subset = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.data:
        cfg.data.dir = args.data
    return cfg


def _emit(args, payload: dict, human: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else human)


def cmd_keygen(args) -> int:
    rng = np.random.default_rng(args.seed) if args.seed is not None else None
    key = generate_key(rng, label=args.label)
    out = args.out or "keylock.key"
    save_key(key, out)
    _emit(args, {"key_file": str(out), "fingerprint": key.fingerprint()},
          f"wrote key {key.fingerprint()} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg.attacks.key_estimation = cfg.attacks.finetune = False
    report = run_experiment(cfg)
    _emit(args, report,
          f"trained; correct-key accuracy {report['accuracies']['correct']:.2f}% "
          f"(reports in {cfg.out_dir})")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg)
    a = report["accuracies"]
    _emit(args, report,
          f"correct {a['correct']:.2f}% | wrong(mean) {a['wrong_mean']:.2f}% | "
          f"none {a['none']:.2f}% (reports in {cfg.out_dir})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model, key=load_key(args.key) if args.key else None)
    _, test = load_dataset(cfg)
    if args.mode == "correct":
        if not args.key:
            raise SystemExit("error: --key is required for correct-key evaluation")
        acc = evaluate(model, test, "correct")
        payload = {"mode": "correct", "accuracy": acc}
    elif args.mode == "wrong":
        if args.key:
            model.bind_key(load_key(args.key))
        report = random_key_eval(model, test, cfg.protocol.n_wrong_keys, cfg.seeds.wrong_keys)
        payload = {"mode": "wrong", "mean": report.mean, "std": report.std,
                   "accuracies": report.accuracies}
        acc = report.mean
    elif args.mode == "none":
        acc = evaluate(model, test, "none")
        payload = {"mode": "none", "accuracy": acc}
    else:
        raise SystemExit(f"error: unknown mode {args.mode!r}")
    _emit(args, payload, f"{args.mode}: {acc:.2f}%")
    return 0


def cmd_attack_key(args) -> int:
    cfg = _load_config(args)
    key = load_key(args.key) if args.key else load_key(cfg.key_file)
    model = load_model(args.model, key=key)
    train, test = load_dataset(cfg)
    report = key_estimation_report(cfg, model, train, test, trace_mode=args.trace)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attack_key_estimation.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"{r['placement']}: correct {r['correct_key_accuracy']:.2f}% -> "
             f"estimated {r['estimated_key_accuracy']:.2f}%" for r in report["results"]]
    _emit(args, report, "\n".join(lines))
    return 0


def cmd_attack_finetune(args) -> int:
    cfg = _load_config(args)
    key = load_key(args.key) if args.key else load_key(cfg.key_file)
    model = load_model(args.model, key=key)
    train, test = load_dataset(cfg)
    report = finetune_report(cfg, model, train, test, transform=args.attack_transform)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attack_finetune.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"|D'|={r['attacker_size']}: {r['final_accuracy']:.2f}%" for r in report["results"]]
    _emit(args, report, "\n".join(lines))
    return 0


def cmd_inspect(args) -> int:
    man_path = Path(args.model)
    man = json.loads(man_path.with_name(man_path.stem + ".manifest.json").read_text(encoding="utf-8"))
    model = load_model(args.model)
    payload = {
        "arch": man["arch"],
        "placements": man["placements"],
        "block_size": man["block_size"],
        "key_fingerprint": man["key_fingerprint"],
        "key_space": model.key_space_table(),
    }
    human = [f"arch: {man['arch']['preset']} input={tuple(man['arch']['input_shape'])} "
             f"classes={man['arch']['num_classes']}",
             f"placements: {', '.join(man['placements']) or '(none)'} "
             f"(block size {man['block_size']})",
             f"key fingerprint: {man['key_fingerprint']}"]
    for row in payload["key_space"]:
        human.append(f"key space @ {row['placement']}: {row['symbolic']} (decimal: {row['decimal']})")
    _emit(args, payload, "\n".join(human))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keylock",
                                     description="Key-protected CNN training, evaluation, and attacks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a key file")
    p.add_argument("--label", help="optional label stored on the second line")
    _common(p)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("train", help="train a model from a config (no attacks)")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="full experiment: train, three-condition eval, optional attacks")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a key condition")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--mode", default="correct", choices=["correct", "wrong", "none"])
    p.add_argument("--key", help="key file (required for correct mode)")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack-key", help="greedy key-estimation attack on a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--key", help="true key file, for reporting the correct-key accuracy")
    p.add_argument("--trace", default="summary", choices=["summary", "full"])
    _common(p)
    p.set_defaults(func=cmd_attack_key)

    p = sub.add_parser("attack-finetune", help="fine-tuning attack on a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--key", help="true key file, for reporting the original accuracy")
    p.add_argument("--attack-transform", default="bypass", choices=["bypass", "random-key"],
                   help="shuffle state during the attacker's fine-tuning")
    _common(p)
    p.set_defaults(func=cmd_attack_finetune)

    p = sub.add_parser("inspect", help="print a checkpoint's arch, placements, and key space")
    p.add_argument("--model", required=True)
    _common(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
