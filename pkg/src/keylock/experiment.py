"""Experiment configuration, the full evaluation protocol, and report output.

A config plus its four named seeds reproduces a run bit-deterministically
under a fixed thread configuration; reports are JSON with stable key order,
and all wall-clock style values live under "timing" so reproducibility
checks can strip them.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .arch import ArchConfig
from .attacks import AttackerView, estimate_key, finetune_attack, random_key_eval
from .data import (
    Dataset,
    load_cifar10,
    resolve_data_dir,
    sample_subset,
    synthetic_cifar,
)
from .engine.optim import SgdHyper, SgdState
from .keys import generate_key, load_key, save_key
from .protected import ProtectedModel, build_model, evaluate, load_model, protect, train_model
from .shuffle import BlockSpec

EVAL_REPORT_SCHEMA = "keylock-eval-report/1"
ATTACK_REPORT_SCHEMA = "keylock-attack-report/1"
LOCK_FILE = ".keylock.lock"
FAIL_MARKER = "FAILED"


@dataclass
class Seeds:
    """The four independent randomness sources of a run."""

    data_order: int = 1
    init: int = 2
    wrong_keys: int = 3
    attacker_subset: int = 4


@dataclass
class EvalProtocol:
    n_wrong_keys: int = 20
    attacker_sizes: tuple[int, ...] = (100, 500, 1000)
    finetune_epochs: int = 30
    estimation_subset: int = 1000


@dataclass
class DataConfig:
    source: str = "cifar10"  # or "synthetic"
    dir: str | None = None
    train_size: int = 5000
    test_size: int = 1000


@dataclass
class AttackToggles:
    key_estimation: bool = False
    finetune: bool = False


@dataclass
class ExperimentConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    placements: tuple[str, ...] = ("initial_conv",)
    block_size: int = 2
    key_file: str | None = None
    hyper: SgdHyper = field(default_factory=SgdHyper)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: Seeds = field(default_factory=Seeds)
    attacks: AttackToggles = field(default_factory=AttackToggles)
    checkpoint: str | None = None  # evaluate a pre-trained model when epochs == 0
    out_dir: str = "runs/experiment"
    write_csv: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["placements"] = list(self.placements)
        d["protocol"]["attacker_sizes"] = list(self.protocol.attacker_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            arch=ArchConfig.from_dict(d["arch"]) if "arch" in d else ArchConfig(),
            placements=tuple(d.get("placements", ("initial_conv",))),
            block_size=int(d.get("block_size", 2)),
            key_file=d.get("key_file"),
            hyper=SgdHyper(**d.get("hyper", {})),
            protocol=EvalProtocol(**{**d.get("protocol", {}),
                                     "attacker_sizes": tuple(d.get("protocol", {}).get("attacker_sizes", (100, 500, 1000)))}),
            data=DataConfig(**d.get("data", {})),
            seeds=Seeds(**d.get("seeds", {})),
            attacks=AttackToggles(**d.get("attacks", {})),
            checkpoint=d.get("checkpoint"),
            out_dir=d.get("out_dir", "runs/experiment"),
            write_csv=bool(d.get("write_csv", True)),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.data.source == "synthetic":
        return synthetic_cifar(cfg.data.train_size, cfg.data.test_size, cfg.seeds.data_order)
    if cfg.data.source != "cifar10":
        raise ValueError(f"unknown data source {cfg.data.source!r}")
    train, test = load_cifar10(resolve_data_dir(cfg.data.dir))
    if cfg.data.train_size < len(train):
        train = sample_subset(train, cfg.data.train_size, cfg.seeds.data_order)
    if cfg.data.test_size < len(test):
        test = sample_subset(test, cfg.data.test_size, cfg.seeds.data_order)
    return train, test


class OutputDirLock:
    """One experiment process at a time per output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCK_FILE
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is locked by another run: {self.path}") from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self.path.unlink(missing_ok=True)
        return False


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _eval_csv(report: dict) -> str:
    lines = ["model,key_space,accuracy_correct,accuracy_wrong,accuracy_none"]
    spaces = " ".join(row["symbolic"] for row in report["key_space"]) or "-"
    a = report["accuracies"]
    label = "+".join(report["config"]["placements"]) or "unprotected"
    lines.append(f"{label},{spaces},{a['correct']},{a['wrong_mean']},{a['none']}")
    return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig) -> dict:
    """Train (or load), run the three-condition evaluation, optionally attack, write reports."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    with OutputDirLock(out):
        try:
            report = _run_experiment_inner(config, out, started)
        except Exception as exc:
            (out / FAIL_MARKER).write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
            raise
    (out / FAIL_MARKER).unlink(missing_ok=True)
    return report


def _run_experiment_inner(config: ExperimentConfig, out: Path, started: float) -> dict:
    train, test = load_dataset(config)

    if config.key_file and Path(config.key_file).exists():
        key = load_key(config.key_file)
    else:
        key = generate_key(np.random.default_rng(config.seeds.init))
        if config.key_file:
            save_key(key, config.key_file)
        else:
            save_key(key, out / "experiment.key")

    training_log = None
    if config.checkpoint and config.hyper.epochs == 0:
        model = load_model(config.checkpoint, key=key if config.placements else None)
    else:
        model = build_model(config.arch, init_seed=config.seeds.init)
        if config.placements:
            protect(model, list(config.placements), config.block_size, key)
        state = SgdState()
        log = train_model(model, train, config.hyper,
                          np.random.default_rng(config.seeds.data_order), state=state)
        training_log = log.to_dict()
        velocity = {f"optim/velocity/{k}": v for k, v in state.velocity.items()}
        model.save(out / "model.ckpt", extra_tensors=velocity)

    accuracies = {
        "correct": evaluate(model, test, "correct"),
        "none": evaluate(model, test, "none"),
    }
    wrong_accs: list[float] = []
    if config.placements:
        wrong = random_key_eval(model, test, config.protocol.n_wrong_keys, config.seeds.wrong_keys)
        accuracies["wrong_mean"] = wrong.mean
        accuracies["wrong_std"] = wrong.std
        wrong_accs = wrong.accuracies
    else:
        accuracies["wrong_mean"] = accuracies["correct"]
        accuracies["wrong_std"] = 0.0

    report = {
        "schema": EVAL_REPORT_SCHEMA,
        "tool_version": __version__,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": asdict(config.seeds),
        "accuracies": accuracies,
        "wrong_key_accuracies": wrong_accs,
        "key_space": model.key_space_table(),
        "training": training_log,
        "timing": {"runtime_seconds": time.perf_counter() - started, "created_at": _now_iso()},
    }
    _write_json(out / "eval_report.json", report)
    if config.write_csv:
        (out / "eval_table.csv").write_text(_eval_csv(report), encoding="utf-8")

    if config.attacks.key_estimation:
        _write_json(out / "attack_key_estimation.json",
                    key_estimation_report(config, model, train, test))
    if config.attacks.finetune:
        _write_json(out / "attack_finetune.json",
                    finetune_report(config, model, train, test))
    return report


def key_estimation_report(config: ExperimentConfig, model: ProtectedModel,
                          train: Dataset, test: Dataset,
                          trace_mode: str = "summary") -> dict:
    """Run the greedy estimation against every active placement; report per placement."""
    started = time.perf_counter()
    rng = np.random.default_rng(config.seeds.attacker_subset)
    subset = sample_subset(train, min(config.protocol.estimation_subset, len(train)),
                           config.seeds.attacker_subset)
    results = []
    for pid in config.placements:
        view = AttackerView(model.clone(unbind=True), pid, subset)
        perm, trace = estimate_key(view, config.block_size, rng)
        spec = BlockSpec(config.block_size, model.placement_table[pid].channels)
        estimated = _evaluate_with_perm(model, test, pid, perm, spec)
        entry = {
            "placement": pid,
            "correct_key_accuracy": evaluate(model, test, "correct"),
            "estimated_key_accuracy": estimated,
            "attacker_subset_size": len(subset),
            "trace": trace.summary() if trace_mode == "summary" else [vars(s) for s in trace.steps],
            "trace_summary": trace.summary(),
        }
        results.append(entry)
    return {
        "schema": ATTACK_REPORT_SCHEMA,
        "attack": "key-estimation",
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": asdict(config.seeds),
        "results": results,
        "timing": {"runtime_seconds": time.perf_counter() - started, "created_at": _now_iso()},
    }


def _evaluate_with_perm(model: ProtectedModel, test: Dataset, placement_id: str,
                        perm: np.ndarray, spec: BlockSpec) -> float:
    """Test accuracy when the attacker substitutes `perm` at the known placement."""
    from .data import normalize_images

    perms = {placement_id: perm}
    images = normalize_images(test)
    correct = 0
    for start in range(0, len(test), 256):
        logits = model.forward(images[start : start + 256], train=False, perms=perms)
        correct += int((logits.argmax(axis=1) == test.labels[start : start + 256]).sum())
    return 100.0 * correct / len(test)


def finetune_report(config: ExperimentConfig, model: ProtectedModel,
                    train: Dataset, test: Dataset, transform: str = "bypass") -> dict:
    """Fine-tuning attack across the configured attacker dataset sizes."""
    started = time.perf_counter()
    results = []
    for size in config.protocol.attacker_sizes:
        rng = np.random.default_rng(config.seeds.attacker_subset)
        subset = sample_subset(train, size, config.seeds.attacker_subset)
        view = AttackerView(model.clone(unbind=True), config.placements[0], subset)
        res = finetune_attack(view, config.protocol.finetune_epochs, config.hyper, test, rng,
                              transform=transform)
        results.append({
            "attacker_size": size,
            "final_accuracy": res.final_accuracy,
            "trajectory": res.trajectory,
            "transform": res.transform,
        })
    return {
        "schema": ATTACK_REPORT_SCHEMA,
        "attack": "finetune",
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": asdict(config.seeds),
        "original_accuracy": evaluate(model, test, "correct"),
        "results": results,
        "timing": {"runtime_seconds": time.perf_counter() - started, "created_at": _now_iso()},
    }


def strip_timing(report: dict) -> dict:
    """Reproducibility comparisons ignore wall-clock fields."""
    clean = dict(report)
    clean.pop("timing", None)
    return clean
