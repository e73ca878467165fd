"""Meta-training task databases.

A database file is line-delimited JSON: a versioned header line, then one
task record per line. Accuracies are stored as 6-decimal text. Teacher
weights live beside the file (referenced by content hash) for built
databases, or are rebuilt from recorded seeds for synthetic ones.

Synthetic databases ship their full oracle (weights, normalizers, seeds) in
the header, so stored accuracies can be recomputed bit-exactly by anyone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoints import load_net_checkpoint, save_net_checkpoint
from .datasets import ArrayDataset, DatasetSplitPlan, materialize_split
from .distill import KDConfig, kd_train, train_supervised
from .encoding import make_probe, pooled_probe_feature
from .errors import TaskDBError
from .nets import StagedNetwork, build
from .remap import validate_remap_feasibility
from .space import (
    ArchConfig,
    SearchSpaceSpec,
    config_from_text,
    config_to_text,
    count_costs,
    largest,
    sample_unique,
    spec_from_text,
    spec_to_text,
)

SCHEMA = "danas-taskdb"
VERSION = 1

KIND_DISTILLED = "distilled"
KIND_SYNTHETIC = "synthetic"


def format_accuracy(value: float) -> str:
    if not 0.0 <= value <= 1.0:
        raise TaskDBError(f"accuracy {value} outside [0, 1]")
    return f"{value:.6f}"


def _parse_accuracy(text, where: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise TaskDBError(f"{where}: bad accuracy {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise TaskDBError(f"{where}: accuracy {value} outside [0, 1]")
    return value


@dataclass
class Task:
    """One meta-learning task: a teacher and its architecture-accuracy pairs."""

    name: str
    split_id: int
    spec: SearchSpaceSpec
    kind: str
    teacher_ref: str
    teacher_seed: int
    teacher_config: ArchConfig
    teacher_accuracy: float
    num_classes: int
    pairs: list[tuple[ArchConfig, float]]
    root_dir: str = "."

    def load_teacher(self) -> StagedNetwork:
        if self.kind == KIND_SYNTHETIC:
            net = build(self.spec, self.teacher_config, self.num_classes, self.teacher_seed)
            net.eval()
            net.val_accuracy = self.teacher_accuracy
            return net
        path = os.path.join(self.root_dir, self.teacher_ref)
        net, _ = load_net_checkpoint(path)
        net.eval()
        net.val_accuracy = self.teacher_accuracy
        return net


@dataclass
class TaskDBHeader:
    kind: str
    spec: SearchSpaceSpec
    train_tasks: int
    probe_seed: int
    extras: dict

    def to_json(self) -> str:
        payload = {
            "schema": SCHEMA,
            "version": VERSION,
            "kind": self.kind,
            "spec_text": spec_to_text(self.spec),
            "train_tasks": self.train_tasks,
            "probe_seed": self.probe_seed,
        }
        payload.update(self.extras)
        return json.dumps(payload, sort_keys=True)


def _task_to_json(task: Task) -> str:
    return json.dumps(
        {
            "type": "task",
            "name": task.name,
            "split": task.split_id,
            "teacher_ref": task.teacher_ref,
            "teacher_seed": task.teacher_seed,
            "teacher_config": config_to_text(task.teacher_config),
            "teacher_accuracy": format_accuracy(task.teacher_accuracy),
            "num_classes": task.num_classes,
            "pairs": [[config_to_text(c), format_accuracy(y)] for c, y in task.pairs],
        },
        sort_keys=True,
    )


def load_db(path) -> tuple[TaskDBHeader, list[Task]]:
    """Parse and schema-validate a database file; errors carry line numbers."""
    if not os.path.exists(path):
        raise TaskDBError(f"{path}: no such database file")
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TaskDBError(f"{path}: empty file, missing header")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TaskDBError(f"{path} line 1: invalid JSON header: {exc}") from None
    if head.get("schema") != SCHEMA:
        raise TaskDBError(f"{path} line 1: schema {head.get('schema')!r}, expected {SCHEMA!r}")
    if head.get("version") != VERSION:
        raise TaskDBError(f"{path} line 1: unsupported version {head.get('version')!r}")
    kind = head.get("kind")
    if kind not in (KIND_DISTILLED, KIND_SYNTHETIC):
        raise TaskDBError(f"{path} line 1: unknown kind {kind!r}")
    try:
        spec = spec_from_text(head["spec_text"])
    except KeyError:
        raise TaskDBError(f"{path} line 1: header missing spec_text") from None
    extras = {
        k: v
        for k, v in head.items()
        if k not in ("schema", "version", "kind", "spec_text", "train_tasks", "probe_seed")
    }
    header = TaskDBHeader(
        kind=kind,
        spec=spec,
        train_tasks=int(head.get("train_tasks", 0)),
        probe_seed=int(head.get("probe_seed", 0)),
        extras=extras,
    )

    tasks: list[Task] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        where = f"{path} line {lineno}"
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TaskDBError(f"{where}: invalid JSON: {exc}") from None
        if rec.get("type") != "task":
            raise TaskDBError(f"{where}: expected a task record, got type {rec.get('type')!r}")
        for field in ("name", "split", "teacher_ref", "teacher_seed", "teacher_config",
                      "teacher_accuracy", "num_classes", "pairs"):
            if field not in rec:
                raise TaskDBError(f"{where}: missing field {field!r}")
        pairs = [
            (config_from_text(c), _parse_accuracy(y, where)) for c, y in rec["pairs"]
        ]
        task = Task(
            name=rec["name"],
            split_id=int(rec["split"]),
            spec=spec,
            kind=kind,
            teacher_ref=rec["teacher_ref"],
            teacher_seed=int(rec["teacher_seed"]),
            teacher_config=config_from_text(rec["teacher_config"]),
            teacher_accuracy=_parse_accuracy(rec["teacher_accuracy"], where),
            num_classes=int(rec["num_classes"]),
            pairs=pairs,
            root_dir=root,
        )
        if kind == KIND_DISTILLED:
            ref_path = os.path.join(root, task.teacher_ref)
            if not os.path.exists(ref_path):
                raise TaskDBError(f"{where}: dangling teacher checkpoint {task.teacher_ref!r}")
        tasks.append(task)
    return header, tasks


def split_tasks(header: TaskDBHeader, tasks: list[Task]) -> tuple[list[Task], list[Task]]:
    """(meta-train, held-out) according to the header's train_tasks count."""
    return tasks[: header.train_tasks], tasks[header.train_tasks :]


# --- synthetic databases -----------------------------------------------------


def cost_feature_vector(spec: SearchSpaceSpec, config: ArchConfig) -> np.ndarray:
    """Normalized (macs, params, mean depth, mean ratio) in (0, 1]^4; the
    synthetic oracle is linear in these."""
    big = count_costs(spec, largest(spec))
    cost = count_costs(spec, config)
    max_layers = max(len(s) for s in largest(spec).ratios)
    mean_depth = np.mean([len(s) for s in config.ratios]) / max_layers
    mean_ratio = np.mean([r for stage in config.ratios for r in stage])
    return np.array(
        [cost.macs / big.macs, cost.params / big.params, mean_depth, mean_ratio],
        dtype=np.float64,
    )


def teacher_signature(
    spec: SearchSpaceSpec, config: ArchConfig, seed: int, num_classes: int, probe_seed: int
) -> float:
    """Scalar summary of a teacher's probe response (mean pooled feature)."""
    net = build(spec, config, num_classes, seed)
    net.eval()
    table = {k: v.detach() for k, v in net.state_dict().items()}
    probe = make_probe(spec, probe_seed)
    pooled = pooled_probe_feature(spec, config, table, probe, num_classes)
    return float(pooled.mean())


def _oracle_task_weights(oracle: dict, t_hat: float) -> np.ndarray:
    w_base = np.array(oracle["w_base"], dtype=np.float64)
    c_vec = np.array(oracle["c_vec"], dtype=np.float64)
    return w_base + oracle["coupling"] * t_hat * c_vec


def oracle_accuracies(
    oracle: dict, spec: SearchSpaceSpec, t_hat: float, configs: list[ArchConfig], noise_seed: int
) -> np.ndarray:
    """Ground-truth synthetic accuracies for one task, reproducible bit-exactly
    from the oracle dict."""
    w = _oracle_task_weights(oracle, t_hat)
    feats = np.stack([cost_feature_vector(spec, c) for c in configs])
    eps = np.random.default_rng(noise_seed).normal(0.0, oracle["noise_sigma"], size=len(configs))
    return np.clip(oracle["b0"] + feats @ w + eps, 0.0, 1.0)


def oracle_teacher_accuracy(oracle: dict, spec: SearchSpaceSpec, t_hat: float, config: ArchConfig) -> float:
    w = _oracle_task_weights(oracle, t_hat)
    return float(np.clip(oracle["b0"] + cost_feature_vector(spec, config) @ w, 0.0, 1.0))


def standardized_signature(oracle: dict, raw_signature: float) -> float:
    return float(np.tanh((raw_signature - oracle["sig_center"]) / oracle["sig_scale"]))


def make_synthetic_db(
    path,
    num_tasks: int,
    spec: SearchSpaceSpec,
    oracle_seed: int,
    pairs_per_task: int = 60,
    pool_size: int = 120,
    train_tasks: int | None = None,
    num_classes: int = 2,
    probe_seed: int = 77,
    w_scale: float = 0.25,
    coupling: float = 0.1,
    noise_sigma: float = 0.01,
    b0: float = 0.45,
):
    """Write a synthetic database whose accuracies follow a linear oracle over
    cost features, with a per-task weight perturbation tied to the teacher's
    probe signature (so the task identity is observable to the predictor).
    """
    if num_tasks < 2:
        raise TaskDBError("need at least 2 tasks (one train, one held out)")
    if train_tasks is None:
        train_tasks = num_tasks - max(1, round(0.2 * num_tasks))
    if not 1 <= train_tasks < num_tasks:
        raise TaskDBError(f"train_tasks {train_tasks} must be in [1, {num_tasks - 1}]")

    rng = np.random.default_rng(oracle_seed)
    w_dir = rng.standard_normal(4)
    w_base = w_scale * w_dir / np.linalg.norm(w_dir)
    c_dir = rng.standard_normal(4)
    c_vec = c_dir / np.linalg.norm(c_dir)
    teacher_config = largest(spec)
    teacher_seeds = [int(s) for s in rng.integers(2**31 - 1, size=num_tasks)]
    noise_seeds = [int(s) for s in rng.integers(2**31 - 1, size=num_tasks)]

    raw_sigs = [
        teacher_signature(spec, teacher_config, ts, num_classes, probe_seed)
        for ts in teacher_seeds
    ]
    center = float(np.mean(raw_sigs))
    scale = float(max(np.std(raw_sigs), 1e-8))

    oracle = {
        "w_base": [float(v) for v in w_base],
        "c_vec": [float(v) for v in c_vec],
        "coupling": float(coupling),
        "noise_sigma": float(noise_sigma),
        "b0": float(b0),
        "sig_center": center,
        "sig_scale": scale,
        "oracle_seed": oracle_seed,
        "teacher_seeds": teacher_seeds,
        "noise_seeds": noise_seeds,
        "raw_signatures": [float(s) for s in raw_sigs],
    }

    pool = sample_unique(spec, pool_size, rng_seed=oracle_seed + 1)
    if len(pool) < pairs_per_task:
        raise TaskDBError(
            f"architecture pool has only {len(pool)} unique configs, need {pairs_per_task}"
        )

    header = TaskDBHeader(
        kind=KIND_SYNTHETIC,
        spec=spec,
        train_tasks=train_tasks,
        probe_seed=probe_seed,
        extras={
            "num_classes": num_classes,
            "pool_size": pool_size,
            "pairs_per_task": pairs_per_task,
            "oracle": oracle,
        },
    )

    lines = [header.to_json()]
    pair_rng = np.random.default_rng(oracle_seed + 2)
    for i in range(num_tasks):
        t_hat = standardized_signature(oracle, raw_sigs[i])
        sel = pair_rng.choice(len(pool), size=pairs_per_task, replace=False)
        configs = [pool[int(j)] for j in sel]
        ys = oracle_accuracies(oracle, spec, t_hat, configs, noise_seeds[i])
        teacher_acc = oracle_teacher_accuracy(oracle, spec, t_hat, teacher_config)
        task = Task(
            name=f"synthetic-{i}",
            split_id=i,
            spec=spec,
            kind=KIND_SYNTHETIC,
            teacher_ref=f"seed:{teacher_seeds[i]}",
            teacher_seed=teacher_seeds[i],
            teacher_config=teacher_config,
            teacher_accuracy=teacher_acc,
            num_classes=num_classes,
            pairs=[(c, float(y)) for c, y in zip(configs, ys)],
        )
        lines.append(_task_to_json(task))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def recompute_synthetic_accuracies(header: TaskDBHeader, task: Task) -> list[str]:
    """Recompute a synthetic task's stored pair accuracies from the header's
    oracle; equal to the stored 6-decimal strings."""
    oracle = header.extras["oracle"]
    idx = task.split_id
    t_hat = standardized_signature(oracle, oracle["raw_signatures"][idx])
    ys = oracle_accuracies(
        oracle, header.spec, t_hat, [c for c, _ in task.pairs], oracle["noise_seeds"][idx]
    )
    return [format_accuracy(float(y)) for y in ys]


# --- built (distilled) databases ----------------------------------------------


def _derived_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31 - 1))


def _state_content_hash(net: StagedNetwork) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class _Journal:
    """Append-only progress log so an interrupted build resumes without
    redoing or duplicating completed work."""

    def __init__(self, path):
        self.path = path
        self.records: list[dict] = []
        if os.path.exists(path):
            with open(path) as fh:
                for lineno, raw in enumerate(fh, start=1):
                    raw = raw.strip()
                    if not raw:
                        continue
                    try:
                        self.records.append(json.loads(raw))
                    except json.JSONDecodeError:
                        raise TaskDBError(
                            f"{path} line {lineno}: corrupt journal record"
                        ) from None

    def append(self, record: dict):
        self.records.append(record)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def find(self, **match):
        for rec in self.records:
            if all(rec.get(k) == v for k, v in match.items()):
                return rec
        return None


def build_db(
    path,
    spec: SearchSpaceSpec,
    dataset: ArrayDataset,
    plan: DatasetSplitPlan,
    pool_size: int,
    pairs_per_task: int,
    teacher_epochs: int,
    kd: KDConfig,
    seed: int = 0,
    teacher_lr: float = 5e-2,
    batch_size: int = 64,
    probe_seed: int = 77,
    log_fn=None,
):
    """Train one teacher per split, distill sampled students, persist records.

    Work is journaled per teacher and per pair: killing and restarting the
    build reuses everything already finished and produces the identical final
    file. Teacher checkpoints go into ``<path>.teachers/``.
    """
    if pairs_per_task > pool_size:
        raise TaskDBError("pairs_per_task cannot exceed pool_size")
    path = str(path)
    teachers_dir = path + ".teachers"
    os.makedirs(teachers_dir, exist_ok=True)
    journal = _Journal(path + ".journal")

    def log(msg):
        if log_fn:
            log_fn(msg)

    pool_rec = journal.find(type="pool")
    if pool_rec is None:
        pool = sample_unique(spec, pool_size, rng_seed=seed)
        if len(pool) < pairs_per_task:
            raise TaskDBError(
                f"architecture pool has only {len(pool)} unique configs, "
                f"need {pairs_per_task}"
            )
        pool_rec = {"type": "pool", "configs": [config_to_text(c) for c in pool]}
        journal.append(pool_rec)
    pool = [config_from_text(t) for t in pool_rec["configs"]]

    teacher_config = largest(spec)
    tasks: list[Task] = []
    for split_id in range(plan.num_splits):
        train, val = materialize_split(dataset, plan, split_id)
        teacher_seed = _derived_seed(seed, split_id, 0)

        trec = journal.find(type="teacher", split=split_id)
        if trec is None:
            log(f"split {split_id}: training teacher ({teacher_epochs} epochs)")
            teacher = build(spec, teacher_config, train.num_classes, teacher_seed)
            result = train_supervised(
                teacher, train, val, teacher_epochs,
                lr=teacher_lr, batch_size=batch_size, seed=teacher_seed,
            )
            ref = f"{os.path.basename(teachers_dir)}/teacher-s{split_id}-{_state_content_hash(teacher)[:16]}.pt"
            save_net_checkpoint(
                os.path.join(os.path.dirname(os.path.abspath(path)), ref),
                teacher,
                teacher_seed,
                metadata={
                    "split": split_id,
                    "val_accuracy": format_accuracy(result.best_accuracy),
                    "epochs": teacher_epochs,
                    "role": "teacher",
                },
            )
            trec = {
                "type": "teacher",
                "split": split_id,
                "ref": ref,
                "seed": teacher_seed,
                "config": config_to_text(teacher_config),
                "accuracy": format_accuracy(result.best_accuracy),
                "num_classes": train.num_classes,
            }
            journal.append(trec)
        else:
            ref_path = os.path.join(os.path.dirname(os.path.abspath(path)), trec["ref"])
            teacher, _ = load_net_checkpoint(ref_path)
            log(f"split {split_id}: teacher already built ({trec['ref']})")
        teacher.eval()

        pair_rng = np.random.default_rng([seed, split_id, 1])
        sel = sorted(int(j) for j in pair_rng.choice(len(pool), size=pairs_per_task, replace=False))
        pairs: list[tuple[ArchConfig, float]] = []
        for j in sel:
            cfg = pool[j]
            cfg_text = config_to_text(cfg)
            prec = journal.find(type="pair", split=split_id, config=cfg_text)
            if prec is None:
                feasible, problems = validate_remap_feasibility(spec, teacher_config, cfg)
                if not feasible:
                    raise TaskDBError(f"pool config infeasible under teacher: {problems}")
                kd_run = dataclasses.replace(kd, seed=_derived_seed(seed, split_id, 2, j))
                t0 = time.monotonic()
                _, record = kd_train(spec, cfg, teacher, train, val, kd_run)
                prec = {
                    "type": "pair",
                    "split": split_id,
                    "config": cfg_text,
                    "accuracy": format_accuracy(record.accuracy),
                    "seconds": round(time.monotonic() - t0, 3),
                }
                journal.append(prec)
                log(f"split {split_id}: distilled pair {len(pairs) + 1}/{pairs_per_task} "
                    f"acc {prec['accuracy']}")
            pairs.append((cfg, _parse_accuracy(prec["accuracy"], "journal")))

        tasks.append(
            Task(
                name=f"split-{split_id}",
                split_id=split_id,
                spec=spec,
                kind=KIND_DISTILLED,
                teacher_ref=trec["ref"],
                teacher_seed=trec["seed"],
                teacher_config=config_from_text(trec["config"]),
                teacher_accuracy=_parse_accuracy(trec["accuracy"], "journal"),
                num_classes=trec["num_classes"],
                pairs=pairs,
                root_dir=os.path.dirname(os.path.abspath(path)),
            )
        )

    header = TaskDBHeader(
        kind=KIND_DISTILLED,
        spec=spec,
        train_tasks=plan.train_splits,
        probe_seed=probe_seed,
        extras={
            "dataset_id": dataset.dataset_id,
            "pool_size": pool_size,
            "pairs_per_task": pairs_per_task,
            "teacher_epochs": teacher_epochs,
            "kd": {
                "temperature": kd.temperature,
                "alpha": kd.alpha,
                "epochs": kd.epochs,
                "lr": kd.lr,
                "momentum": kd.momentum,
                "batch_size": kd.batch_size,
                "soft_target_order": kd.soft_target_order,
            },
            "seed": seed,
            "plan": plan.to_dict(),
        },
    )
    lines = [header.to_json()] + [_task_to_json(t) for t in tasks]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
