"""Config-file-driven command line entry point.

Every command reads a YAML config (plus ``--set key=value`` overrides),
validates keys fail-fast, runs one pipeline stage, and writes a run manifest
(resolved config, seeds, spec hash, content hashes of inputs) beside each
output. Result files are deterministic; wall-clock timings go to stdout only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import yaml

from . import __version__
from .checkpoints import load_net_checkpoint, spec_hash
from .datasets import (
    ArrayDataset,
    load_image_folder,
    plan_splits,
    synthetic_image_classification,
)
from .distill import KDConfig, evaluate, kd_train
from .errors import BudgetError, CheckpointError, DistilnasError, TaskDBError
from .evalsearch import (
    ZERO_COST_METHODS,
    evaluate_predictor,
    make_zero_cost_scorer,
    result_summary_text,
    result_table_text,
    search,
)
from .predictor import (
    MetaTrainSchedule,
    TaskFeatureCache,
    adapt_to_task,
    init_state,
    load_predictor_checkpoint,
    meta_train,
    predict_batch,
    save_predictor_checkpoint,
)
from .space import (
    CostBudget,
    SearchSpaceSpec,
    config_from_text,
    config_to_text,
    count_costs,
    default_spec,
    imagenet_spec,
    largest,
    sample_many,
    spec_from_text,
)
from .taskdb import build_db, load_db, make_synthetic_db, split_tasks


class ConfigError(DistilnasError):
    """Bad config file, key, or value; reported with the valid alternatives."""


COMMANDS = (
    "build-db",
    "make-synth-db",
    "meta-train",
    "adapt",
    "predict",
    "search",
    "distill",
    "eval",
)

_SPEC_KEYS = {
    "num_stages", "depth_choices", "base_widths", "ratio_choices",
    "max_layers_per_stage", "input_shape", "mode", "base_depths",
}
_DATASET_KEYS = {
    "kind", "num_classes", "per_class", "image_size", "channels",
    "templates_per_class", "noise", "seed", "path",
}
_KD_KEYS = {
    "temperature", "alpha", "epochs", "lr", "momentum", "batch_size",
    "seed", "soft_target_order",
}
_BUDGET_KEYS = {"max_macs", "max_params", "macs_fraction_of_teacher"}

VALID_KEYS: dict[str, dict] = {
    "build-db": {
        "spec": _SPEC_KEYS, "dataset": _DATASET_KEYS, "kd": _KD_KEYS,
        "out": None, "splits": None, "train_splits": None, "val_fraction": None,
        "pool_size": None, "pairs_per_task": None, "teacher_epochs": None,
        "teacher_lr": None, "batch_size": None, "seed": None, "probe_seed": None,
        "paper_scale": None,
    },
    "make-synth-db": {
        "spec": _SPEC_KEYS, "out": None, "num_tasks": None, "pairs_per_task": None,
        "pool_size": None, "train_tasks": None, "num_classes": None,
        "probe_seed": None, "oracle_seed": None, "w_scale": None,
        "coupling": None, "noise_sigma": None, "b0": None,
    },
    "meta-train": {
        "db": None, "out": None, "iterations": None, "meta_batch": None,
        "query_pairs": None, "val_interval": None, "inner_steps": None,
        "meta_lr": None, "alpha_init": None, "embed_dim": None,
        "hidden_dim": None, "fused_dim": None, "second_order": None,
        "seed": None, "rng_seed": None,
    },
    "adapt": {"predictor": None, "db": None, "task": None, "out": None},
    "predict": {
        "predictor": None, "db": None, "task": None, "out": None,
        "configs": None, "n_random": None, "seed": None, "guided": None,
    },
    "search": {
        "predictor": None, "db": None, "task": None, "out": None,
        "n_candidates": None, "seed": None, "guided": None, "method": None,
        "budget": _BUDGET_KEYS, "dataset": _DATASET_KEYS,
    },
    "distill": {
        "teacher": None, "dataset": _DATASET_KEYS, "student": None,
        "kd": _KD_KEYS, "out": None, "val_fraction": None, "split_seed": None,
    },
    "eval": {
        "predictor": None, "db": None, "out": None, "n_eval": None,
        "guided": None, "tasks": None,
    },
}


def _validate_keys(command: str, cfg: dict):
    allowed = VALID_KEYS[command]
    for key, value in cfg.items():
        if key not in allowed:
            raise ConfigError(
                f"{command}: unknown config key {key!r}; valid keys: "
                + ", ".join(sorted(allowed))
            )
        sub = allowed[key]
        if sub is not None and isinstance(value, dict):
            for subkey in value:
                if subkey not in sub:
                    raise ConfigError(
                        f"{command}: unknown config key {key}.{subkey!r}; valid: "
                        + ", ".join(sorted(sub))
                    )


def load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path!r} does not parse: {exc}") from None
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path!r} must hold a mapping")
    return cfg


def apply_overrides(cfg: dict, sets: list[str]) -> dict:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-mapping")
        node[parts[-1]] = value
    return cfg


def _parse_spec(value) -> SearchSpaceSpec:
    if value in (None, "default"):
        return default_spec()
    if value == "imagenet":
        return imagenet_spec()
    if isinstance(value, str):
        if os.path.exists(value):
            with open(value) as fh:
                return spec_from_text(fh.read())
        raise ConfigError(f"spec {value!r}: not 'default', 'imagenet', or an existing file")
    if isinstance(value, dict):
        kwargs = dict(value)
        for key in ("depth_choices", "base_widths", "ratio_choices", "input_shape", "base_depths"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return SearchSpaceSpec(**kwargs)
    raise ConfigError(f"cannot interpret spec config {value!r}")


def _parse_dataset(cfg) -> ArrayDataset:
    if cfg is None:
        raise ConfigError("this command needs a 'dataset' config block")
    kind = cfg.get("kind", "synthetic")
    if kind == "synthetic":
        return synthetic_image_classification(
            num_classes=cfg.get("num_classes", 8),
            per_class=cfg.get("per_class", 60),
            image_size=cfg.get("image_size", 16),
            channels=cfg.get("channels", 3),
            templates_per_class=cfg.get("templates_per_class", 3),
            noise=cfg.get("noise", 0.6),
            seed=cfg.get("seed", 0),
        )
    if kind == "folder":
        if "path" not in cfg:
            raise ConfigError("dataset kind 'folder' needs a 'path'")
        return load_image_folder(cfg["path"], image_size=cfg.get("image_size"))
    raise ConfigError(f"unknown dataset kind {kind!r}; valid: synthetic, folder")


def _parse_kd(cfg, seed_default: int = 0) -> KDConfig:
    cfg = cfg or {}
    return KDConfig(
        temperature=cfg.get("temperature", 6.0),
        alpha=cfg.get("alpha", 0.5),
        epochs=cfg.get("epochs", 50),
        lr=cfg.get("lr", 5e-2),
        momentum=cfg.get("momentum", 0.9),
        batch_size=cfg.get("batch_size", 64),
        seed=cfg.get("seed", seed_default),
        soft_target_order=cfg.get("soft_target_order", "teacher-targets"),
    )


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path, command: str, cfg: dict, spec: SearchSpaceSpec | None,
                    inputs: list[str]):
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": cfg,
        "spec_hash": spec_hash(spec) if spec is not None else None,
        "input_hashes": {p: _file_hash(p) for p in inputs if p and os.path.exists(p)},
    }
    with open(str(out_path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(cfg: dict, key: str, command: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{command}: config key {key!r} is required")
    return cfg[key]


def _pick_task(tasks, selector):
    if selector is None:
        return tasks[-1]
    if isinstance(selector, int):
        if not 0 <= selector < len(tasks):
            raise ConfigError(f"task index {selector} outside 0..{len(tasks) - 1}")
        return tasks[selector]
    for t in tasks:
        if t.name == selector:
            return t
    raise ConfigError(
        f"no task named {selector!r}; available: " + ", ".join(t.name for t in tasks)
    )


# --- command implementations ---------------------------------------------------


def cmd_make_synth_db(cfg) -> int:
    spec = _parse_spec(cfg.get("spec"))
    out = _require(cfg, "out", "make-synth-db")
    make_synthetic_db(
        out,
        num_tasks=cfg.get("num_tasks", 10),
        spec=spec,
        oracle_seed=cfg.get("oracle_seed", 0),
        pairs_per_task=cfg.get("pairs_per_task", 60),
        pool_size=cfg.get("pool_size", 120),
        train_tasks=cfg.get("train_tasks"),
        num_classes=cfg.get("num_classes", 2),
        probe_seed=cfg.get("probe_seed", 77),
        w_scale=cfg.get("w_scale", 0.25),
        coupling=cfg.get("coupling", 0.1),
        noise_sigma=cfg.get("noise_sigma", 0.01),
        b0=cfg.get("b0", 0.45),
    )
    _write_manifest(out, "make-synth-db", cfg, spec, [])
    print(f"wrote synthetic task database to {out}")
    return 0


PAPER_SCALE = {
    "splits": 10,
    "teacher_epochs": 180,
    "pool_size": 2000,
    "pairs_per_task": 200,
    "kd": {"temperature": 6.0, "alpha": 0.5, "epochs": 50, "lr": 5e-2},
}


def apply_paper_scale(cfg: dict) -> dict:
    """Fill in full-scale defaults, keeping any value the user set explicitly."""
    for key, value in PAPER_SCALE.items():
        if isinstance(value, dict):
            block = cfg.setdefault(key, {})
            for k2, v2 in value.items():
                block.setdefault(k2, v2)
        else:
            cfg.setdefault(key, value)
    return cfg


def cmd_build_db(cfg) -> int:
    if cfg.get("paper_scale"):
        apply_paper_scale(cfg)
    spec = _parse_spec(cfg.get("spec"))
    out = _require(cfg, "out", "build-db")
    dataset = _parse_dataset(cfg.get("dataset"))
    seed = cfg.get("seed", 0)
    plan = plan_splits(
        dataset,
        num_splits=cfg.get("splits", 10),
        seed=seed,
        train_splits=cfg.get("train_splits"),
        val_fraction=cfg.get("val_fraction", 0.1),
    )
    kd = _parse_kd(cfg.get("kd"), seed_default=seed)
    build_db(
        out,
        spec=spec,
        dataset=dataset,
        plan=plan,
        pool_size=cfg.get("pool_size", 2000),
        pairs_per_task=cfg.get("pairs_per_task", 200),
        teacher_epochs=cfg.get("teacher_epochs", 180),
        kd=kd,
        seed=seed,
        teacher_lr=cfg.get("teacher_lr", 5e-2),
        batch_size=cfg.get("batch_size", 64),
        probe_seed=cfg.get("probe_seed", 77),
        log_fn=lambda msg: print(msg, flush=True),
    )
    _write_manifest(out, "build-db", cfg, spec, [])
    print(f"wrote task database to {out}")
    return 0


def cmd_meta_train(cfg) -> int:
    db_path = _require(cfg, "db", "meta-train")
    out = _require(cfg, "out", "meta-train")
    header, tasks = load_db(db_path)
    train_tasks, held = split_tasks(header, tasks)
    if not held:
        raise ConfigError("database has no held-out tasks for meta-validation")
    state = init_state(
        header.spec,
        embed_dim=cfg.get("embed_dim", 64),
        hidden_dim=cfg.get("hidden_dim", 128),
        fused_dim=cfg.get("fused_dim", 64),
        inner_steps=cfg.get("inner_steps", 1),
        meta_lr=cfg.get("meta_lr", 1e-3),
        alpha_init=cfg.get("alpha_init", 1e-3),
        second_order=cfg.get("second_order", True),
        probe_seed=header.probe_seed,
        rng_seed=cfg.get("rng_seed", 0),
    )
    schedule = MetaTrainSchedule(
        iterations=cfg.get("iterations", 500),
        meta_batch=cfg.get("meta_batch", 8),
        query_pairs=cfg.get("query_pairs", 50),
        val_interval=cfg.get("val_interval", 25),
        seed=cfg.get("seed", 0),
    )
    state, history = meta_train(
        state, train_tasks, held, schedule, log_fn=lambda m: print(m, flush=True)
    )
    save_predictor_checkpoint(
        out, state,
        metadata={"db": os.path.basename(str(db_path)),
                  "iterations": schedule.iterations,
                  "best_iter": history.best_iter,
                  "best_val_src": round(history.best_src, 6)},
    )
    _write_manifest(out, "meta-train", cfg, header.spec, [str(db_path)])
    print(f"meta-trained predictor saved to {out} "
          f"(best val SRC {history.best_src:.4f} at iter {history.best_iter})")
    return 0


def cmd_adapt(cfg) -> int:
    state, _ = load_predictor_checkpoint(_require(cfg, "predictor", "adapt"))
    header, tasks = load_db(_require(cfg, "db", "adapt"))
    out = _require(cfg, "out", "adapt")
    task = _pick_task(tasks, cfg.get("task"))
    cache = TaskFeatureCache(state.probe())
    adapted = adapt_to_task(state, task, cache)
    state.model.load_state_dict(adapted)
    save_predictor_checkpoint(
        out, state, metadata={"adapted_to": task.name,
                              "teacher_accuracy": f"{task.teacher_accuracy:.6f}"}
    )
    _write_manifest(out, "adapt", cfg, header.spec,
                    [str(cfg["predictor"]), str(cfg["db"])])
    print(f"adapted predictor to task {task.name} "
          f"(teacher accuracy {task.teacher_accuracy:.6f}); saved to {out}")
    return 0


def cmd_predict(cfg) -> int:
    state, _ = load_predictor_checkpoint(_require(cfg, "predictor", "predict"))
    header, tasks = load_db(_require(cfg, "db", "predict"))
    out = _require(cfg, "out", "predict")
    task = _pick_task(tasks, cfg.get("task"))
    if cfg.get("configs"):
        configs = [config_from_text(t) for t in cfg["configs"]]
    else:
        configs = sample_many(header.spec, cfg.get("n_random", 20), cfg.get("seed", 0))
    cache = TaskFeatureCache(state.probe())
    params = adapt_to_task(state, task, cache) if cfg.get("guided", True) else None
    preds = predict_batch(state, task, configs, cache, params)
    lines = ["config\tpredicted_accuracy"]
    lines += [f"{config_to_text(c)}\t{float(p)!r}" for c, p in zip(configs, preds)]
    with open(out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out, "predict", cfg, header.spec,
                    [str(cfg["predictor"]), str(cfg["db"])])
    print(f"wrote {len(configs)} predictions for task {task.name} to {out}")
    return 0


def _parse_budget(cfg, spec) -> CostBudget | None:
    bcfg = cfg.get("budget")
    if not bcfg:
        return None
    max_macs = bcfg.get("max_macs")
    frac = bcfg.get("macs_fraction_of_teacher")
    if frac is not None:
        teacher_macs = count_costs(spec, largest(spec)).macs
        max_macs = int(teacher_macs * float(frac))
    return CostBudget(max_macs=max_macs, max_params=bcfg.get("max_params"))


def cmd_search(cfg) -> int:
    header, tasks = load_db(_require(cfg, "db", "search"))
    out = _require(cfg, "out", "search")
    task = _pick_task(tasks, cfg.get("task"))
    spec = header.spec
    budget = _parse_budget(cfg, spec)
    method = cfg.get("method", "predictor")
    teacher = task.load_teacher()
    inputs = [str(cfg["db"])]
    if method == "predictor":
        state, _ = load_predictor_checkpoint(_require(cfg, "predictor", "search"))
        inputs.append(str(cfg["predictor"]))
        scorer_or_state = state
    elif method in ZERO_COST_METHODS:
        dataset = _parse_dataset(cfg.get("dataset"))
        batch = dataset.subset(np.arange(min(32, len(dataset))))
        scorer_or_state = make_zero_cost_scorer(method, spec, batch, cfg.get("seed", 0))
    else:
        raise ConfigError(
            f"unknown search method {method!r}; valid: predictor, "
            + ", ".join(ZERO_COST_METHODS)
        )
    result = search(
        scorer_or_state, spec, teacher,
        n_candidates=cfg.get("n_candidates", 3000),
        budget=budget,
        seed=cfg.get("seed", 0),
        method=method,
        guided=cfg.get("guided", True),
    )
    with open(out, "w") as fh:
        fh.write(result_table_text(result))
    _write_manifest(out, "search", cfg, spec, inputs)
    print(result_summary_text(result), end="")
    print(f"ranked table written to {out}")
    return 0


def cmd_distill(cfg) -> int:
    teacher_path = _require(cfg, "teacher", "distill")
    out = _require(cfg, "out", "distill")
    teacher, manifest = load_net_checkpoint(teacher_path)
    spec = spec_from_text(manifest["spec_text"])
    dataset = _parse_dataset(cfg.get("dataset"))
    # single-task split: all classes together, val_fraction held out per class
    rng = np.random.default_rng(cfg.get("split_seed", 0))
    labels = dataset.labels.numpy()
    val_idx, train_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, round(cfg.get("val_fraction", 0.1) * len(idx)))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    train = dataset.subset(np.sort(train_idx))
    val = dataset.subset(np.sort(val_idx))
    student_cfg = config_from_text(_require(cfg, "student", "distill"))
    kd = _parse_kd(cfg.get("kd"))
    student, record = kd_train(spec, student_cfg, teacher, train, val, kd)
    payload = {
        "student": record.config_text,
        "accuracy": f"{record.accuracy:.6f}",
        "best_epoch": record.best_epoch,
        "kd": {"temperature": kd.temperature, "alpha": kd.alpha,
               "epochs": kd.epochs, "lr": kd.lr},
        "teacher": os.path.basename(str(teacher_path)),
        "teacher_accuracy": f"{evaluate(teacher, val):.6f}",
    }
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "distill", cfg, spec, [str(teacher_path)])
    print(f"distilled student accuracy {record.accuracy:.6f} "
          f"(best epoch {record.best_epoch}, {record.seconds:.1f}s); wrote {out}")
    return 0


def cmd_eval(cfg) -> int:
    state, _ = load_predictor_checkpoint(_require(cfg, "predictor", "eval"))
    header, tasks = load_db(_require(cfg, "db", "eval"))
    out = _require(cfg, "out", "eval")
    _, held = split_tasks(header, tasks)
    selector = cfg.get("tasks", "held-out")
    if selector == "held-out":
        chosen = held
    elif selector == "all":
        chosen = tasks
    else:
        chosen = [_pick_task(tasks, s) for s in selector]
    if not chosen:
        raise ConfigError("no tasks selected for evaluation")
    n_eval = cfg.get("n_eval", 50)
    guided = cfg.get("guided", True)
    cache = TaskFeatureCache(state.probe())
    rows = []
    for task in chosen:
        src = evaluate_predictor(state, task, n_eval=n_eval, cache=cache, guided=guided)
        rows.append((task.name, src))
    mean = float(np.mean([s for _, s in rows]))
    lines = ["task\tsrc"] + [f"{name}\t{src!r}" for name, src in rows]
    lines.append(f"mean\t{mean!r}")
    with open(out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out, "eval", cfg, header.spec,
                    [str(cfg["predictor"]), str(cfg["db"])])
    print(f"{'task':<24} SRC")
    for name, src in rows:
        print(f"{name:<24} {src:+.4f}")
    print(f"{'mean':<24} {mean:+.4f}")
    print(f"result table written to {out}")
    return 0


_DISPATCH = {
    "build-db": cmd_build_db,
    "make-synth-db": cmd_make_synth_db,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "predict": cmd_predict,
    "search": cmd_search,
    "distill": cmd_distill,
    "eval": cmd_eval,
}


def run(command: str, config_path, overrides: list[str]) -> int:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; valid: " + ", ".join(COMMANDS))
    cfg = load_config(config_path)
    apply_overrides(cfg, overrides)
    _validate_keys(command, cfg)
    return _DISPATCH[command](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="distilnas",
        description="Distillation-aware architecture search with a meta-learned predictor.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML config file", default=None)
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="KEY=VALUE", help="override a config key (dotted paths allowed)",
    )
    args = parser.parse_args(argv)
    try:
        return run(args.command, args.config, args.overrides)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TaskDBError) as exc:
        print(f"error [artifact]: {exc}", file=sys.stderr)
        return 3
    except BudgetError as exc:
        print(f"error [budget]: {exc}", file=sys.stderr)
        return 4
    except DistilnasError as exc:
        print(f"error [domain]: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    raise SystemExit(main())
