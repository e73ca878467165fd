"""Meta-learned accuracy predictor with teacher-guided inner adaptation.

The model f(student config, teacher; phi) regresses distilled accuracy from
the fused task embedding. Meta-training is episodic: per task, phi takes I
gradient steps on the single (teacher-as-student, teacher accuracy) support
pair, scaled elementwise by a learned per-parameter rate alpha, and the outer
loss is the query MSE at the adapted parameters, differentiated through the
inner step. At meta-test time the same inner step adapts the predictor to an
unseen task from one teacher evaluation.

The two-level machinery (``adapt_params``, ``two_level_loss``,
``meta_step_core``) is generic over any dict-of-tensors model, so tiny toy
instances can drive the exact code paths the full predictor uses.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .checkpoints import spec_hash
from .encoding import Encoder, NoiseProbe, make_probe, onehot_tensor, pooled_probe_feature
from .errors import CheckpointError, DistilnasError
from .nets import StagedNetwork
from .remap import remap
from .space import ArchConfig, SearchSpaceSpec, config_to_text, spec_from_text, spec_to_text


class AdaptationError(DistilnasError):
    """Inner-loop gradient came out non-finite."""


ParamDict = dict[str, torch.Tensor]
LossFn = Callable[[ParamDict], torch.Tensor]


# --- generic two-level core -------------------------------------------------


def adapt_params(
    params: ParamDict,
    alpha: ParamDict,
    loss_fn: LossFn,
    steps: int,
    second_order: bool = True,
) -> ParamDict:
    """I steps of p <- p - alpha * grad(loss_fn(p)), elementwise alpha.

    With ``steps == 0`` the input dict is returned as-is. When
    ``second_order`` is set the returned tensors stay connected to the graph,
    so an outer loss differentiates through the update into both the original
    parameters and alpha.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    cur = params
    for _ in range(steps):
        loss = loss_fn(cur)
        grads = torch.autograd.grad(
            loss, list(cur.values()), create_graph=second_order, allow_unused=True
        )
        nxt: ParamDict = {}
        for (name, p), g in zip(cur.items(), grads):
            if g is None:
                nxt[name] = p
                continue
            if not torch.isfinite(g).all():
                raise AdaptationError(f"non-finite inner gradient for {name!r}")
            nxt[name] = p - alpha[name] * g
        cur = nxt
    return cur


def two_level_loss(
    params: ParamDict,
    alpha: ParamDict,
    support_loss_fn: LossFn,
    query_loss_fn: LossFn,
    steps: int,
    second_order: bool = True,
) -> torch.Tensor:
    adapted = adapt_params(params, alpha, support_loss_fn, steps, second_order)
    return query_loss_fn(adapted)


def meta_step_core(
    params: ParamDict,
    alpha: ParamDict,
    tasks: list[tuple[LossFn, LossFn]],
    optimizer: torch.optim.Optimizer,
    steps: int,
    second_order: bool = True,
) -> float:
    """One outer update over a batch of (support_loss_fn, query_loss_fn)
    tasks. Gradients flow into ``params`` and ``alpha``; both must be the leaf
    tensors the optimizer owns. Returns the mean outer loss."""
    if not tasks:
        raise ValueError("meta_step needs at least one task")
    total = torch.stack(
        [
            two_level_loss(params, alpha, sup, qry, steps, second_order)
            for sup, qry in tasks
        ]
    ).mean()
    leaves = list(params.values()) + list(alpha.values())
    grads = torch.autograd.grad(total, leaves, allow_unused=True)
    optimizer.zero_grad(set_to_none=True)
    for leaf, g in zip(leaves, grads):
        if g is not None:
            leaf.grad = g.detach()
    optimizer.step()
    return float(total.detach())


# --- the predictor model ------------------------------------------------------


class Predictor(nn.Module):
    """Encoder plus a linear regression head over the fused embedding."""

    def __init__(
        self,
        onehot_length: int,
        feature_dim: int,
        embed_dim: int = 64,
        hidden_dim: int = 128,
        fused_dim: int = 64,
    ):
        super().__init__()
        self.encoder = Encoder(onehot_length, feature_dim, embed_dim, hidden_dim, fused_dim)
        self.head = nn.Linear(fused_dim, 1)

    def forward(self, pooled_s, onehot, pooled_t) -> torch.Tensor:
        fused = self.encoder(pooled_s, onehot, pooled_t)
        return self.head(fused).squeeze(-1)


@dataclass
class PredictorState:
    """Everything the predictor needs to run: the model (phi), the inner-rate
    tensors (alpha, same names and shapes as phi), and the loop settings."""

    spec: SearchSpaceSpec
    model: Predictor
    alpha: ParamDict
    inner_steps: int = 1
    meta_lr: float = 1e-3
    second_order: bool = True
    probe_seed: int = 0
    rng_seed: int = 0

    def params(self) -> ParamDict:
        return dict(self.model.named_parameters())

    def probe(self) -> NoiseProbe:
        return make_probe(self.spec, self.probe_seed)


def init_state(
    spec: SearchSpaceSpec,
    embed_dim: int = 64,
    hidden_dim: int = 128,
    fused_dim: int = 64,
    inner_steps: int = 1,
    meta_lr: float = 1e-3,
    alpha_init: float = 1e-3,
    second_order: bool = True,
    probe_seed: int = 0,
    rng_seed: int = 0,
) -> PredictorState:
    """Fresh predictor with seed-deterministic weights; alpha starts at a
    small positive constant per parameter and is left unconstrained."""
    with torch.random.fork_rng():
        torch.manual_seed(rng_seed)
        model = Predictor(spec.onehot_length, spec.base_widths[-1], embed_dim, hidden_dim, fused_dim)
    alpha = {
        name: torch.full_like(p, alpha_init, requires_grad=True)
        for name, p in model.named_parameters()
    }
    return PredictorState(
        spec=spec,
        model=model,
        alpha=alpha,
        inner_steps=inner_steps,
        meta_lr=meta_lr,
        second_order=second_order,
        probe_seed=probe_seed,
        rng_seed=rng_seed,
    )


def forward_with(
    model: Predictor, params: ParamDict, pooled_s, onehot, pooled_t
) -> torch.Tensor:
    """Predictor forward under an explicit parameter dict (adapted or not)."""
    return functional_call(model, params, (pooled_s, onehot, pooled_t))


# --- probe feature plumbing ---------------------------------------------------


class TaskFeatureCache:
    """Pooled probe features per (task, config), plus teacher nets and
    features per task. Valid because teachers are frozen during meta-training,
    so every pooled feature is constant across predictor updates."""

    def __init__(self, probe: NoiseProbe):
        self.probe = probe
        self._teacher_nets: dict[str, StagedNetwork] = {}
        self._teacher_feats: dict[str, torch.Tensor] = {}
        self._pair_feats: dict[tuple[str, str], torch.Tensor] = {}

    def teacher_net(self, task) -> StagedNetwork:
        net = self._teacher_nets.get(task.name)
        if net is None:
            net = task.load_teacher()
            net.eval()
            self._teacher_nets[task.name] = net
        return net

    def teacher_feature(self, task) -> torch.Tensor:
        feat = self._teacher_feats.get(task.name)
        if feat is None:
            teacher = self.teacher_net(task)
            table = {k: v.detach() for k, v in teacher.state_dict().items()}
            feat = pooled_probe_feature(
                teacher.spec, teacher.config, table, self.probe, teacher.num_classes
            )
            self._teacher_feats[task.name] = feat
        return feat

    def student_feature(self, task, config: ArchConfig) -> torch.Tensor:
        key = (task.name, config_to_text(config))
        feat = self._pair_feats.get(key)
        if feat is None:
            teacher = self.teacher_net(task)
            table = remap(teacher, config)
            feat = pooled_probe_feature(
                teacher.spec, config, table, self.probe, teacher.num_classes
            )
            self._pair_feats[key] = feat
        return feat


def _support_loss_fn(state: PredictorState, task, cache: TaskFeatureCache) -> LossFn:
    """Squared error of predicting the teacher's own accuracy, encoding the
    teacher as the student of itself (identity remap)."""
    teacher = cache.teacher_net(task)
    pooled_t = cache.teacher_feature(task)
    onehot = onehot_tensor(state.spec, teacher.config)
    target = torch.tensor(float(task.teacher_accuracy))

    def loss_fn(params: ParamDict) -> torch.Tensor:
        pred = forward_with(state.model, params, pooled_t, onehot, pooled_t)
        return (pred - target) ** 2

    return loss_fn


def _query_batch(state: PredictorState, task, cache: TaskFeatureCache, pairs):
    pooled_t = cache.teacher_feature(task)
    pooled_s = torch.stack([cache.student_feature(task, cfg) for cfg, _ in pairs])
    onehots = torch.stack([onehot_tensor(state.spec, cfg) for cfg, _ in pairs])
    pooled_t_rows = pooled_t.unsqueeze(0).expand(len(pairs), -1)
    targets = torch.tensor([float(y) for _, y in pairs])
    return pooled_s, onehots, pooled_t_rows, targets


def _query_loss_fn(state: PredictorState, task, cache: TaskFeatureCache, pairs) -> LossFn:
    pooled_s, onehots, pooled_t_rows, targets = _query_batch(state, task, cache, pairs)

    def loss_fn(params: ParamDict) -> torch.Tensor:
        preds = forward_with(state.model, params, pooled_s, onehots, pooled_t_rows)
        return torch.mean((preds - targets) ** 2)

    return loss_fn


# --- user-facing operations ---------------------------------------------------


def inner_adapt(
    state: PredictorState,
    teacher: StagedNetwork,
    teacher_accuracy: float,
    probe: NoiseProbe,
) -> ParamDict:
    """Adapt phi to one task from its single teacher pair; returns the adapted
    parameter dict (detached), leaving the state untouched."""
    table = {k: v.detach() for k, v in teacher.state_dict().items()}
    pooled_t = pooled_probe_feature(
        teacher.spec, teacher.config, table, probe, teacher.num_classes
    )
    onehot = onehot_tensor(state.spec, teacher.config)
    target = torch.tensor(float(teacher_accuracy))

    def loss_fn(params: ParamDict) -> torch.Tensor:
        pred = forward_with(state.model, params, pooled_t, onehot, pooled_t)
        return (pred - target) ** 2

    adapted = adapt_params(
        state.params(), state.alpha, loss_fn, state.inner_steps, second_order=False
    )
    return {k: v.detach() for k, v in adapted.items()}


def predict(
    state: PredictorState,
    student_config: ArchConfig,
    teacher: StagedNetwork,
    probe: NoiseProbe,
    params: ParamDict | None = None,
) -> float:
    """Predicted distilled accuracy of one (student, teacher) pair, under the
    state's parameters or an adapted dict."""
    table = remap(teacher, student_config)
    pooled_s = pooled_probe_feature(
        teacher.spec, student_config, table, probe, teacher.num_classes
    )
    t_table = {k: v.detach() for k, v in teacher.state_dict().items()}
    pooled_t = pooled_probe_feature(
        teacher.spec, teacher.config, t_table, probe, teacher.num_classes
    )
    onehot = onehot_tensor(state.spec, student_config)
    use = params if params is not None else state.params()
    with torch.no_grad():
        pred = forward_with(state.model, use, pooled_s, onehot, pooled_t)
    return float(pred)


def predict_batch(
    state: PredictorState,
    task,
    configs: list[ArchConfig],
    cache: TaskFeatureCache,
    params: ParamDict | None = None,
) -> np.ndarray:
    """Predictions for many students of one task in a single forward pass."""
    pairs = [(cfg, 0.0) for cfg in configs]
    pooled_s, onehots, pooled_t_rows, _ = _query_batch(state, task, cache, pairs)
    use = params if params is not None else state.params()
    with torch.no_grad():
        preds = forward_with(state.model, use, pooled_s, onehots, pooled_t_rows)
    return preds.numpy().astype(np.float64)


def adapt_to_task(
    state: PredictorState, task, cache: TaskFeatureCache
) -> ParamDict:
    """inner_adapt against a task record's stored teacher accuracy."""
    sup = _support_loss_fn(state, task, cache)
    adapted = adapt_params(state.params(), state.alpha, sup, state.inner_steps, second_order=False)
    return {k: v.detach() for k, v in adapted.items()}


def adapt_to_unseen(
    state: PredictorState,
    teacher: StagedNetwork,
    val_inputs: torch.Tensor,
    val_labels: torch.Tensor,
    probe: NoiseProbe,
) -> tuple[ParamDict, float]:
    """Meta-test adaptation: measure the teacher's accuracy on the unseen
    task's validation split with one forward pass, then inner_adapt on that
    single pair. Returns (adapted params, measured teacher accuracy)."""
    if len(val_inputs) == 0:
        raise ValueError("validation split is empty")
    teacher.eval()
    with torch.no_grad():
        preds = teacher(val_inputs).argmax(dim=1)
    acc = float((preds == val_labels).float().mean())
    return inner_adapt(state, teacher, acc, probe), acc


@dataclass
class MetaTrainSchedule:
    iterations: int = 500
    meta_batch: int = 8
    query_pairs: int = 50
    val_interval: int = 25
    seed: int = 0


@dataclass
class MetaTrainHistory:
    outer_losses: list[float] = field(default_factory=list)
    val_iters: list[int] = field(default_factory=list)
    val_src: list[float] = field(default_factory=list)
    best_iter: int = -1
    best_src: float = float("-inf")


def validation_src(
    state: PredictorState,
    tasks,
    cache: TaskFeatureCache,
    guided: bool = True,
    max_pairs: int | None = None,
) -> float:
    """Mean Spearman rank correlation between predictions and true accuracies
    over tasks; with ``guided`` the predictor first adapts to each task's
    teacher pair."""
    from .evalsearch import spearman

    scores = []
    for task in tasks:
        pairs = task.pairs if max_pairs is None else task.pairs[:max_pairs]
        params = adapt_to_task(state, task, cache) if guided else None
        preds = predict_batch(state, task, [cfg for cfg, _ in pairs], cache, params)
        ys = np.array([y for _, y in pairs], dtype=np.float64)
        scores.append(spearman(preds, ys))
    return float(np.mean(scores))


def meta_train(
    state: PredictorState,
    train_tasks,
    val_tasks,
    schedule: MetaTrainSchedule,
    probe: NoiseProbe | None = None,
    log_fn=None,
) -> tuple[PredictorState, MetaTrainHistory]:
    """Episodic meta-training with meta-validation model selection.

    Each iteration samples ``meta_batch`` tasks (with replacement when the
    pool is smaller) and ``query_pairs`` query pairs per task, runs one outer
    update, and periodically scores guided SRC on the validation tasks. The
    best-scoring parameters are restored at the end.
    """
    if not train_tasks:
        raise ValueError("meta_train needs at least one training task")
    if not val_tasks:
        raise ValueError("meta_train needs at least one validation task")
    probe = probe if probe is not None else state.probe()
    cache = TaskFeatureCache(probe)
    history = MetaTrainHistory()
    if schedule.iterations == 0:
        return state, history

    optimizer = torch.optim.Adam(
        list(state.params().values()) + list(state.alpha.values()), lr=state.meta_lr
    )
    rng = np.random.default_rng(schedule.seed)
    best_model = None
    best_alpha = None

    def snapshot():
        return (
            copy.deepcopy(state.model.state_dict()),
            {k: v.detach().clone() for k, v in state.alpha.items()},
        )

    def check_val(it):
        nonlocal best_model, best_alpha
        src = validation_src(state, val_tasks, cache, guided=True)
        history.val_iters.append(it)
        history.val_src.append(src)
        if src > history.best_src:
            history.best_src = src
            history.best_iter = it
            best_model, best_alpha = snapshot()
        if log_fn:
            log_fn(f"iter {it}: val SRC {src:.4f} (best {history.best_src:.4f})")

    params = state.params()
    for it in range(1, schedule.iterations + 1):
        replace = len(train_tasks) < schedule.meta_batch
        idx = rng.choice(len(train_tasks), size=schedule.meta_batch, replace=replace)
        batch = []
        for i in idx:
            task = train_tasks[int(i)]
            n = min(schedule.query_pairs, len(task.pairs))
            sel = rng.choice(len(task.pairs), size=n, replace=False)
            pairs = [task.pairs[int(j)] for j in sel]
            batch.append(
                (
                    _support_loss_fn(state, task, cache),
                    _query_loss_fn(state, task, cache, pairs),
                )
            )
        loss = meta_step_core(
            params, state.alpha, batch, optimizer, state.inner_steps, state.second_order
        )
        history.outer_losses.append(loss)
        if it % schedule.val_interval == 0 or it == schedule.iterations:
            check_val(it)

    if best_model is not None:
        state.model.load_state_dict(best_model)
        for k, v in state.alpha.items():
            with torch.no_grad():
                v.copy_(best_alpha[k])
    return state, history


# --- checkpoint io --------------------------------------------------------------


def save_predictor_checkpoint(path, state: PredictorState, metadata: dict | None = None):
    enc = state.model.encoder
    manifest = {
        "kind": "predictor",
        "spec_hash": spec_hash(state.spec),
        "spec_text": spec_to_text(state.spec),
        "onehot_length": enc.onehot_length,
        "feature_dim": enc.feature_dim,
        "embed_dim": enc.q_a.out_features,
        "hidden_dim": enc.fuse_net[0].out_features,
        "fused_dim": enc.fuse_net[2].out_features,
        "inner_steps": state.inner_steps,
        "meta_lr": state.meta_lr,
        "second_order": state.second_order,
        "probe_seed": state.probe_seed,
        "rng_seed": state.rng_seed,
        "metadata": dict(metadata or {}),
    }
    torch.save(
        {
            "manifest": manifest,
            "state": state.model.state_dict(),
            "alpha": {k: v.detach().clone() for k, v in state.alpha.items()},
        },
        path,
    )


def load_predictor_checkpoint(path) -> tuple[PredictorState, dict]:
    if not os.path.exists(path):
        raise CheckpointError(f"{path}: no such checkpoint")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "manifest" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    manifest = payload["manifest"]
    if manifest.get("kind") != "predictor":
        raise CheckpointError(f"{path}: not a predictor checkpoint")
    spec = spec_from_text(manifest["spec_text"])
    if spec_hash(spec) != manifest["spec_hash"]:
        raise CheckpointError(f"{path}: spec hash does not match spec text")
    state = init_state(
        spec,
        embed_dim=manifest["embed_dim"],
        hidden_dim=manifest["hidden_dim"],
        fused_dim=manifest["fused_dim"],
        inner_steps=manifest["inner_steps"],
        meta_lr=manifest["meta_lr"],
        second_order=manifest["second_order"],
        probe_seed=manifest["probe_seed"],
        rng_seed=manifest["rng_seed"],
    )
    state.model.load_state_dict(payload["state"])
    for k, v in state.alpha.items():
        with torch.no_grad():
            v.copy_(payload["alpha"][k])
    return state, manifest
