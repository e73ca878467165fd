"""Rank-correlation evaluation, architecture search, zero-cost baselines.

Search samples candidates, deduplicates them, drops those over budget, scores
the rest with the (adapted) predictor or any scorer callable, and ranks by
score with a lexicographic tie-break on the serialized config, so the result
is independent of scoring order. Per-architecture scoring time comes from a
monotonic clock.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .datasets import ArrayDataset
from .distill import KDConfig, kd_train
from .errors import BudgetError, DistilnasError
from .nets import StagedNetwork, build
from .predictor import PredictorState, TaskFeatureCache, adapt_to_task, predict_batch
from .space import (
    ArchConfig,
    CostBudget,
    CostReport,
    SearchSpaceSpec,
    config_to_text,
    count_costs,
    sample_with,
    within_budget,
)


def spearman(pred, actual) -> float:
    """Tie-aware Spearman rank correlation (average ranks).

    Constant input has no defined ranking; returns 0 with a warning rather
    than NaN so aggregate statistics stay finite.
    """
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1:
        raise ValueError(f"score vectors must be 1-d and equal length, got {p.shape} vs {a.shape}")
    if len(p) < 2:
        raise ValueError("need at least 2 scores")
    if np.ptp(p) == 0 or np.ptp(a) == 0:
        warnings.warn("constant input to spearman; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    rp = stats.rankdata(p, method="average")
    ra = stats.rankdata(a, method="average")
    return float(np.corrcoef(rp, ra)[0, 1])


@dataclass(frozen=True)
class SearchEntry:
    config: ArchConfig
    score: float
    cost: CostReport


@dataclass
class SearchResult:
    """Budget-filtered candidates ranked by predicted score, best first."""

    entries: list[SearchEntry]
    method: str
    budget: CostBudget | None
    seed: int
    n_sampled: int
    n_unique: int
    n_scored: int
    total_seconds: float
    per_arch_seconds: float

    @property
    def top(self) -> SearchEntry:
        return self.entries[0]


def _predictor_scorer(state: PredictorState, teacher: StagedNetwork, guided: bool):
    """Scorer over configs for one concrete teacher, adapting first when the
    teacher's own accuracy is known."""

    class _AdHocTask:
        name = f"search-teacher-{id(teacher)}"
        spec = teacher.spec
        num_classes = teacher.num_classes
        teacher_accuracy = getattr(teacher, "val_accuracy", None)
        pairs: list = []

        @staticmethod
        def load_teacher():
            return teacher

    cache = TaskFeatureCache(state.probe())
    task = _AdHocTask()
    params = None
    if guided and task.teacher_accuracy is not None:
        params = adapt_to_task(state, task, cache)

    def scorer(configs: list[ArchConfig]) -> np.ndarray:
        return predict_batch(state, task, configs, cache, params)

    return scorer


def search(
    state,
    spec: SearchSpaceSpec,
    teacher: StagedNetwork | None,
    n_candidates: int,
    budget: CostBudget | None,
    seed: int,
    method: str = "predictor",
    guided: bool = True,
) -> SearchResult:
    """Sample, filter, score, rank.

    ``state`` is a PredictorState (scored against ``teacher``) or any callable
    mapping a config list to scores. Set ``teacher.val_accuracy`` before
    calling to let the predictor adapt to the task first.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    rng = np.random.default_rng(seed)
    sampled = [sample_with(spec, rng) for _ in range(n_candidates)]
    seen: set[str] = set()
    unique: list[ArchConfig] = []
    for cfg in sampled:
        key = config_to_text(cfg)
        if key not in seen:
            seen.add(key)
            unique.append(cfg)

    admitted: list[tuple[ArchConfig, CostReport]] = []
    for cfg in unique:
        cost = count_costs(spec, cfg)
        if within_budget(cost, budget):
            admitted.append((cfg, cost))
    if not admitted:
        raise BudgetError(
            f"no candidate out of {len(unique)} unique sampled configs satisfies the budget"
        )

    if isinstance(state, PredictorState):
        if teacher is None:
            raise ValueError("predictor search needs a teacher network")
        scorer = _predictor_scorer(state, teacher, guided)
    elif callable(state):
        scorer = state
    else:
        raise TypeError("state must be a PredictorState or a scorer callable")

    t0 = time.monotonic()
    scores = np.asarray(scorer([cfg for cfg, _ in admitted]), dtype=np.float64)
    total = time.monotonic() - t0
    if scores.shape != (len(admitted),):
        raise DistilnasError("scorer returned wrong number of scores")

    entries = [
        SearchEntry(config=cfg, score=float(s), cost=cost)
        for (cfg, cost), s in zip(admitted, scores)
    ]
    entries.sort(key=lambda e: (-e.score, config_to_text(e.config)))
    return SearchResult(
        entries=entries,
        method=method,
        budget=budget,
        seed=seed,
        n_sampled=n_candidates,
        n_unique=len(unique),
        n_scored=len(admitted),
        total_seconds=total,
        per_arch_seconds=total / len(admitted),
    )


def evaluate_predictor(
    state,
    task,
    n_eval: int = 50,
    cache: TaskFeatureCache | None = None,
    guided: bool = True,
) -> float:
    """SRC between predictions and stored accuracies on the task's first
    ``n_eval`` pairs (a fixed evaluation set; the predictor never trains on
    them)."""
    if len(task.pairs) < n_eval:
        raise ValueError(f"task has {len(task.pairs)} pairs, need {n_eval}")
    pairs = task.pairs[:n_eval]
    configs = [cfg for cfg, _ in pairs]
    actual = np.array([y for _, y in pairs], dtype=np.float64)
    if isinstance(state, PredictorState):
        if cache is None:
            cache = TaskFeatureCache(state.probe())
        params = adapt_to_task(state, task, cache) if guided else None
        preds = predict_batch(state, task, configs, cache, params)
    elif callable(state):
        preds = np.asarray(state(task, configs), dtype=np.float64)
    else:
        raise TypeError("state must be a PredictorState or a scorer callable")
    return spearman(preds, actual)


GRAD_NORM = "grad-norm"
ACTIVATION_OVERLAP = "activation-overlap"
ZERO_COST_METHODS = (GRAD_NORM, ACTIVATION_OVERLAP)


def zero_cost_score(
    method: str,
    spec: SearchSpaceSpec,
    config: ArchConfig,
    batch: ArrayDataset,
    seed: int,
) -> float:
    """Training-free architecture score from one data batch at random init.

    grad-norm: L2 norm of the cross-entropy gradient over conv/linear weight
    tensors (biases and norm parameters excluded, so an all-zero-weight net
    scores exactly 0). activation-overlap: log-determinant of the binary
    activation-pattern kernel over the stage outputs; a singular kernel
    (duplicated patterns) scores -inf.
    """
    if method not in ZERO_COST_METHODS:
        raise ValueError(f"unknown zero-cost method {method!r}; known: {ZERO_COST_METHODS}")
    net = build(spec, config, batch.num_classes, seed)
    net.eval()
    x, y = batch.inputs, batch.labels
    if method == GRAD_NORM:
        weights = [
            m.weight
            for m in net.modules()
            if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear))
        ]
        loss = torch.nn.functional.cross_entropy(net(x), y)
        grads = torch.autograd.grad(loss, weights, allow_unused=True)
        sq = sum(float(g.pow(2).sum()) for g in grads if g is not None)
        return float(np.sqrt(sq))
    with torch.no_grad():
        feats = net.forward_features(x)
        codes = torch.cat([(f > 0).flatten(1) for f in feats], dim=1).float()
    k = codes @ codes.T + (1.0 - codes) @ (1.0 - codes.T)
    sign, logabsdet = torch.linalg.slogdet(k)
    if float(sign) <= 0:
        return float("-inf")
    return float(logabsdet)


def make_zero_cost_scorer(method: str, spec: SearchSpaceSpec, batch: ArrayDataset, seed: int):
    def scorer(configs: list[ArchConfig]) -> np.ndarray:
        return np.array(
            [zero_cost_score(method, spec, cfg, batch, seed) for cfg in configs],
            dtype=np.float64,
        )

    return scorer


def end_to_end(
    state,
    spec: SearchSpaceSpec,
    teacher: StagedNetwork,
    train: ArrayDataset,
    val: ArrayDataset,
    kd: KDConfig,
    n_candidates: int,
    budget: CostBudget | None,
    seed: int,
    method: str = "predictor",
):
    """Search for the top-1 student under budget, distill it from the same
    teacher, and report its accuracy alongside the full search result."""
    if isinstance(state, PredictorState) and not hasattr(teacher, "val_accuracy"):
        from .distill import evaluate

        teacher.val_accuracy = evaluate(teacher, val)
    result = search(state, spec, teacher, n_candidates, budget, seed, method=method)
    student, record = kd_train(spec, result.top.config, teacher, train, val, kd)
    return result, student, record


# --- result files ---------------------------------------------------------


def result_table_text(result: SearchResult) -> str:
    """Deterministic machine-readable ranking (timing goes to the summary,
    not here, so identical runs produce byte-identical files)."""
    lines = [
        "# danas-search-result v1",
        f"# method={result.method} seed={result.seed} "
        f"sampled={result.n_sampled} unique={result.n_unique} scored={result.n_scored}",
        "# budget="
        + (
            f"macs<{result.budget.max_macs},params<{result.budget.max_params}"
            if result.budget
            else "none"
        ),
        "rank\tscore\tmacs\tparams\tconfig",
    ]
    for i, e in enumerate(result.entries, start=1):
        lines.append(f"{i}\t{e.score!r}\t{e.cost.macs}\t{e.cost.params}\t{config_to_text(e.config)}")
    return "\n".join(lines) + "\n"


def result_summary_text(result: SearchResult) -> str:
    top = result.top
    return (
        f"method {result.method}: scored {result.n_scored} candidates "
        f"({result.n_unique} unique of {result.n_sampled} sampled) in "
        f"{result.total_seconds:.3f}s ({result.per_arch_seconds * 1e3:.2f} ms per architecture)\n"
        f"top-1: score {top.score:.6f}, {top.cost.macs} MACs, {top.cost.params} params\n"
        f"  {config_to_text(top.config)}\n"
    )
