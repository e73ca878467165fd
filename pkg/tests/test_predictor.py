import copy
import math

import numpy as np
import pytest
import torch

from distilnas.predictor import (
    AdaptationError,
    MetaTrainSchedule,
    TaskFeatureCache,
    adapt_params,
    adapt_to_task,
    adapt_to_unseen,
    forward_with,
    init_state,
    inner_adapt,
    load_predictor_checkpoint,
    meta_step_core,
    meta_train,
    predict,
    predict_batch,
    save_predictor_checkpoint,
    two_level_loss,
)
from distilnas.errors import CheckpointError
from distilnas.space import largest, sample_many
from distilnas.taskdb import split_tasks


# ----------------------------------------------------- adaptation core


def test_one_step_adaptation_hand_value():
    """f(w) = w, target 0, w0 = 1, step 0.1: loss grad is 2w, so w1 = 0.8."""
    params = {"w": torch.tensor(1.0, dtype=torch.float64, requires_grad=True)}
    alpha = {"w": torch.tensor(0.1, dtype=torch.float64)}
    loss = lambda p: (p["w"] - 0.0) ** 2
    adapted = adapt_params(params, alpha, loss, steps=1, second_order=False)
    assert adapted["w"].item() == pytest.approx(0.8, abs=1e-15)


def test_two_step_adaptation_hand_value():
    # w1 = 0.8, w2 = 0.8 - 0.1 * 1.6 = 0.64
    params = {"w": torch.tensor(1.0, dtype=torch.float64, requires_grad=True)}
    alpha = {"w": torch.tensor(0.1, dtype=torch.float64)}
    loss = lambda p: p["w"] ** 2
    adapted = adapt_params(params, alpha, loss, steps=2, second_order=False)
    assert adapted["w"].item() == pytest.approx(0.64, rel=1e-12)


def test_zero_alpha_is_identity():
    params = {"w": torch.randn(4, requires_grad=True)}
    alpha = {"w": torch.zeros(4)}
    loss = lambda p: (p["w"] ** 2).sum()
    adapted = adapt_params(params, alpha, loss, steps=1)
    assert torch.equal(adapted["w"], params["w"])


def test_zero_steps_returns_inputs():
    params = {"w": torch.randn(2, requires_grad=True)}
    alpha = {"w": torch.full((2,), 0.5)}
    adapted = adapt_params(params, alpha, lambda p: (p["w"] ** 2).sum(), steps=0)
    assert adapted["w"] is params["w"]


def test_unused_param_passes_through():
    params = {
        "used": torch.tensor(2.0, requires_grad=True),
        "idle": torch.tensor(3.0, requires_grad=True),
    }
    alpha = {k: torch.tensor(0.5) for k in params}
    adapted = adapt_params(params, alpha, lambda p: p["used"] ** 2, steps=1)
    assert adapted["used"].item() == pytest.approx(2.0 - 0.5 * 4.0)
    assert adapted["idle"] is params["idle"]


def test_nonfinite_gradient_raises():
    params = {"w": torch.tensor(0.0, requires_grad=True)}
    alpha = {"w": torch.tensor(0.1)}
    # sqrt has an infinite slope at zero
    loss = lambda p: p["w"].sqrt()
    with pytest.raises(AdaptationError):
        adapt_params(params, alpha, loss, steps=1)


# -------------------------------------------- finite-difference oracles


def _toy_two_level(dtype=torch.float64):
    """4-parameter linear model with fixed support/query regression data."""
    g = torch.Generator().manual_seed(0)
    xs = torch.randn(6, 3, generator=g, dtype=dtype)
    ys = torch.randn(6, generator=g, dtype=dtype)
    xq = torch.randn(5, 3, generator=g, dtype=dtype)
    yq = torch.randn(5, generator=g, dtype=dtype)
    support = lambda p: ((xs @ p["w"] + p["b"] - ys) ** 2).mean()
    query = lambda p: ((xq @ p["w"] + p["b"] - yq) ** 2).mean()
    params = {
        "w": torch.tensor([0.3, -0.2, 0.5], dtype=dtype, requires_grad=True),
        "b": torch.tensor([0.1], dtype=dtype, requires_grad=True),
    }
    alpha = {
        "w": torch.tensor([0.05, 0.02, 0.08], dtype=dtype, requires_grad=True),
        "b": torch.tensor([0.03], dtype=dtype, requires_grad=True),
    }
    return params, alpha, support, query


def _fd_grad(fn, leaf: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    out = torch.zeros_like(leaf)
    flat = leaf.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
        up = fn().item()
        with torch.no_grad():
            flat[i] = orig - eps
        dn = fn().item()
        with torch.no_grad():
            flat[i] = orig
        out.view(-1)[i] = (up - dn) / (2 * eps)
    return out


def _assert_close_rel(got: torch.Tensor, want: torch.Tensor, rel: float = 1e-3):
    denom = want.abs().clamp_min(1.0)
    assert ((got - want).abs() / denom).max().item() <= rel, (got, want)


def test_support_loss_gradient_matches_fd():
    params, alpha, support, _ = _toy_two_level()
    grads = torch.autograd.grad(support(params), [params["w"], params["b"]])
    _assert_close_rel(grads[0], _fd_grad(lambda: support(params), params["w"]))
    _assert_close_rel(grads[1], _fd_grad(lambda: support(params), params["b"]))


def test_outer_gradient_matches_fd_through_adaptation():
    """Total derivative of the post-adaptation query loss, wrt both the
    initialization and the per-parameter step sizes."""
    params, alpha, support, query = _toy_two_level()
    outer = two_level_loss(params, alpha, support, query, steps=1, second_order=True)
    leaves = [params["w"], params["b"], alpha["w"], alpha["b"]]
    grads = torch.autograd.grad(outer, leaves)

    recompute = lambda: two_level_loss(params, alpha, support, query, steps=1, second_order=True)
    for leaf, g in zip(leaves, grads):
        _assert_close_rel(g, _fd_grad(recompute, leaf))


def test_outer_gradient_matches_fd_two_inner_steps():
    params, alpha, support, query = _toy_two_level()
    recompute = lambda: two_level_loss(params, alpha, support, query, steps=2, second_order=True)
    outer = recompute()
    leaves = [params["w"], alpha["w"]]
    grads = torch.autograd.grad(outer, leaves)
    for leaf, g in zip(leaves, grads):
        _assert_close_rel(g, _fd_grad(recompute, leaf))


def test_first_order_drops_trajectory_terms():
    """With second_order=False the alpha gradient keeps only the direct
    -grad term; verify it differs from the exact one on a curved loss."""
    params, alpha, support, query = _toy_two_level()
    exact = two_level_loss(params, alpha, support, query, steps=1, second_order=True)
    g_exact = torch.autograd.grad(exact, params["w"], retain_graph=False)[0]
    approx = two_level_loss(params, alpha, support, query, steps=1, second_order=False)
    g_approx = torch.autograd.grad(approx, params["w"])[0]
    assert not torch.allclose(g_exact, g_approx)


# --------------------------------------------------- degenerate settings


def test_zero_inner_steps_equals_plain_regression():
    """meta_step_core with steps=0 must trace the exact same parameter
    trajectory as a hand-written Adam regression on the query losses."""

    def fresh():
        g = torch.Generator().manual_seed(1)
        params = {"w": torch.randn(3, generator=g, requires_grad=True)}
        alpha = {"w": torch.zeros(3, requires_grad=True)}
        data = [
            (torch.randn(4, 3, generator=g), torch.randn(4, generator=g))
            for _ in range(3)
        ]
        return params, alpha, data

    def task_fns(data):
        out = []
        for x, y in data:
            fn = lambda p, x=x, y=y: ((x @ p["w"] - y) ** 2).mean()
            out.append((fn, fn))
        return out

    params_a, alpha_a, data_a = fresh()
    opt_a = torch.optim.Adam(list(params_a.values()) + list(alpha_a.values()), lr=1e-2)
    trail_a = []
    for _ in range(10):
        meta_step_core(params_a, alpha_a, task_fns(data_a), opt_a, steps=0)
        trail_a.append(params_a["w"].detach().clone())

    params_b, _, data_b = fresh()
    opt_b = torch.optim.Adam([params_b["w"]], lr=1e-2)
    trail_b = []
    for _ in range(10):
        opt_b.zero_grad()
        loss = torch.stack([fn(params_b) for fn, _ in task_fns(data_b)]).mean()
        loss.backward()
        opt_b.step()
        trail_b.append(params_b["w"].detach().clone())

    for a, b in zip(trail_a, trail_b):
        assert torch.equal(a, b)


def test_zero_alpha_makes_guided_equal_unguided(trained_state, tiny_spec):
    state, _, _, held = trained_state
    task = held[0]
    frozen = copy.deepcopy(state)
    for a in frozen.alpha.values():
        with torch.no_grad():
            a.zero_()
    cache = TaskFeatureCache(frozen.probe())
    adapted = adapt_to_task(frozen, task, cache)
    configs = [p[0] for p in task.pairs[:10]]
    guided = predict_batch(frozen, task, configs, cache, params=adapted)
    plain = predict_batch(frozen, task, configs, cache, params=None)
    np.testing.assert_array_equal(guided, plain)


# ----------------------------------------------------- end-to-end pieces


def test_init_state_deterministic(tiny_spec):
    a = init_state(tiny_spec, embed_dim=8, hidden_dim=16, fused_dim=8, rng_seed=5)
    b = init_state(tiny_spec, embed_dim=8, hidden_dim=16, fused_dim=8, rng_seed=5)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)
    assert all(torch.equal(x, y) for x, y in zip(a.alpha.values(), b.alpha.values()))


def test_alpha_covers_every_parameter(tiny_spec):
    state = init_state(tiny_spec, embed_dim=8, hidden_dim=16, fused_dim=8)
    names = {n for n, _ in state.model.named_parameters()}
    assert set(state.alpha) == names
    for a in state.alpha.values():
        assert a.requires_grad


def test_predict_deterministic_and_finite(trained_state, tiny_spec):
    state, _, train, _ = trained_state
    task = train[0]
    teacher = task.load_teacher()
    cfg = task.pairs[0][0]
    p1 = predict(state, cfg, teacher, state.probe())
    p2 = predict(state, cfg, teacher, state.probe())
    assert p1 == p2
    assert math.isfinite(p1)


def test_inner_adaptation_descends_support_loss(trained_state, tiny_spec):
    """One guided step must not increase the teacher-as-student error."""
    state, _, _, held = trained_state
    for task in held:
        teacher = task.load_teacher()
        probe = state.probe()
        y = task.teacher_accuracy
        before = (predict(state, task.teacher_config, teacher, probe) - y) ** 2
        adapted = inner_adapt(state, teacher, y, probe)
        after = (predict(state, task.teacher_config, teacher, probe, params=adapted) - y) ** 2
        assert after <= before + 1e-12


def test_adapted_params_are_detached(trained_state):
    state, _, _, held = trained_state
    task = held[0]
    adapted = inner_adapt(state, task.load_teacher(), task.teacher_accuracy, state.probe())
    assert all(not t.requires_grad for t in adapted.values())
    assert set(adapted) == set(state.alpha)


def test_meta_train_zero_iterations_is_identity(synth_db, tiny_spec):
    header, tasks, _ = synth_db
    train, held = split_tasks(header, tasks)
    state = init_state(tiny_spec, embed_dim=8, hidden_dim=16, fused_dim=8, probe_seed=header.probe_seed)
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    out, history = meta_train(state, train, held, MetaTrainSchedule(iterations=0))
    for n, p in out.model.named_parameters():
        assert torch.equal(p, before[n])
    assert history.outer_losses == []


def test_meta_train_deterministic(synth_db, tiny_spec):
    header, tasks, _ = synth_db
    train, held = split_tasks(header, tasks)
    runs = []
    for _ in range(2):
        state = init_state(tiny_spec, embed_dim=8, hidden_dim=16, fused_dim=8,
                           probe_seed=header.probe_seed, rng_seed=1)
        _, history = meta_train(
            state, train, held,
            MetaTrainSchedule(iterations=12, meta_batch=3, query_pairs=10, val_interval=6, seed=2),
        )
        runs.append(history)
    assert runs[0].outer_losses == runs[1].outer_losses
    assert runs[0].val_src == runs[1].val_src


def test_meta_train_reduces_outer_loss(trained_state):
    _, history, _, _ = trained_state
    head = float(np.mean(history.outer_losses[:10]))
    tail = float(np.mean(history.outer_losses[-10:]))
    assert tail < 0.5 * head


def test_meta_train_tracks_best_validation(trained_state):
    _, history, _, _ = trained_state
    assert history.best_src == max(history.val_src)
    assert history.best_iter in history.val_iters


def test_meta_train_empty_tasks_raises(tiny_spec):
    state = init_state(tiny_spec, embed_dim=8, hidden_dim=16, fused_dim=8)
    with pytest.raises(ValueError):
        meta_train(state, [], [], MetaTrainSchedule(iterations=1))


def test_zeroed_head_predicts_its_bias(trained_state):
    state, _, train, _ = trained_state
    frozen = copy.deepcopy(state)
    with torch.no_grad():
        frozen.model.head.weight.zero_()
        frozen.model.head.bias.fill_(0.37)
    task = train[0]
    teacher = task.load_teacher()
    for cfg in [p[0] for p in task.pairs[:5]]:
        assert predict(frozen, cfg, teacher, frozen.probe()) == pytest.approx(0.37, abs=1e-6)


def test_prediction_independent_of_batch_composition(trained_state):
    """Scores are per-pair; duplicating a pair in the batch changes nothing."""
    state, _, train, _ = trained_state
    task = train[1]
    cache = TaskFeatureCache(state.probe())
    configs = [p[0] for p in task.pairs[:6]]
    solo = predict_batch(state, task, configs, cache)
    doubled = predict_batch(state, task, [configs[0]] + configs, cache)
    np.testing.assert_array_equal(solo, doubled[1:])
    assert doubled[0] == solo[0]
    assert list(np.argsort(solo)) == list(np.argsort(doubled[1:]))


def test_adapt_to_unseen_measures_teacher_accuracy(trained_state, tiny_spec):
    state, _, train, _ = trained_state
    teacher = train[0].load_teacher()
    g = torch.Generator().manual_seed(0)
    val_x = torch.randn(32, *tiny_spec.input_shape, generator=g)
    with torch.no_grad():
        val_y = teacher(val_x).argmax(dim=1)
    adapted, acc = adapt_to_unseen(state, teacher, val_x, val_y, state.probe())
    assert acc == 1.0  # labels came from the teacher itself
    assert set(adapted) == set(state.alpha)
    with pytest.raises(ValueError):
        adapt_to_unseen(state, teacher, val_x[:0], val_y[:0], state.probe())


def test_predictor_checkpoint_roundtrip(tmp_path, trained_state):
    state, _, train, _ = trained_state
    path = tmp_path / "pred.pt"
    save_predictor_checkpoint(path, state, metadata={"stage": "test"})
    loaded, manifest = load_predictor_checkpoint(path)
    task = train[0]
    teacher = task.load_teacher()
    cfg = task.pairs[0][0]
    assert predict(loaded, cfg, teacher, loaded.probe()) == predict(state, cfg, teacher, state.probe())
    for name in state.alpha:
        assert torch.equal(loaded.alpha[name], state.alpha[name])
    assert manifest["metadata"]["stage"] == "test"
    assert manifest["inner_steps"] == state.inner_steps


def test_predictor_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="no such checkpoint"):
        load_predictor_checkpoint(tmp_path / "nope.pt")
