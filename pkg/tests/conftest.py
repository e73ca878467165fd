import numpy as np
import pytest
import torch

# single-thread keeps timings comparable and results reproducible on any box
torch.set_num_threads(1)

from distilnas.space import ArchConfig, SearchSpaceSpec, default_spec


@pytest.fixture(scope="session")
def tiny_spec() -> SearchSpaceSpec:
    """Two-stage space with 169 distinct configs; small enough to enumerate."""
    return SearchSpaceSpec(
        num_stages=2,
        depth_choices=(1, 2, 3),
        base_widths=(8, 16),
        ratio_choices=(0.25, 0.5, 1.0),
        max_layers_per_stage=3,
        input_shape=(3, 16, 16),
    )


@pytest.fixture(scope="session")
def micro_spec() -> SearchSpaceSpec:
    # one stage, one block, one width: smallest net the space can express
    return SearchSpaceSpec(
        num_stages=1,
        depth_choices=(1,),
        base_widths=(4,),
        ratio_choices=(1.0,),
        max_layers_per_stage=1,
        input_shape=(3, 8, 8),
    )


@pytest.fixture(scope="session")
def full_spec() -> SearchSpaceSpec:
    return default_spec()


def enumerate_configs(spec: SearchSpaceSpec) -> list[ArchConfig]:
    """Every valid config of a spec, in a deterministic order."""
    import itertools

    per_stage = []
    for _ in range(spec.num_stages):
        options = []
        for d in spec.depth_choices:
            free = [spec.ratio_choices] * (d - 1)
            for combo in itertools.product(*free):
                options.append((d, tuple(combo) + (1.0,)))
        per_stage.append(options)
    configs = []
    for pick in itertools.product(*per_stage):
        depths = tuple(p[0] for p in pick)
        ratios = tuple(p[1] for p in pick)
        configs.append(ArchConfig(depths=depths, ratios=ratios))
    return configs


@pytest.fixture(scope="session")
def synth_db(tmp_path_factory, tiny_spec):
    """10-task synthetic database shared by predictor and search tests."""
    from distilnas.taskdb import load_db, make_synthetic_db

    path = tmp_path_factory.mktemp("db") / "synth.db"
    make_synthetic_db(
        path, num_tasks=10, spec=tiny_spec, oracle_seed=3,
        pairs_per_task=60, pool_size=80,
    )
    header, tasks = load_db(path)
    return header, tasks, path


@pytest.fixture(scope="session")
def trained_state(synth_db, tiny_spec):
    """Predictor meta-trained for 150 iterations on the shared database."""
    from distilnas.predictor import MetaTrainSchedule, init_state, meta_train
    from distilnas.taskdb import split_tasks

    header, tasks, _ = synth_db
    train, held = split_tasks(header, tasks)
    state = init_state(
        tiny_spec, embed_dim=16, hidden_dim=32, fused_dim=16,
        probe_seed=header.probe_seed, rng_seed=0,
    )
    state, history = meta_train(
        state, train, held,
        MetaTrainSchedule(iterations=150, meta_batch=8, query_pairs=30, val_interval=50, seed=0),
    )
    return state, history, train, held


def nested_student(spec: SearchSpaceSpec, teacher_cfg: ArchConfig, rng: np.random.Generator) -> ArchConfig:
    """Random config positionally contained in teacher_cfg.

    Keeps per-stage depth <= teacher depth and shrinks ratios only at
    positions where the teacher ratio stays an upper bound; the pinned
    final 1.0 forces the matched teacher position to hold ratio 1.0,
    which is guaranteed when the truncated depth equals the teacher's
    or the teacher ratio there is already 1.0.
    """
    depths = []
    ratios = []
    for m in range(spec.num_stages):
        t_d = teacher_cfg.depths[m]
        t_r = teacher_cfg.ratios[m]
        # candidate depths whose last matched position carries ratio 1.0;
        # d == t_d always qualifies because the teacher's own last is pinned
        okay = [d for d in spec.depth_choices if d <= t_d and t_r[d - 1] == 1.0]
        d = int(rng.choice(okay))
        row = []
        for o in range(d - 1):
            below = [r for r in spec.ratio_choices if r <= t_r[o]]
            row.append(float(rng.choice(below)))
        row.append(1.0)
        depths.append(d)
        ratios.append(tuple(row))
    return ArchConfig(depths=tuple(depths), ratios=tuple(ratios))
