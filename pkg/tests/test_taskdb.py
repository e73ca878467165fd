import json
import math
import os

import numpy as np
import pytest
import torch

from distilnas.datasets import plan_splits, synthetic_image_classification
from distilnas.distill import KDConfig
from distilnas.errors import TaskDBError
from distilnas.remap import validate_remap_feasibility
from distilnas.space import largest, spec_to_text
from distilnas.taskdb import (
    build_db,
    cost_feature_vector,
    format_accuracy,
    load_db,
    make_synthetic_db,
    oracle_teacher_accuracy,
    recompute_synthetic_accuracies,
    split_tasks,
    standardized_signature,
    teacher_signature,
)


def test_format_accuracy_six_decimals():
    assert format_accuracy(0.5) == "0.500000"
    assert format_accuracy(0.1234567) == "0.123457"
    assert format_accuracy(1.0) == "1.000000"
    with pytest.raises(TaskDBError):
        format_accuracy(1.2)
    with pytest.raises(TaskDBError):
        format_accuracy(-0.01)


# ----------------------------------------------------------- synthetic db


def test_synthetic_db_roundtrip(synth_db, tiny_spec):
    header, tasks, path = synth_db
    assert header.kind == "synthetic"
    assert header.spec == tiny_spec
    assert len(tasks) == 10
    assert header.train_tasks == 8
    train, held = split_tasks(header, tasks)
    assert len(train) == 8 and len(held) == 2
    for task in tasks:
        assert len(task.pairs) == 60
        assert task.teacher_config == largest(tiny_spec)
        for cfg, acc in task.pairs:
            assert 0.0 <= acc <= 1.0
            ok, _ = validate_remap_feasibility(tiny_spec, task.teacher_config, cfg)
            assert ok


def test_synthetic_accuracies_recompute_bit_exactly(synth_db):
    """The header stores the full oracle; accuracies must regenerate from it
    byte for byte, text against text."""
    header, tasks, path = synth_db
    raw_lines = open(path).read().splitlines()[1:]
    for task, line in zip(tasks, raw_lines):
        want = [pair[1] for pair in json.loads(line)["pairs"]]
        got = recompute_synthetic_accuracies(header, task)
        assert got == want


def test_synthetic_teacher_accuracy_is_noise_free_oracle(synth_db, tiny_spec):
    header, tasks, _ = synth_db
    oracle = header.extras["oracle"]
    for i, task in enumerate(tasks):
        t_hat = standardized_signature(oracle, oracle["raw_signatures"][i])
        want = oracle_teacher_accuracy(oracle, tiny_spec, t_hat, task.teacher_config)
        assert format_accuracy(want) == format_accuracy(task.teacher_accuracy)


def test_synthetic_db_file_uses_six_decimal_text(synth_db):
    _, _, path = synth_db
    body = open(path).read().splitlines()[1:]
    for line in body:
        rec = json.loads(line)
        for _, acc in rec["pairs"]:
            assert isinstance(acc, str)
            int_part, frac = acc.split(".")
            assert len(frac) == 6


def test_synthetic_db_seed_changes_everything(tmp_path, tiny_spec):
    a = tmp_path / "a.db"
    b = tmp_path / "b.db"
    make_synthetic_db(a, num_tasks=4, spec=tiny_spec, oracle_seed=1, pairs_per_task=5, pool_size=20)
    make_synthetic_db(b, num_tasks=4, spec=tiny_spec, oracle_seed=2, pairs_per_task=5, pool_size=20)
    _, tasks_a = load_db(a)
    _, tasks_b = load_db(b)
    accs_a = [acc for t in tasks_a for _, acc in t.pairs]
    accs_b = [acc for t in tasks_b for _, acc in t.pairs]
    assert accs_a != accs_b


def test_synthetic_db_deterministic(tmp_path, tiny_spec):
    a = tmp_path / "a.db"
    b = tmp_path / "b.db"
    for p in (a, b):
        make_synthetic_db(p, num_tasks=3, spec=tiny_spec, oracle_seed=9, pairs_per_task=4, pool_size=12)
    assert a.read_bytes() == b.read_bytes()


def test_synthetic_db_pool_too_small(tmp_path, micro_spec):
    with pytest.raises(TaskDBError, match="pool"):
        make_synthetic_db(tmp_path / "x.db", num_tasks=2, spec=micro_spec,
                          oracle_seed=0, pairs_per_task=5, pool_size=5)


def test_teacher_signature_deterministic(tiny_spec):
    cfg = largest(tiny_spec)
    a = teacher_signature(tiny_spec, cfg, seed=3, num_classes=2, probe_seed=77)
    b = teacher_signature(tiny_spec, cfg, seed=3, num_classes=2, probe_seed=77)
    c = teacher_signature(tiny_spec, cfg, seed=4, num_classes=2, probe_seed=77)
    assert a == b
    assert a != c
    assert math.isfinite(a)


def test_standardized_signature_centered_and_bounded():
    oracle = {"sig_center": 0.5, "sig_scale": 0.1}
    assert standardized_signature(oracle, 0.5) == 0.0
    assert -1.0 < standardized_signature(oracle, 10.0) <= 1.0
    assert standardized_signature(oracle, 10.0) == pytest.approx(1.0, abs=1e-6)
    assert standardized_signature(oracle, 0.6) == pytest.approx(math.tanh(1.0))


def test_cost_feature_vector_normalized(tiny_spec):
    top = cost_feature_vector(tiny_spec, largest(tiny_spec))
    np.testing.assert_allclose(top, np.ones(4), atol=1e-12)
    from distilnas.space import sample

    for s in range(5):
        v = cost_feature_vector(tiny_spec, sample(tiny_spec, rng_seed=s))
        assert v.shape == (4,)
        assert (v > 0).all() and (v <= 1).all()


# ------------------------------------------------------------- bad files


def _header_line(tiny_spec, kind="synthetic"):
    return json.dumps({
        "schema": "danas-taskdb", "version": 1, "kind": kind,
        "spec_text": spec_to_text(tiny_spec), "train_tasks": 1, "probe_seed": 77,
        "num_classes": 2,
    })


def test_load_db_missing_file(tmp_path):
    with pytest.raises(TaskDBError):
        load_db(tmp_path / "none.db")


def test_load_db_names_corrupt_line(tmp_path, synth_db):
    _, _, path = synth_db
    lines = open(path).read().splitlines()
    bad = tmp_path / "bad.db"
    bad.write_text("\n".join(lines[:3] + ["{not json"] + lines[4:]) + "\n")
    with pytest.raises(TaskDBError, match="line 4"):
        load_db(bad)


def test_load_db_rejects_wrong_schema(tmp_path, tiny_spec):
    p = tmp_path / "w.db"
    hdr = json.loads(_header_line(tiny_spec))
    hdr["schema"] = "something-else"
    p.write_text(json.dumps(hdr) + "\n")
    with pytest.raises(TaskDBError, match="schema"):
        load_db(p)


def test_load_db_rejects_out_of_range_accuracy(tmp_path, synth_db):
    _, _, path = synth_db
    lines = open(path).read().splitlines()
    rec = json.loads(lines[1])
    rec["pairs"][0][1] = "1.500000"
    bad = tmp_path / "r.db"
    bad.write_text("\n".join([lines[0], json.dumps(rec)] + lines[2:]) + "\n")
    with pytest.raises(TaskDBError):
        load_db(bad)


def test_load_db_rejects_dangling_teacher(tmp_path, mini_build):
    import shutil

    path, _, _, _ = mini_build
    bad = tmp_path / path.name
    shutil.copy(path, bad)
    shutil.copytree(str(path) + ".teachers", str(bad) + ".teachers")
    load_db(bad)  # intact copy loads fine
    lines = bad.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["teacher_ref"] = rec["teacher_ref"].rsplit("/", 1)[0] + "/gone.pt"
    bad.write_text("\n".join([lines[0], json.dumps(rec)] + lines[2:]) + "\n")
    with pytest.raises(TaskDBError, match="dangling teacher"):
        load_db(bad)


def test_load_db_empty_file(tmp_path):
    p = tmp_path / "e.db"
    p.write_text("")
    with pytest.raises(TaskDBError):
        load_db(p)


# ---------------------------------------------------------- distilled db


@pytest.fixture(scope="module")
def mini_build(tmp_path_factory, tiny_spec):
    """A real (trained) database at the smallest useful scale."""
    root = tmp_path_factory.mktemp("realdb")
    ds = synthetic_image_classification(num_classes=4, per_class=12, image_size=16, seed=0)
    plan = plan_splits(ds, num_splits=2, seed=0)
    kd = KDConfig(epochs=1, batch_size=16, seed=0)
    path = root / "real.db"
    build_db(path, tiny_spec, ds, plan, pool_size=6, pairs_per_task=2,
             teacher_epochs=1, kd=kd, seed=0, batch_size=16)
    return path, ds, plan, kd


def test_build_db_loads_and_validates(mini_build, tiny_spec):
    path, _, _, _ = mini_build
    header, tasks = load_db(path)
    assert header.kind == "distilled"
    assert len(tasks) == 2
    for task in tasks:
        assert task.num_classes == 2
        assert len(task.pairs) == 2
        for cfg, acc in task.pairs:
            assert 0.0 <= acc <= 1.0
            ok, _ = validate_remap_feasibility(tiny_spec, task.teacher_config, cfg)
            assert ok
        net = task.load_teacher()
        assert net.val_accuracy == task.teacher_accuracy


def test_build_db_teacher_checkpoints_exist(mini_build):
    path, _, _, _ = mini_build
    tdir = str(path) + ".teachers"
    names = os.listdir(tdir)
    assert len(names) == 2
    assert all(n.endswith(".pt") for n in names)


def test_build_db_resumes_without_retraining(tmp_path, tiny_spec, monkeypatch):
    """Kill the build mid-flight; the rerun must redo nothing and produce a
    byte-identical database."""
    import distilnas.taskdb as taskdb_mod

    ds = synthetic_image_classification(num_classes=4, per_class=12, image_size=16, seed=0)
    plan = plan_splits(ds, num_splits=2, seed=0)
    kd = KDConfig(epochs=1, batch_size=16, seed=0)

    # same basename in sibling dirs: teacher refs are db-relative paths
    (tmp_path / "one").mkdir()
    (tmp_path / "two").mkdir()
    ref = tmp_path / "one" / "tasks.db"
    build_db(ref, tiny_spec, ds, plan, pool_size=6, pairs_per_task=2,
             teacher_epochs=1, kd=kd, seed=0, batch_size=16)

    target = tmp_path / "two" / "tasks.db"
    real_kd_train = taskdb_mod.kd_train
    calls = {"n": 0}

    def dying_kd_train(*args, **kwargs):
        if calls["n"] >= 1:
            raise KeyboardInterrupt
        calls["n"] += 1
        return real_kd_train(*args, **kwargs)

    monkeypatch.setattr(taskdb_mod, "kd_train", dying_kd_train)
    with pytest.raises(KeyboardInterrupt):
        build_db(target, tiny_spec, ds, plan, pool_size=6, pairs_per_task=2,
                 teacher_epochs=1, kd=kd, seed=0, batch_size=16)
    assert not target.exists()  # final file only appears on success

    resumed = {"n": 0}

    def counting_kd_train(*args, **kwargs):
        resumed["n"] += 1
        return real_kd_train(*args, **kwargs)

    monkeypatch.setattr(taskdb_mod, "kd_train", counting_kd_train)
    build_db(target, tiny_spec, ds, plan, pool_size=6, pairs_per_task=2,
             teacher_epochs=1, kd=kd, seed=0, batch_size=16)
    # 2 splits x 2 pairs = 4 distillations total, one already journaled
    assert resumed["n"] == 3
    assert target.read_bytes() == ref.read_bytes()


def test_build_db_rerun_after_success_is_noop(mini_build, tiny_spec, monkeypatch):
    import distilnas.taskdb as taskdb_mod

    path, ds, plan, kd = mini_build
    before = path.read_bytes()

    def exploding(*args, **kwargs):
        raise AssertionError("no training may happen on a finished database")

    monkeypatch.setattr(taskdb_mod, "kd_train", exploding)
    monkeypatch.setattr(taskdb_mod, "train_supervised", exploding)
    build_db(path, tiny_spec, ds, plan, pool_size=6, pairs_per_task=2,
             teacher_epochs=1, kd=kd, seed=0, batch_size=16)
    assert path.read_bytes() == before
