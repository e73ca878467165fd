"""The whole workflow on one generated image dataset, end to end.

Classes are split into disjoint groups; each group becomes a task with its own
trained teacher and a few distilled students. The predictor meta-trains on
four of the groups, adapts to the held-out one with a single guided step, and
its searched student is distilled for real and compared against random picks.

Budget about two minutes on one CPU core.
"""
import statistics
import tempfile
import time

import numpy as np
import torch

torch.set_num_threads(1)

from distilnas.space import (
    CostBudget, SearchSpaceSpec, config_to_text, count_costs, largest, within_budget,
)
from distilnas.datasets import (
    materialize_split, plan_splits, synthetic_image_classification,
)
from distilnas.taskdb import build_db, load_db, split_tasks
from distilnas.distill import KDConfig, kd_train
from distilnas.predictor import MetaTrainSchedule, init_state, meta_train
from distilnas.evalsearch import end_to_end

SPEC = SearchSpaceSpec(
    num_stages=2, depth_choices=(1, 2), base_widths=(8, 16),
    ratio_choices=(0.25, 0.5, 1.0), max_layers_per_stage=2,
    input_shape=(3, 16, 16),
)


def main():
    t0 = time.monotonic()
    ds = synthetic_image_classification(num_classes=20, per_class=80, image_size=16,
                                        noise=1.0, templates_per_class=4, seed=0)
    plan = plan_splits(ds, num_splits=5, seed=0, train_splits=4, val_fraction=0.2)
    kd = KDConfig(temperature=6.0, alpha=0.5, epochs=10, lr=5e-2, batch_size=8, seed=0)

    with tempfile.TemporaryDirectory() as tmp:
        db = f"{tmp}/tasks.db"
        print("building the task database (5 teachers, 10 epochs each, 8 distilled students per split)")
        build_db(db, SPEC, ds, plan, pool_size=30, pairs_per_task=8,
                 teacher_epochs=10, kd=kd, seed=0, batch_size=8,
                 log_fn=lambda m: print("  " + m))
        header, tasks = load_db(db)
        train_tasks, held_tasks = split_tasks(header, tasks)
        held = held_tasks[0]
        print(f"done in {time.monotonic() - t0:.0f}s; held-out task {held.name} "
              f"(teacher acc {held.teacher_accuracy:.3f})")

        state = init_state(SPEC, embed_dim=16, hidden_dim=32, fused_dim=16,
                           probe_seed=header.probe_seed, rng_seed=0)
        state, _ = meta_train(
            state, train_tasks, held_tasks,
            MetaTrainSchedule(iterations=300, meta_batch=4, query_pairs=8,
                              val_interval=100, seed=0))

        teacher = held.load_teacher()
        train, val = materialize_split(ds, plan, held.split_id)
        teacher_macs = count_costs(SPEC, largest(SPEC), num_classes=train.num_classes).macs
        budget = CostBudget(max_macs=int(0.70 * teacher_macs))

        print("\nsearching 100 candidates under the MACs budget, then distilling the pick")
        result, student, record = end_to_end(
            state, SPEC, teacher, train, val, kd,
            n_candidates=100, budget=budget, seed=0)
        print(f"  searched: {record.config_text}")
        print(f"  distilled accuracy {record.accuracy:.3f} "
              f"(teacher {held.teacher_accuracy:.3f}, "
              f"{result.top.cost.macs / teacher_macs:.2f}x teacher MACs)")

        rng = np.random.default_rng(1)
        picks = rng.choice(len(result.entries), size=3, replace=False)
        baseline = []
        print("\nthree random budget-satisfying students for comparison:")
        for i in picks:
            _, rec = kd_train(SPEC, result.entries[int(i)].config, teacher, train, val, kd)
            baseline.append(rec.accuracy)
            print(f"  {rec.config_text:<40} {rec.accuracy:.3f}")
        print(f"\nsearched {record.accuracy:.3f} vs random median "
              f"{statistics.median(baseline):.3f}; total {time.monotonic() - t0:.0f}s")


if __name__ == "__main__":
    main()
