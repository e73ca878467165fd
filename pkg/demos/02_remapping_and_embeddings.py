"""Teacher-to-student weight slicing and the probe-based functional embedding.

The remapper copies the leading channels/layers of a trained teacher into any
narrower or shallower student of the same space. The functional embedding then
summarizes what such a network computes: a fixed noise image goes through the
net and the last stage's pooled features come out.
"""
import numpy as np
import torch

from distilnas.space import SearchSpaceSpec, config_to_text, largest, sample_many
from distilnas.nets import build, parameter_table
from distilnas.remap import remap, remap_to_net, validate_remap_feasibility
from distilnas.encoding import make_probe, pooled_probe_feature

SPEC = SearchSpaceSpec(
    num_stages=2, depth_choices=(1, 2, 3), base_widths=(8, 16),
    ratio_choices=(0.25, 0.5, 1.0), max_layers_per_stage=3,
    input_shape=(3, 16, 16),
)


def main():
    teacher = build(SPEC, largest(SPEC), num_classes=4, rng_seed=0)
    print(f"teacher: {config_to_text(teacher.config)}")

    for cfg in sample_many(SPEC, 6, rng_seed=3):
        ok, problems = validate_remap_feasibility(SPEC, teacher.config, cfg)
        if not ok:
            print(f"  skip  {config_to_text(cfg)}  ({problems[0]})")
            continue
        table = remap(teacher, cfg)
        n = sum(t.numel() for t in table.values())
        print(f"  remap {config_to_text(cfg)}  {n:,} values copied")

        # spot-check: the student's first stem channel is the teacher's
        stem_s = table["stem.0.weight"]
        stem_t = parameter_table(teacher)["stem.0.weight"]
        assert torch.equal(stem_s, stem_t[: stem_s.shape[0]])

    probe = make_probe(SPEC, seed=1)
    print("\nfunctional embeddings (pooled probe features, first 4 dims):")
    table_t = parameter_table(teacher)
    h_t = pooled_probe_feature(SPEC, teacher.config, table_t, probe, 4)
    print(f"  teacher            {np.round(h_t[:4].numpy(), 3)}")
    for cfg in sample_many(SPEC, 3, rng_seed=4):
        ok, _ = validate_remap_feasibility(SPEC, teacher.config, cfg)
        if not ok:
            continue
        student = remap_to_net(teacher, cfg)
        h_s = pooled_probe_feature(SPEC, cfg, parameter_table(student), probe, 4)
        print(f"  {config_to_text(cfg):<18} {np.round(h_s[:4].numpy(), 3)}")
    print("distinct students produce distinct feature vectors; the identity")
    print("student (same config as the teacher) would reproduce the teacher's.")


if __name__ == "__main__":
    main()
