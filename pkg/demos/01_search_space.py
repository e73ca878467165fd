"""Tour of the factorized student space: sampling, encoding, costs, budgets.

Run from the repo root:

    python3 demos/01_search_space.py
"""
import numpy as np

from distilnas.space import (
    CostBudget,
    SearchSpaceSpec,
    config_from_text,
    config_to_text,
    count_costs,
    decode_onehot,
    default_spec,
    encode_onehot,
    largest,
    sample_many,
    within_budget,
)


def main():
    spec = default_spec()
    print("default space")
    print(f"  stages            {spec.num_stages}")
    print(f"  depth choices     {spec.depth_choices}")
    print(f"  width ratios      {spec.ratio_choices} (last layer of a stage pinned to 1.0)")
    print(f"  one-hot length    {spec.onehot_length}")

    top = largest(spec)
    cost = count_costs(spec, top, num_classes=1000)
    print(f"\nlargest config: {config_to_text(top)}")
    print(f"  {cost.macs / 1e6:,.1f}M MACs, {cost.params / 1e6:,.2f}M params at {spec.input_shape}")

    print("\nten random students, sorted by MACs:")
    rows = []
    for cfg in sample_many(spec, 10, rng_seed=7):
        c = count_costs(spec, cfg, num_classes=1000)
        rows.append((c.macs, c.params, config_to_text(cfg)))
    for macs, params, text in sorted(rows):
        print(f"  {macs / 1e6:>8,.1f}M MACs  {params / 1e6:>6.2f}M params  {text}")

    budget = CostBudget(max_macs=int(0.3 * cost.macs))
    kept = sum(
        within_budget(count_costs(spec, cfg, num_classes=1000), budget)
        for cfg in sample_many(spec, 200, rng_seed=8)
    )
    print(f"\nbudget at 0.3x the largest config admits {kept}/200 random samples")

    # the one-hot encoding is exact: decode(encode(c)) == c, and the text
    # form round-trips the same way
    cfg = sample_many(spec, 1, rng_seed=9)[0]
    vec = encode_onehot(spec, cfg)
    assert decode_onehot(spec, vec) == cfg
    assert config_from_text(config_to_text(cfg)) == cfg
    print(f"round-trip check on {config_to_text(cfg)}: ok "
          f"({int(vec.sum())} active bits of {len(vec)})")


if __name__ == "__main__":
    main()
