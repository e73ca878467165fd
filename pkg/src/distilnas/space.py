"""Factorized hierarchical ResNet-style search space.

A point in the space fixes, per stage, a depth (number of residual blocks)
and one channel-shrink ratio per block. The last block of every stage is
pinned to ratio 1.0 so the stage output width is config-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, SpaceValidationError

ABSOLUTE_DEPTH = "absolute-depth"
ADDITIVE_DEPTH = "additive-depth"


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Parameterization of the factorized depth x width search space.

    ``depth_choices`` are the selectable per-stage depths. In
    ``additive-depth`` mode a choice is added to ``base_depths`` instead of
    being the depth itself. ``max_layers_per_stage`` fixes the number of
    one-hot encoding slots per stage and must cover every reachable depth.
    """

    num_stages: int = 4
    depth_choices: tuple[int, ...] = (1, 2, 3, 4)
    base_widths: tuple[int, ...] = (32, 64, 128, 256)
    ratio_choices: tuple[float, ...] = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)
    max_layers_per_stage: int = 5
    input_shape: tuple[int, int, int] = (3, 64, 64)
    mode: str = ABSOLUTE_DEPTH
    base_depths: tuple[int, ...] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_stages < 1:
            raise SpaceValidationError("num_stages must be >= 1")
        if len(self.base_widths) != self.num_stages:
            raise SpaceValidationError(
                f"base_widths length {len(self.base_widths)} != num_stages {self.num_stages}"
            )
        if not self.depth_choices:
            raise SpaceValidationError("depth_choices must be nonempty")
        if tuple(sorted(set(self.depth_choices))) != tuple(self.depth_choices):
            raise SpaceValidationError("depth_choices must be sorted and duplicate-free")
        if not self.ratio_choices:
            raise SpaceValidationError("ratio_choices must be nonempty")
        if tuple(sorted(set(self.ratio_choices))) != tuple(self.ratio_choices):
            raise SpaceValidationError("ratio_choices must be sorted ascending and duplicate-free")
        if any(not (0.0 < r <= 1.0) for r in self.ratio_choices):
            raise SpaceValidationError("ratio_choices must lie in (0, 1]")
        if self.ratio_choices[-1] != 1.0:
            raise SpaceValidationError("ratio_choices must contain 1.0")
        if any(w < 1 for w in self.base_widths):
            raise SpaceValidationError("base_widths must be positive")
        if self.mode not in (ABSOLUTE_DEPTH, ADDITIVE_DEPTH):
            raise SpaceValidationError(f"unknown mode {self.mode!r}")
        if self.mode == ABSOLUTE_DEPTH:
            if self.base_depths is not None:
                raise SpaceValidationError("base_depths only applies to additive-depth mode")
            if any(d < 1 for d in self.depth_choices):
                raise SpaceValidationError("absolute depth choices must be >= 1")
            if max(self.depth_choices) > self.max_layers_per_stage:
                raise SpaceValidationError(
                    f"depth choice {max(self.depth_choices)} exceeds "
                    f"max_layers_per_stage {self.max_layers_per_stage}"
                )
        else:
            if self.base_depths is None or len(self.base_depths) != self.num_stages:
                raise SpaceValidationError("additive-depth mode needs base_depths, one per stage")
            if any(d < 0 for d in self.depth_choices):
                raise SpaceValidationError("additive depth choices must be >= 0")
            if any(b < 1 for b in self.base_depths):
                raise SpaceValidationError("base_depths must be >= 1")
            deepest = max(self.base_depths) + max(self.depth_choices)
            if deepest > self.max_layers_per_stage:
                raise SpaceValidationError(
                    f"base depth + depth choice can reach {deepest}, beyond "
                    f"max_layers_per_stage {self.max_layers_per_stage}"
                )
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise SpaceValidationError("input_shape must be (channels, height, width), all >= 1")

    def effective_depth(self, choice: int) -> tuple[int, ...]:
        """Per-stage layer count implied by a depth choice."""
        if self.mode == ABSOLUTE_DEPTH:
            return tuple(choice for _ in range(self.num_stages))
        return tuple(b + choice for b in self.base_depths)

    @property
    def onehot_length(self) -> int:
        per_stage = len(self.depth_choices) + self.max_layers_per_stage * len(self.ratio_choices)
        return self.num_stages * per_stage


@dataclass(frozen=True)
class ArchConfig:
    """One architecture: a depth choice per stage and a ratio per active block.

    ``depths`` holds the raw choices (additive offsets in additive-depth
    mode); ``ratios[m]`` has exactly one entry per active block of stage m,
    the last always 1.0.
    """

    depths: tuple[int, ...]
    ratios: tuple[tuple[float, ...], ...] = field(default=())

    def validate(self, spec: SearchSpaceSpec):
        if len(self.depths) != spec.num_stages:
            raise SpaceValidationError(
                f"config has {len(self.depths)} stages, spec has {spec.num_stages}"
            )
        if len(self.ratios) != spec.num_stages:
            raise SpaceValidationError(
                f"config has ratios for {len(self.ratios)} stages, spec has {spec.num_stages}"
            )
        for m, d in enumerate(self.depths):
            if d not in spec.depth_choices:
                raise SpaceValidationError(f"stage {m}: depth {d} not in depth_choices")
            layers = self.layers_in_stage(spec, m)
            if len(self.ratios[m]) != layers:
                raise SpaceValidationError(
                    f"stage {m}: {len(self.ratios[m])} ratios for {layers} active layers"
                )
            for o, r in enumerate(self.ratios[m]):
                if r not in spec.ratio_choices:
                    raise SpaceValidationError(f"stage {m} layer {o}: ratio {r} not a choice")
            if self.ratios[m][-1] != 1.0:
                raise SpaceValidationError(
                    f"stage {m}: last active layer must have ratio 1.0, got {self.ratios[m][-1]}"
                )

    def layers_in_stage(self, spec: SearchSpaceSpec, stage: int) -> int:
        if spec.mode == ABSOLUTE_DEPTH:
            return self.depths[stage]
        return spec.base_depths[stage] + self.depths[stage]

    def layer_widths(self, spec: SearchSpaceSpec) -> tuple[tuple[int, ...], ...]:
        """Concrete channel count of every active block, per stage."""
        return tuple(
            tuple(layer_width(r, spec.base_widths[m]) for r in self.ratios[m])
            for m in range(spec.num_stages)
        )


@dataclass(frozen=True)
class CostReport:
    """MACs and parameter count of a concrete architecture."""

    macs: int
    params: int


@dataclass(frozen=True)
class CostBudget:
    """Upper bounds on cost; a ``None`` bound is unconstrained. Bounds are strict."""

    max_macs: int | None = None
    max_params: int | None = None


def layer_width(ratio: float, base_width: int) -> int:
    """Channel count of a block with the given shrink ratio (rounded, >= 1)."""
    return max(1, round(ratio * base_width))


def default_spec() -> SearchSpaceSpec:
    """The 4-stage desk-scale space at 64x64 input."""
    return SearchSpaceSpec()


def imagenet_spec() -> SearchSpaceSpec:
    """Additive-depth preset: offsets {0,1,2} over ResNet50 stage depths."""
    return SearchSpaceSpec(
        num_stages=4,
        depth_choices=(0, 1, 2),
        base_widths=(256, 512, 1024, 2048),
        ratio_choices=(0.65, 0.8, 1.0),
        max_layers_per_stage=8,
        input_shape=(3, 256, 256),
        mode=ADDITIVE_DEPTH,
        base_depths=(3, 4, 6, 3),
    )


def sample(spec: SearchSpaceSpec, rng_seed: int) -> ArchConfig:
    """Draw one config uniformly over depth and per-layer ratio choices."""
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    return sample_with(spec, rng)


def sample_with(spec: SearchSpaceSpec, rng: np.random.Generator) -> ArchConfig:
    """Like :func:`sample` but advancing a caller-owned generator."""
    depths = []
    ratios = []
    for m in range(spec.num_stages):
        d = spec.depth_choices[int(rng.integers(len(spec.depth_choices)))]
        depths.append(d)
        layers = d if spec.mode == ABSOLUTE_DEPTH else spec.base_depths[m] + d
        stage_ratios = [
            spec.ratio_choices[int(rng.integers(len(spec.ratio_choices)))]
            for _ in range(layers - 1)
        ]
        stage_ratios.append(1.0)
        ratios.append(tuple(stage_ratios))
    config = ArchConfig(depths=tuple(depths), ratios=tuple(ratios))
    config.validate(spec)
    return config


def sample_many(spec: SearchSpaceSpec, n: int, rng_seed: int) -> list[ArchConfig]:
    rng = np.random.default_rng(rng_seed)
    return [sample_with(spec, rng) for _ in range(n)]


def sample_unique(spec: SearchSpaceSpec, n: int, rng_seed: int, max_draws: int | None = None) -> list[ArchConfig]:
    """Sample n distinct configs (deduplicated); stops early if the space is
    smaller than n or the draw cap is hit."""
    rng = np.random.default_rng(rng_seed)
    seen: set[str] = set()
    out: list[ArchConfig] = []
    cap = max_draws if max_draws is not None else max(20 * n, 1000)
    for _ in range(cap):
        if len(out) >= n:
            break
        c = sample_with(spec, rng)
        key = config_to_text(c)
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def largest(spec: SearchSpaceSpec) -> ArchConfig:
    """Maximal config: deepest choice everywhere, every ratio 1.0."""
    spec.validate()
    top = max(spec.depth_choices)
    depths = tuple(top for _ in range(spec.num_stages))
    ratios = []
    for m in range(spec.num_stages):
        layers = top if spec.mode == ABSOLUTE_DEPTH else spec.base_depths[m] + top
        ratios.append(tuple(1.0 for _ in range(layers)))
    return ArchConfig(depths=depths, ratios=tuple(ratios))


def encode_onehot(spec: SearchSpaceSpec, config: ArchConfig) -> np.ndarray:
    """Fixed-length 0/1 encoding: per stage, a depth one-hot block followed by
    ``max_layers_per_stage`` ratio one-hot slots (inactive slots all-zero)."""
    config.validate(spec)
    nd = len(spec.depth_choices)
    nr = len(spec.ratio_choices)
    out = np.zeros(spec.onehot_length, dtype=np.int8)
    pos = 0
    for m in range(spec.num_stages):
        out[pos + spec.depth_choices.index(config.depths[m])] = 1
        pos += nd
        for o in range(spec.max_layers_per_stage):
            if o < len(config.ratios[m]):
                out[pos + spec.ratio_choices.index(config.ratios[m][o])] = 1
            pos += nr
    return out


def decode_onehot(spec: SearchSpaceSpec, vector: np.ndarray) -> ArchConfig:
    """Inverse of :func:`encode_onehot`; rejects malformed blocks by name."""
    spec.validate()
    vec = np.asarray(vector)
    if vec.shape != (spec.onehot_length,):
        raise DecodeError(
            f"encoding has length {vec.shape}, expected ({spec.onehot_length},)"
        )
    if not np.isin(vec, (0, 1)).all():
        raise DecodeError("encoding must contain only 0/1 entries")
    nd = len(spec.depth_choices)
    nr = len(spec.ratio_choices)
    pos = 0
    depths = []
    ratios = []
    for m in range(spec.num_stages):
        block = vec[pos : pos + nd]
        if block.sum() != 1:
            raise DecodeError(f"stage {m} depth block is not one-hot")
        d = spec.depth_choices[int(np.argmax(block))]
        depths.append(d)
        pos += nd
        layers = d if spec.mode == ABSOLUTE_DEPTH else spec.base_depths[m] + d
        stage_ratios = []
        for o in range(spec.max_layers_per_stage):
            block = vec[pos : pos + nr]
            if o < layers:
                if block.sum() != 1:
                    raise DecodeError(f"stage {m} layer {o} ratio block is not one-hot")
                stage_ratios.append(spec.ratio_choices[int(np.argmax(block))])
            else:
                if block.sum() != 0:
                    raise DecodeError(f"stage {m} layer {o} is inactive but its block is set")
            pos += nr
        ratios.append(tuple(stage_ratios))
    config = ArchConfig(depths=tuple(depths), ratios=tuple(ratios))
    config.validate(spec)
    return config


def onehot_to_text(vector: np.ndarray) -> str:
    """Encoding vector as a 0/1 string, for golden files."""
    return "".join(str(int(v)) for v in np.asarray(vector))


def onehot_from_text(text: str) -> np.ndarray:
    if not set(text) <= {"0", "1"}:
        raise DecodeError("encoding string must contain only 0/1 characters")
    return np.array([int(ch) for ch in text], dtype=np.int8)


def conv_macs(kh: int, kw: int, c_in: int, c_out: int, h_out: int, w_out: int) -> int:
    """Multiply-accumulates of one dense convolution."""
    return kh * kw * c_in * c_out * h_out * w_out


def _strided_size(size: int, stride: int) -> int:
    # 3x3 pad-1 or 1x1 pad-0 conv: out = floor((size - 1) / stride) + 1
    return (size - 1) // stride + 1


def count_costs(
    spec: SearchSpaceSpec,
    config: ArchConfig,
    input_shape: tuple[int, int, int] | None = None,
    num_classes: int | None = None,
) -> CostReport:
    """Closed-form MACs/params of the network :mod:`distilnas.nets` builds.

    MACs count conv and linear multiplies only; params count conv/linear
    weights plus normalization affine terms. The classifier head is included
    only when ``num_classes`` is given. Every block carries a projection
    shortcut, so costs are strictly monotone in any single depth or ratio
    increase regardless of the ratio grid.
    """
    config.validate(spec)
    c_in, h, w = input_shape if input_shape is not None else spec.input_shape
    macs = 0
    params = 0

    stem_w = spec.base_widths[0]
    macs += conv_macs(3, 3, c_in, stem_w, h, w)
    params += 9 * c_in * stem_w + 2 * stem_w

    widths = config.layer_widths(spec)
    prev = stem_w
    for m in range(spec.num_stages):
        for o, out_ch in enumerate(widths[m]):
            stride = 2 if (o == 0 and m > 0) else 1
            h = _strided_size(h, stride)
            w = _strided_size(w, stride)
            macs += conv_macs(3, 3, prev, out_ch, h, w)
            params += 9 * prev * out_ch + 2 * out_ch
            macs += conv_macs(3, 3, out_ch, out_ch, h, w)
            params += 9 * out_ch * out_ch + 2 * out_ch
            macs += conv_macs(1, 1, prev, out_ch, h, w)
            params += prev * out_ch + 2 * out_ch
            prev = out_ch
    if num_classes is not None:
        macs += prev * num_classes
        params += prev * num_classes + num_classes
    return CostReport(macs=macs, params=params)


def within_budget(report: CostReport, budget: CostBudget | None) -> bool:
    """Strict-inequality budget predicate; ``None`` budget admits everything."""
    if budget is None:
        return True
    if budget.max_macs is not None and not report.macs < budget.max_macs:
        return False
    if budget.max_params is not None and not report.params < budget.max_params:
        return False
    return True


# --- stable text serialization ---------------------------------------------
#
# SearchSpaceSpec: one `key=value` line per field; tuples comma-joined, floats
# via repr() (round-trip exact). ArchConfig: single line
# `depths=<d0>,<d1>,...|ratios=<r00>,<r01>;<r10>,...` with `;` between stages.


def spec_to_text(spec: SearchSpaceSpec) -> str:
    lines = [
        f"num_stages={spec.num_stages}",
        "depth_choices=" + ",".join(str(d) for d in spec.depth_choices),
        "base_widths=" + ",".join(str(b) for b in spec.base_widths),
        "ratio_choices=" + ",".join(repr(r) for r in spec.ratio_choices),
        f"max_layers_per_stage={spec.max_layers_per_stage}",
        "input_shape=" + ",".join(str(v) for v in spec.input_shape),
        f"mode={spec.mode}",
    ]
    if spec.base_depths is not None:
        lines.append("base_depths=" + ",".join(str(b) for b in spec.base_depths))
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SearchSpaceSpec:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SpaceValidationError(f"spec text line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        kwargs = dict(
            num_stages=int(fields["num_stages"]),
            depth_choices=tuple(int(v) for v in fields["depth_choices"].split(",")),
            base_widths=tuple(int(v) for v in fields["base_widths"].split(",")),
            ratio_choices=tuple(float(v) for v in fields["ratio_choices"].split(",")),
            max_layers_per_stage=int(fields["max_layers_per_stage"]),
            input_shape=tuple(int(v) for v in fields["input_shape"].split(",")),
            mode=fields["mode"],
        )
    except KeyError as exc:
        raise SpaceValidationError(f"spec text missing field {exc.args[0]!r}") from None
    if "base_depths" in fields:
        kwargs["base_depths"] = tuple(int(v) for v in fields["base_depths"].split(","))
    return SearchSpaceSpec(**kwargs)


def config_to_text(config: ArchConfig) -> str:
    depths = ",".join(str(d) for d in config.depths)
    ratios = ";".join(",".join(repr(r) for r in stage) for stage in config.ratios)
    return f"depths={depths}|ratios={ratios}"


def config_from_text(text: str) -> ArchConfig:
    try:
        depth_part, ratio_part = text.strip().split("|")
        if not depth_part.startswith("depths=") or not ratio_part.startswith("ratios="):
            raise ValueError
        depths = tuple(int(v) for v in depth_part[len("depths="):].split(","))
        ratios = tuple(
            tuple(float(v) for v in stage.split(",") if v)
            for stage in ratio_part[len("ratios="):].split(";")
        )
    except ValueError:
        raise SpaceValidationError(f"malformed config text {text!r}") from None
    return ArchConfig(depths=depths, ratios=ratios)
