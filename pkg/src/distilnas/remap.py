"""Teacher-to-student parameter remapping.

Depth level: student stage m layer o takes teacher stage m layer o, for
o = 1..d (never the teacher's trailing layers). Width level: within a tensor,
the leading [0:k] slice along every channel-indexed axis. Because builder
names encode (stage, layer, role) and every block has the same roles, both
levels reduce to slicing the same-named teacher tensor to the student shape.
No value is invented; every student entry appears verbatim in the teacher.
"""

from __future__ import annotations

import torch

from .errors import RemapError
from .nets import StagedNetwork
from .space import ArchConfig, SearchSpaceSpec


def validate_remap_feasibility(
    spec: SearchSpaceSpec, teacher_config: ArchConfig, student_config: ArchConfig
) -> tuple[bool, list[str]]:
    """Check the containment the remap needs, stage by stage.

    Returns (feasible, diagnostics); diagnostics name every violation rather
    than stopping at the first.
    """
    teacher_config.validate(spec)
    student_config.validate(spec)
    problems: list[str] = []
    t_widths = teacher_config.layer_widths(spec)
    s_widths = student_config.layer_widths(spec)
    for m in range(spec.num_stages):
        dt = len(t_widths[m])
        ds = len(s_widths[m])
        if ds > dt:
            problems.append(f"stage {m}: student depth {ds} exceeds teacher depth {dt}")
            continue
        for o in range(ds):
            if s_widths[m][o] > t_widths[m][o]:
                problems.append(
                    f"stage {m} layer {o}: student width {s_widths[m][o]} "
                    f"exceeds teacher width {t_widths[m][o]}"
                )
    return (not problems, problems)


def _student_shapes(
    spec: SearchSpaceSpec, student_config: ArchConfig, num_classes: int
) -> dict[str, tuple[int, ...]]:
    # Meta-device build: names and shapes without allocating or initializing.
    with torch.device("meta"):
        skeleton = StagedNetwork(spec, student_config, num_classes)
    return {name: tuple(t.shape) for name, t in skeleton.state_dict().items()}


def remap_table(
    spec: SearchSpaceSpec,
    teacher_config: ArchConfig,
    teacher_table: dict[str, torch.Tensor],
    student_config: ArchConfig,
    num_classes: int,
) -> dict[str, torch.Tensor]:
    """Slice a teacher parameter table down to a student config.

    ``teacher_table`` is the named tensor table (parameters and norm buffers)
    of a network built for ``teacher_config``.
    """
    feasible, problems = validate_remap_feasibility(spec, teacher_config, student_config)
    if not feasible:
        raise RemapError("remap infeasible: " + "; ".join(problems))
    out: dict[str, torch.Tensor] = {}
    for name, shape in _student_shapes(spec, student_config, num_classes).items():
        src = teacher_table.get(name)
        if src is None:
            raise RemapError(f"internal: teacher table lacks tensor {name!r}")
        if src.dim() != len(shape):
            raise RemapError(
                f"internal: {name!r} rank mismatch, teacher {tuple(src.shape)} vs student {shape}"
            )
        if any(s > t for s, t in zip(shape, src.shape)):
            raise RemapError(
                f"internal: {name!r} teacher shape {tuple(src.shape)} cannot cover {shape}"
            )
        out[name] = src[tuple(slice(0, s) for s in shape)].clone()
    return out


def remap(teacher: StagedNetwork, student_config: ArchConfig) -> dict[str, torch.Tensor]:
    """Remap a trained teacher network onto a smaller student config."""
    table = {k: v.detach() for k, v in teacher.state_dict().items()}
    return remap_table(teacher.spec, teacher.config, table, student_config, teacher.num_classes)


def remap_to_net(
    teacher: StagedNetwork, student_config: ArchConfig, rng_seed: int = 0
) -> StagedNetwork:
    """Build a student network and load the remapped table into it."""
    from .nets import build

    student = build(teacher.spec, student_config, teacher.num_classes, rng_seed)
    student.load_state_dict(remap(teacher, student_config))
    return student
