"""Distillation-aware task embeddings.

A fixed Gaussian probe is pushed through the remapped student and through the
teacher; each stage-M feature map is average-pooled and projected by a shared
affine layer q_f. The architecture one-hot goes through q_a. A two-layer
perceptron fuses (student, arch, teacher) into one vector the predictor
regresses from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .errors import DistilnasError
from .nets import StagedNetwork
from .remap import remap
from .space import (
    ArchConfig,
    SearchSpaceSpec,
    config_from_text,
    config_to_text,
    encode_onehot,
    spec_from_text,
    spec_to_text,
)


class EmbeddingError(DistilnasError):
    """Feature map came out non-finite; the parameters are degenerate."""


@dataclass(frozen=True)
class NoiseProbe:
    """Fixed Gaussian input, generated once from its seed and reused for every
    embedding call in a run (meta-train and meta-test alike)."""

    tensor: torch.Tensor
    seed: int


def make_probe(spec: SearchSpaceSpec, seed: int, probe_batch: int = 1) -> NoiseProbe:
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((probe_batch, *spec.input_shape), generator=gen)
    return NoiseProbe(tensor=z, seed=seed)


@lru_cache(maxsize=512)
def _skeleton(spec_text: str, config_text: str, num_classes: int) -> StagedNetwork:
    # Meta-device build: structure and names only, no allocation or init cost.
    spec = spec_from_text(spec_text)
    config = config_from_text(config_text)
    with torch.device("meta"):
        net = StagedNetwork(spec, config, num_classes)
    net.eval()
    return net


def pooled_probe_feature(
    spec: SearchSpaceSpec,
    config: ArchConfig,
    table: dict[str, torch.Tensor],
    probe: NoiseProbe,
    num_classes: int,
) -> torch.Tensor:
    """Stage-M feature map of the probe under the given parameter table,
    globally average-pooled to a C-vector.

    Constant w.r.t. predictor weights (the table belongs to a frozen teacher
    or its remapped student), so callers may cache the result per
    (teacher, config).
    """
    skel = _skeleton(spec_to_text(spec), config_to_text(config), num_classes)
    with torch.no_grad():
        t_map = functional_call(
            skel, table, (probe.tensor,), kwargs={"features_only": True}
        )
    if not torch.isfinite(t_map).all():
        raise EmbeddingError("stage-M feature map contains NaN/Inf; parameters are degenerate")
    return t_map.mean(dim=(0, 2, 3))


@dataclass
class TaskEmbedding:
    """Per-(student, teacher) embedding pieces and their fusion."""

    h_a: torch.Tensor
    h_zs: torch.Tensor
    h_zt: torch.Tensor
    fused: torch.Tensor


class Encoder(nn.Module):
    """Trainable projections: q_a (arch one-hot), q_f (pooled probe feature,
    shared between teacher and student), and the fusing perceptron."""

    def __init__(
        self,
        onehot_length: int,
        feature_dim: int,
        embed_dim: int = 64,
        hidden_dim: int = 128,
        fused_dim: int = 64,
    ):
        super().__init__()
        self.onehot_length = onehot_length
        self.feature_dim = feature_dim
        self.q_a = nn.Linear(onehot_length, embed_dim)
        self.q_f = nn.Linear(feature_dim, embed_dim)
        self.fuse_net = nn.Sequential(
            nn.Linear(3 * embed_dim, hidden_dim),
            nn.Tanh(),
            nn.Linear(hidden_dim, fused_dim),
        )

    def arch_embedding(self, onehot: torch.Tensor) -> torch.Tensor:
        if onehot.shape[-1] != self.onehot_length:
            raise EmbeddingError(
                f"one-hot length {onehot.shape[-1]} != encoder's {self.onehot_length}"
            )
        return self.q_a(onehot)

    def functional_embedding(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.q_f(pooled)

    def fuse(self, h_zs, h_a, h_zt) -> torch.Tensor:
        return self.fuse_net(torch.cat([h_zs, h_a, h_zt], dim=-1))

    def forward(self, pooled_s, onehot, pooled_t) -> torch.Tensor:
        return self.fuse(
            self.functional_embedding(pooled_s),
            self.arch_embedding(onehot),
            self.functional_embedding(pooled_t),
        )


def onehot_tensor(spec: SearchSpaceSpec, config: ArchConfig) -> torch.Tensor:
    return torch.from_numpy(encode_onehot(spec, config).astype(np.float32))


def encode_task(
    student_config: ArchConfig,
    teacher: StagedNetwork,
    probe: NoiseProbe,
    encoder: Encoder,
    teacher_pooled: torch.Tensor | None = None,
    student_pooled: torch.Tensor | None = None,
) -> TaskEmbedding:
    """Full embedding of (student config, trained teacher).

    Remaps the teacher onto the student config, probes both networks, and
    fuses. The ``*_pooled`` arguments let callers reuse cached probe features;
    when given they must equal what this function would recompute.
    """
    spec = teacher.spec
    if student_pooled is None:
        table = remap(teacher, student_config)
        student_pooled = pooled_probe_feature(
            spec, student_config, table, probe, teacher.num_classes
        )
    if teacher_pooled is None:
        t_table = {k: v.detach() for k, v in teacher.state_dict().items()}
        teacher_pooled = pooled_probe_feature(
            spec, teacher.config, t_table, probe, teacher.num_classes
        )
    h_zs = encoder.functional_embedding(student_pooled)
    h_zt = encoder.functional_embedding(teacher_pooled)
    h_a = encoder.arch_embedding(onehot_tensor(spec, student_config))
    fused = encoder.fuse(h_zs, h_a, h_zt)
    return TaskEmbedding(h_a=h_a, h_zs=h_zs, h_zt=h_zt, fused=fused)


def dump_embeddings(path, vectors: dict[str, np.ndarray], manifest: dict):
    """Binary vector archive with a JSON manifest, for golden-file tests."""
    payload = {f"vec_{k}": np.asarray(v) for k, v in vectors.items()}
    payload["manifest"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_embeddings(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        vectors = {
            k[len("vec_"):]: data[k] for k in data.files if k.startswith("vec_")
        }
    return vectors, manifest
