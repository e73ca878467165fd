"""Named-tensor checkpoint archives with manifests.

A checkpoint is a single torch archive holding a ``manifest`` dict (search
space hash and text, config, seed, metadata) and one or more named tensor
tables. The manifest makes an archive self-describing: loading rebuilds the
module from the recorded spec and config, then verifies the hash.
"""

from __future__ import annotations

import hashlib
import os

import torch

from .errors import CheckpointError
from .nets import StagedNetwork, build
from .space import (
    ArchConfig,
    SearchSpaceSpec,
    config_from_text,
    config_to_text,
    spec_from_text,
    spec_to_text,
)

BLOCK_STYLE = "basic-2conv-projection"


def spec_hash(spec: SearchSpaceSpec) -> str:
    return hashlib.sha256(spec_to_text(spec).encode()).hexdigest()


def save_net_checkpoint(path, net: StagedNetwork, seed: int, metadata: dict | None = None):
    manifest = {
        "kind": "staged-network",
        "spec_hash": spec_hash(net.spec),
        "spec_text": spec_to_text(net.spec),
        "config_text": config_to_text(net.config),
        "num_classes": net.num_classes,
        "seed": seed,
        "block_style": BLOCK_STYLE,
        "metadata": dict(metadata or {}),
    }
    torch.save({"manifest": manifest, "state": net.state_dict()}, path)


def load_net_checkpoint(path) -> tuple[StagedNetwork, dict]:
    if not os.path.exists(path):
        raise CheckpointError(f"{path}: no such checkpoint")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "manifest" not in payload or "state" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    manifest = payload["manifest"]
    for key in ("spec_hash", "spec_text", "config_text", "num_classes", "seed"):
        if key not in manifest:
            raise CheckpointError(f"{path}: manifest missing {key!r}")
    spec = spec_from_text(manifest["spec_text"])
    if spec_hash(spec) != manifest["spec_hash"]:
        raise CheckpointError(f"{path}: spec hash does not match spec text")
    config = config_from_text(manifest["config_text"])
    net = build(spec, config, manifest["num_classes"], manifest["seed"])
    try:
        net.load_state_dict(payload["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit manifest config: {exc}") from None
    return net, manifest
