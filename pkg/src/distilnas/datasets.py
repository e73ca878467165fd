"""Datasets and class-wise split planning.

Tasks are built by splitting one labeled image dataset class-wise: every
class belongs to exactly one split, and each split is partitioned into train
and validation examples. A built-in synthetic generator produces small
multi-template image classification problems so the whole pipeline runs at
desk scale; any folder-of-class-folders image tree works too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DistilnasError


class DatasetError(DistilnasError):
    """Dataset cannot be loaded or split as requested."""


@dataclass
class ArrayDataset:
    """In-memory labeled images: float inputs (N, C, H, W), int labels (N,)."""

    inputs: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    dataset_id: str = "dataset"

    def __post_init__(self):
        if self.inputs.dim() != 4:
            raise DatasetError(f"inputs must be (N, C, H, W), got {tuple(self.inputs.shape)}")
        if self.labels.dim() != 1 or len(self.labels) != len(self.inputs):
            raise DatasetError("labels must be a 1-d tensor aligned with inputs")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx: np.ndarray, num_classes: int | None = None) -> "ArrayDataset":
        t = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return ArrayDataset(
            inputs=self.inputs[t],
            labels=self.labels[t],
            num_classes=self.num_classes if num_classes is None else num_classes,
            dataset_id=self.dataset_id,
        )


def synthetic_image_classification(
    num_classes: int,
    per_class: int,
    image_size: int = 16,
    channels: int = 3,
    templates_per_class: int = 3,
    noise: float = 0.6,
    seed: int = 0,
) -> ArrayDataset:
    """Multi-template Gaussian image classes.

    Each class owns a few fixed random templates; an example is one template
    plus pixel noise. Separating the classes needs enough capacity to carry
    all templates, so accuracy responds to architecture size instead of
    saturating.
    """
    if num_classes < 2 or per_class < 1:
        raise DatasetError("need num_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal(
        (num_classes, templates_per_class, channels, image_size, image_size)
    )
    xs = np.empty((num_classes * per_class, channels, image_size, image_size), dtype=np.float32)
    ys = np.empty(num_classes * per_class, dtype=np.int64)
    i = 0
    for c in range(num_classes):
        choice = rng.integers(templates_per_class, size=per_class)
        for t in choice:
            xs[i] = templates[c, t] + noise * rng.standard_normal(
                (channels, image_size, image_size)
            )
            ys[i] = c
            i += 1
    return ArrayDataset(
        inputs=torch.from_numpy(xs),
        labels=torch.from_numpy(ys),
        num_classes=num_classes,
        dataset_id=f"synthetic-c{num_classes}x{per_class}-s{seed}",
    )


def load_image_folder(root, image_size: int | None = None) -> ArrayDataset:
    """Folder-of-class-folders loader (one subdirectory per class)."""
    try:
        from PIL import Image
    except ImportError:
        raise DatasetError("loading image folders requires pillow") from None
    import os

    if not os.path.isdir(root):
        raise DatasetError(f"{root}: no such directory")
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if len(classes) < 2:
        raise DatasetError(f"{root}: need at least 2 class directories")
    xs, ys = [], []
    for ci, cname in enumerate(classes):
        cdir = os.path.join(root, cname)
        for fname in sorted(os.listdir(cdir)):
            path = os.path.join(cdir, fname)
            try:
                img = Image.open(path).convert("RGB")
            except Exception:
                continue
            if image_size is not None:
                img = img.resize((image_size, image_size))
            xs.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            ys.append(ci)
    if not xs:
        raise DatasetError(f"{root}: no readable images")
    return ArrayDataset(
        inputs=torch.from_numpy(np.stack(xs)),
        labels=torch.tensor(ys, dtype=torch.int64),
        num_classes=len(classes),
        dataset_id=os.path.basename(os.path.normpath(root)),
    )


@dataclass
class DatasetSplitPlan:
    """Class-disjoint split assignment plus per-split example partition.

    Splits 0..train_splits-1 are meta-training tasks; the rest are held out
    for meta-validation/meta-test.
    """

    dataset_id: str
    num_splits: int
    train_splits: int
    val_splits: int
    class_to_split: dict[int, int]
    split_train_idx: dict[int, list[int]]
    split_val_idx: dict[int, list[int]]
    seed: int

    def classes_of(self, split_id: int) -> list[int]:
        return sorted(c for c, s in self.class_to_split.items() if s == split_id)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "num_splits": self.num_splits,
            "train_splits": self.train_splits,
            "val_splits": self.val_splits,
            "class_to_split": {str(k): v for k, v in self.class_to_split.items()},
            "split_train_idx": {str(k): v for k, v in self.split_train_idx.items()},
            "split_val_idx": {str(k): v for k, v in self.split_val_idx.items()},
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetSplitPlan":
        return DatasetSplitPlan(
            dataset_id=d["dataset_id"],
            num_splits=d["num_splits"],
            train_splits=d["train_splits"],
            val_splits=d["val_splits"],
            class_to_split={int(k): v for k, v in d["class_to_split"].items()},
            split_train_idx={int(k): list(v) for k, v in d["split_train_idx"].items()},
            split_val_idx={int(k): list(v) for k, v in d["split_val_idx"].items()},
            seed=d["seed"],
        )


def plan_splits(
    dataset: ArrayDataset,
    num_splits: int,
    seed: int,
    train_splits: int | None = None,
    val_fraction: float = 0.1,
) -> DatasetSplitPlan:
    """Assign classes to splits (balanced: sizes differ by at most 1) and
    partition each split's examples into train/val, stratified by class."""
    if dataset.num_classes < num_splits:
        raise DatasetError(
            f"cannot split {dataset.num_classes} classes into {num_splits} splits"
        )
    if train_splits is None:
        train_splits = num_splits - max(1, round(0.2 * num_splits))
    if not (1 <= train_splits < num_splits):
        raise DatasetError(f"train_splits {train_splits} must be in [1, {num_splits - 1}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.num_classes)
    class_to_split = {int(c): i % num_splits for i, c in enumerate(order)}

    labels = dataset.labels.numpy()
    split_train: dict[int, list[int]] = {s: [] for s in range(num_splits)}
    split_val: dict[int, list[int]] = {s: [] for s in range(num_splits)}
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, round(val_fraction * len(idx))) if len(idx) > 1 else 0
        s = class_to_split[c]
        split_val[s].extend(int(i) for i in idx[:n_val])
        split_train[s].extend(int(i) for i in idx[n_val:])
    for s in range(num_splits):
        split_train[s].sort()
        split_val[s].sort()
        if not split_train[s]:
            raise DatasetError(f"split {s} has no training examples")
    return DatasetSplitPlan(
        dataset_id=dataset.dataset_id,
        num_splits=num_splits,
        train_splits=train_splits,
        val_splits=num_splits - train_splits,
        class_to_split=class_to_split,
        split_train_idx=split_train,
        split_val_idx=split_val,
        seed=seed,
    )


def materialize_split(
    dataset: ArrayDataset, plan: DatasetSplitPlan, split_id: int
) -> tuple[ArrayDataset, ArrayDataset]:
    """Train/val datasets of one split, labels remapped to 0..k-1."""
    if split_id not in range(plan.num_splits):
        raise DatasetError(f"split {split_id} outside 0..{plan.num_splits - 1}")
    classes = plan.classes_of(split_id)
    if not classes:
        raise DatasetError(f"split {split_id} has no classes")
    remap = {c: i for i, c in enumerate(classes)}

    def take(idx_list):
        sub = dataset.subset(np.array(idx_list, dtype=np.int64), num_classes=len(classes))
        sub.labels = torch.tensor(
            [remap[int(l)] for l in sub.labels], dtype=torch.int64
        )
        return sub

    return take(plan.split_train_idx[split_id]), take(plan.split_val_idx[split_id])
