"""Shared domain types.

Label maps ("semantic change maps") are integer ``H x W`` arrays holding
class indices in ``0..N``: ``0`` is no-change and ``1..N`` are land-cover
classes.  Only changed pixels carry a semantic label, in both epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError


@dataclass(frozen=True, eq=False)
class BitemporalSample:
    """An image pair with its two semantic change maps.

    Images are float32 ``c x H x W`` arrays in ``[0, 1]``; labels are uint8
    ``H x W`` arrays.
    """

    image1: np.ndarray
    image2: np.ndarray
    label1: np.ndarray
    label2: np.ndarray
    num_classes: int
    sample_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.label1.shape)


def validate_sample(sample: BitemporalSample, max_items: int = 50) -> list[str]:
    """Return the list of invariant violations (empty when the sample is valid).

    Per-pixel violations are reported individually up to ``max_items``;
    any remainder is summarised in a final entry.
    """
    report: list[str] = []
    shapes = {
        "image1": sample.image1.shape[-2:] if sample.image1.ndim == 3 else None,
        "image2": sample.image2.shape[-2:] if sample.image2.ndim == 3 else None,
        "label1": sample.label1.shape if sample.label1.ndim == 2 else None,
        "label2": sample.label2.shape if sample.label2.ndim == 2 else None,
    }
    for name, shp in shapes.items():
        if shp is None:
            report.append(f"{name}: wrong rank (images need c x H x W, labels H x W)")
    if report:
        return report
    if len(set(shapes.values())) > 1:
        detail = ", ".join(f"{k}={tuple(v)}" for k, v in shapes.items())
        return [f"spatial size mismatch: {detail}"]
    if sample.image1.shape[0] != sample.image2.shape[0]:
        report.append(f"channel mismatch: image1 has {sample.image1.shape[0]}, "
                      f"image2 has {sample.image2.shape[0]}")
    for name in ("image1", "image2"):
        img = getattr(sample, name)
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            report.append(f"{name}: values outside [0, 1]")

    n = sample.num_classes
    l1 = sample.label1.astype(np.int64)
    l2 = sample.label2.astype(np.int64)
    rules = [
        ((l1 < 0) | (l1 > n), f"epoch-1 class index outside [0, {n}]"),
        ((l2 < 0) | (l2 > n), f"epoch-2 class index outside [0, {n}]"),
        ((l1 != 0) & (l2 == 0), "changed pixel lacks epoch-2 label"),
        ((l1 == 0) & (l2 != 0), "changed pixel lacks epoch-1 label"),
        ((l1 != 0) & (l1 == l2), "changed pixel has identical labels in both epochs"),
    ]
    pixel_items = 0
    total = 0
    for bad, rule in rules:
        rows, cols = np.nonzero(bad)
        total += len(rows)
        for r, c in zip(rows, cols):
            if pixel_items >= max_items:
                break
            report.append(f"pixel ({r}, {c}): {rule} "
                          f"(label1={l1[r, c]}, label2={l2[r, c]})")
            pixel_items += 1
    if total > pixel_items:
        report.append(f"... {total - pixel_items} further pixel violations")
    return report


def derive_change_mask(label1, label2):
    """Binary change mask: 1 where the epoch-1 label is a land-cover class.

    Works on numpy arrays (returns uint8) and torch tensors (returns a
    float 0/1 tensor, ready to weight per-pixel losses).
    """
    if tuple(label1.shape) != tuple(label2.shape):
        raise DataError(f"label shapes differ: {tuple(label1.shape)} vs {tuple(label2.shape)}")
    if isinstance(label1, torch.Tensor):
        return (label1 != 0).float()
    return (np.asarray(label1) != 0).astype(np.uint8)


def check_sample(sample: BitemporalSample) -> BitemporalSample:
    """Raise :class:`DataError` listing violations, else return the sample."""
    report = validate_sample(sample)
    if report:
        name = sample.sample_id or "<sample>"
        raise DataError(f"{name}: " + "; ".join(report))
    return sample
