"""Built-in image data for desk-scale training runs.

The worker trains on the 8x8 handwritten digits set bundled with
scikit-learn: small enough that a full train-and-attack cycle takes seconds,
real enough that accuracies respond to architecture choices. Images are
rescaled to [0, 1], split once with a fixed seed, and cached per class
count; requests only pay the resize to their own input geometry.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

MAX_CLASSES = 10
_SPLIT_SEED = 0
_TEST_FRACTION = 0.25


class DatasetError(ValueError):
    """Request asks for a class count the built-in dataset cannot supply."""


@lru_cache(maxsize=MAX_CLASSES)
def class_subset(num_classes: int):
    """Train/test arrays for digit classes 0..num_classes-1.

    Returns float32 images shaped (n, 1, 8, 8) in [0, 1] and int64 labels,
    as a (x_train, y_train, x_test, y_test) tuple.
    """
    if not 2 <= num_classes <= MAX_CLASSES:
        raise DatasetError(
            f"built-in dataset supports 2..{MAX_CLASSES} classes, "
            f"got {num_classes}")
    digits = load_digits()
    mask = digits.target < num_classes
    x = (digits.images[mask] / 16.0).astype(np.float32)[:, None, :, :]
    y = digits.target[mask].astype(np.int64)
    x_train, x_test, y_train, y_test = train_test_split(
        x, y, test_size=_TEST_FRACTION, random_state=_SPLIT_SEED, stratify=y)
    return x_train, y_train, x_test, y_test


def prepare(images: np.ndarray, side: int, channels: int) -> torch.Tensor:
    """Resize images to (side, side) and widen grayscale to channel count."""
    batch = torch.from_numpy(images)
    if batch.shape[-1] != side:
        # bilinear keeps values inside [0, 1] (convex combinations)
        batch = torch.nn.functional.interpolate(
            batch, size=(side, side), mode="bilinear", align_corners=False)
    if channels > 1:
        batch = batch.expand(-1, channels, -1, -1).contiguous()
    return batch
