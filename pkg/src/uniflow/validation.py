"""Input checks shared by the estimator layer and the CLI."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .data import FlowDataset


def check_flow_array(X, name: str = "X", ndim: Iterable[int] = (3, 4), allow_nan: bool = False) -> np.ndarray:
    """Float64 copy of ``X`` with one of the allowed ranks; rejects non-finite values."""
    arr = np.asarray(X, dtype=np.float64)
    ndim = tuple(ndim)
    if arr.ndim not in ndim:
        raise ValueError(f"{name} must have {' or '.join(map(str, ndim))} dimensions, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_datasets(datasets) -> list[FlowDataset]:
    if isinstance(datasets, FlowDataset):
        datasets = [datasets]
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    for d in datasets:
        if not isinstance(d, FlowDataset):
            raise TypeError(f"expected FlowDataset, got {type(d).__name__}")
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ValueError(f"dataset names must be unique, got {names}")
    return datasets


def check_fraction(fraction: float) -> float:
    fraction = float(fraction)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return fraction


def check_noise_level(level: float) -> float:
    level = float(level)
    if not (level >= 0 and math.isfinite(level)):
        raise ValueError(f"noise level must be a finite non-negative number, got {level}")
    return level


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
