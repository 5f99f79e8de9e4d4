"""Input validation helpers for the estimator layer."""

from __future__ import annotations

import numpy as np

from .data import SplitDataset
from .errors import DataError


class NotFittedError(DataError):
    """Estimator used before fit()."""


def check_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )


def check_split(split) -> SplitDataset:
    if not isinstance(split, SplitDataset):
        raise DataError(f"expected a SplitDataset, got {type(split).__name__}")
    if split.n_users == 0:
        raise DataError("split contains no users")
    if split.n_items < 1:
        raise DataError("split contains no items")
    return split


def check_histories(histories, n_items: int) -> list[list[int]]:
    """Normalize per-user item histories to lists of valid dense indices."""
    out: list[list[int]] = []
    for i, history in enumerate(histories):
        items = [int(x) for x in np.asarray(history).reshape(-1)]
        if not items:
            raise DataError(f"history {i} is empty")
        bad = [x for x in items if not 1 <= x <= n_items]
        if bad:
            raise DataError(
                f"history {i} contains out-of-vocabulary item indices {bad[:5]}"
            )
        out.append(items)
    return out
