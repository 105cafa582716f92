"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from sklearn.exceptions import NotFittedError

from .errors import DataError, UsageError
from .geometry import PointCloud


def check_clouds(X, require_labels: bool = False) -> list:
    """Accept one PointCloud or a sequence of them; return a list."""
    if isinstance(X, PointCloud):
        X = [X]
    try:
        clouds = list(X)
    except TypeError:
        raise UsageError(f"expected point clouds, got {type(X).__name__}") from None
    if not clouds:
        raise UsageError("no scenes given")
    for i, c in enumerate(clouds):
        if not isinstance(c, PointCloud):
            raise UsageError(f"scene {i} is a {type(c).__name__}, not a PointCloud")
        if require_labels and not c.has_labels:
            raise DataError(f"scene {i} has no semantic/instance labels")
    return clouds


def check_is_fitted(estimator) -> None:
    if getattr(estimator, "net_", None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted; call fit() or load a checkpoint")


def check_positive(name: str, value) -> None:
    if value <= 0:
        raise UsageError(f"{name} must be positive, got {value}")
