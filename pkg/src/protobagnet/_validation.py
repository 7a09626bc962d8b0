"""Input validation helpers shared by the estimator, trainer and evaluation code."""

import numpy as np
import torch


class ConfigError(ValueError):
    """Raised for invalid configuration values (layer specs, presets, geometry)."""


class InputError(ValueError):
    """Raised when array shapes or dtypes do not match what a component expects."""


class DataError(ValueError):
    """Raised for dataset-level problems: missing classes, unreadable files, leakage."""


class TrainingError(RuntimeError):
    """Raised when optimisation diverges (non-finite loss)."""


def check_images(X, channels=None, height=None, width=None, allow_empty=False):
    """Return ``X`` as a float ``(n, C, H, W)`` numpy array.

    2-D single images and 3-D ``(n, H, W)`` stacks are promoted to one channel.
    """
    X = np.asarray(X)
    if X.dtype == object:
        raise InputError("images must be a numeric array")
    if X.ndim == 2:
        X = X[None, None]
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise InputError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if X.shape[0] == 0 and not allow_empty:
        raise InputError("empty image batch")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise InputError("images contain non-finite values")
    expected = (channels, height, width)
    for name, want, got in zip("CHW", expected, X.shape[1:]):
        if want is not None and want != got:
            raise InputError(f"image {name} is {got}, model expects {want}")
    return X


def check_labels(y, n=None, n_classes=2):
    y = np.asarray(y)
    if y.ndim != 1:
        raise InputError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise InputError(f"{len(y)} labels for {n} images")
    if len(y) and not np.all(np.equal(np.mod(y, 1), 0)):
        raise InputError("labels must be integers")
    y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    return y


def as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def torch_dtype(name):
    try:
        return {"float32": torch.float32, "float64": torch.float64}[name]
    except KeyError:
        raise ConfigError(f"dtype must be 'float32' or 'float64', got {name!r}") from None
