"""Input validation helpers used at every public entry point."""

import numpy as np

from .exceptions import NumericalError, ShapeError

IGNORE_LABEL = 255


def check_finite(x, where):
    """Raise :class:`NumericalError` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"{where}: {bad} non-finite value(s)")
    return x


def check_tensor(x, name="x", *, dtype=None, allow_empty=False):
    """Validate a rank-4 (batch, channel, height, width) float tensor.

    Float32 and float64 are kept as-is; anything else is converted to
    ``dtype`` (float32 when not given).
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64) or (dtype is not None and x.dtype != dtype):
        x = x.astype(dtype or np.float32)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (n, c, h, w) tensor, got shape {x.shape}")
    if not allow_empty and x.size == 0:
        raise ShapeError(f"{name}: empty tensor {x.shape}")
    return check_finite(x, name)


def check_images(X):
    """Coerce an image batch to ``(n, h, w, 3)`` uint8.

    Accepts a single ``(h, w, 3)`` image, a batch, or a list of equal-size
    images. Float input is assumed to be on the 0..255 scale.
    """
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(im) for im in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"images: expected (n, h, w, 3), got {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0 or X.shape[2] == 0:
        raise ShapeError(f"images: empty batch {X.shape}")
    if X.dtype != np.uint8:
        check_finite(X, "images")
        X = np.clip(np.rint(X), 0, 255).astype(np.uint8)
    return X


def check_labels(y, num_classes=None, *, shape=None):
    """Coerce a label batch to ``(n, h, w)`` int64 and check the alphabet."""
    if isinstance(y, (list, tuple)):
        y = np.stack([np.asarray(lab) for lab in y])
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ShapeError(f"labels: expected (n, h, w), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ShapeError("labels: non-integer class ids")
    y = y.astype(np.int64)
    if shape is not None and y.shape != tuple(shape):
        raise ShapeError(f"labels: shape {y.shape} does not match {tuple(shape)}")
    if num_classes is not None:
        bad = (y != IGNORE_LABEL) & ((y < 0) | (y >= num_classes))
        if bad.any():
            raise ShapeError(
                f"labels: values outside [0, {num_classes}) other than {IGNORE_LABEL}"
            )
    return y


def check_probabilities(P, atol=1e-5):
    """Validate a ``(c, h, w)`` probability map that sums to one per pixel."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 3 or P.size == 0:
        raise ShapeError(f"probabilities: expected (c, h, w), got {P.shape}")
    check_finite(P, "probabilities")
    if (P < 0).any() or (P > 1 + atol).any():
        raise ShapeError("probabilities: values outside [0, 1]")
    sums = P.sum(axis=0)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0):
        raise ShapeError(
            f"probabilities: per-pixel sums deviate from 1 by up to {np.abs(sums - 1).max():.3g}"
        )
    return P
