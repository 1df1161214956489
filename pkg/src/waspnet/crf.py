"""Fully connected CRF with two Gaussian pairwise kernels.

Energy of a labelling ``x``::

    E(x) = sum_i -log P_i(x_i)
         + sum_{i<j} [x_i != x_j] * ( w1 * exp(-|p_i-p_j|^2 / 2 sa^2 - |I_i-I_j|^2 / 2 sb^2)
                                    + w2 * exp(-|p_i-p_j|^2 / 2 sg^2) )

The pairwise sum runs over unordered pixel pairs; summing over ordered
pairs would exactly double it. Message passing is exact and dense (O(N^2)
per iteration, evaluated in row blocks), which is fine up to ~128x128.
"""

import itertools
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import NumericalError, ShapeError
from .metrics import ConfusionMatrix
from .validation import check_finite, check_probabilities

PROB_FLOOR = 1e-12
_BLOCK = 512


@dataclass(frozen=True)
class CrfParams:
    w1: float = 4.0
    w2: float = 3.0
    sigma_alpha: float = 50.0
    sigma_beta: float = 3.0
    sigma_gamma: float = 3.0
    iterations: int = 10

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError(f"kernel weights must be non-negative, got w1={self.w1}, w2={self.w2}")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")

    def to_dict(self):
        return asdict(self)


@dataclass
class UnaryField:
    """Softmax output ``(c, h, w)`` of a network plus the RGB image ``(h, w, 3)``."""

    probabilities: np.ndarray
    image: np.ndarray

    def __post_init__(self):
        self.probabilities = check_probabilities(self.probabilities)
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3 or self.image.shape[:2] != self.probabilities.shape[1:]:
            raise ShapeError(
                f"image {self.image.shape} and probabilities {self.probabilities.shape} "
                "must share spatial dims"
            )
        check_finite(self.image, "CRF image")

    @property
    def shape(self):
        return self.probabilities.shape[1:]

    @property
    def num_classes(self):
        return self.probabilities.shape[0]


class ProbabilityClampWarning(RuntimeWarning):
    """A chosen label had probability 0 and its unary was clamped."""


@dataclass
class EnergyReport:
    unary: float
    pairwise: float
    n_clamped: int

    @property
    def total(self):
        return self.unary + self.pairwise

    @property
    def pairwise_ordered(self):
        """Pairwise term summed over ordered pairs (twice the unordered sum)."""
        return 2.0 * self.pairwise


def _features(shape, image):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    col = image.reshape(h * w, -1)
    return pos, col


def _sqdist(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def _kernel_rows(pos, col, rows, params):
    """Combined pairwise kernel ``k(i, j)`` for ``i`` in ``rows`` against all ``j``."""
    dp = _sqdist(pos[rows], pos)
    k = np.zeros_like(dp)
    if params.w1:
        dc = _sqdist(col[rows], col)
        k += params.w1 * np.exp(-dp / (2 * params.sigma_alpha**2) - dc / (2 * params.sigma_beta**2))
    if params.w2:
        k += params.w2 * np.exp(-dp / (2 * params.sigma_gamma**2))
    return k


def pairwise_kernel(unary, params, i, j):
    """``k(i, j)`` between two flat pixel indices (for inspection and tests)."""
    pos, col = _features(unary.shape, unary.image)
    return float(_kernel_rows(pos, col, np.array([i]), params)[0, j])


def energy_report(labeling, unary, params):
    """Unary and pairwise parts of the CRF energy of ``labeling``."""
    labeling = np.asarray(labeling)
    if labeling.shape != unary.shape:
        raise ShapeError(f"labeling {labeling.shape} does not match unary {unary.shape}")
    if labeling.min() < 0 or labeling.max() >= unary.num_classes:
        raise ShapeError("labeling contains class ids outside the unary's range")
    lab = labeling.ravel().astype(np.int64)
    P = unary.probabilities.reshape(unary.num_classes, -1)
    p = P[lab, np.arange(lab.size)]
    n_clamped = int((p < PROB_FLOOR).sum())
    if n_clamped:
        warnings.warn(f"{n_clamped} pixel(s) have zero probability under the labeling; "
                      f"clamped to {PROB_FLOOR}", ProbabilityClampWarning, stacklevel=2)
    u = float(-np.log(np.maximum(p, PROB_FLOOR)).sum())
    pw = 0.0
    if params.w1 or params.w2:
        pos, col = _features(unary.shape, unary.image)
        n = lab.size
        for start in range(0, n, _BLOCK):
            rows = np.arange(start, min(start + _BLOCK, n))
            k = _kernel_rows(pos, col, rows, params)
            differ = lab[rows][:, None] != lab[None, :]
            # upper triangle only: j > i
            upper = np.arange(n)[None, :] > rows[:, None]
            pw += float((k * (differ & upper)).sum())
    return EnergyReport(u, pw, n_clamped)


def energy(labeling, unary, params):
    """Total CRF energy ``E(x)`` of a labelling (unordered pairwise pairs)."""
    return energy_report(labeling, unary, params).total


def mean_field_refine(unary, params, return_history=False):
    """Synchronous mean-field inference.

    Each round computes the message ``m_i(l) = sum_{j != i} k(i, j) Q_j(l)``
    and sets ``Q_i(l) ∝ P_i(l) exp(m_i(l))``, which equals
    ``exp(-unary - Potts penalty)`` after dropping the per-pixel constant
    ``sum_l m_i(l)``. Returns refined probabilities ``(c, h, w)``.
    """
    P = unary.probabilities
    C = unary.num_classes
    if params.w1 == 0 and params.w2 == 0:
        return (P.copy(), [P.copy()]) if return_history else P.copy()
    n = P.shape[1] * P.shape[2]
    Pf = P.reshape(C, n).T
    logP = np.log(np.maximum(Pf, PROB_FLOOR))
    pos, col = _features(unary.shape, unary.image)
    self_k = params.w1 + params.w2
    blocks = [np.arange(s, min(s + _BLOCK, n)) for s in range(0, n, _BLOCK)]
    cached = [_kernel_rows(pos, col, rows, params) for rows in blocks] if n <= 4096 else None

    Q = Pf / Pf.sum(axis=1, keepdims=True)
    history = [Q.T.reshape(P.shape).copy()]
    for _ in range(params.iterations):
        msg = np.empty_like(Q)
        for b, rows in enumerate(blocks):
            k = cached[b] if cached is not None else _kernel_rows(pos, col, rows, params)
            msg[rows] = k @ Q - self_k * Q[rows]
        logits = logP + msg
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits) * (Pf > 0)
        Q = e / e.sum(axis=1, keepdims=True)
        if not np.all(np.isfinite(Q)):
            raise NumericalError("mean-field: non-finite messages")
        history.append(Q.T.reshape(P.shape).copy())
    out = Q.T.reshape(P.shape)
    return (out, history) if return_history else out


def default_grid(w1_step=1.0, sigma_alpha_step=10.0, sigma_beta_step=1.0):
    """Tuning grid over w1 in [3, 6], sigma_alpha in [30, 100], sigma_beta in [3, 6]
    with w2 = sigma_gamma = 3."""
    def span(lo, hi, step):
        return [float(v) for v in np.round(np.arange(lo, hi + step / 2, step), 10)]

    return {
        "w1": span(3, 6, w1_step),
        "sigma_alpha": span(30, 100, sigma_alpha_step),
        "sigma_beta": span(3, 6, sigma_beta_step),
        "w2": [3.0],
        "sigma_gamma": [3.0],
    }


_GRID_ORDER = [f.name for f in fields(CrfParams)]


def iter_grid(grid, base=None):
    """Yield ``CrfParams`` over the Cartesian product of ``grid`` in
    lexicographic order of (w1, w2, sigma_alpha, sigma_beta, sigma_gamma, iterations)."""
    unknown = set(grid) - set(_GRID_ORDER)
    if unknown:
        raise ValueError(f"unknown CRF grid keys {sorted(unknown)}")
    base = base or CrfParams()
    keys = [k for k in _GRID_ORDER if k in grid]
    values = [sorted(grid[k]) for k in keys]
    for combo in itertools.product(*values):
        yield CrfParams(**{**base.to_dict(), **dict(zip(keys, combo))})


def evaluate(params, eval_set):
    """Refined mIOU of ``params`` over ``[(UnaryField, gt_labels), ...]``."""
    conf = None
    for unary, gt in eval_set:
        Q = mean_field_refine(unary, params)
        conf = conf or ConfusionMatrix(unary.num_classes)
        conf.accumulate(Q.argmax(axis=0), gt)
    return conf.miou()[0]


def tune(grid, eval_set, base=None):
    """Exhaustive grid search; ties go to the first point in grid order.

    Returns ``(best_params, results)`` with ``results`` a list of
    ``(params, miou)`` in evaluation order.
    """
    candidates = list(iter_grid(grid, base))
    if not candidates or any(len(v) == 0 for v in grid.values()):
        raise ValueError("tune: empty grid")
    eval_set = list(eval_set)
    if not eval_set:
        raise ValueError("tune: empty evaluation set")
    results = [(p, evaluate(p, eval_set)) for p in candidates]
    best = results[0]
    for r in results[1:]:
        if r[1] > best[1]:
            best = r
    return best[0], results


class DenseCRF(BaseEstimator):
    """Estimator wrapper around :func:`mean_field_refine`.

    Stateless: ``fit`` only validates, so the object composes with
    parameter-search tooling through ``get_params``/``set_params``.
    """

    def __init__(self, w1=4.0, w2=3.0, sigma_alpha=50.0, sigma_beta=3.0, sigma_gamma=3.0,
                 iterations=10):
        self.w1 = w1
        self.w2 = w2
        self.sigma_alpha = sigma_alpha
        self.sigma_beta = sigma_beta
        self.sigma_gamma = sigma_gamma
        self.iterations = iterations

    @property
    def params_(self):
        return CrfParams(**self.get_params())

    def fit(self, probabilities=None, images=None):
        self.params_  # noqa: B018  (validates)
        return self

    def transform(self, probabilities, image):
        return mean_field_refine(UnaryField(probabilities, image), self.params_)

    def predict(self, probabilities, image):
        return self.transform(probabilities, image).argmax(axis=0)
