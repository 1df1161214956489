"""Central finite-difference gradient checking."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalError


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_skipped: int = 0
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_error <= self.tolerance

    def __bool__(self):
        return self.passed

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}: max rel error {self.max_rel_error:.3e} (tol {self.tolerance:.0e}), "
            f"{self.n_checked} coords checked, {self.n_skipped} skipped at kinks"
        )


def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / (max(|a|, |n|) + floor)``.

    ``floor`` is 1e-3 of the mean analytic magnitude so entries that are
    zero up to roundoff are judged against the tensor's own scale.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = 1e-3 * float(np.mean(np.abs(a))) + 1e-12
    return np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + floor)


def grad_check(func, grad_func, inputs, tolerance=1e-4, eps=1e-3, *, max_coords=None,
               signature=None, seed=0):
    """Compare analytic gradients against central differences in float64.

    Parameters
    ----------
    func : callable
        ``func(inputs) -> float``; a pure scalar function of the arrays in
        the ``inputs`` dict.
    grad_func : callable
        ``grad_func(inputs) -> dict`` of analytic gradients, same keys and
        shapes as ``inputs``.
    inputs : dict of str -> ndarray
        Evaluation point. Copied and promoted to float64.
    max_coords : int, optional
        Check at most this many randomly chosen coordinates per input.
    signature : callable, optional
        Returns a hashable activation pattern describing the last ``func``
        call (e.g. ReLU masks). Coordinates whose +eps / -eps evaluations
        change the pattern straddle a kink and are skipped.
    """
    point = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    base = float(func(point))
    if not np.isfinite(base):
        raise NumericalError("grad_check: objective is non-finite at the base point")
    base_sig = signature() if signature is not None else None
    analytic = {k: np.asarray(g, dtype=np.float64) for k, g in grad_func(point).items()}
    rng = np.random.default_rng(seed)

    worst, checked, skipped, per_input = 0.0, 0, 0, {}
    for name, arr in point.items():
        if analytic[name].shape != arr.shape:
            raise ValueError(f"grad_check: gradient for {name!r} has shape {analytic[name].shape}, "
                             f"expected {arr.shape}")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num, keep = np.empty(idx.size), np.ones(idx.size, dtype=bool)
        for t, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(func(point))
            sig_p = signature() if signature is not None else None
            flat[i] = orig - eps
            fm = float(func(point))
            sig_m = signature() if signature is not None else None
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite objective perturbing {name}[{i}]")
            if signature is not None and (sig_p != base_sig or sig_m != base_sig):
                keep[t] = False
            num[t] = (fp - fm) / (2 * eps)
        a = analytic[name].reshape(-1)[idx][keep]
        e = float(relative_error(a, num[keep]).max()) if a.size else 0.0
        per_input[name] = e
        worst = max(worst, e)
        checked += int(keep.sum())
        skipped += int((~keep).sum())
    if signature is not None:
        func(point)  # leave caller state at the base point
    return GradCheckReport(worst, tolerance, checked, skipped, per_input)


def graph_grad_check(graph, inputs, *, seed=0, tolerance=1e-4, eps=1e-3, max_coords=None,
                     mode="eval"):
    """Gradient check of a :class:`~waspnet.graph.ModuleGraph`.

    The graph is copied to float64 and reduced to the scalar
    ``sum(output * R)`` for a fixed random ``R``, so every output element
    contributes. Gradients are checked for the graph inputs and all
    parameters; ReLU kinks are skipped through the activation signature.
    """
    g64 = graph.astype(np.float64)
    if not isinstance(inputs, dict):
        inputs = {g64.inputs[0]: inputs}
    inputs = {f"input:{k}": np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    out_shape = g64.infer_shapes({k[6:]: v.shape for k, v in inputs.items()})[g64.output]
    proj = np.random.default_rng(seed).standard_normal(out_shape)
    point = {**inputs, **{f"param:{k}": v for k, v in g64.params.items()}}

    def _load(p):
        g64.params = {k[6:]: v for k, v in p.items() if k.startswith("param:")}
        return {k[6:]: v for k, v in p.items() if k.startswith("input:")}

    def func(p):
        return float((g64.forward(_load(p), mode=mode) * proj).sum())

    def grad_func(p):
        g64.forward(_load(p), mode=mode)
        gin = g64.backward(proj)
        grads = {f"input:{k}": v for k, v in gin.items()}
        grads.update({f"param:{k}": v for k, v in g64.grads.items()})
        return grads

    return grad_check(func, grad_func, point, tolerance, eps, max_coords=max_coords,
                      signature=g64.activation_signature, seed=seed)
