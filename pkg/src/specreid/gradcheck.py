"""Central finite-difference gradient checking.

The numerical side only ever calls the forward pass, so it stays independent
of the backward code it is judging. Relative error uses
|analytic - numeric| / max(1, |analytic|, |numeric|).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def finite_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued ``f()`` w.r.t. array ``x``.

    ``x`` is mutated in place entry by entry and restored, so ``f`` must read
    the same array object.
    """
    grad = np.zeros_like(x)
    flat = x.ravel()
    assert np.shares_memory(flat, x), "finite_diff needs a contiguous array"
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic, numeric):
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build, arrays, h=1e-5):
    """Compare analytic grads of ``build(*tensors)`` against central differences.

    ``build`` maps Tensors to a scalar Tensor. Returns the per-input max
    relative errors.
    """
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]

    def f():
        with ad.no_grad():
            return build(*tensors).item()

    loss = build(*tensors)
    ad.backward(loss)
    errors = []
    for t, a in zip(tensors, arrays):
        numeric = finite_diff(f, a, h=h)
        errors.append(rel_error(t.grad, numeric))
    return errors


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_entries: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def check_named_parameters(loss_fn, params, tol, h=1e-5, max_entries=None, rng=None):
    """Finite-difference check of every parameter tensor against one backward pass.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values;
    ``params`` maps name -> Tensor. With ``max_entries`` set, larger tensors
    are checked on a random entry subset.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    ad.backward(loss)

    def f():
        with ad.no_grad():
            return loss_fn().item()

    results = []
    for name, p in params.items():
        data = p.data
        flat = data.ravel()
        gflat = p.grad.ravel() if p.grad is not None else np.zeros(data.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = gflat[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if err > worst:
                worst = err
        results.append(CheckResult(name, worst, tol, len(idx)))
    return results
