"""Shared helpers for the test suite."""

import numpy as np

from latentattn.ndcore import NdArray, Tape, finite_diff, grad


def rand_array(rng, shape, requires_grad=False, lo=-1.0, hi=1.0):
    return NdArray(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def max_rel_err(a, b, floor=1e-12):
    """Relative error of arrays against a shared magnitude scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b)) / scale)


def gradcheck(build_loss, params, step=1e-6, tol=1e-4):
    """Compare taped gradients of a scalar loss against central differences.

    ``build_loss`` must run the forward from the params' current contents
    and return the scalar loss node; it is re-invoked by the oracle.
    """
    with Tape() as tape:
        loss = build_loss()
    analytic = grad(tape, loss, params)

    def lossfn(_param):
        return build_loss().item()

    worst = 0.0
    for p, g in zip(params, analytic):
        fd = finite_diff(lossfn, p, step)
        err = rel_err(g.data, fd.data, floor=1e-6)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} on param shape {p.shape}"
    return worst
