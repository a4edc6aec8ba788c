"""Central finite-difference gradient oracle.

Independent of the autodiff engine: gradients are estimated by re-running
the forward function with each input element nudged by +/- h and comparing
against whatever the tape produced.
"""

from __future__ import annotations

import numpy as np

from selflabel.autodiff import GradTape, Tensor

H = 1e-5


def numeric_grad(f, arrays, h: float = H):
    """d f(arrays) / d arrays[i] by central differences, element by element.

    f takes a list of numpy arrays and returns a float.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for j in range(a.size):        # .flat writes through for any rank
            orig = a.flat[j]
            a.flat[j] = orig + h
            hi = f(arrays)
            a.flat[j] = orig - h
            lo = f(arrays)
            a.flat[j] = orig
            g.flat[j] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(build, arrays, tol: float = 1e-5) -> float:
    """Compare tape gradients of `build` against the finite-difference oracle.

    build: callable taking a list of Tensors, returning a scalar Tensor.
    arrays: list of numpy float64 arrays (the leaf values).
    Returns the worst relative error; asserts it is within tol.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = build(leaves)
    tape.backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad.copy()
                for a, t in zip(arrays, leaves)]

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays])
    err = max_rel_err(analytic, numeric)
    assert err <= tol, f"gradient mismatch: max rel err {err:.3e} > {tol:g}"
    return err
