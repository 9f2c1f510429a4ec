"""Central finite-difference gradient oracle.

Independent of the autodiff engine: it only re-evaluates a loss callable
at perturbed parameter values.  Used in float64 where the spec demands
1e-3 relative agreement.
"""

from __future__ import annotations

import numpy as np

from moediff.autodiff import Tensor


def numeric_grad(loss_fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of loss_fn() w.r.t. one parameter tensor."""
    base = param.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(float(flat[i])))
        plus = flat.copy()
        plus[i] += step
        param.data = plus.reshape(base.shape)
        lp = float(loss_fn())
        minus = flat.copy()
        minus[i] -= step
        param.data = minus.reshape(base.shape)
        lm = float(loss_fn())
        gflat[i] = (lp - lm) / (2 * step)
    param.data = base
    return grad


def analytic_grads(loss_fn, params: list[Tensor]) -> list[np.ndarray]:
    """Backprop gradients of loss_fn() for each parameter."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, zero_atol: float = 1e-6) -> float:
    """Norm-relative disagreement.

    When both gradients vanish to within ``zero_atol`` (a parameter the
    loss truly does not depend on, e.g. an attention key bias), the pair
    counts as agreeing: central differences of a constant still carry
    cancellation noise around 1e-8.
    """
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if max(na, nb) < zero_atol:
        return 0.0
    return float(np.linalg.norm(a - b)) / max(na, nb)


def check_grads(loss_fn, named_params, h: float = 1e-5, tol: float = 1e-3) -> dict[str, float]:
    """Compare analytic vs numeric gradients parameter by parameter.

    Returns the per-parameter relative errors; raises AssertionError with
    the offender when any exceeds tol.
    """
    names = [n for n, _ in named_params]
    tensors = [t for _, t in named_params]
    analytic = analytic_grads(loss_fn, tensors)

    def scalar_loss():
        value = loss_fn()
        return value.item() if isinstance(value, Tensor) else float(value)

    errors = {}
    for name, tensor, a in zip(names, tensors, analytic):
        n = numeric_grad(scalar_loss, tensor, h=h)
        err = relative_error(a, n)
        errors[name] = err
        assert err <= tol, f"gradient mismatch for {name}: relative error {err:.3e} > {tol}"
    return errors
