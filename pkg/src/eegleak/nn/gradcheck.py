"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Dict, Sequence, Tuple

import numpy as np

Objective = Callable[[Sequence[np.ndarray]], Tuple[float, Sequence[np.ndarray]]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Entrywise error scaled by the tensor's largest gradient magnitude.

    Scaling each entry by its own magnitude makes near-zero entries report
    pure rounding noise as large relative errors.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), 1e-8)
    return np.abs(a - n) / scale


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def gradient_check(op: Objective, inputs: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Max relative error between ``op``'s analytic gradients and central differences.

    ``op(inputs)`` must return ``(scalar, [d scalar / d input for input in inputs])``.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    _, analytic = op(inputs)
    worst = 0.0
    for x, a in zip(inputs, analytic):
        num = numeric_gradient(lambda: op(inputs)[0], x, eps)
        worst = max(worst, float(relative_error(a, num).max(initial=0.0)))
    return worst


def module_objective(module, forward: Callable, projection: np.ndarray):
    """Scalar ``sum(forward(x) * projection)`` over a module's input and parameters.

    Returns ``(op, inputs)`` ready for :func:`gradient_check`; ``inputs[0]`` is the
    layer input and the remaining entries alias the module's parameter arrays.
    """
    names = [name for name, _, _ in module.named_parameters()]
    params = module.parameters()

    def op(arrays):
        x, *ps = arrays
        for name, p in zip(names, ps):
            params[name][...] = p
        module.zero_grad()
        y = forward(x)
        dx = module.backward(projection)
        grads = module.gradients()
        return float(np.sum(y * projection)), [dx] + [grads[n].copy() for n in names]

    def make_inputs(x: np.ndarray):
        return [x] + [params[n].copy() for n in names]

    return op, make_inputs


def check_module(module, forward: Callable, x: np.ndarray, rng: np.random.Generator,
                 eps: float = 1e-6) -> Dict[str, float]:
    """Per-tensor max relative error for a module (input first, then parameters)."""
    y = forward(np.array(x))
    proj = rng.normal(size=y.shape)
    op, make_inputs = module_objective(module, forward, proj)
    inputs = make_inputs(np.array(x, dtype=np.float64))
    names = ["input"] + [name for name, _, _ in module.named_parameters()]
    _, analytic = op(inputs)
    out = {}
    for i, (name, a) in enumerate(zip(names, analytic)):
        num = numeric_gradient(lambda: op(inputs)[0], inputs[i], eps)
        out[name] = float(relative_error(a, num).max(initial=0.0))
    return out
