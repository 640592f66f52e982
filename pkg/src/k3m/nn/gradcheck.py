"""Finite-difference verification of analytic gradients.

The check perturbs sampled scalar parameter entries by +/- eps, re-runs the
forward pass, and compares the central difference against the recorded
gradient.  Run it on a float64 ParamStore; float32 rounding swamps the 1e-3
tolerances this is meant to certify.
"""

from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import Tensor, backward


class NondeterministicForwardError(RuntimeError):
    pass


def grad_check(
    forward,
    store: ParamStore,
    eps: float = 1e-4,
    n_samples: int = 100,
    seed: int = 0,
    param_names: list[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward`` must be a nullary callable returning a scalar Tensor and must
    be deterministic: it is run twice up front and any value drift raises
    ``NondeterministicForwardError``.  Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    loss_a = forward()
    loss_b = forward()
    if not isinstance(loss_a, Tensor) or loss_a.data.size != 1:
        raise ValueError("forward() must return a scalar Tensor")
    if loss_a.item() != loss_b.item():
        raise NondeterministicForwardError(
            f"two forward passes disagree: {loss_a.item()!r} vs {loss_b.item()!r}"
        )

    store.zero_grad()
    backward(loss_a)
    analytic = {name: store.grad(name).copy() for name in store.names()}

    names = param_names if param_names is not None else store.names()
    slots = [(name, i) for name in names for i in range(store.get(name).data.size)]
    rng = np.random.default_rng(seed)
    if len(slots) > n_samples:
        chosen = [slots[i] for i in rng.choice(len(slots), size=n_samples, replace=False)]
    else:
        chosen = slots

    worst = 0.0
    for name, flat_index in chosen:
        flat = store.get(name).data.reshape(-1)
        original = flat[flat_index]
        flat[flat_index] = original + eps
        f_plus = forward().item()
        flat[flat_index] = original - eps
        f_minus = forward().item()
        flat[flat_index] = original

        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name].reshape(-1)[flat_index]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
