"""Finite-difference validation of the analytic gradients."""

from __future__ import annotations

import math

import numpy as np

from gmvc.errors import InvalidInput, NonFiniteLoss
from gmvc.nn import tensor as T
from gmvc.nn.params import ParamStore

MAX_COORDS = 100_000

# Relative error uses a symmetric denominator with an absolute floor so
# that coordinates whose true gradient is ~0 are judged on the absolute
# scale of the finite-difference noise instead of blowing up.
REL_FLOOR = 1e-3

# Error level above which a coordinate is assumed to straddle a kink
# and re-measured at a smaller step.
RETRY_ABOVE = 1e-4


def gradcheck(loss_fn, store: ParamStore, eps: float = 1e-4, retries: int = 3):
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be a pure, deterministic closure over the store's
    current values returning a scalar ``Tensor`` (draw any noise once,
    outside). Every coordinate of every entry is perturbed by +-eps.
    Returns ``[(name, max_relative_error), ...]`` sorted worst-first.

    The loss is piecewise smooth (ReLU and max-pool switch points), and
    a coordinate sitting within eps of a switch makes the central
    difference average two unrelated slopes. Such coordinates are
    retried at geometrically smaller eps — the mismatch from a genuine
    gradient bug survives every step size, a straddled kink does not —
    and each coordinate keeps its best-resolved error.
    """
    if eps <= 0:
        raise InvalidInput("gradcheck eps must be positive")
    if store.n_coords() > MAX_COORDS:
        raise InvalidInput(
            f"gradcheck is restricted to {MAX_COORDS} coordinates; "
            f"store has {store.n_coords()}"
        )

    store.zero_grads()
    loss = loss_fn()
    if loss.data.size != 1:
        raise InvalidInput(f"loss must be scalar, got shape {loss.data.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss(f"loss is {loss.data.reshape(-1)[0]}")
    T.backward(loss)
    analytic = {n: p.grad.copy() for n, p in store.entries.items()}
    store.zero_grads()

    report = []
    with T.no_grad():
        for name, p in store.entries.items():
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                a = float(a_flat[i])
                err = math.inf
                step = eps
                for _ in range(retries + 1):
                    flat[i] = orig + step
                    f_plus = float(loss_fn().data.reshape(-1)[0])
                    flat[i] = orig - step
                    f_minus = float(loss_fn().data.reshape(-1)[0])
                    flat[i] = orig
                    numeric = (f_plus - f_minus) / (2.0 * step)
                    err = min(
                        err,
                        abs(a - numeric) / max(abs(a) + abs(numeric), REL_FLOOR),
                    )
                    if err <= RETRY_ABOVE:
                        break
                    step /= 4.0
                if err > worst:
                    worst = err
            report.append((name, worst))
    report.sort(key=lambda kv: kv[1], reverse=True)
    return report


def max_relative_error(report) -> float:
    return max((err for _, err in report), default=0.0)
