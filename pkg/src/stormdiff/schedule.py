"""Linear variance schedule and derived diffusion coefficients.

The schedule is the one immutable object every other stage consumes: beta
rises linearly from ``beta1`` to ``betaT`` over ``T`` steps, alpha = 1 - beta,
and alpha_bar is the running product of alphas with a leading 1 at index 0 so
timestep t indexes ``alpha_bar[t]`` directly.

Two construction details matter for reproducibility:

* The linear step is (betaT - beta1) / (T - 1), so both endpoints are met
  exactly.  A common variant divides by T, which leaves the last beta short of
  the requested endpoint by one step; we document the difference and keep the
  endpoint-exact form.
* alpha_bar is accumulated in log space (cumulative sum of log alpha, then
  exponentiated) rather than as a direct running product, which avoids
  float32 underflow when consumers downcast.  All arrays are stored float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRangeError


@dataclass(frozen=True)
class Schedule:
    """Immutable variance schedule; safe for unrestricted concurrent reads."""

    T: int
    beta: np.ndarray  # shape (T,), strictly increasing, in (0, 1)
    alpha: np.ndarray  # shape (T,), alpha[i] = 1 - beta[i]
    alpha_bar: np.ndarray  # shape (T+1,), alpha_bar[0] = 1

    # sqrt lookups used by the hot perturbation/sampling paths
    sqrt_alpha_bar: np.ndarray = field(repr=False, default=None)
    sqrt_one_minus_alpha_bar: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "sqrt_alpha_bar", np.sqrt(self.alpha_bar))
        object.__setattr__(
            self, "sqrt_one_minus_alpha_bar", np.sqrt(1.0 - self.alpha_bar)
        )
        for arr in ("beta", "alpha", "alpha_bar", "sqrt_alpha_bar",
                    "sqrt_one_minus_alpha_bar"):
            getattr(self, arr).setflags(write=False)


def build_linear_schedule(T: int, beta1: float, betaT: float) -> Schedule:
    """Construct the endpoint-exact linear schedule.

    Requires T >= 2 and 0 < beta1 < betaT < 1.
    """
    if T < 2:
        raise InvalidRangeError(f"timestep count must be >= 2, got T={T}")
    if not (0.0 < beta1 < betaT < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta1 < betaT < 1, got beta1={beta1}, betaT={betaT}"
        )
    beta = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha = 1.0 - beta
    log_alpha = np.log(alpha)
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.exp(np.cumsum(log_alpha))
    return Schedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def coeffs_at(s: Schedule, t: int):
    """Coefficient tuple for timestep t in 1..T.

    Returns (alpha_t, beta_t, alpha_bar_t, sqrt_alpha_bar_t,
    sqrt_one_minus_alpha_bar_t).
    """
    if not 1 <= t <= s.T:
        raise InvalidRangeError(f"timestep {t} outside valid range 1..{s.T}")
    return (
        s.alpha[t - 1],
        s.beta[t - 1],
        s.alpha_bar[t],
        s.sqrt_alpha_bar[t],
        s.sqrt_one_minus_alpha_bar[t],
    )
