"""Scalar linear plants, LQR design and the staleness cost.

Each loop is x' = a x + b u + w with w ~ N(0, sigma_w2) and quadratic
stage cost q x^2 + r u^2. The certainty-equivalent controller uses the
stationary Riccati solution; the remote estimator replays its own past
inputs when a delivered sample is older than the current slot.
"""

from dataclasses import dataclass


class RiccatiError(Exception):
    """Raised when the Riccati fixed-point iteration fails to converge."""


@dataclass
class PlantParams:
    a: float
    b: float = 1.0
    sigma_w2: float = 1.0
    q: float = 1.0
    r: float = 1.0

    def validate(self):
        if abs(self.a) > 1.3:
            raise ValueError(f"|a| must not exceed 1.3, got {self.a}")
        if self.b == 0.0:
            raise ValueError("b must be non-zero")
        if self.sigma_w2 <= 0.0:
            raise ValueError("sigma_w2 must be positive")
        if self.q <= 0.0:
            raise ValueError("q must be positive")
        if self.r <= 0.0:
            raise ValueError("r must be positive")
        return self


def solve_riccati(a, b, q, r, tol=1e-12, max_iter=10**6):
    """Stationary solution of P = q + a^2 P - (a b P)^2 / (r + b^2 P).

    Plain fixed-point iteration from P = q, stopped when successive
    iterates differ by at most `tol`. Returns (P, L) with the feedback
    gain L = a b P / (r + b^2 P), so that u = -L x_hat.
    """
    P = q
    a2 = a * a
    b2 = b * b
    for _ in range(max_iter):
        nxt = q + a2 * P - (a * b * P) ** 2 / (r + b2 * P)
        if abs(nxt - P) <= tol:
            P = nxt
            return P, a * b * P / (r + b2 * P)
        P = nxt
    raise RiccatiError(f"no convergence within {max_iter} iterations")


def plant_step(x, u, w, a, b):
    """One slot of the plant recursion."""
    return a * x + b * u + w


def stage_cost(x, u, q, r):
    return q * x * x + r * u * u


def aoi_cost(a, sigma_w2, delta):
    """Expected squared estimation error after `delta` slots without news.

    Sum of sigma_w2 * a^(2j) for j = 0 .. delta-1; the empty sum is zero.
    Evaluated in closed form, with the marginally stable a^2 = 1 case
    handled exactly.
    """
    if delta <= 0:
        return 0.0
    a2 = a * a
    if a2 == 1.0:
        return sigma_w2 * delta
    return sigma_w2 * (a2**delta - 1.0) / (a2 - 1.0)


def estimate_no_delivery(x_hat, u, a, b):
    """Open-loop propagation of the estimate under the last applied input."""
    return a * x_hat + b * u


def estimate_from_delivery(x_rx, delta, a, b, inputs):
    """Roll a received sample forward by replaying the applied inputs.

    `inputs` holds the `delta` inputs applied since the sample was taken,
    oldest first. A same-slot delivery (delta = 0) returns the sample.
    """
    if len(inputs) != delta:
        raise ValueError(f"need {delta} replay inputs, got {len(inputs)}")
    x = x_rx
    for u in inputs:
        x = a * x + b * u
    return x
