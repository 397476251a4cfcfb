"""Non-quadratic test problem with a logistic (softplus) lower-level coupling.

Lower level::

    g(x, y) = mu/2 ||y||^2 + 1/m sum_i softplus(a_i^T y + b_i^T x)

Upper level::

    f(x, y) = 1/2 ||x - x0||^2 + sum_j log cosh(y_j - t_j)

Hessian and Jacobian products vary with the point, so the finite-difference
estimators carry an O(delta^2) truncation error. All moduli needed by the
error bounds are certified in closed form.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import expit

from ..errors import InvalidArgumentError
from ..oracle import BilevelOracle, ProblemConstants, SampleKey, Stream, key_rng
from .quadratic import NoiseSpec, normalize_noise

# max |softplus'''| = max |s(1 - s)(1 - 2s)| over s in (0, 1)
SOFTPLUS_THIRD_BOUND = 1.0 / (6.0 * np.sqrt(3.0))


def _softplus(z):
    return np.logaddexp(0.0, z)


class LogisticCoupled(BilevelOracle):
    has_second_order = True
    has_ground_truth = False
    name = "logistic"

    def __init__(self, A, B, mu, x0, t, noise: NoiseSpec = 0.0):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        if self.A.shape[0] != self.B.shape[0]:
            raise InvalidArgumentError("A and B need the same number of rows")
        if not mu > 0:
            raise InvalidArgumentError("mu must be positive")
        self.m, self.q = self.A.shape
        self.p = self.B.shape[1]
        self.mu = float(mu)
        self.x0 = np.asarray(x0, dtype=float).reshape(self.p)
        self.t = np.asarray(t, dtype=float).reshape(self.q)
        self._sigma = normalize_noise(noise)
        self.constants = self._certify()
        self._noise = lru_cache(maxsize=64)(self._draw_noise)

    def _certify(self) -> ProblemConstants:
        m = self.m
        nA = np.linalg.norm(self.A, 2)
        nB = np.linalg.norm(self.B, 2)
        nAB = np.linalg.norm(np.hstack([self.B, self.A]), 2)
        row = np.max(np.linalg.norm(np.hstack([self.A, self.B]), axis=1))
        return ProblemConstants(
            mu_g=self.mu,
            L_g=self.mu + 0.25 * nA * nAB / m,
            L_gyy=SOFTPLUS_THIRD_BOUND * nA**2 * row / m,
            L_gxy=SOFTPLUS_THIRD_BOUND * nA * nB * row / m,
            L_fx=1.0,
            L_fy=1.0,
            C_fy=float(self.q),
            C_gxy=(0.25 * nA * nB / m) ** 2,
        )

    def _draw_noise(self, key: SampleKey):
        sigma = self._sigma[Stream(key.stream)]
        if sigma == 0.0:
            return None
        z = key_rng(key).standard_normal(2 * self.p + 2 * self.q) * sigma
        z.setflags(write=False)
        return z

    def _add_noise(self, grad, key, start, stop):
        if key is None:
            return grad
        z = self._noise(key)
        return grad if z is None else grad + z[start:stop]

    def _z(self, x, y):
        return self.A @ y + self.B @ x

    def _grad_f_x(self, x, y, key):
        return self._add_noise(x - self.x0, key, 0, self.p)

    def _grad_f_y(self, x, y, key):
        p, q = self.p, self.q
        return self._add_noise(np.tanh(y - self.t), key, p, p + q)

    def _grad_g_y(self, x, y, key):
        p, q = self.p, self.q
        s = expit(self._z(x, y))
        return self._add_noise(self.mu * y + self.A.T @ s / self.m, key, p + q, p + 2 * q)

    def _grad_g_x(self, x, y, key):
        p, q = self.p, self.q
        s = expit(self._z(x, y))
        return self._add_noise(self.B.T @ s / self.m, key, p + 2 * q, 2 * p + 2 * q)

    def _f_value(self, x, y):
        d = y - self.t
        # log cosh(d) = |d| + log1p(exp(-2|d|)) - log 2
        lc = np.abs(d) + np.log1p(np.exp(-2.0 * np.abs(d))) - np.log(2.0)
        return 0.5 * np.sum((x - self.x0) ** 2) + np.sum(lc)

    def g_value(self, x, y) -> float:
        return float(0.5 * self.mu * y @ y + np.mean(_softplus(self._z(x, y))))

    def _curv(self, x, y):
        s = expit(self._z(x, y))
        return s * (1.0 - s)

    def _hess_g_yy_vec(self, x, y, v, key):
        return self.mu * v + self.A.T @ (self._curv(x, y) * (self.A @ v)) / self.m

    def _jac_g_xy_vec(self, x, y, v, key):
        return self.B.T @ (self._curv(x, y) * (self.A @ v)) / self.m


def make_logistic(p: int, q: int, m: int = 20, mu: float = 1.0, scale: float = 2.0,
                  noise: NoiseSpec = 0.0, seed: int = 0) -> LogisticCoupled:
    """Random logistic-coupled instance with ``m`` softplus terms of size ``scale``."""
    if min(p, q, m) < 1:
        raise InvalidArgumentError("p, q and m must be positive")
    rng = np.random.default_rng(seed)
    A = scale * rng.standard_normal((m, q))
    B = scale * rng.standard_normal((m, p))
    return LogisticCoupled(A, B, mu, rng.standard_normal(p), rng.standard_normal(q), noise=noise)
