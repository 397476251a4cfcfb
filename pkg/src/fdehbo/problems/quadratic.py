"""Strongly convex quadratic bilevel family with closed-form ground truth.

Upper level::

    f(x, y) = 1/2 (x - a)^T A (x - a) + 1/2 (y - b)^T B (y - b) + e^T y

Lower level::

    g(x, y) = 1/2 y^T Q y - y^T (P x + c) + 1/2 x^T G x

Stochastic gradients add zero-mean Gaussian noise with a per-stream
standard deviation; second-order products are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional, Union

import numpy as np

from ..errors import InvalidArgumentError
from ..oracle import BilevelOracle, GroundTruth, ProblemConstants, SampleKey, Stream, key_rng

NoiseSpec = Union[float, Mapping[str, float], None]

_STREAM_NAMES = {"xi": Stream.UpperXi, "zeta": Stream.LowerZeta, "psi": Stream.LsPsi}


def normalize_noise(noise: NoiseSpec) -> dict:
    """Map a scalar or ``{"xi": .., "zeta": .., "psi": ..}`` to ``{Stream: sigma}``."""
    if noise is None:
        noise = 0.0
    if np.isscalar(noise):
        sigmas = {s: float(noise) for s in Stream}
    else:
        unknown = set(noise) - set(_STREAM_NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown noise streams {sorted(unknown)}")
        sigmas = {s: float(noise.get(name, 0.0)) for name, s in _STREAM_NAMES.items()}
    for s, sigma in sigmas.items():
        if not np.isfinite(sigma) or sigma < 0:
            raise InvalidArgumentError(f"noise sigma for {s.name} must be >= 0, got {sigma}")
    return sigmas


@dataclass
class QuadraticBilevelSpec:
    Q: np.ndarray
    P: np.ndarray
    c: np.ndarray
    A: np.ndarray
    a: np.ndarray
    b: np.ndarray
    B: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    noise_sigma: NoiseSpec = 0.0
    # constants involving ||y|| are certified on the ball ||y|| <= domain_radius
    domain_radius: float = 10.0
    p: int = field(init=False)
    q: int = field(init=False)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.q = self.Q.shape[0]
        self.P = np.asarray(self.P, dtype=float).reshape(self.q, -1)
        self.p = self.P.shape[1]
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.c = np.asarray(self.c, dtype=float).reshape(self.q)
        self.a = np.asarray(self.a, dtype=float).reshape(self.p)
        self.b = np.asarray(self.b, dtype=float).reshape(self.q)
        self.B = np.eye(self.q) if self.B is None else np.atleast_2d(np.asarray(self.B, dtype=float))
        self.e = np.zeros(self.q) if self.e is None else np.asarray(self.e, dtype=float).reshape(self.q)
        self.G = np.zeros((self.p, self.p)) if self.G is None else np.atleast_2d(np.asarray(self.G, dtype=float))
        if self.Q.shape != (self.q, self.q) or not np.allclose(self.Q, self.Q.T):
            raise InvalidArgumentError("Q must be a symmetric square matrix")
        if self.A.shape != (self.p, self.p) or self.G.shape != (self.p, self.p):
            raise InvalidArgumentError("A and G must be p x p")
        if self.B.shape != (self.q, self.q):
            raise InvalidArgumentError("B must be q x q")
        if np.linalg.eigvalsh(self.Q)[0] <= 0:
            raise InvalidArgumentError("Q must be positive definite")
        for name in ("A", "B", "G"):
            m = getattr(self, name)
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m)[0] < -1e-12:
                raise InvalidArgumentError(f"{name} must be symmetric positive semidefinite")
        if not self.domain_radius > 0:
            raise InvalidArgumentError("domain_radius must be positive")
        normalize_noise(self.noise_sigma)


class QuadraticBilevel(BilevelOracle):
    """Oracle for :class:`QuadraticBilevelSpec` with every capability enabled."""

    has_second_order = True
    has_ground_truth = True
    name = "quadratic"

    def __init__(self, spec: QuadraticBilevelSpec):
        self.spec = spec
        self.p, self.q = spec.p, spec.q
        self._sigma = normalize_noise(spec.noise_sigma)
        self._Q_inv = np.linalg.inv(spec.Q)
        self.constants = self._certify()
        self._noise = lru_cache(maxsize=64)(self._draw_noise)

    def _certify(self) -> ProblemConstants:
        s = self.spec
        eig = np.linalg.eigvalsh(s.Q)
        norm_B = np.linalg.norm(s.B, 2)
        c_fy = (norm_B * (s.domain_radius + np.linalg.norm(s.b)) + np.linalg.norm(s.e)) ** 2
        return ProblemConstants(
            mu_g=float(eig[0]),
            L_g=float(np.linalg.norm(np.hstack([s.Q, -s.P]), 2)),
            L_gxy=0.0,
            L_gyy=0.0,
            L_fx=float(np.linalg.norm(s.A, 2)),
            L_fy=float(norm_B),
            C_fy=float(c_fy),
            C_gxy=float(np.linalg.norm(s.P, 2) ** 2),
        )

    # Noise for one key: [f_x | f_y | g_y | g_x]. Memoized because the
    # momentum recursions query every key at two snapshots.
    def _draw_noise(self, key: SampleKey) -> Optional[np.ndarray]:
        sigma = self._sigma[Stream(key.stream)]
        if sigma == 0.0:
            return None
        z = key_rng(key).standard_normal(2 * self.p + 2 * self.q)
        z *= sigma
        z.setflags(write=False)
        return z

    def _add_noise(self, grad, key, start, stop):
        if key is None:
            return grad
        z = self._noise(key)
        if z is None:
            return grad
        return grad + z[start:stop]

    def _grad_f_x(self, x, y, key):
        s = self.spec
        return self._add_noise(s.A @ (x - s.a), key, 0, self.p)

    def _grad_f_y(self, x, y, key):
        s = self.spec
        p, q = self.p, self.q
        return self._add_noise(s.B @ (y - s.b) + s.e, key, p, p + q)

    def _grad_g_y(self, x, y, key):
        s = self.spec
        p, q = self.p, self.q
        return self._add_noise(s.Q @ y - s.P @ x - s.c, key, p + q, p + 2 * q)

    def _grad_g_x(self, x, y, key):
        s = self.spec
        p, q = self.p, self.q
        return self._add_noise(s.G @ x - s.P.T @ y, key, p + 2 * q, 2 * p + 2 * q)

    def _f_value(self, x, y):
        s = self.spec
        dx, dy = x - s.a, y - s.b
        return 0.5 * dx @ s.A @ dx + 0.5 * dy @ s.B @ dy + s.e @ y

    def g_value(self, x, y) -> float:
        s = self.spec
        return float(0.5 * y @ s.Q @ y - y @ (s.P @ x + s.c) + 0.5 * x @ s.G @ x)

    def _hess_g_yy_vec(self, x, y, v, key):
        return self.spec.Q @ v

    def _jac_g_xy_vec(self, x, y, v, key):
        return -(self.spec.P.T @ v)

    def y_star(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        return self._Q_inv @ (s.P @ x + s.c)

    def phi(self, x: np.ndarray) -> float:
        return float(self._f_value(x, self.y_star(x)))

    def grad_phi(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        ys = self.y_star(x)
        return s.A @ (x - s.a) + s.P.T @ (self._Q_inv @ (s.B @ (ys - s.b) + s.e))

    def _ground_truth(self, x, y):
        s = self.spec
        v_star = self._Q_inv @ (s.B @ (y - s.b) + s.e)
        return GroundTruth(
            y_star=self.y_star(x),
            v_star=v_star,
            phi=self.phi(x),
            grad_phi=self.grad_phi(x),
        )


def make_quadratic(
    p: int,
    q: int,
    mu_g: float,
    L_g: float,
    noise: NoiseSpec = 0.0,
    seed: int = 0,
    domain_radius: Optional[float] = None,
    coupling: float = 1.0,
) -> QuadraticBilevel:
    """Random instance whose lower-level Hessian has spectrum in ``[mu_g, L_g]``.

    ``Q = U diag(lam) U^T`` with ``U`` Haar-orthogonal and ``lam`` spread
    evenly over ``[mu_g, L_g]`` (both ends attained). The coupling matrix has
    i.i.d. ``N(0, coupling^2 / p)`` entries, the upper level uses ``A = I``.
    """
    if p < 1 or q < 1:
        raise InvalidArgumentError("dimensions must be positive")
    if not (0 < mu_g <= L_g) or not np.isfinite(L_g):
        raise InvalidArgumentError(f"need 0 < mu_g <= L_g, got mu_g={mu_g}, L_g={L_g}")
    rng = np.random.default_rng(seed)
    if mu_g == L_g:
        Q = mu_g * np.eye(q)
    else:
        U, R = np.linalg.qr(rng.standard_normal((q, q)))
        U = U * np.sign(np.diag(R))
        lam = np.linspace(mu_g, L_g, q) if q > 1 else np.array([mu_g])
        Q = (U * lam) @ U.T
        Q = 0.5 * (Q + Q.T)
    P = coupling * rng.standard_normal((q, p)) / np.sqrt(p)
    c = rng.standard_normal(q)
    a = rng.standard_normal(p)
    b = rng.standard_normal(q)
    if domain_radius is None:
        domain_radius = 10.0 * np.sqrt(q)
    spec = QuadraticBilevelSpec(
        Q=Q, P=P, c=c, A=np.eye(p), a=a, b=b, noise_sigma=noise, domain_radius=domain_radius
    )
    return QuadraticBilevel(spec)
