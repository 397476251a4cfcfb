"""Gradient estimators used by the single-loop bilevel optimizers.

Finite-difference Hessian/Jacobian-vector products replace second-order
oracle calls; ``momentum_update`` is the recursive (STORM-type) momentum
shared by all three estimators; ``project_ball`` keeps the linear-system
iterate bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError, NumericalError
from .oracle import Point, SampleKey, Stream

__all__ = [
    "FdParams",
    "MomentumBuffer",
    "fd_hessian_vec",
    "fd_jacobian_vec",
    "fo_ls_gradient",
    "fo_hypergradient",
    "exact_ls_gradient",
    "exact_hypergradient_surrogate",
    "momentum_update",
    "project_ball",
    "batch_mean",
]


@dataclass(frozen=True)
class FdParams:
    delta: float

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise InvalidArgumentError(f"delta must be finite and positive, got {self.delta}")


@dataclass(frozen=True)
class MomentumBuffer:
    value: np.ndarray
    initialized: bool = False

    @classmethod
    def zeros(cls, dim: int) -> "MomentumBuffer":
        return cls(np.zeros(dim), False)


def _finite(vec: np.ndarray, what: str) -> np.ndarray:
    # the sum is non-finite whenever any entry is
    if not math.isfinite(vec.sum()):
        raise NumericalError(f"{what} produced a non-finite value")
    return vec


def _require_stream(key: Optional[SampleKey], stream: Stream, what: str) -> None:
    if key is not None and key.stream != stream:
        raise ContractViolationError(f"{what} needs a {stream.name} key, got {Stream(key.stream).name}")


def fd_hessian_vec(oracle, pt: Point, v: np.ndarray, fd: FdParams, key: Optional[SampleKey]) -> np.ndarray:
    """Symmetric difference of ``grad_y g`` along ``v``; two oracle calls under one key."""
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("v must be finite")
    d = fd.delta
    plus = oracle.grad_g_y(Point(pt.x, pt.y + d * v), key)
    minus = oracle.grad_g_y(Point(pt.x, pt.y - d * v), key)
    return _finite((plus - minus) / (2 * d), "fd_hessian_vec")


def fd_jacobian_vec(oracle, pt: Point, v: np.ndarray, fd: FdParams, key: Optional[SampleKey]) -> np.ndarray:
    """Symmetric difference of ``grad_x g`` along ``v``; approximates ``grad_xy^2 g @ v``."""
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("v must be finite")
    d = fd.delta
    plus = oracle.grad_g_x(Point(pt.x, pt.y + d * v), key)
    minus = oracle.grad_g_x(Point(pt.x, pt.y - d * v), key)
    return _finite((plus - minus) / (2 * d), "fd_jacobian_vec")


def fo_ls_gradient(oracle, pt: Point, v: np.ndarray, fd: FdParams, key: Optional[SampleKey]) -> np.ndarray:
    """First-order linear-system gradient ``H~(x, y, v) - grad_y f``."""
    _require_stream(key, Stream.LsPsi, "fo_ls_gradient")
    return fd_hessian_vec(oracle, pt, v, fd, key) - oracle.grad_f_y(pt, key)


def fo_hypergradient(oracle, pt: Point, v: np.ndarray, fd: FdParams, key: Optional[SampleKey]) -> np.ndarray:
    """First-order hypergradient ``grad_x f - J~(x, y, v)``."""
    _require_stream(key, Stream.UpperXi, "fo_hypergradient")
    return oracle.grad_f_x(pt, key) - fd_jacobian_vec(oracle, pt, v, fd, key)


def exact_ls_gradient(oracle, pt: Point, v: np.ndarray, key: Optional[SampleKey]) -> np.ndarray:
    _require_stream(key, Stream.LsPsi, "exact_ls_gradient")
    return oracle.hess_g_yy_vec(pt, v, key) - oracle.grad_f_y(pt, key)


def exact_hypergradient_surrogate(oracle, pt: Point, v: np.ndarray, key: Optional[SampleKey]) -> np.ndarray:
    _require_stream(key, Stream.UpperXi, "exact_hypergradient_surrogate")
    return oracle.grad_f_x(pt, key) - oracle.jac_g_xy_vec(pt, v, key)


def batch_mean(estimate: Callable[[SampleKey], np.ndarray], key: SampleKey, batch: int) -> np.ndarray:
    """Average ``estimate`` over slots ``0 .. batch-1`` of ``key``."""
    if batch == 1:
        return estimate(key if key.slot == 0 else key.with_slot(0))
    total = estimate(key.with_slot(0))
    for slot in range(1, batch):
        total = total + estimate(key.with_slot(slot))
    return total / batch


def momentum_update(buf: MomentumBuffer, eta: float, grad_now: np.ndarray,
                    grad_prev: Optional[np.ndarray]) -> MomentumBuffer:
    """Recursive momentum ``h <- eta g_now + (1 - eta)(h + g_now - g_prev)``.

    ``grad_now`` and ``grad_prev`` must come from the same sample evaluated at
    the current and previous iterate. An uninitialized buffer only accepts
    ``eta == 1``, in which case ``grad_prev`` may be ``None``.
    """
    if not 0.0 <= eta <= 1.0:
        raise InvalidArgumentError(f"eta must lie in [0, 1], got {eta}")
    if eta == 1.0:
        value = np.array(grad_now, dtype=float, copy=True)
    else:
        if not buf.initialized:
            raise ContractViolationError("first momentum update must use eta = 1")
        if grad_prev is None:
            raise ContractViolationError("grad_prev is required when eta < 1")
        with np.errstate(over="ignore", invalid="ignore"):
            value = eta * grad_now + (1.0 - eta) * (buf.value + grad_now - grad_prev)
    return MomentumBuffer(_finite(value, "momentum_update"), True)


def project_ball(w: np.ndarray, r_v: float) -> np.ndarray:
    """Euclidean projection of ``w`` onto the ball of radius ``r_v``."""
    if not r_v > 0:
        raise InvalidArgumentError(f"radius must be positive, got {r_v}")
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise NumericalError("cannot project a non-finite vector")
    norm = np.linalg.norm(w)
    if norm <= r_v:
        return w
    out = w * (r_v / norm)
    # rounding can leave ||out|| a few ulps above r_v
    n_out = np.linalg.norm(out)
    while n_out > r_v:
        out = out * np.nextafter(r_v / n_out, 0.0)
        n_out = np.linalg.norm(out)
    return out
