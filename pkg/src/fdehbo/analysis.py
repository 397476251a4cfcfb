"""Ground-truth diagnostics, finite-difference error audits and rate fitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError, UnsupportedCapabilityError
from .estimators import FdParams, fd_hessian_vec, fd_jacobian_vec
from .oracle import Point, SampleKey, Stream

__all__ = [
    "RateFit",
    "FdAuditReport",
    "estimation_errors",
    "diagnose",
    "fit_rate",
    "fd_bound_audit",
    "numerical_hypergradient",
]


def _sq(v) -> float:
    return float(np.dot(v, v))


def estimation_errors(state, oracle) -> Dict[str, float]:
    """Squared errors of the momentum buffers and iterates against exact quantities.

    Buffers are compared at the snapshot where they were evaluated
    (``state.anchor``); gradients are noiseless and full-batch.
    """
    if not (oracle.has_ground_truth and oracle.has_second_order):
        raise UnsupportedCapabilityError(f"{oracle.name} lacks ground truth or second-order products")
    snap = state.anchor
    pt = snap.point
    gt = oracle.ground_truth(pt)
    grad_g = oracle.grad_g_y(pt)
    grad_R = oracle.hess_g_yy_vec(pt, snap.v) - oracle.grad_f_y(pt)
    grad_f = oracle.grad_f_x(pt) - oracle.jac_g_xy_vec(pt, snap.v)
    return {
        "err_f": _sq(state.h_f.value - grad_f),
        "err_g": _sq(state.h_g.value - grad_g),
        "err_R": _sq(state.h_R.value - grad_R),
        "err_y": _sq(snap.y - gt.y_star),
        "err_v": _sq(snap.v - gt.v_star),
    }


def diagnose(state, oracle, estimators: bool = True, at_current: bool = False) -> Dict[str, float]:
    """Whatever diagnostics the problem supports, as a ``{record_field: value}`` dict."""
    snap = state.current if at_current else state.anchor
    pt = snap.point
    out: Dict[str, float] = {"outer_loss": oracle.f_value(pt)}
    try:
        out["grad_phi_norm_sq"] = _sq(oracle.grad_phi(snap.x))
    except UnsupportedCapabilityError:
        pass
    if oracle.has_ground_truth:
        gt = oracle.ground_truth(pt)
        out["err_y"] = _sq(snap.y - gt.y_star)
        out["err_v"] = _sq(snap.v - gt.v_star)
    if estimators and state.h_g.initialized:
        out["err_g"] = _sq(state.h_g.value - oracle.grad_g_y(pt))
        if oracle.has_second_order:
            out["err_R"] = _sq(state.h_R.value - (oracle.hess_g_yy_vec(pt, snap.v) - oracle.grad_f_y(pt)))
            out["err_f"] = _sq(state.h_f.value - (oracle.grad_f_x(pt) - oracle.jac_g_xy_vec(pt, snap.v)))
    return out


def numerical_hypergradient(oracle, x: np.ndarray, y0: Optional[np.ndarray] = None,
                            tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Hypergradient from a Newton-solved lower level and a direct linear-system solve.

    Builds the lower-level Hessian column by column from Hessian-vector
    products, so it is meant for small ``q``.
    """
    if not oracle.has_second_order:
        raise UnsupportedCapabilityError(f"{oracle.name} has no second-order products")
    q = oracle.q
    eye = np.eye(q)
    y = np.zeros(q) if y0 is None else np.array(y0, dtype=float)

    def hessian(pt):
        return np.column_stack([oracle.hess_g_yy_vec(pt, eye[:, j]) for j in range(q)])

    for _ in range(max_iter):
        pt = Point(x, y)
        g = oracle.grad_g_y(pt)
        if np.linalg.norm(g) <= tol:
            break
        y = y - np.linalg.solve(hessian(pt), g)
    pt = Point(x, y)
    v_star = np.linalg.solve(hessian(pt), oracle.grad_f_y(pt))
    return oracle.grad_f_x(pt) - oracle.jac_g_xy_vec(pt, v_star)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    window: Tuple[float, float]


def fit_rate(series: Sequence[Tuple[float, float]], window: Optional[Tuple[float, float]] = None) -> RateFit:
    """Least-squares fit of ``log(value) = intercept + slope * log(t)`` inside ``window``."""
    arr = np.asarray(series, dtype=float).reshape(-1, 2)
    if window is None:
        window = (arr[:, 0].min(), arr[:, 0].max())
    t_lo, t_hi = window
    if not t_lo < t_hi:
        raise InvalidArgumentError("window must satisfy t_start < t_end")
    sel = arr[(arr[:, 0] >= t_lo) & (arr[:, 0] <= t_hi)]
    if np.any(sel[:, 1] <= 0) or np.any(sel[:, 0] <= 0):
        raise InvalidArgumentError("rate fitting needs positive t and values in the window")
    if len(sel) < 10:
        raise InvalidArgumentError(f"need at least 10 points in the window, got {len(sel)}")
    lt, lv = np.log(sel[:, 0]), np.log(sel[:, 1])
    slope, intercept = np.polyfit(lt, lv, 1)
    resid = lv - (intercept + slope * lt)
    ss_tot = np.sum((lv - lv.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - np.sum(resid**2) / ss_tot)
    return RateFit(float(slope), float(intercept), float(r2), (float(t_lo), float(t_hi)))


@dataclass
class FdAuditReport:
    deltas: List[float]
    r_v: float
    bound_H: List[float]
    bound_J: List[float]
    max_err_H: List[float]
    max_err_J: List[float]
    violations_H: List[int]
    violations_J: List[int]
    monotone_violations: int
    errors_H: np.ndarray = field(repr=False)
    errors_J: np.ndarray = field(repr=False)

    @property
    def violations(self) -> int:
        return int(sum(self.violations_H) + sum(self.violations_J))

    def rows(self):
        for i, d in enumerate(self.deltas):
            yield {
                "delta": d,
                "r_v": self.r_v,
                "bound_H": self.bound_H[i],
                "max_err_H": self.max_err_H[i],
                "violations_H": self.violations_H[i],
                "bound_J": self.bound_J[i],
                "max_err_J": self.max_err_J[i],
                "violations_J": self.violations_J[i],
            }


def fd_bound_audit(oracle, n_trials: int = 1000, delta_grid: Sequence[float] = (1e-1, 1e-2, 1e-3),
                   r_v: float = 1.0, seed: int = 0, slack: float = 1e-12) -> FdAuditReport:
    """Check ``||e^H|| <= L_gyy r_v^2 delta`` and ``||e^J|| <= L_gxy r_v^2 delta``.

    Random points are standard normal, directions uniform in the ball of
    radius ``r_v``. Also counts trials whose error grows as delta shrinks
    along ``delta_grid`` (beyond ``slack``).
    """
    if not (oracle.has_second_order and oracle.constants is not None):
        raise UnsupportedCapabilityError(f"{oracle.name} lacks second-order products or constants")
    c = oracle.constants
    if c.L_gyy is None or c.L_gxy is None:
        raise UnsupportedCapabilityError("L_gyy and L_gxy must be certified")
    rng = np.random.default_rng(seed)
    deltas = [float(d) for d in delta_grid]
    err_H = np.zeros((n_trials, len(deltas)))
    err_J = np.zeros((n_trials, len(deltas)))
    for i in range(n_trials):
        pt = Point(rng.standard_normal(oracle.p), rng.standard_normal(oracle.q))
        u = rng.standard_normal(oracle.q)
        v = u / np.linalg.norm(u) * r_v * rng.random() ** (1.0 / oracle.q)
        k_psi = SampleKey(Stream.LsPsi, seed, i)
        k_xi = SampleKey(Stream.UpperXi, seed, i)
        hv = oracle.hess_g_yy_vec(pt, v, k_psi)
        jv = oracle.jac_g_xy_vec(pt, v, k_xi)
        for j, d in enumerate(deltas):
            fd = FdParams(d)
            err_H[i, j] = np.linalg.norm(fd_hessian_vec(oracle, pt, v, fd, k_psi) - hv)
            err_J[i, j] = np.linalg.norm(fd_jacobian_vec(oracle, pt, v, fd, k_xi) - jv)
    bound_H = [c.L_gyy * r_v**2 * d for d in deltas]
    bound_J = [c.L_gxy * r_v**2 * d for d in deltas]
    order = np.argsort(deltas)[::-1]
    mono = 0
    for errs in (err_H, err_J):
        steps = np.diff(errs[:, order], axis=1)
        mono += int(np.sum(np.any(steps > slack, axis=1)))
    return FdAuditReport(
        deltas=deltas,
        r_v=r_v,
        bound_H=bound_H,
        bound_J=bound_J,
        max_err_H=err_H.max(axis=0).tolist(),
        max_err_J=err_J.max(axis=0).tolist(),
        violations_H=[int(np.sum(err_H[:, j] > bound_H[j])) for j in range(len(deltas))],
        violations_J=[int(np.sum(err_J[:, j] > bound_J[j])) for j in range(len(deltas))],
        monotone_violations=mono,
        errors_H=err_H,
        errors_J=err_J,
    )
