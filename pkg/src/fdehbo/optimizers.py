"""Single-loop momentum bilevel optimizers and their run driver.

``fdehbo_step`` uses only first-order oracle calls (finite-difference
Hessian/Jacobian-vector products); ``fmbo_step`` uses exact
matrix-vector products; ``baseline_fo_step`` ignores the implicit part of
the hypergradient altogether and serves as the first-order reference.

Every estimator of iteration ``t`` is evaluated at the snapshot
``(x_t, y_t, v_t)`` taken before any block is updated, and at the previous
snapshot under the same sample key.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import DivergenceError, InvalidArgumentError, NumericalError, UnsupportedCapabilityError
from .estimators import (
    FdParams,
    MomentumBuffer,
    batch_mean,
    exact_hypergradient_surrogate,
    exact_ls_gradient,
    fo_hypergradient,
    fo_ls_gradient,
    momentum_update,
    project_ball,
)
from .oracle import Point, ProblemConstants, SampleKey, Stream

log = logging.getLogger(__name__)

DEFAULT_DELTA = 1e-4

__all__ = [
    "ScheduleParams",
    "Schedule",
    "Snapshot",
    "OptimizerState",
    "IterationRecord",
    "RunResult",
    "schedule_at",
    "init_state",
    "fdehbo_step",
    "fmbo_step",
    "baseline_fo_step",
    "run",
    "ALGORITHMS",
    "theory_schedule",
    "tuned_schedule",
    "delta_bound",
    "check_radius",
]


@dataclass(frozen=True)
class ScheduleParams:
    """Constants of the ``alpha_t = (w + t)^(-1/3)`` step-size/momentum schedule."""

    w: float = 1.0
    c_beta: float = 1.0
    c_lambda: float = 1.0
    c_eta_f: float = 1.0
    c_eta_g: float = 1.0
    c_eta_R: float = 1.0
    r_v: float = 1.0
    delta_eps: float = DEFAULT_DELTA
    T: int = 1000

    def __post_init__(self):
        if not (np.isfinite(self.w) and self.w >= 1):
            raise InvalidArgumentError(f"w must be >= 1, got {self.w}")
        for name in ("c_beta", "c_lambda", "c_eta_f", "c_eta_g", "c_eta_R", "r_v", "delta_eps"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"{name} must be finite and positive, got {value}")
        if int(self.T) != self.T or self.T < 1:
            raise InvalidArgumentError(f"T must be a positive integer, got {self.T}")


@dataclass(frozen=True)
class Schedule:
    alpha: float
    beta: float
    lam: float
    eta_f: float
    eta_g: float
    eta_R: float


def schedule_at(params: ScheduleParams, t: int) -> Schedule:
    """Step sizes and momentum weights at iteration ``t``; every eta is 1 at ``t = 0``."""
    if t < 0:
        raise InvalidArgumentError("t must be nonnegative")
    alpha = (params.w + t) ** (-1.0 / 3.0)
    if t == 0:
        eta_f = eta_g = eta_R = 1.0
    else:
        a2 = alpha * alpha
        eta_f = min(1.0, params.c_eta_f * a2)
        eta_g = min(1.0, params.c_eta_g * a2)
        eta_R = min(1.0, params.c_eta_R * a2)
    return Schedule(alpha, params.c_beta * alpha, params.c_lambda * alpha, eta_f, eta_g, eta_R)


def check_radius(params: ScheduleParams, constants: Optional[ProblemConstants]) -> bool:
    """Warn (and return False) when ``r_v`` is below the certified ``C_fy / mu_g``."""
    if constants is None:
        return True
    bound = constants.default_radius()
    if bound is not None and params.r_v < bound:
        log.warning("r_v = %g is below C_fy/mu_g = %g; v* may lie outside the ball", params.r_v, bound)
        return False
    return True


def delta_bound(constants: ProblemConstants, params: ScheduleParams) -> float:
    """Largest perturbation allowed by the convergence theory (``inf`` when ``L_gxy = 0``)."""
    if constants.L_gxy is None:
        raise InvalidArgumentError("L_gxy is not certified")
    if constants.L_gxy == 0:
        return math.inf
    denom = 8.0 * constants.L_gxy * params.r_v**2 * (params.w + params.T - 1) ** (2.0 / 3.0)
    return min(params.c_eta_f, params.c_eta_R) / denom


def _require(constants: Optional[ProblemConstants], *names):
    if constants is None:
        raise InvalidArgumentError("problem constants are not certified")
    missing = [n for n in names if getattr(constants, n) is None]
    if missing:
        raise InvalidArgumentError(f"uncertified constants: {', '.join(missing)}")
    return [float(getattr(constants, n)) for n in names]


def theory_schedule(constants: ProblemConstants, T: int, r_v: Optional[float] = None) -> ScheduleParams:
    """Constants satisfying the lower bounds of the finite-difference convergence theorem.

    These are worst-case constants: in practice they clamp every eta to 1 and
    make the outer step tiny, but they are the ones the guarantee covers.
    ``C_y`` in the Lipschitz constant of the hypergradient surrogate is taken as
    ``sqrt(C_fy)``, the bound on ``||grad_y f||``.
    """
    mu, Lg, Lgxy, Lgyy, Lfx, Lfy, Cfy, Cgxy = _require(
        constants, "mu_g", "L_g", "L_gxy", "L_gyy", "L_fx", "L_fy", "C_fy", "C_gxy"
    )
    if r_v is None:
        r_v = Cfy / mu
    L_mu = mu * Lg / (mu + Lg)
    K = Lfy**2 + Cfy * Lgxy**2 / mu**2
    if K <= 0 or Cgxy <= 0:
        raise InvalidArgumentError("theory constants need L_fy or L_gxy > 0 and C_gxy > 0")
    C_y = math.sqrt(Cfy)
    L = Lfx + Lfy * Cgxy / mu + C_y * (Lgxy / mu + Lgyy * Cgxy / mu**2)
    L_f = L + L * Cgxy / mu
    L_y = Cgxy / mu
    L_F2 = 2.0 * (Lfx**2 + Lgxy**2 * r_v**2)
    spread = max(L_mu, mu + Lg)

    c_beta = math.sqrt(512.0 * L_y**2 * K / L_mu**2)
    c_lambda = math.sqrt(max(
        1024.0 * Cgxy / L_mu**2 * (Lfy**2 / mu**2 + Cfy**2 * Lgyy**2 / mu**4),
        128.0 * (mu + Lg) * Cgxy * c_beta**2 / L_mu,
        128.0 * Cgxy * c_beta**2,
    ))
    cbar_f = max(96.0 * L_F2, 12.0 * Lg**2 * c_lambda**2,
                 48.0 * L_mu * L_f**2 * c_beta**2 * spread / K, 1.5 * L_mu**2 * c_lambda**2)
    cbar_g = max(256.0 * Lg**2, 128.0 * L_mu * Lg**2 * c_beta**2 * spread / K)
    ls = Lgyy**2 * r_v**2 + Lfy**2
    cbar_R = max(768.0 * ls, 48.0 * Lg**4 * c_lambda**2 / Cgxy, 384.0 * L_mu * ls * c_beta**2 * spread / K)
    c_eta_f = 2.0 / (3.0 * L_f) + 2.0 * cbar_f
    c_eta_g = 1.0 / (3.0 * L_f) + 32.0 * Lg**2 * c_beta**2 + 17.0 * K / L_mu**2 * cbar_g
    c_eta_R = 2.0 / (3.0 * L_f) + 192.0 * Lg**2 * c_lambda**2 + 32.0 * Cgxy / L_mu**2 * cbar_R
    w = max(1.0, max(c_beta * (mu + Lg), c_lambda * (mu + Lg) / (2.0 * mu * Lg)) ** 3 - 1.0)
    params = ScheduleParams(w=w, c_beta=c_beta, c_lambda=c_lambda, c_eta_f=c_eta_f, c_eta_g=c_eta_g,
                            c_eta_R=c_eta_R, r_v=r_v, delta_eps=DEFAULT_DELTA, T=T)
    delta = delta_bound(constants, params)
    return replace(params, delta_eps=min(DEFAULT_DELTA, delta))


def tuned_schedule(constants: ProblemConstants, T: int, r_v: Optional[float] = None,
                   c_eta: float = 2.0, outer_smoothness: Optional[float] = None) -> ScheduleParams:
    """Practical constants for the same schedule shape, scaled by certified moduli.

    The initial inner and linear-system steps are ``1 / L_g``; the outer step
    starts at ``min(1, 1 / L_phi)`` with ``L_phi`` the smoothness of the
    hypergradient (estimated from the moduli unless given); every momentum
    constant equals ``c_eta``.
    """
    mu, Lg = _require(constants, "mu_g", "L_g")
    if r_v is None:
        r_v = constants.default_radius()
        if r_v is None:
            raise InvalidArgumentError("r_v must be given when C_fy is not certified")
    if outer_smoothness is None:
        Lfx, Lfy, Cgxy = _require(constants, "L_fx", "L_fy", "C_gxy")
        outer_smoothness = (Lfx + Lfy * Cgxy / mu) * (1.0 + math.sqrt(Cgxy) / mu)
    alpha0 = min(1.0, 1.0 / outer_smoothness)
    w = max(1.0, alpha0**-3)
    c_step = 1.0 / (Lg * w ** (-1.0 / 3.0))
    delta = DEFAULT_DELTA
    params = ScheduleParams(w=w, c_beta=c_step, c_lambda=c_step, c_eta_f=c_eta, c_eta_g=c_eta,
                            c_eta_R=c_eta, r_v=r_v, delta_eps=delta, T=T)
    if constants.L_gxy is not None:
        params = replace(params, delta_eps=min(delta, delta_bound(constants, params)))
    return params


# --------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class Snapshot:
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray

    @property
    def point(self) -> Point:
        return Point(self.x, self.y)


@dataclass(frozen=True)
class OptimizerState:
    current: Snapshot
    previous: Optional[Snapshot]
    h_g: MomentumBuffer
    h_R: MomentumBuffer
    h_f: MomentumBuffer
    t: int = 0

    @property
    def anchor(self) -> Snapshot:
        """Snapshot at which the momentum buffers were last evaluated."""
        return self.previous if self.previous is not None else self.current


def init_state(oracle, params: ScheduleParams, seed: int = 0, x0=None, y0=None, v0=None) -> OptimizerState:
    """Initial state; unspecified blocks come from the problem's seeded default.

    ``v0`` defaults to zero and is projected onto the ball immediately.
    """
    start = oracle.initial_point(np.random.default_rng([int(seed), 0xB11E]))
    x = np.array(start.x if x0 is None else x0, dtype=float)
    y = np.array(start.y if y0 is None else y0, dtype=float)
    v = np.zeros(oracle.q) if v0 is None else np.array(v0, dtype=float)
    oracle._check_point(Point(x, y))
    oracle._check_vec(v, oracle.q)
    v = project_ball(v, params.r_v)
    return OptimizerState(
        current=Snapshot(x, y, v),
        previous=None,
        h_g=MomentumBuffer.zeros(oracle.q),
        h_R=MomentumBuffer.zeros(oracle.q),
        h_f=MomentumBuffer.zeros(oracle.p),
        t=0,
    )


# --------------------------------------------------------------------------
# records


def _opt_float():
    return field(default=None)


@dataclass
class IterationRecord:
    t: int
    alpha: float
    beta: float
    lam: float
    eta_f: float
    eta_g: float
    eta_R: float
    norm_hf: float
    norm_hg: float
    norm_hR: float
    grad_phi_norm_sq: Optional[float] = _opt_float()
    grad_phi_avg: Optional[float] = _opt_float()
    err_y: Optional[float] = _opt_float()
    err_v: Optional[float] = _opt_float()
    err_f: Optional[float] = _opt_float()
    err_g: Optional[float] = _opt_float()
    err_R: Optional[float] = _opt_float()
    outer_loss: Optional[float] = _opt_float()
    wall_time: float = field(default=0.0, compare=False)

    @classmethod
    def columns(cls, with_time: bool = False) -> List[str]:
        names = [f.name for f in fields(cls) if with_time or f.name != "wall_time"]
        return ["lambda" if n == "lam" else n for n in names]

    def as_row(self, with_time: bool = False) -> list:
        return [getattr(self, f.name) for f in fields(self) if with_time or f.name != "wall_time"]


@dataclass
class RunResult:
    records: List[IterationRecord]
    state: OptimizerState
    final: Dict[str, float]
    calls: Optional[dict] = None


# --------------------------------------------------------------------------
# steps


def _keys(seed: int, t: int):
    return (SampleKey(Stream.LowerZeta, seed, t), SampleKey(Stream.LsPsi, seed, t),
            SampleKey(Stream.UpperXi, seed, t))


def _momentum_pair(estimate: Callable[[Snapshot, SampleKey], np.ndarray], cur: Snapshot,
                   prev: Optional[Snapshot], key: SampleKey, batch: int):
    now = batch_mean(lambda k: estimate(cur, k), key, batch)
    before = None if prev is None else batch_mean(lambda k: estimate(prev, k), key, batch)
    return now, before


def _finite_or_diverge(t: int, *arrays) -> None:
    for arr in arrays:
        with np.errstate(over="ignore", invalid="ignore"):
            total = arr.sum()
        if not math.isfinite(total):
            raise DivergenceError(f"iterate became non-finite at iteration {t}", iteration=t)


def _norms(t: int, *arrays) -> list:
    # a finite vector can still have an overflowing norm
    with np.errstate(over="ignore"):
        out = [float(np.linalg.norm(a)) for a in arrays]
    if not all(math.isfinite(n) for n in out):
        raise DivergenceError(f"estimator norm overflowed at iteration {t}", iteration=t)
    return out


def _single_loop_step(state: OptimizerState, oracle, params: ScheduleParams, seed: int, batch: int,
                      ls_grad, hypergrad):
    t = state.t
    s = schedule_at(params, t)
    cur, prev = state.current, state.previous
    k_zeta, k_psi, k_xi = _keys(seed, t)

    def lower(snap, key):
        return oracle.grad_g_y(snap.point, key)

    def ls(snap, key):
        return ls_grad(oracle, snap.point, snap.v, key)

    def upper(snap, key):
        return hypergrad(oracle, snap.point, snap.v, key)

    try:
        h_g = momentum_update(state.h_g, s.eta_g, *_momentum_pair(lower, cur, prev, k_zeta, batch))
        h_R = momentum_update(state.h_R, s.eta_R, *_momentum_pair(ls, cur, prev, k_psi, batch))
        h_f = momentum_update(state.h_f, s.eta_f, *_momentum_pair(upper, cur, prev, k_xi, batch))
    except NumericalError as exc:
        raise DivergenceError(f"estimator overflow at iteration {t}: {exc}", iteration=t) from exc

    with np.errstate(over="ignore", invalid="ignore"):
        y_new = cur.y - s.beta * h_g.value
        w_new = cur.v - s.lam * h_R.value
    _finite_or_diverge(t, y_new, w_new)
    v_new = project_ball(w_new, params.r_v)
    x_new = cur.x - s.alpha * h_f.value
    _finite_or_diverge(t, x_new)

    norms = _norms(t, h_f.value, h_g.value, h_R.value)
    new_state = OptimizerState(Snapshot(x_new, y_new, v_new), cur, h_g, h_R, h_f, t + 1)
    record = IterationRecord(
        t=t, alpha=s.alpha, beta=s.beta, lam=s.lam, eta_f=s.eta_f, eta_g=s.eta_g, eta_R=s.eta_R,
        norm_hf=norms[0], norm_hg=norms[1], norm_hR=norms[2],
    )
    return new_state, record


def fdehbo_step(state: OptimizerState, oracle, params: ScheduleParams, seed: int, batch: int = 1):
    """One Hessian/Jacobian-free iteration. Issues first-order oracle calls only."""
    fd = FdParams(params.delta_eps)

    def ls(orc, pt, v, key):
        return fo_ls_gradient(orc, pt, v, fd, key)

    def hyper(orc, pt, v, key):
        return fo_hypergradient(orc, pt, v, fd, key)

    return _single_loop_step(state, oracle, params, seed, batch, ls, hyper)


def fmbo_step(state: OptimizerState, oracle, params: ScheduleParams, seed: int, batch: int = 1):
    """One iteration with exact Hessian- and Jacobian-vector products."""
    if not oracle.has_second_order:
        raise UnsupportedCapabilityError(f"FMBO needs second-order products; {oracle.name} has none")
    return _single_loop_step(state, oracle, params, seed, batch, exact_ls_gradient,
                             exact_hypergradient_surrogate)


def baseline_fo_step(state: OptimizerState, oracle, params: ScheduleParams, seed: int, batch: int = 1):
    """Alternating SGD: a ``grad_y g`` step on y, then a ``grad_x f`` step on x. ``v`` is unused."""
    t = state.t
    s = schedule_at(params, t)
    cur = state.current
    k_zeta, _, k_xi = _keys(seed, t)
    g_y = batch_mean(lambda k: oracle.grad_g_y(cur.point, k), k_zeta, batch)
    f_x = batch_mean(lambda k: oracle.grad_f_x(cur.point, k), k_xi, batch)
    y_new = cur.y - s.beta * g_y
    x_new = cur.x - s.alpha * f_x
    _finite_or_diverge(t, y_new, x_new)
    norms = _norms(t, f_x, g_y)
    h_g = MomentumBuffer(g_y, True)
    h_f = MomentumBuffer(f_x, True)
    new_state = OptimizerState(Snapshot(x_new, y_new, cur.v), cur, h_g, state.h_R, h_f, t + 1)
    record = IterationRecord(
        t=t, alpha=s.alpha, beta=s.beta, lam=s.lam, eta_f=1.0, eta_g=1.0, eta_R=1.0,
        norm_hf=norms[0], norm_hg=norms[1], norm_hR=0.0,
    )
    return new_state, record


ALGORITHMS = {
    "FdeHBO": fdehbo_step,
    "FMBO": fmbo_step,
    "BaselineFO": baseline_fo_step,
}


# --------------------------------------------------------------------------
# driver


def run(algorithm, oracle, params: ScheduleParams, seed: int = 0, diag_every: int = 10,
        batch: int = 1, state: Optional[OptimizerState] = None, diagnostics: bool = True) -> RunResult:
    """Execute ``params.T`` iterations of ``algorithm`` (a name or step function).

    Diagnostics (hypergradient norm, estimation errors, outer loss) are
    computed at every ``diag_every``-th iteration and at the last one. On
    divergence the :class:`DivergenceError` carries the records produced so far.
    """
    from .analysis import diagnose

    step = ALGORITHMS[algorithm] if isinstance(algorithm, str) else algorithm
    if diag_every < 1:
        raise InvalidArgumentError("diag_every must be >= 1")
    if batch < 1:
        raise InvalidArgumentError("batch must be >= 1")
    if step is fmbo_step and not oracle.has_second_order:
        raise UnsupportedCapabilityError(f"FMBO needs second-order products; {oracle.name} has none")
    if state is None:
        state = init_state(oracle, params, seed)
    records: List[IterationRecord] = []
    phi_sum, phi_count = 0.0, 0
    start = time.perf_counter()
    last = state.t + params.T - 1
    for t in range(state.t, last + 1):
        try:
            state, rec = step(state, oracle, params, seed, batch)
        except DivergenceError as exc:
            exc.records = records
            raise
        if diagnostics and (t % diag_every == 0 or t == last):
            with np.errstate(over="ignore", invalid="ignore"):
                diag = diagnose(state, oracle, step is not baseline_fo_step)
            bad = [name for name, value in diag.items() if not math.isfinite(value)]
            if bad:
                raise DivergenceError(f"diagnostic {bad[0]} became non-finite at iteration {t}",
                                      iteration=t, records=records)
            for name, value in diag.items():
                setattr(rec, name, value)
            if rec.grad_phi_norm_sq is not None:
                phi_sum += rec.grad_phi_norm_sq
                phi_count += 1
                rec.grad_phi_avg = phi_sum / phi_count
        rec.wall_time = time.perf_counter() - start
        records.append(rec)
    final = diagnose(state, oracle, estimators=False, at_current=True) if diagnostics else {}
    return RunResult(records=records, state=state, final=final)
