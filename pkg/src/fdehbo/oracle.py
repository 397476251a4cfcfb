"""Problem contract consumed by the bilevel optimizers.

A problem exposes stochastic first-order gradients of the upper-level
objective ``f(x, y; xi)`` and the lower-level objective ``g(x, y; zeta)``.
Every stochastic query is addressed by a :class:`SampleKey`; the map from key
to sample is a pure function, so the same sample can be evaluated at two
consecutive iterates as the recursive-momentum estimators require.

Passing ``key=None`` requests the expected (noiseless, full-batch) quantity.
Second-order products and analytic ground truth are optional capabilities
advertised through ``has_second_order`` and ``has_ground_truth``.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    ContractViolationError,
    InvalidArgumentError,
    UnsupportedCapabilityError,
)

__all__ = [
    "Stream",
    "SampleKey",
    "Point",
    "ProblemConstants",
    "GroundTruth",
    "BilevelOracle",
    "CountingOracle",
    "FirstOrderOnly",
    "key_rng",
]


class Stream(enum.IntEnum):
    """Independent sample streams: upper-level xi, lower-level zeta, linear-system psi."""

    UpperXi = 1
    LowerZeta = 2
    LsPsi = 3


class SampleKey(NamedTuple):
    stream: Stream
    seed: int
    index: int
    slot: int = 0

    def with_slot(self, slot: int) -> "SampleKey":
        return self._replace(slot=slot)


def key_rng(key: SampleKey, salt: int = 0) -> np.random.Generator:
    """Return a generator that depends only on ``key`` (and an optional salt).

    Counter-based Philox: ``(seed, index)`` is the 128-bit key and
    ``(slot, stream, salt)`` fill the high counter words, so the low word
    that advances while drawing never reaches another key's stream.
    """
    mask = (1 << 64) - 1
    return np.random.Generator(
        np.random.Philox(
            key=[int(key.seed) & mask, int(key.index) & mask],
            counter=[0, 0, int(key.slot) & mask, (int(key.stream) << 32) | (int(salt) & 0xFFFFFFFF)],
        )
    )


@dataclass(frozen=True)
class Point:
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class ProblemConstants:
    """Moduli a problem can certify. ``None`` means "not certified"."""

    mu_g: Optional[float] = None
    L_g: Optional[float] = None
    L_gxy: Optional[float] = None
    L_gyy: Optional[float] = None
    L_fx: Optional[float] = None
    L_fy: Optional[float] = None
    C_fy: Optional[float] = None
    C_gxy: Optional[float] = None

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value is None:
                continue
            if not np.isfinite(value) or value < 0:
                raise InvalidArgumentError(f"{name} must be finite and nonnegative, got {value}")
        if self.mu_g is not None and self.mu_g <= 0:
            raise InvalidArgumentError(f"mu_g must be positive, got {self.mu_g}")

    def default_radius(self) -> Optional[float]:
        """Radius ``C_fy / mu_g`` of the auxiliary projection ball, if certifiable."""
        if self.C_fy is None or self.mu_g is None:
            return None
        return self.C_fy / self.mu_g


@dataclass(frozen=True)
class GroundTruth:
    y_star: np.ndarray
    v_star: np.ndarray
    phi: float
    grad_phi: np.ndarray


_F_X_STREAMS = frozenset({Stream.UpperXi})
_F_Y_STREAMS = frozenset({Stream.UpperXi, Stream.LsPsi})
_G_Y_STREAMS = frozenset({Stream.LowerZeta, Stream.LsPsi})
_G_X_STREAMS = frozenset({Stream.UpperXi})
_HESS_STREAMS = frozenset({Stream.LsPsi})
_JAC_STREAMS = frozenset({Stream.UpperXi})


class BilevelOracle:
    """Base class for bilevel problems.

    Subclasses set ``p``, ``q`` and implement the underscore hooks
    ``_grad_f_x``, ``_grad_f_y``, ``_grad_g_y``, ``_grad_g_x`` and
    ``_f_value``; the optional hooks ``_hess_g_yy_vec``,
    ``_jac_g_xy_vec`` and ``_ground_truth`` go with the matching
    capability flags. The public methods validate dimensions and streams.

    Implementations must hold no mutable state: equal ``(pt, key)`` pairs
    must give identical outputs.
    """

    p: int
    q: int
    constants: Optional[ProblemConstants] = None
    has_second_order: bool = False
    has_ground_truth: bool = False
    name: str = "bilevel"

    # -- validation ---------------------------------------------------------

    def _check_point(self, pt: Point) -> None:
        x, y = pt.x, pt.y
        if getattr(x, "shape", None) == (self.p,) and getattr(y, "shape", None) == (self.q,):
            return
        if np.shape(x) != (self.p,) or np.shape(y) != (self.q,):
            raise InvalidArgumentError(
                f"point has shapes x{np.shape(pt.x)}, y{np.shape(pt.y)}; "
                f"expected x({self.p},), y({self.q},)"
            )

    def _check_vec(self, v: np.ndarray, dim: int) -> None:
        if np.shape(v) != (dim,):
            raise InvalidArgumentError(f"vector has shape {np.shape(v)}, expected ({dim},)")

    @staticmethod
    def _check_key(key: Optional[SampleKey], allowed, what: str) -> None:
        if key is not None and key.stream not in allowed:
            names = ", ".join(sorted(s.name for s in allowed))
            raise ContractViolationError(
                f"{what} called with stream {Stream(key.stream).name}; allowed: {names}"
            )

    # -- first order ----------------------------------------------------------

    def grad_f_x(self, pt: Point, key: Optional[SampleKey] = None) -> np.ndarray:
        self._check_point(pt)
        self._check_key(key, _F_X_STREAMS, "grad_f_x")
        return self._grad_f_x(pt.x, pt.y, key)

    def grad_f_y(self, pt: Point, key: Optional[SampleKey] = None) -> np.ndarray:
        self._check_point(pt)
        self._check_key(key, _F_Y_STREAMS, "grad_f_y")
        return self._grad_f_y(pt.x, pt.y, key)

    def grad_g_y(self, pt: Point, key: Optional[SampleKey] = None) -> np.ndarray:
        self._check_point(pt)
        self._check_key(key, _G_Y_STREAMS, "grad_g_y")
        return self._grad_g_y(pt.x, pt.y, key)

    def grad_g_x(self, pt: Point, key: Optional[SampleKey] = None) -> np.ndarray:
        self._check_point(pt)
        self._check_key(key, _G_X_STREAMS, "grad_g_x")
        return self._grad_g_x(pt.x, pt.y, key)

    def f_value(self, pt: Point) -> float:
        """Noiseless (full-batch) upper-level objective ``f(x, y)``."""
        self._check_point(pt)
        return float(self._f_value(pt.x, pt.y))

    # -- optional capabilities ------------------------------------------------

    def hess_g_yy_vec(self, pt: Point, v: np.ndarray, key: Optional[SampleKey] = None) -> np.ndarray:
        if not self.has_second_order:
            raise UnsupportedCapabilityError(f"{self.name} has no second-order products")
        self._check_point(pt)
        self._check_vec(v, self.q)
        self._check_key(key, _HESS_STREAMS, "hess_g_yy_vec")
        return self._hess_g_yy_vec(pt.x, pt.y, v, key)

    def jac_g_xy_vec(self, pt: Point, v: np.ndarray, key: Optional[SampleKey] = None) -> np.ndarray:
        if not self.has_second_order:
            raise UnsupportedCapabilityError(f"{self.name} has no second-order products")
        self._check_point(pt)
        self._check_vec(v, self.q)
        self._check_key(key, _JAC_STREAMS, "jac_g_xy_vec")
        return self._jac_g_xy_vec(pt.x, pt.y, v, key)

    def ground_truth(self, pt: Point) -> GroundTruth:
        if not self.has_ground_truth:
            raise UnsupportedCapabilityError(f"{self.name} has no analytic ground truth")
        self._check_point(pt)
        return self._ground_truth(pt.x, pt.y)

    def grad_phi(self, x: np.ndarray) -> np.ndarray:
        """Exact hypergradient at ``x``; problems without ground truth may override."""
        return self.ground_truth(Point(x, np.zeros(self.q))).grad_phi

    def initial_point(self, rng: np.random.Generator) -> Point:
        return Point(rng.standard_normal(self.p), rng.standard_normal(self.q))

    # -- hooks ----------------------------------------------------------------

    def _grad_f_x(self, x, y, key):
        raise NotImplementedError

    def _grad_f_y(self, x, y, key):
        raise NotImplementedError

    def _grad_g_y(self, x, y, key):
        raise NotImplementedError

    def _grad_g_x(self, x, y, key):
        raise NotImplementedError

    def _f_value(self, x, y):
        raise NotImplementedError

    def _hess_g_yy_vec(self, x, y, v, key):
        raise NotImplementedError

    def _jac_g_xy_vec(self, x, y, v, key):
        raise NotImplementedError

    def _ground_truth(self, x, y):
        raise NotImplementedError


_COUNTED = (
    "grad_f_x",
    "grad_f_y",
    "grad_g_y",
    "grad_g_x",
    "hess_g_yy_vec",
    "jac_g_xy_vec",
)


class CountingOracle:
    """Transparent wrapper that counts (and optionally logs) stochastic calls.

    ``calls`` counts every query; ``log`` (when ``record=True``) holds
    ``(method, key)`` tuples in call order. Noiseless queries (``key=None``)
    are counted under ``"<method>:exact"`` so diagnostics do not pollute the
    sample accounting.
    """

    def __init__(self, inner: BilevelOracle, record: bool = False):
        self.inner = inner
        self.calls: Counter = Counter()
        self.record = record
        self.log: list = []

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if name not in _COUNTED:
            return attr

        def counted(*args, **kwargs):
            key = kwargs.get("key", args[-1] if args and isinstance(args[-1], SampleKey) else None)
            tag = name if key is not None else f"{name}:exact"
            self.calls[tag] += 1
            if self.record:
                self.log.append((name, key))
            return attr(*args, **kwargs)

        return counted

    @property
    def second_order_calls(self) -> int:
        return sum(n for k, n in self.calls.items() if k.split(":")[0] in _COUNTED[4:])

    @property
    def first_order_calls(self) -> int:
        return sum(n for k, n in self.calls.items() if k in _COUNTED[:4])

    def reset(self) -> None:
        self.calls.clear()
        self.log.clear()


class FirstOrderOnly(BilevelOracle):
    """View of ``inner`` that hides its second-order products.

    Models a black-box problem that only answers gradient queries; ground
    truth (when present) stays available for diagnostics.
    """

    has_second_order = False

    def __init__(self, inner: BilevelOracle):
        self.inner = inner
        self.p, self.q = inner.p, inner.q
        self.constants = inner.constants
        self.has_ground_truth = inner.has_ground_truth
        self.name = f"{inner.name}[first-order]"

    def _grad_f_x(self, x, y, key):
        return self.inner._grad_f_x(x, y, key)

    def _grad_f_y(self, x, y, key):
        return self.inner._grad_f_y(x, y, key)

    def _grad_g_y(self, x, y, key):
        return self.inner._grad_g_y(x, y, key)

    def _grad_g_x(self, x, y, key):
        return self.inner._grad_g_x(x, y, key)

    def _f_value(self, x, y):
        return self.inner._f_value(x, y)

    def _ground_truth(self, x, y):
        return self.inner._ground_truth(x, y)

    def grad_phi(self, x: np.ndarray) -> np.ndarray:
        return self.inner.grad_phi(x)

    def initial_point(self, rng: np.random.Generator) -> Point:
        return self.inner.initial_point(rng)
