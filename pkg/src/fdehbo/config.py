"""Run configuration: a strict YAML document mapped onto frozen dataclasses.

Example::

    algorithm: FdeHBO
    problem:
      kind: quadratic        # quadratic | hypercleaning | csv | logistic
      p: 10
      q: 10
      mu_g: 1.0
      L_g: 10.0
      noise: 1.0             # or {xi: .., zeta: .., psi: ..}
    schedule:
      preset: tuned          # explicit | tuned | theory
      T: 10000
      c_eta: 1.0
    seeds: [0, 1, 2]
    diag_every: 10
    batch: 1
    output_dir: runs/quadratic

Unknown keys are errors. Every error names the offending field and, when
the document is available, its line and column.
"""

from __future__ import annotations

import dataclasses
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .errors import BilevelError, ConfigError
from .optimizers import ALGORITHMS, DEFAULT_DELTA, ScheduleParams, theory_schedule, tuned_schedule

__all__ = [
    "QuadraticProblem",
    "HyperCleaningProblem",
    "CsvDatasetProblem",
    "LogisticProblem",
    "ScheduleConfig",
    "AuditConfig",
    "RunConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "build_problem",
    "resolve_schedule",
    "OUTPUT_ENV",
]

OUTPUT_ENV = "FDEHBO_OUTPUT_DIR"
DEFAULT_OUTPUT = "fdehbo-runs"

_STREAMS = ("xi", "zeta", "psi")


# --------------------------------------------------------------------------
# sections


@dataclass(frozen=True)
class QuadraticProblem:
    p: int = 10
    q: int = 10
    mu_g: float = 1.0
    L_g: float = 10.0
    noise: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(_STREAMS, 0.0))
    seed: int = 0
    coupling: float = 1.0
    domain_radius: Optional[float] = None
    first_order_only: bool = False
    kind = "quadratic"


@dataclass(frozen=True)
class LogisticProblem:
    p: int = 5
    q: int = 5
    m: int = 20
    mu: float = 1.0
    scale: float = 2.0
    noise: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(_STREAMS, 0.0))
    seed: int = 0
    first_order_only: bool = False
    kind = "logistic"


@dataclass(frozen=True)
class HyperCleaningProblem:
    n_train: int = 500
    n_val: int = 200
    n_test: int = 500
    d: int = 5
    separation: float = 2.0
    data_seed: int = 0
    corruption_p: float = 0.1
    corruption_seed: int = 0
    reg_C: float = 0.001
    batch_size: Optional[int] = 100
    first_order_only: bool = False
    kind = "hypercleaning"


@dataclass(frozen=True)
class CsvDatasetProblem:
    path: str = ""
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    split_seed: int = 0
    corruption_p: float = 0.1
    corruption_seed: int = 0
    reg_C: float = 0.001
    batch_size: Optional[int] = 100
    first_order_only: bool = False
    kind = "csv"


ProblemConfig = Union[QuadraticProblem, LogisticProblem, HyperCleaningProblem, CsvDatasetProblem]
_PROBLEMS = {cls.kind: cls for cls in (QuadraticProblem, LogisticProblem, HyperCleaningProblem,
                                       CsvDatasetProblem)}


@dataclass(frozen=True)
class ScheduleConfig:
    """ScheduleParams fields plus an optional preset that derives the unset ones.

    ``explicit`` uses the ScheduleParams defaults (``r_v`` defaults to the
    certified ``C_fy / mu_g`` when available); ``tuned`` and ``theory`` call
    :func:`tuned_schedule` / :func:`theory_schedule`. Fields given
    explicitly always win.
    """

    preset: str = "explicit"
    T: int = 1000
    w: Optional[float] = None
    c_beta: Optional[float] = None
    c_lambda: Optional[float] = None
    c_eta_f: Optional[float] = None
    c_eta_g: Optional[float] = None
    c_eta_R: Optional[float] = None
    r_v: Optional[float] = None
    delta_eps: Optional[float] = None
    c_eta: Optional[float] = None
    outer_smoothness: Optional[float] = None


@dataclass(frozen=True)
class AuditConfig:
    n_trials: int = 1000
    deltas: Tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    r_v: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    problem: ProblemConfig
    schedule: ScheduleConfig = ScheduleConfig()
    seeds: Tuple[int, ...] = (0,)
    diag_every: int = 10
    batch: int = 1
    output_dir: Optional[str] = None
    audit: AuditConfig = AuditConfig()

    def resolved_output_dir(self) -> str:
        return self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT


# --------------------------------------------------------------------------
# YAML -> plain values with source positions


class _Doc:
    """Plain Python values plus the source position of every node."""

    def __init__(self):
        self.marks: Dict[Tuple[str, ...], Any] = {}

    def error(self, path: Tuple[str, ...], message: str) -> ConfigError:
        mark = None
        for cut in range(len(path), -1, -1):
            mark = self.marks.get(path[:cut])
            if mark is not None:
                break
        name = ".".join(path) if path else None
        if mark is None:
            return ConfigError(message, field=name)
        return ConfigError(message, field=name, line=mark.line + 1, column=mark.column + 1)

    def convert(self, node, path: Tuple[str, ...] = ()):
        self.marks[path] = node.start_mark
        if isinstance(node, yaml.MappingNode):
            out = {}
            for key_node, value_node in node.value:
                if not isinstance(key_node, yaml.ScalarNode):
                    raise ConfigError("mapping keys must be plain strings", field=".".join(path) or None,
                                      line=key_node.start_mark.line + 1, column=key_node.start_mark.column + 1)
                key = key_node.value
                if key in out:
                    raise ConfigError("duplicate key", field=".".join(path + (key,)),
                                      line=key_node.start_mark.line + 1, column=key_node.start_mark.column + 1)
                out[key] = self.convert(value_node, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self.convert(item, path + (str(i),)) for i, item in enumerate(node.value)]
        return yaml.constructor.SafeConstructor().construct_object(node)


def _compose(text: str):
    try:
        return yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        msg = f"YAML parse error: {exc.problem or exc.context}"
        if mark is None:
            raise ConfigError(msg) from None
        raise ConfigError(msg, line=mark.line + 1, column=mark.column + 1) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from None


# --------------------------------------------------------------------------
# typed field coercion


_NUMBER = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(doc: _Doc, path, value, kind):
    """Check ``value`` against a small type vocabulary and normalize it."""
    optional = kind.startswith("?")
    kind = kind.lstrip("?")
    if value is None:
        if optional:
            return None
        raise doc.error(path, f"must be a {kind}, got null")
    if kind == "int":
        if not _is_int(value):
            raise doc.error(path, f"must be an integer, got {value!r}")
        return int(value)
    if kind == "float":
        if isinstance(value, str) and _NUMBER.fullmatch(value.strip()):
            # YAML 1.1 reads exponents without a sign ("1.0e6") as strings
            return float(value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise doc.error(path, f"must be a number, got {value!r}")
        if not math.isfinite(value):
            raise doc.error(path, f"must be finite, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise doc.error(path, f"must be true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise doc.error(path, f"must be a string, got {value!r}")
        return value
    if kind == "noise":
        if isinstance(value, dict):
            unknown = set(value) - set(_STREAMS)
            if unknown:
                raise doc.error(path + (sorted(unknown)[0],), f"unknown noise stream; allowed: {', '.join(_STREAMS)}")
            out = {s: _coerce(doc, path + (s,), value.get(s, 0.0), "float") for s in _STREAMS}
        else:
            out = dict.fromkeys(_STREAMS, _coerce(doc, path, value, "float"))
        for s, sigma in out.items():
            if sigma < 0:
                raise doc.error(path, f"noise level for {s} must be nonnegative")
        return out
    if kind == "ints":
        if not isinstance(value, list):
            raise doc.error(path, "must be a list of integers")
        return tuple(_coerce(doc, path + (str(i),), v, "int") for i, v in enumerate(value))
    if kind == "floats":
        if not isinstance(value, list):
            raise doc.error(path, "must be a list of numbers")
        return tuple(_coerce(doc, path + (str(i),), v, "float") for i, v in enumerate(value))
    raise AssertionError(kind)


def _field_kinds(cls) -> Dict[str, str]:
    kinds = {}
    for f in dataclasses.fields(cls):
        ann = str(f.type)
        base = ("noise" if "Dict" in ann else "floats" if "Tuple[float" in ann else "ints" if "Tuple[int" in ann
                else "int" if "int" in ann else "float" if "float" in ann else "bool" if "bool" in ann else "str")
        kinds[f.name] = ("?" if "Optional" in ann else "") + base
    return kinds


def _section(doc: _Doc, path, raw, cls, skip=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise doc.error(path, "must be a mapping")
    kinds = _field_kinds(cls)
    for key in raw:
        if key not in kinds and key not in skip:
            allowed = ", ".join(sorted(kinds))
            raise doc.error(path + (key,), f"unknown key; allowed: {allowed}")
    values = {k: _coerce(doc, path + (k,), raw[k], kinds[k]) for k in raw if k in kinds}
    try:
        return cls(**values)
    except TypeError as exc:
        raise doc.error(path, str(exc)) from None


def _positive(doc, path, value, allow_zero=False):
    if value is None:
        return
    if value < 0 or (value == 0 and not allow_zero):
        raise doc.error(path, f"must be {'nonnegative' if allow_zero else 'positive'}, got {value}")


def _validate_problem(doc: _Doc, prob) -> None:
    base = ("problem",)
    if isinstance(prob, QuadraticProblem):
        for name in ("p", "q", "mu_g", "L_g", "coupling", "domain_radius"):
            _positive(doc, base + (name,), getattr(prob, name))
        if prob.mu_g > prob.L_g:
            raise doc.error(base + ("mu_g",), f"must not exceed L_g ({prob.L_g})")
    elif isinstance(prob, LogisticProblem):
        for name in ("p", "q", "m", "mu", "scale"):
            _positive(doc, base + (name,), getattr(prob, name))
    else:
        if isinstance(prob, HyperCleaningProblem):
            for name in ("n_train", "n_val", "n_test", "d", "separation"):
                _positive(doc, base + (name,), getattr(prob, name))
        else:
            if not prob.path:
                raise doc.error(base + ("path",), "is required for a csv problem")
            for name in ("val_fraction", "test_fraction"):
                value = getattr(prob, name)
                if not 0 < value < 1:
                    raise doc.error(base + (name,), f"must lie in (0, 1), got {value}")
            if prob.val_fraction + prob.test_fraction >= 1:
                raise doc.error(base + ("test_fraction",), "val_fraction + test_fraction must be < 1")
        if not 0 <= prob.corruption_p < 1:
            raise doc.error(base + ("corruption_p",), f"must lie in [0, 1), got {prob.corruption_p}")
        _positive(doc, base + ("reg_C",), prob.reg_C)
        _positive(doc, base + ("batch_size",), prob.batch_size)


def _validate_schedule(doc: _Doc, sched: ScheduleConfig) -> None:
    base = ("schedule",)
    if sched.preset not in ("explicit", "tuned", "theory"):
        raise doc.error(base + ("preset",), f"must be explicit, tuned or theory, got {sched.preset!r}")
    _positive(doc, base + ("T",), sched.T)
    for f in dataclasses.fields(ScheduleConfig):
        if f.name in ("preset", "T"):
            continue
        _positive(doc, base + (f.name,), getattr(sched, f.name))
    if sched.w is not None and sched.w < 1:
        raise doc.error(base + ("w",), f"must be >= 1, got {sched.w}")
    if sched.preset != "tuned":
        for name in ("c_eta", "outer_smoothness"):
            if getattr(sched, name) is not None:
                raise doc.error(base + (name,), "only applies to preset: tuned")


def _from_doc(doc: _Doc, data) -> RunConfig:
    if not isinstance(data, dict):
        raise doc.error((), "top level must be a mapping")
    top = {"algorithm", "problem", "schedule", "seeds", "diag_every", "batch", "output_dir", "audit"}
    for key in data:
        if key not in top:
            raise doc.error((key,), f"unknown key; allowed: {', '.join(sorted(top))}")
    for key in ("algorithm", "problem"):
        if key not in data:
            raise doc.error((), f"missing required key '{key}'")
    algorithm = _coerce(doc, ("algorithm",), data["algorithm"], "str")
    if algorithm not in ALGORITHMS:
        raise doc.error(("algorithm",), f"must be one of {', '.join(ALGORITHMS)}, got {algorithm!r}")

    raw_problem = data["problem"]
    if not isinstance(raw_problem, dict) or "kind" not in raw_problem:
        raise doc.error(("problem",), f"must be a mapping with a 'kind' ({', '.join(_PROBLEMS)})")
    kind = raw_problem["kind"]
    if kind not in _PROBLEMS:
        raise doc.error(("problem", "kind"), f"must be one of {', '.join(_PROBLEMS)}, got {kind!r}")
    problem = _section(doc, ("problem",), raw_problem, _PROBLEMS[kind], skip=("kind",))
    _validate_problem(doc, problem)

    schedule = _section(doc, ("schedule",), data.get("schedule"), ScheduleConfig)
    _validate_schedule(doc, schedule)
    audit = _section(doc, ("audit",), data.get("audit"), AuditConfig)
    _positive(doc, ("audit", "n_trials"), audit.n_trials)
    _positive(doc, ("audit", "r_v"), audit.r_v)
    if not audit.deltas:
        raise doc.error(("audit", "deltas"), "must not be empty")
    for i, d in enumerate(audit.deltas):
        _positive(doc, ("audit", "deltas", str(i)), d)

    seeds = _coerce(doc, ("seeds",), data.get("seeds", [0]), "ints")
    if not seeds:
        raise doc.error(("seeds",), "must contain at least one seed")
    if len(set(seeds)) != len(seeds):
        raise doc.error(("seeds",), "must not repeat a seed")
    for i, s in enumerate(seeds):
        _positive(doc, ("seeds", str(i)), s, allow_zero=True)
    diag_every = _coerce(doc, ("diag_every",), data.get("diag_every", 10), "int")
    if diag_every < 1:
        raise doc.error(("diag_every",), f"must be >= 1, got {diag_every}")
    batch = _coerce(doc, ("batch",), data.get("batch", 1), "int")
    if batch < 1:
        raise doc.error(("batch",), f"must be >= 1, got {batch}")
    output_dir = _coerce(doc, ("output_dir",), data.get("output_dir"), "?str")

    if algorithm == "FMBO" and problem.first_order_only:
        raise doc.error(("algorithm",), f"FMBO needs second-order products, but the {kind} problem is "
                                        "configured first_order_only")
    return RunConfig(algorithm=algorithm, problem=problem, schedule=schedule, seeds=seeds,
                     diag_every=diag_every, batch=batch, output_dir=output_dir, audit=audit)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    node = _compose(text)
    doc = _Doc()
    if node is None:
        raise ConfigError("empty document")
    return _from_doc(doc, doc.convert(node))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def dump_config(config: RunConfig) -> str:
    """Serialize ``config`` back to YAML; ``parse_config`` of the result equals ``config``."""
    problem = {"kind": config.problem.kind}
    problem.update({f.name: _plain(getattr(config.problem, f.name)) for f in dataclasses.fields(config.problem)})
    schedule = {f.name: getattr(config.schedule, f.name) for f in dataclasses.fields(ScheduleConfig)
                if getattr(config.schedule, f.name) is not None}
    data = {
        "algorithm": config.algorithm,
        "problem": problem,
        "schedule": schedule,
        "seeds": list(config.seeds),
        "diag_every": config.diag_every,
        "batch": config.batch,
        "output_dir": config.output_dir,
        "audit": {f.name: _plain(getattr(config.audit, f.name)) for f in dataclasses.fields(AuditConfig)},
    }
    return yaml.safe_dump(data, sort_keys=False)


# --------------------------------------------------------------------------
# construction


def build_problem(problem: ProblemConfig):
    """Instantiate the oracle described by a problem section."""
    from .oracle import FirstOrderOnly
    from .problems import (
        make_hypercleaning,
        make_logistic,
        make_quadratic,
        read_csv_dataset,
        synth_gaussian_dataset,
    )

    try:
        if isinstance(problem, QuadraticProblem):
            oracle = make_quadratic(problem.p, problem.q, problem.mu_g, problem.L_g, noise=dict(problem.noise),
                                    seed=problem.seed, domain_radius=problem.domain_radius,
                                    coupling=problem.coupling)
        elif isinstance(problem, LogisticProblem):
            oracle = make_logistic(problem.p, problem.q, m=problem.m, mu=problem.mu, scale=problem.scale,
                                   noise=dict(problem.noise), seed=problem.seed)
        else:
            if isinstance(problem, HyperCleaningProblem):
                data = synth_gaussian_dataset(problem.n_train, problem.n_val, problem.n_test, problem.d,
                                              separation=problem.separation, seed=problem.data_seed)
            else:
                data = read_csv_dataset(problem.path, problem.val_fraction, problem.test_fraction,
                                        seed=problem.split_seed)
            oracle = make_hypercleaning(data, corruption_p=problem.corruption_p, reg_C=problem.reg_C,
                                        seed=problem.corruption_seed, batch_size=problem.batch_size)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset: {exc}", field="problem.path") from None
    except BilevelError as exc:
        raise ConfigError(str(exc), field="problem") from None
    return FirstOrderOnly(oracle) if problem.first_order_only else oracle


_PARAM_FIELDS = ("w", "c_beta", "c_lambda", "c_eta_f", "c_eta_g", "c_eta_R", "r_v", "delta_eps")


def resolve_schedule(sched: ScheduleConfig, oracle) -> ScheduleParams:
    """Turn a schedule section into concrete ScheduleParams for ``oracle``."""
    constants = oracle.constants
    try:
        if sched.preset == "theory":
            base = theory_schedule(constants, sched.T, r_v=sched.r_v)
        elif sched.preset == "tuned":
            kwargs = {} if sched.c_eta is None else {"c_eta": sched.c_eta}
            base = tuned_schedule(constants, sched.T, r_v=sched.r_v, outer_smoothness=sched.outer_smoothness,
                                  **kwargs)
        else:
            r_v = constants.default_radius() if constants is not None else None
            base = ScheduleParams(T=sched.T, r_v=r_v or 1.0, delta_eps=DEFAULT_DELTA)
        overrides = {k: getattr(sched, k) for k in _PARAM_FIELDS if getattr(sched, k) is not None}
        return replace(base, T=sched.T, **overrides)
    except BilevelError as exc:
        raise ConfigError(f"cannot build the {sched.preset} schedule: {exc}", field="schedule") from None
