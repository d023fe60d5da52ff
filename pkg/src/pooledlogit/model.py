"""Records, model terms and their individual-level evaluation.

A term's pooled value is always the sum of its individual values over the
pool members, ``sum_j h(x_j)``; nodes never see or produce ``h(sum_j x_j)``.
Transforms travel as symbolic tags (``identity``, ``log``, ``pow:3``,
``custom:sqrt``) so that every party evaluates them locally.
"""

from __future__ import annotations

import math
import re
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (
    DomainError,
    MissingCovariate,
    StrictModePrivacyViolation,
    ValidationError,
)

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")

# label -> elementwise real function; must accept floats and numpy arrays
_CUSTOM: dict[str, Callable[[Any], Any]] = {}


def register_transform(label: str, func: Callable[[Any], Any]) -> None:
    """Register a custom unary transform usable as ``custom:<label>``.

    Every node must register the same function under the same label.
    """
    if not _NAME_RE.match(label) or label == "log":
        raise ValidationError(f"invalid custom transform label {label!r}")
    _CUSTOM[label] = func


def unregister_transform(label: str) -> None:
    _CUSTOM.pop(label, None)


@dataclass(frozen=True)
class Transform:
    kind: str  # "identity" | "log" | "power" | "custom"
    power: int | None = None
    label: str | None = None

    def __post_init__(self) -> None:
        if self.kind == "power":
            if isinstance(self.power, bool) or not isinstance(self.power, int) or self.power < 1:
                # power 0 would alias the baseline column
                raise ValidationError(f"power transform needs a positive integer exponent, got {self.power!r}")
        elif self.kind == "custom":
            if not self.label or not _NAME_RE.match(self.label):
                raise ValidationError(f"invalid custom transform label {self.label!r}")
        elif self.kind not in ("identity", "log"):
            raise ValidationError(f"unknown transform kind {self.kind!r}")

    @property
    def tag(self) -> str:
        if self.kind == "power":
            return f"pow:{self.power}"
        if self.kind == "custom":
            return f"custom:{self.label}"
        return self.kind

    @classmethod
    def from_tag(cls, tag: str) -> Transform:
        if tag in ("identity", "log"):
            return cls(tag)
        head, _, rest = tag.partition(":")
        if head == "pow" and rest.isdigit():
            return cls("power", power=int(rest))
        if head == "custom" and rest:
            return cls("custom", label=rest)
        raise ValidationError(f"unknown transform tag {tag!r}")

    @property
    def invertible(self) -> bool:
        # unknown custom functions are assumed invertible (conservative)
        return True

    def label_for(self, covariate: str) -> str:
        if self.kind == "identity":
            return covariate
        if self.kind == "log":
            return f"log({covariate})"
        if self.kind == "power":
            return covariate if self.power == 1 else f"{covariate}^{self.power}"
        return f"{self.label}({covariate})"

    def apply(self, value: float) -> float:
        if self.kind == "identity":
            return value
        if self.kind == "log":
            if not value > 0:
                raise DomainError(f"log of non-positive value {value!r}")
            return math.log(value)
        if self.kind == "power":
            return value**self.power
        func = _CUSTOM.get(self.label)
        if func is None:
            raise DomainError(f"custom transform {self.label!r} is not registered")
        return float(func(value))

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return values
        if self.kind == "log":
            if not np.all(values > 0):
                raise DomainError("log of non-positive value")
            return np.log(values)
        if self.kind == "power":
            return values**self.power
        func = _CUSTOM.get(self.label)
        if func is None:
            raise DomainError(f"custom transform {self.label!r} is not registered")
        return np.asarray(func(values), dtype=float)


IDENTITY = Transform("identity")
LOG = Transform("log")


def power(k: int) -> Transform:
    return Transform("power", power=k)


def custom(label: str) -> Transform:
    return Transform("custom", label=label)


@dataclass(frozen=True)
class Factor:
    covariate: str
    transform: Transform = IDENTITY

    def __post_init__(self) -> None:
        if not _NAME_RE.match(self.covariate):
            raise ValidationError(f"invalid covariate name {self.covariate!r}")

    @property
    def name(self) -> str:
        return self.transform.label_for(self.covariate)

    def to_dict(self) -> dict[str, str]:
        return {"covariate": self.covariate, "transform": self.transform.tag}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Factor:
        return cls(d["covariate"], Transform.from_tag(d.get("transform", "identity")))


@dataclass(frozen=True)
class Term:
    """One column of the linear predictor: h(x), or h(x) * h'(z)."""

    covariate: str
    transform: Transform = IDENTITY
    interaction_with: Factor | None = None

    def __post_init__(self) -> None:
        if not _NAME_RE.match(self.covariate):
            raise ValidationError(f"invalid covariate name {self.covariate!r}")

    @property
    def factors(self) -> tuple[Factor, ...]:
        head = Factor(self.covariate, self.transform)
        return (head,) if self.interaction_with is None else (head, self.interaction_with)

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(f.covariate for f in self.factors)

    @property
    def name(self) -> str:
        return "*".join(f.name for f in self.factors)

    @property
    def key(self) -> tuple[tuple[str, str], ...]:
        # products commute, so x*z and z*x are the same column; x*x is not x
        return tuple(sorted((f.covariate, f.transform.tag) for f in self.factors))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"covariate": self.covariate, "transform": self.transform.tag}
        d["interaction"] = None if self.interaction_with is None else self.interaction_with.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Term:
        inter = d.get("interaction")
        return cls(
            d["covariate"],
            Transform.from_tag(d.get("transform", "identity")),
            None if inter is None else Factor.from_dict(inter),
        )

    def __str__(self) -> str:
        return self.name


def term(covariate: str, transform: Transform = IDENTITY, *, times: Factor | str | None = None) -> Term:
    """Shorthand constructor: ``term("x", times="z2")`` is the product x*z2."""
    if isinstance(times, str):
        times = Factor(times)
    return Term(covariate, transform, times)


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[Term, ...]
    include_baseline: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "terms", tuple(self.terms))
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate term names: {', '.join(dup)}")
        keys = [t.key for t in self.terms]
        if len(set(keys)) != len(keys):
            raise ValidationError("model contains two identical terms")
        if not self.terms and not self.include_baseline:
            raise ValidationError("model has no columns")

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    @property
    def covariates(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.terms:
            for c in t.covariates:
                seen.setdefault(c)
        return list(seen)

    def coefficient_names(self, baseline_name: str = "baseline") -> list[str]:
        return ([baseline_name] if self.include_baseline else []) + self.names

    def to_dict(self) -> dict[str, Any]:
        return {"include_baseline": self.include_baseline, "terms": [t.to_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelSpec:
        return cls(tuple(Term.from_dict(t) for t in d["terms"]), bool(d.get("include_baseline", True)))


@dataclass(frozen=True)
class MicroRecord:
    subject_id: str
    outcome: int
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.outcome not in (0, 1):
            raise ValidationError(f"{self.subject_id}: outcome must be 0 or 1, got {self.outcome!r}")
        object.__setattr__(self, "outcome", int(self.outcome))

    def check(self, spec: ModelSpec) -> None:
        for name in spec.covariates:
            if name not in self.covariates:
                raise MissingCovariate(f"{self.subject_id}: missing covariate {name!r}")
            if not math.isfinite(self.covariates[name]):
                raise DomainError(f"{self.subject_id}: covariate {name!r} is not finite")


@dataclass(frozen=True)
class StudyMeta:
    n: int  # cases
    m: int  # controls
    prevalence: float | None = None

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ValidationError(f"need at least one case and one control (n={self.n}, m={self.m})")
        if self.prevalence is not None and not 0.0 < self.prevalence < 1.0:
            raise ValidationError(f"prevalence must lie in (0, 1), got {self.prevalence}")


def _covariate(record: MicroRecord, name: str) -> float:
    try:
        value = record.covariates[name]
    except KeyError:
        raise MissingCovariate(f"{record.subject_id}: missing covariate {name!r}") from None
    if not math.isfinite(value):
        raise DomainError(f"{record.subject_id}: covariate {name!r} is not finite")
    return value


def evaluate_term(t: Term, record: MicroRecord) -> float:
    """Individual value of ``t`` for one record."""
    value = 1.0
    for f in t.factors:
        try:
            value *= f.transform.apply(_covariate(record, f.covariate))
        except DomainError as exc:
            if str(exc).startswith(record.subject_id):
                raise
            raise DomainError(f"{record.subject_id}: {t.name}: {exc}") from None
    if not math.isfinite(value):
        raise DomainError(f"{record.subject_id}: {t.name} evaluates to {value}")
    return value


def term_column(t: Term, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Vectorised ``evaluate_term`` over aligned covariate arrays."""
    out = None
    for f in t.factors:
        try:
            col = np.asarray(columns[f.covariate], dtype=float)
        except KeyError:
            raise MissingCovariate(f"missing covariate {f.covariate!r}") from None
        v = f.transform.apply_array(col)
        out = v if out is None else out * v
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{t.name} has non-finite values")
    return out


@dataclass(frozen=True)
class PrivacyWarning:
    covariate: str
    transforms: tuple[str, ...]
    g_min: int

    @property
    def message(self) -> str:
        return (
            f"covariate {self.covariate!r} enters through {len(self.transforms)} invertible transforms "
            f"({', '.join(self.transforms)}); with pools as small as {self.g_min} its individual "
            "values can be solved for from the pooled sums"
        )

    def __str__(self) -> str:
        return self.message


def validate_model_spec(spec: ModelSpec, g_min: int, strict: bool = False) -> list[PrivacyWarning]:
    """Flag covariates whose individual values are recoverable from pool sums.

    With d distinct invertible transforms of one covariate and pools of g <= d
    members, the d power-type sums form a solvable system for the g values.
    Interactions between different covariates are not counted; a product of a
    covariate with itself counts as one more transform of that covariate.
    """
    if g_min < 1:
        raise ValidationError(f"g_min must be positive, got {g_min}")
    per_cov: dict[str, list[str]] = {}
    for t in spec.terms:
        covs = set(t.covariates)
        if len(covs) != 1:
            continue
        (cov,) = covs
        if all(f.transform.invertible for f in t.factors):
            per_cov.setdefault(cov, [])
            if t.name not in per_cov[cov]:
                per_cov[cov].append(t.name)
    warnings = [PrivacyWarning(c, tuple(ts), g_min) for c, ts in per_cov.items() if len(ts) >= g_min]
    if strict and warnings:
        raise StrictModePrivacyViolation("; ".join(w.message for w in warnings))
    return warnings
