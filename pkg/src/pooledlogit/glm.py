"""Logistic regression with a fixed per-row offset, fitted by IRLS.

The same solver serves individual-level fits (intercept column of ones, zero
offset) and pooled fits (baseline column equal to the pool size ``g`` and
offset ``ln(r_g)``).
"""

from __future__ import annotations

import hashlib
import math
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    NoPrevalence,
    NotNested,
    RankDeficient,
    RowMismatch,
    Separation,
    ValidationError,
)
from .model import MicroRecord, ModelSpec, StudyMeta, evaluate_term

MAX_ITER = 50
TOL = 1e-9
PIVOT_TOL = 1e-10
SEPARATION_BOUND = 30.0
PROB_EPS = 1e-12
MAX_HALVINGS = 40
# deviance differences below this fraction of the deviance are rounding noise
DEV_RESOLUTION = 1e-12


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DesignRow:
    y: int
    x: tuple[float, ...]
    offset: float = 0.0


@dataclass(frozen=True)
class Design:
    """Column-major view of a list of design rows."""

    X: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        off = np.asarray(self.offset, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],) or off.shape != y.shape:
            raise DimensionMismatch(f"inconsistent design shapes X{X.shape} y{y.shape} offset{off.shape}")
        if len(self.names) != X.shape[1]:
            raise DimensionMismatch(f"{len(self.names)} names for {X.shape[1]} columns")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(off))):
            raise ValidationError("design contains non-finite values")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("outcomes must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_rows(cls, rows: Sequence[DesignRow], names: Sequence[str] | None = None) -> Design:
        if not rows:
            raise ValidationError("no rows to fit")
        width = len(rows[0].x)
        if any(len(r.x) != width for r in rows):
            raise DimensionMismatch("design rows have different lengths")
        X = np.array([r.x for r in rows], dtype=float).reshape(len(rows), width)
        names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(width))
        return cls(X, np.array([r.y for r in rows]), np.array([r.offset for r in rows]), names)

    @property
    def digest(self) -> str:
        """Identity of the rows (outcomes and offsets) for nesting checks."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(np.ascontiguousarray(self.offset).tobytes())
        return h.hexdigest()


def _as_design(rows, names=None) -> Design:
    return rows if isinstance(rows, Design) else Design.from_rows(list(rows), names)


def individual_design(records: Iterable[MicroRecord], spec: ModelSpec) -> Design:
    """Standard analysis: intercept column of ones, zero offset."""
    records = list(records)
    cols = [[evaluate_term(t, r) for t in spec.terms] for r in records]
    T = np.asarray(cols, dtype=float).reshape(len(records), len(spec.terms))
    parts = [np.ones((len(records), 1))] if spec.include_baseline else []
    X = np.hstack(parts + [T])
    y = np.array([r.outcome for r in records])
    return Design(X, y, np.zeros(len(records)), tuple(spec.coefficient_names("intercept")))


def pooled_design(rows, spec: ModelSpec) -> Design:
    """Pooled analysis: baseline column g, pooled term sums, offset ln(r_g)."""
    rows = list(rows)
    T = np.array([r.term_values for r in rows], dtype=float).reshape(len(rows), len(spec.terms))
    parts = [np.array([[r.size_g] for r in rows], dtype=float)] if spec.include_baseline else []
    X = np.hstack(parts + [T])
    return Design(
        X,
        np.array([r.y for r in rows]),
        np.array([r.offset for r in rows]),
        tuple(spec.coefficient_names("baseline")),
    )


def _loglik(design: Design, beta: np.ndarray) -> float:
    eta = design.X @ beta + design.offset
    return float(np.sum(design.y * eta - np.logaddexp(0.0, eta)))


def log_likelihood_at(rows, beta) -> float:
    """Bernoulli log-likelihood with linear predictor x.beta + offset."""
    design = _as_design(rows)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.X.shape[1],):
        raise DimensionMismatch(f"beta has {beta.size} entries, design has {design.X.shape[1]} columns")
    return _loglik(design, beta)


def score_at(rows, beta) -> np.ndarray:
    """Gradient of :func:`log_likelihood_at` with respect to beta."""
    design = _as_design(rows)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.X.shape[1],):
        raise DimensionMismatch(f"beta has {beta.size} entries, design has {design.X.shape[1]} columns")
    p = expit(design.X @ beta + design.offset)
    return design.X.T @ (design.y - p)


@dataclass
class FitResult:
    coefficients: np.ndarray
    std_errors: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    aic: float
    n_rows: int
    converged: bool
    iterations: int
    names: tuple[str, ...] = ()
    deviance_history: list[float] = field(default_factory=list)
    score_norm: float = math.nan
    rows_digest: str = ""

    @property
    def z_values(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.std_errors

    @property
    def p_values(self) -> np.ndarray:
        return 2.0 * stats.norm.sf(np.abs(self.z_values))

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def table(self, level: float = 0.95) -> list[dict]:
        ci = wald_ci(self, level)
        return [
            {
                "name": n,
                "estimate": float(b),
                "se": float(s),
                "z": float(z),
                "p": float(p),
                "ci_low": float(lo),
                "ci_high": float(hi),
            }
            for n, b, s, z, p, (lo, hi) in zip(
                self.names, self.coefficients, self.std_errors, self.z_values, self.p_values, ci
            )
        ]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coefficients": [float(v) for v in self.coefficients],
            "std_errors": [float(v) for v in self.std_errors],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "n_rows": self.n_rows,
            "converged": self.converged,
            "iterations": self.iterations,
        }

    def report(self, level: float = 0.95) -> str:
        pct = f"{level * 100:g}%"
        head = f"{'term':<16}{'estimate':>12}{'SE':>11}{'z':>9}{'p':>11}  {pct + ' CI':>24}"
        lines = [head, "-" * len(head)]
        for r in self.table(level):
            lines.append(
                f"{r['name']:<16}{r['estimate']:>12.6f}{r['se']:>11.6f}{r['z']:>9.3f}{r['p']:>11.3g}"
                f"  ({r['ci_low']:>10.6f}, {r['ci_high']:>10.6f})"
            )
        lines.append("")
        lines.append(f"rows: {self.n_rows}   log-likelihood: {self.log_likelihood:.6f}   AIC: {self.aic:.6f}")
        lines.append(f"converged: {'yes' if self.converged else 'NO'} after {self.iterations} iterations")
        return "\n".join(lines) + "\n"


def _check_rank(X: np.ndarray, w: np.ndarray, names) -> None:
    if X.shape[1] == 0:
        return
    _, R, piv = scipy.linalg.qr(np.sqrt(w)[:, None] * X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size < X.shape[1] or diag[0] == 0.0:
        raise RankDeficient("design matrix has fewer rows than columns or is zero")
    bad = np.nonzero(diag < PIVOT_TOL * diag[0])[0]
    if bad.size:
        cols = ", ".join(str(names[piv[i]]) for i in bad)
        raise RankDeficient(f"design matrix is rank deficient (dependent columns: {cols})")


def _separated(design: Design, p: np.ndarray) -> bool:
    y = design.y
    for cls in (0.0, 1.0):
        mask = y == cls
        if not mask.any():
            continue
        target = p[mask] if cls == 1.0 else 1.0 - p[mask]
        if np.all(target > 1.0 - PROB_EPS):
            return True
    return False


def fit(
    rows,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
    ridge: float = 0.0,
    names: Sequence[str] | None = None,
    start: Sequence[float] | None = None,
) -> FitResult:
    """Maximise the logistic log-likelihood by Newton/IRLS with step halving.

    Convergence requires both ``max|score| < tol`` and a relative deviance
    change below ``tol``. A non-converged fit is returned with
    ``converged=False`` and a :class:`ConvergenceWarning`.
    """
    design = _as_design(rows, names)
    X, y, off = design.X, design.y, design.offset
    n, k = X.shape
    if not (y.any() and (1 - y).any()):
        raise ValidationError("need at least one row of each outcome class")
    if ridge < 0:
        raise ValidationError("ridge must be non-negative")
    _check_rank(X, np.full(n, 0.25), design.names)

    beta = np.zeros(k) if start is None else np.asarray(start, dtype=float).copy()

    def objective(b):
        # penalised deviance; ridge 0 gives the plain deviance -2*loglik
        return -2.0 * _loglik(design, b) + ridge * float(b @ b)

    dev = objective(beta)
    history = [dev]
    converged = False
    iterations = 0
    score = np.zeros(k)
    for iterations in range(1, max_iter + 1):
        p = expit(X @ beta + off)
        w = p * (1.0 - p)
        score = X.T @ (y - p) - ridge * beta
        info = X.T @ (w[:, None] * X) + ridge * np.eye(k)
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            if _separated(design, p) or np.all(w < 1e-300):
                raise Separation("weights underflowed; outcomes are (quasi-)separated") from None
            raise RankDeficient("information matrix is singular") from None

        # near the optimum the true decrease is below what the deviance can
        # resolve, so a step that leaves it unchanged up to rounding is taken
        slack = DEV_RESOLUTION * (abs(dev) + 1.0)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = beta + t * step
            new_dev = objective(candidate)
            if np.isfinite(new_dev) and new_dev <= dev + slack:
                break
            t *= 0.5
        else:
            candidate, new_dev = beta, dev

        # plain relative change: a deviance shrinking towards 0 (separation) never looks converged
        rel_change = abs(dev - new_dev) / max(abs(new_dev), 1e-300)
        beta, dev = candidate, new_dev
        history.append(dev)

        if np.any(np.abs(beta) > SEPARATION_BOUND):
            raise Separation(
                f"coefficient magnitude exceeded {SEPARATION_BOUND:g} "
                f"({', '.join(n_ for n_, b in zip(design.names, beta) if abs(b) > SEPARATION_BOUND)})"
            )
        p = expit(X @ beta + off)
        if _separated(design, p):
            raise Separation("fitted probabilities reproduce one outcome class exactly")
        score = X.T @ (y - p) - ridge * beta
        if np.max(np.abs(score), initial=0.0) < tol and rel_change < tol:
            converged = True
            break

    p = expit(X @ beta + off)
    w = p * (1.0 - p)
    info = X.T @ (w[:, None] * X) + ridge * np.eye(k)
    try:
        cov = scipy.linalg.inv(info)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise RankDeficient("information matrix is singular at the optimum") from None
    cov = 0.5 * (cov + cov.T)
    ll = _loglik(design, beta)
    if not converged:
        warnings.warn(
            f"IRLS did not converge in {max_iter} iterations (max|score|={np.max(np.abs(score)):.3g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return FitResult(
        coefficients=beta,
        std_errors=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        covariance=cov,
        log_likelihood=ll,
        aic=-2.0 * ll + 2.0 * k,
        n_rows=n,
        converged=converged,
        iterations=iterations,
        names=design.names,
        deviance_history=history,
        score_norm=float(np.max(np.abs(score), initial=0.0)),
        rows_digest=design.digest,
    )


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    df: int
    p_value: float


def likelihood_ratio_test(full: FitResult, reduced: FitResult) -> LRTResult:
    if full.rows_digest != reduced.rows_digest or full.n_rows != reduced.n_rows:
        raise RowMismatch("models were fitted on different rows")
    if not set(reduced.names) <= set(full.names):
        extra = sorted(set(reduced.names) - set(full.names))
        raise NotNested(f"reduced model has terms not in the full model: {', '.join(extra)}")
    df = len(full.names) - len(reduced.names)
    stat = max(0.0, 2.0 * (full.log_likelihood - reduced.log_likelihood))
    p = float(stats.chi2.sf(stat, df)) if df > 0 else 1.0
    return LRTResult(stat, df, p)


def recover_baseline(fit_result: FitResult, meta: StudyMeta, index: int = 0) -> float:
    """Baseline log odds from the pooled baseline coefficient and the prevalence."""
    if meta.prevalence is None:
        raise NoPrevalence("the baseline log odds needs the outcome prevalence (prospective design)")
    pi = meta.prevalence
    return float(fit_result.coefficients[index]) - math.log((1.0 - pi) / pi)


def wald_ci(fit_result: FitResult, level: float = 0.95) -> np.ndarray:
    """Per-coefficient ``estimate -/+ z * SE``; shape (k, 2)."""
    if not 0.0 <= level < 1.0:
        raise ValidationError(f"confidence level must lie in [0, 1), got {level}")
    z = float(stats.norm.ppf((1.0 + level) / 2.0))
    b, se = fit_result.coefficients, fit_result.std_errors
    return np.column_stack([b - z * se, b + z * se])


def coefficient_map(fit_result: FitResult) -> Mapping[str, float]:
    return dict(zip(fit_result.names, map(float, fit_result.coefficients)))
