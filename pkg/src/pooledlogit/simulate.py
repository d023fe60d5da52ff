"""Monte Carlo comparison of standard and pooled logistic regression.

Each replicate draws a cohort, fits the standard individual-level model and
then the pooled model for every pool size, all on the same cohort. Results
are summarised per analysis arm as mean estimate, mean model-based SE, Wald
interval coverage and power.

Cohort model::

    (X, W) ~ standard bivariate normal, corr(X, W) = rho
    Z1 = |W|,  Z2 ~ N(0, 1) independent
    logit P(Y = 1) = b0 + bx x + bz1 log(z1) + bz2 z2 + bxz2 x z2
"""

from __future__ import annotations

import csv
import io as _io
import logging
import math
import warnings
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from . import glm
from . import rng as rngmod
from .errors import ArmMismatch, NumericalError, ValidationError
from .model import LOG, MicroRecord, ModelSpec, StudyMeta, term, term_column
from .pooling import SingleSize, build_plan, pool_sums, rows_from_sums
from .securesum import REAL

log = logging.getLogger(__name__)

UNPOOLED = "Unpooled"
MODEL = ModelSpec((term("x"), term("z1", LOG), term("z2"), term("x", times="z2")))
PARAMETERS = tuple(MODEL.names)  # ("x", "log(z1)", "z2", "x*z2")


@dataclass(frozen=True)
class SimConfig:
    n_subjects: int = 30000
    n_reps: int = 500
    beta: tuple[float, float, float, float, float] = (-3.0, 0.25, -0.3, 0.15, 0.5)
    corr_x_w: float = 0.3
    pool_sizes: tuple[int, ...] = (2, 3, 4, 6)
    seed: int = 0
    level: float = 0.95

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "pool_sizes", tuple(int(g) for g in self.pool_sizes))
        if len(self.beta) != 5:
            raise ValidationError("beta needs five values: intercept, x, log(z1), z2, x*z2")
        if not -1.0 < self.corr_x_w < 1.0:
            raise ValidationError(f"corr_x_w must lie in (-1, 1), got {self.corr_x_w}")
        if self.n_subjects < 100:
            raise ValidationError(f"n_subjects must be at least 100, got {self.n_subjects}")
        if self.n_reps < 1:
            raise ValidationError("n_reps must be positive")
        if any(g < 1 for g in self.pool_sizes) or len(set(self.pool_sizes)) != len(self.pool_sizes):
            raise ValidationError(f"pool sizes must be distinct positive integers, got {self.pool_sizes}")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")
        rngmod.check_seed(self.seed)

    @property
    def truth(self) -> dict[str, float]:
        return dict(zip(PARAMETERS, self.beta[1:]))

    @property
    def arms(self) -> list[str]:
        return [UNPOOLED] + [f"g={g}" for g in self.pool_sizes]


# -- data ------------------------------------------------------------------------


def draw_cohort(config: SimConfig, rep: int) -> dict[str, np.ndarray]:
    """Columns x, w, z1, z2, y for replicate ``rep``."""
    gen = rngmod.stream(config.seed, rngmod.COHORT, rep)
    n = config.n_subjects
    rho = config.corr_x_w
    x = gen.standard_normal(n)
    w = rho * x + math.sqrt(1.0 - rho * rho) * gen.standard_normal(n)
    z1 = np.abs(w)
    z2 = gen.standard_normal(n)
    b0, bx, bz1, bz2, bxz2 = config.beta
    eta = b0 + bx * x + bz1 * np.log(z1) + bz2 * z2 + bxz2 * x * z2
    y = (gen.random(n) < expit(eta)).astype(int)
    return {"x": x, "w": w, "z1": z1, "z2": z2, "y": y}


def generate_cohort(config: SimConfig, rep: int) -> list[MicroRecord]:
    cols = draw_cohort(config, rep)
    return [
        MicroRecord(f"r{rep}-{i}", int(cols["y"][i]), {"x": cols["x"][i], "z1": cols["z1"][i], "z2": cols["z2"][i]})
        for i in range(config.n_subjects)
    ]


def _plan_seed(config: SimConfig, rep: int, g: int) -> int:
    return int(rngmod.stream(config.seed, rngmod.COHORT, rep, "plan", g).integers(2**63))


# -- one replicate -----------------------------------------------------------------


@dataclass
class RepResult:
    rep: int
    prevalence: float
    estimates: dict[str, np.ndarray | None]  # arm -> slope estimates (None when the fit failed)
    std_errors: dict[str, np.ndarray | None]
    failures: dict[str, str] = field(default_factory=dict)


def _fit(design: glm.Design) -> tuple[np.ndarray, np.ndarray]:
    with warnings.catch_warnings():
        warnings.simplefilter("error", glm.ConvergenceWarning)
        res = glm.fit(design)
    return res.coefficients[1:], res.std_errors[1:]


def run_one(config: SimConfig, rep: int) -> RepResult:
    cols = draw_cohort(config, rep)
    y = cols["y"]
    T = np.column_stack([term_column(t, cols) for t in MODEL.terms])
    out = RepResult(rep, float(y.mean()), {}, {})

    def attempt(arm, build):
        try:
            out.estimates[arm], out.std_errors[arm] = _fit(build())
        except (NumericalError, ValidationError, glm.ConvergenceWarning) as exc:
            out.estimates[arm] = out.std_errors[arm] = None
            out.failures[arm] = f"{type(exc).__name__}: {exc}"

    n = len(y)
    attempt(UNPOOLED, lambda: glm.Design(np.column_stack([np.ones(n), T]), y, np.zeros(n), MODEL.coefficient_names("intercept")))
    cases = np.flatnonzero(y == 1).tolist()
    controls = np.flatnonzero(y == 0).tolist()
    index_of = {i: i for i in range(n)}
    for g in config.pool_sizes:

        def pooled(g=g):
            plan = build_plan(
                StudyMeta(len(cases), len(controls)), cases, controls, SingleSize(g), _plan_seed(config, rep, g), privacy=g >= 2
            )
            rows = rows_from_sums(plan, pool_sums(plan, index_of, T, REAL))
            return glm.pooled_design(rows, MODEL)

        attempt(f"g={g}", pooled)
    return out


# -- summaries -----------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSummary:
    mean_estimate: float
    mean_se: float
    coverage: float
    power: float
    empirical_sd: float


@dataclass
class RepSummary:
    arm: str
    params: dict[str, ParamSummary]
    n_ok: int
    prevalence: float
    failures: list[tuple[int, str]]


def summarise(config: SimConfig, results: Sequence[RepResult]) -> dict[str, RepSummary]:
    z = stats.norm.ppf(0.5 + config.level / 2)
    truth = np.array([config.truth[p] for p in PARAMETERS])
    prevalence = float(np.mean([r.prevalence for r in results]))
    out = {}
    for arm in config.arms:
        ok = [r for r in results if r.estimates.get(arm) is not None]
        failures = [(r.rep, r.failures[arm]) for r in results if arm in r.failures]
        params = {}
        if ok:
            est = np.array([r.estimates[arm] for r in ok])
            se = np.array([r.std_errors[arm] for r in ok])
            covered = np.abs(est - truth) <= z * se
            rejects = np.abs(est) > z * se
            sd = est.std(axis=0, ddof=1) if len(ok) > 1 else np.full(len(PARAMETERS), np.nan)
            for j, p in enumerate(PARAMETERS):
                params[p] = ParamSummary(
                    float(est[:, j].mean()), float(se[:, j].mean()), float(covered[:, j].mean()), float(rejects[:, j].mean()), float(sd[j])
                )
        out[arm] = RepSummary(arm, params, len(ok), prevalence, failures)
    return out


@dataclass
class Replication:
    config: SimConfig
    results: list[RepResult]
    summaries: dict[str, RepSummary]

    def estimates(self, arm: str) -> tuple[list[int], np.ndarray]:
        """Rep indices and the (reps x parameters) estimate matrix for one arm, failed reps skipped."""
        reps = [r.rep for r in self.results if r.estimates.get(arm) is not None]
        rows = [r.estimates[arm] for r in self.results if r.estimates.get(arm) is not None]
        return reps, np.array(rows).reshape(len(rows), len(PARAMETERS))


def run_replication(config: SimConfig, workers: int = 1, progress=None) -> Replication:
    """Run every replicate; results are ordered by rep index whatever ``workers`` is."""
    reps = range(config.n_reps)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, [config] * config.n_reps, reps, chunksize=max(1, config.n_reps // (4 * workers))))
    else:
        results = []
        for rep in reps:
            results.append(run_one(config, rep))
            if progress is not None:
                progress(rep + 1, config.n_reps)
    for r in results:
        for arm, why in r.failures.items():
            log.info("rep %d arm %s failed: %s", r.rep, arm, why)
    return Replication(config, results, summarise(config, results))


# -- agreement between arms ------------------------------------------------------------


@dataclass(frozen=True)
class AgreementLine:
    parameter: str
    slope: float
    intercept: float
    n: int
    degenerate: bool


def agreement_line(reference: np.ndarray, other: np.ndarray, parameter: str = "") -> AgreementLine:
    """Least-squares line of ``other`` on ``reference``."""
    x = np.asarray(reference, dtype=float)
    y = np.asarray(other, dtype=float)
    if x.shape != y.shape:
        raise ArmMismatch(f"{parameter}: arms have {x.size} and {y.size} estimates")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if len(x) < 2 or sxx == 0.0:
        return AgreementLine(parameter, math.nan, math.nan, len(x), True)
    slope = float(dx @ (y - y.mean())) / sxx
    return AgreementLine(parameter, slope, float(y.mean() - slope * x.mean()), len(x), False)


def scatter_report(replication: Replication, arm: str, reference: str = UNPOOLED) -> tuple[list[dict], list[AgreementLine]]:
    """Per-rep paired estimates (reference vs ``arm``) and one agreement line per parameter."""
    ref_reps, ref = replication.estimates(reference)
    arm_reps, est = replication.estimates(arm)
    if not ref_reps and not arm_reps:
        raise ArmMismatch(f"no successful reps for {reference} or {arm}")
    common = sorted(set(ref_reps) & set(arm_reps))
    if not common:
        raise ArmMismatch(f"{reference} and {arm} share no successful reps")
    ri = [ref_reps.index(r) for r in common]
    ai = [arm_reps.index(r) for r in common]
    pairs = [
        {"rep": rep, "parameter": p, reference: float(ref[i, j]), arm: float(est[k, j])}
        for rep, i, k in zip(common, ri, ai)
        for j, p in enumerate(PARAMETERS)
    ]
    lines = [agreement_line(ref[ri, j], est[ai, j], p) for j, p in enumerate(PARAMETERS)]
    return pairs, lines


# -- output ---------------------------------------------------------------------------

STATISTICS = (("Estimate", "mean_estimate"), ("ModelSE", "mean_se"), ("Coverage", "coverage"))


def results_table(replication: Replication, with_power: bool = False) -> list[list[str]]:
    cfg = replication.config
    stats_rows = STATISTICS + ((("Power", "power"),) if with_power else ())
    rows = [["parameter", "truth", "statistic", *cfg.arms]]
    for p in PARAMETERS:
        for label, attr in stats_rows:
            cells = []
            for arm in cfg.arms:
                s = replication.summaries[arm].params.get(p)
                cells.append("nan" if s is None else f"{getattr(s, attr):.4f}")
            rows.append([p, f"{cfg.truth[p]:g}", label, *cells])
    rows.append(["failures", "", "count", *(str(len(replication.summaries[a].failures)) for a in cfg.arms)])
    return rows


def table_csv(replication: Replication, header: str | None = None, with_power: bool = False) -> str:
    buf = _io.StringIO()
    if header:
        buf.write(header + "\n")
    csv.writer(buf, lineterminator="\n").writerows(results_table(replication, with_power))
    return buf.getvalue()


def table_text(replication: Replication, with_power: bool = False) -> str:
    rows = results_table(replication, with_power)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if k == 0:
            lines.append("-" * len(lines[0]))
    prev = next(iter(replication.summaries.values())).prevalence
    lines.append(f"mean prevalence {prev:.4f} over {replication.config.n_reps} reps of {replication.config.n_subjects}")
    return "\n".join(lines) + "\n"


def per_rep_csv(replication: Replication, header: str | None = None) -> str:
    buf = _io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rep", "arm", "parameter", "estimate", "std_error", "failure"])
    for r in replication.results:
        for arm in replication.config.arms:
            est, se = r.estimates.get(arm), r.std_errors.get(arm)
            for j, p in enumerate(PARAMETERS):
                if est is None:
                    w.writerow([r.rep, arm, p, "", "", r.failures.get(arm, "")])
                else:
                    w.writerow([r.rep, arm, p, repr(float(est[j])), repr(float(se[j])), ""])
    return buf.getvalue()
