"""Outcome-stratified random pooling and pooled-row construction.

Cases are pooled only with cases and controls only with controls. Every
pool size used must occur among both case pools and control pools, and each
size ``g`` contributes the offset ``ln(k_n(g) / k_m(g))`` to its rows.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import (
    InfeasibleSizes,
    MissingRecord,
    PrivacyError,
    TooFewSubjects,
    ValidationError,
)
from .model import MicroRecord, ModelSpec, StudyMeta, evaluate_term
from .securesum import EXACT, REAL, check_mode, from_fixed, to_fixed_array

CASE = "case"
CONTROL = "control"
STRATA = (CASE, CONTROL)
_PREFIX = {CASE: "case", CONTROL: "ctrl"}

MAX_RECOMMENDED_SIZE = 40


@dataclass(frozen=True)
class Pool:
    pool_id: str
    stratum: str
    member_ids: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "member_ids", tuple(self.member_ids))
        if self.stratum not in STRATA:
            raise ValidationError(f"unknown stratum {self.stratum!r}")
        if not self.member_ids:
            raise ValidationError(f"pool {self.pool_id} is empty")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise ValidationError(f"pool {self.pool_id} lists a member twice")

    @property
    def size_g(self) -> int:
        return len(self.member_ids)

    @property
    def is_case(self) -> bool:
        return self.stratum == CASE


@dataclass(frozen=True)
class PoolPlan:
    pools: tuple[Pool, ...]
    case_leftovers: tuple = ()
    control_leftovers: tuple = ()
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "pools", tuple(self.pools))
        object.__setattr__(self, "case_leftovers", tuple(self.case_leftovers))
        object.__setattr__(self, "control_leftovers", tuple(self.control_leftovers))
        seen: set = set()
        for p in self.pools:
            for sid in p.member_ids:
                if sid in seen:
                    raise ValidationError(f"subject {sid!r} appears in more than one pool")
                seen.add(sid)
        for sid in self.leftovers:
            if sid in seen:
                raise ValidationError(f"subject {sid!r} is both pooled and left over")
            seen.add(sid)
        counts = self.counts()
        case_sizes = {g for (s, g) in counts if s == CASE}
        control_sizes = {g for (s, g) in counts if s == CONTROL}
        if case_sizes != control_sizes:
            raise InfeasibleSizes(
                f"pool sizes differ between strata: cases {sorted(case_sizes)}, controls {sorted(control_sizes)}"
            )
        if len(self.pool_ids) != len(set(self.pool_ids)):
            raise ValidationError("duplicate pool ids")

    @property
    def leftovers(self) -> tuple:
        return self.case_leftovers + self.control_leftovers

    @property
    def pool_ids(self) -> list[str]:
        return [p.pool_id for p in self.pools]

    @property
    def sizes(self) -> list[int]:
        return sorted({p.size_g for p in self.pools})

    @property
    def g_min(self) -> int:
        return min(p.size_g for p in self.pools)

    def counts(self) -> Counter:
        """Counter keyed by (stratum, size)."""
        return Counter((p.stratum, p.size_g) for p in self.pools)

    def k_n(self, g: int) -> int:
        return self.counts()[(CASE, g)]

    def k_m(self, g: int) -> int:
        return self.counts()[(CONTROL, g)]

    def pool(self, pool_id: str) -> Pool:
        for p in self.pools:
            if p.pool_id == pool_id:
                return p
        raise KeyError(pool_id)


# -- size policies -----------------------------------------------------------


@dataclass(frozen=True)
class SingleSize:
    """One pool size; the remainder of each stratum (< g subjects) is discarded."""

    g: int


@dataclass(frozen=True)
class AutoSizes:
    """Two adjacent sizes ``g`` and ``g + 1``, chosen to exhaust both strata.

    Among exact decompositions the one with the fewest pools of the smaller
    size is taken, subject to both strata using the same set of sizes. If no
    exact decomposition exists, the fewest possible subjects are discarded.
    """

    g: int

    @property
    def sizes(self) -> tuple[int, int]:
        return (self.g, self.g + 1)


@dataclass(frozen=True)
class ExplicitSizes:
    """Pool counts per size for each stratum, e.g. ``{3: 4, 4: 22}``."""

    case: Mapping[int, int]
    control: Mapping[int, int]


SizePolicy = SingleSize | AutoSizes | ExplicitSizes


def _as_policy(sizes) -> SizePolicy:
    if isinstance(sizes, (SingleSize, AutoSizes, ExplicitSizes)):
        return sizes
    if isinstance(sizes, int) and not isinstance(sizes, bool):
        return SingleSize(sizes)
    raise ValidationError(f"unsupported size policy {sizes!r}")


def _policy_sizes(policy: SizePolicy) -> set[int]:
    if isinstance(policy, SingleSize):
        return {policy.g}
    if isinstance(policy, AutoSizes):
        return set(policy.sizes)
    return {g for g, c in policy.case.items() if c} | {g for g, c in policy.control.items() if c}


def _decompositions(total: int, s: int) -> list[tuple[int, int]]:
    """All (a, b) with a*s + b*(s+1) == total, a, b >= 0, ordered by a."""
    out = []
    a = (-total) % (s + 1)
    while a * s <= total:
        out.append((a, (total - a * s) // (s + 1)))
        a += s + 1
    return out


def _support(a: int, b: int, s: int) -> frozenset:
    return frozenset(g for g, c in ((s, a), (s + 1, b)) if c)


def _solve_auto(n: int, m: int, s: int) -> tuple[dict[int, int], dict[int, int]]:
    best = None
    for dn in range(s + 1):
        for dm in range(s + 1):
            for an, bn in _decompositions(n - dn, s) if n - dn > 0 else ():
                sup = _support(an, bn, s)
                if not sup:
                    continue
                for am, bm in _decompositions(m - dm, s) if m - dm > 0 else ():
                    if _support(am, bm, s) != sup:
                        continue
                    score = (dn + dm, an + am, an)
                    if best is None or score < best[0]:
                        best = (score, (an, bn), (am, bm))
    if best is None:
        raise InfeasibleSizes(f"no assignment of sizes {{{s}, {s + 1}}} fits n={n}, m={m}")
    _, (an, bn), (am, bm) = best
    case = {g: c for g, c in ((s, an), (s + 1, bn)) if c}
    control = {g: c for g, c in ((s, am), (s + 1, bm)) if c}
    return case, control


def _resolve_counts(policy: SizePolicy, n: int, m: int) -> tuple[dict[int, int], dict[int, int]]:
    if isinstance(policy, SingleSize):
        g = policy.g
        kn, km = n // g, m // g
        if kn < 1 or km < 1:
            raise InfeasibleSizes(f"pool size {g} leaves no pool in a stratum (n={n}, m={m})")
        return {g: kn}, {g: km}
    if isinstance(policy, AutoSizes):
        return _solve_auto(n, m, policy.g)
    case = {int(g): int(c) for g, c in policy.case.items() if c}
    control = {int(g): int(c) for g, c in policy.control.items() if c}
    for label, counts, total in (("case", case, n), ("control", control, m)):
        if any(c < 0 for c in counts.values()):
            raise InfeasibleSizes(f"negative {label} pool count")
        used = sum(g * c for g, c in counts.items())
        if used > total:
            raise InfeasibleSizes(f"{label} pools need {used} subjects but only {total} exist")
    if set(case) != set(control):
        raise InfeasibleSizes(f"sizes must appear in both strata: cases {sorted(case)}, controls {sorted(control)}")
    if not case:
        raise InfeasibleSizes("no pools requested")
    return case, control


def _partition(
    ids: Sequence, counts: Mapping[int, int], stratum: str, seed: int
) -> tuple[list[Pool], tuple]:
    tag = rngmod.CASE if stratum == CASE else rngmod.CONTROL
    used = sum(g * c for g, c in counts.items())
    n_left = len(ids) - used
    if n_left:
        chosen = rngmod.stream(seed, rngmod.LEFTOVER_CHOICE, tag).choice(len(ids), size=n_left, replace=False)
        drop = set(int(i) for i in chosen)
        leftovers = tuple(ids[i] for i in sorted(drop))
        kept = [sid for i, sid in enumerate(ids) if i not in drop]
    else:
        leftovers = ()
        kept = list(ids)
    order = rngmod.stream(seed, rngmod.PLAN_PERMUTATION, tag).permutation(len(kept))
    shuffled = [kept[i] for i in order]
    pools = []
    pos = 0
    for g in sorted(counts):
        for _ in range(counts[g]):
            pools.append(Pool(f"{_PREFIX[stratum]}-{len(pools) + 1}", stratum, tuple(shuffled[pos : pos + g])))
            pos += g
    return pools, leftovers


def build_plan(
    meta: StudyMeta,
    case_ids: Sequence[Hashable],
    control_ids: Sequence[Hashable],
    sizes,
    seed: int,
    privacy: bool = True,
) -> PoolPlan:
    """Randomly partition cases and controls into pools.

    ``sizes`` is a pool size (int, meaning :class:`SingleSize`) or one of the
    policy objects. The result depends only on the inputs, their order and
    ``seed``.
    """
    rngmod.check_seed(seed)
    case_ids, control_ids = list(case_ids), list(control_ids)
    if len(case_ids) != meta.n or len(control_ids) != meta.m:
        raise ValidationError(
            f"id lists ({len(case_ids)} cases, {len(control_ids)} controls) do not match n={meta.n}, m={meta.m}"
        )
    if len(set(case_ids) | set(control_ids)) != meta.n + meta.m:
        raise ValidationError("subject ids must be distinct across cases and controls")
    policy = _as_policy(sizes)
    requested = _policy_sizes(policy)
    if any(g < 1 for g in requested):
        raise ValidationError(f"pool sizes must be positive, got {sorted(requested)}")
    if privacy and any(g < 2 for g in requested):
        raise PrivacyError("pools of size 1 disclose individual values; use research mode (privacy=False)")
    case_counts, control_counts = _resolve_counts(policy, meta.n, meta.m)
    case_pools, case_left = _partition(case_ids, case_counts, CASE, seed)
    control_pools, control_left = _partition(control_ids, control_counts, CONTROL, seed)
    return PoolPlan(tuple(case_pools + control_pools), case_left, control_left, seed)


def offsets_for_plan(plan: PoolPlan) -> dict[int, float]:
    counts = plan.counts()
    return {g: math.log(counts[(CASE, g)] / counts[(CONTROL, g)]) for g in plan.sizes}


# -- pooled rows --------------------------------------------------------------


@dataclass(frozen=True)
class PooledRow:
    pool_id: str
    y: int
    size_g: int
    term_values: tuple[float, ...]
    offset: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "term_values", tuple(float(v) for v in self.term_values))
        if not all(math.isfinite(v) for v in self.term_values):
            raise ValidationError(f"pool {self.pool_id}: non-finite pooled value")


def _pool_slices(plan: PoolPlan, index_of: Mapping) -> tuple[np.ndarray, np.ndarray]:
    flat = []
    starts = []
    for p in plan.pools:
        starts.append(len(flat))
        for sid in p.member_ids:
            try:
                flat.append(index_of[sid])
            except KeyError:
                raise MissingRecord(f"no record for pool member {sid!r} (pool {p.pool_id})") from None
    return np.asarray(flat, dtype=np.intp), np.asarray(starts, dtype=np.intp)


def pool_sums(plan: PoolPlan, index_of: Mapping, matrix: np.ndarray, mode: str = EXACT) -> np.ndarray:
    """Sum rows of an individual-level term matrix over each pool.

    ``index_of`` maps subject id to row of ``matrix``. In exact mode each
    individual value is first rounded to the fixed-point grid and the integer
    sums are converted back, which is what the chained summation reproduces.
    """
    check_mode(mode)
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise ValidationError("term matrix must be two-dimensional")
    if not plan.pools:
        return np.zeros((0, matrix.shape[1]))
    flat, starts = _pool_slices(plan, index_of)
    if matrix.shape[1] == 0:
        return np.zeros((len(starts), 0))
    picked = matrix[flat]
    if mode == REAL:
        return np.add.reduceat(picked, starts, axis=0)
    approx = np.add.reduceat(np.abs(picked), starts, axis=0)
    if np.any(approx >= 2.0**62 / 1e9):
        raise OverflowError("pool sums exceed the fixed-point range")
    sums = np.add.reduceat(to_fixed_array(picked), starts, axis=0)
    return np.vectorize(from_fixed, otypes=[float])(sums) if sums.size else sums.astype(float)


def rows_from_sums(plan: PoolPlan, sums: np.ndarray) -> list[PooledRow]:
    offsets = offsets_for_plan(plan)
    return [
        PooledRow(p.pool_id, int(p.is_case), p.size_g, tuple(sums[i]), offsets[p.size_g])
        for i, p in enumerate(plan.pools)
    ]


def aggregate_centralized(
    plan: PoolPlan,
    records: Mapping[Hashable, MicroRecord] | Iterable[MicroRecord],
    spec: ModelSpec,
    mode: str = EXACT,
) -> list[PooledRow]:
    """Pool every term over every pool, in plan order."""
    if not isinstance(records, Mapping):
        records = {r.subject_id: r for r in records}
    index_of: dict = {}
    rows = []
    for p in plan.pools:
        for sid in p.member_ids:
            if sid not in records:
                raise MissingRecord(f"no record for pool member {sid!r} (pool {p.pool_id})")
            rec = records[sid]
            if p.is_case != (rec.outcome == 1):
                raise ValidationError(f"subject {sid!r} has outcome {rec.outcome} but sits in {p.pool_id}")
            index_of[sid] = len(rows)
            rows.append([evaluate_term(t, rec) for t in spec.terms])
    matrix = np.asarray(rows, dtype=float).reshape(len(rows), len(spec.terms))
    return rows_from_sums(plan, pool_sums(plan, index_of, matrix, mode))


# -- pool size guidance --------------------------------------------------------


@dataclass(frozen=True)
class PoolsizeRecommendation:
    size: int
    rationale: str
    warnings: tuple[str, ...] = field(default=())


def check_poolsize(g: int) -> list[str]:
    """Warnings for a user-chosen pool size."""
    out = []
    if g > MAX_RECOMMENDED_SIZE:
        out.append(
            f"pool size {g} exceeds {MAX_RECOMMENDED_SIZE}; large pools bias estimates away from the null "
            "through regression to the mean"
        )
    return out


def recommend_poolsize(meta: StudyMeta, privacy_mode: bool = True, min_pools: int = 30) -> PoolsizeRecommendation:
    """Largest size up to 20 that keeps ``min_pools`` pools in the smaller stratum.

    In privacy mode the search starts at 5. When no such size reaches the
    target pool count, the largest size that still gives two pools per
    stratum is returned with a warning (privacy mode prefers 5 if possible).
    """
    small = min(meta.n, meta.m)
    if small // 2 < 2:
        raise TooFewSubjects(f"the smaller stratum has {small} subjects; even g=2 leaves fewer than 2 pools")
    floor = 5 if privacy_mode else 1
    for g in range(20, floor - 1, -1):
        if small // g >= min_pools:
            return PoolsizeRecommendation(
                g, f"g={g} gives {meta.n // g} case pools and {meta.m // g} control pools (target >= {min_pools})"
            )
    lowest = 2 if privacy_mode else 1
    for g in range(floor, lowest - 1, -1):
        if small // g >= 2:
            return PoolsizeRecommendation(
                g,
                f"g={g} is the largest size keeping at least two pools per stratum",
                (
                    f"only {small // g} pools in the smaller stratum; model-based standard errors and "
                    "coverage rely on many pools",
                ),
            )
    raise TooFewSubjects(f"cannot form two pools per stratum from {small} subjects")  # pragma: no cover
