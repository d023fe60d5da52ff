"""File formats: microdata CSV, model config, plan CSV, pooled CSV, fit records.

Model config grammar (one entry per line, ``#`` starts a comment)::

    baseline = yes            # optional, default yes
    term = x                  # identity
    term = log(z1)            # natural log
    term = x^3                # positive integer power
    term = sqrt(z1)           # any other name(...) is a registered custom transform
    term = x*z2               # interaction of two factors

Plan CSV (case-id / control-id tables)::

    pool_id,stratum,member_id_1,...,member_id_G
    case-1,case,s17,s4,s90
    ...
    leftover_stratum,leftover_id
    control,s311

Pooled CSV (the analysis dataset)::

    case_pool,pool_id,size_g,offset,<term name>,...
    yes,case-1,3,0.2876820724517809,6.5,...

Every written file starts with a ``#`` header line carrying the tool
version, the seed and a digest of the analysis configuration.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

from . import __version__
from .errors import ParseError, ValidationError
from .model import Factor, MicroRecord, ModelSpec, Term, Transform
from .pooling import CASE, CONTROL, STRATA, Pool, PooledRow, PoolPlan

_NAME = r"[A-Za-z_][A-Za-z0-9_.]*"
_FACTOR_RE = re.compile(rf"^\s*(?:(?P<fn>{_NAME})\(\s*(?P<arg>{_NAME})\s*\)|(?P<base>{_NAME})\s*\^\s*(?P<k>\d+)|(?P<bare>{_NAME}))\s*$")
_TRUE = {"yes", "true", "1", "on"}
_FALSE = {"no", "false", "0", "off"}

LEFTOVER_HEADER = ["leftover_stratum", "leftover_id"]


# -- headers -------------------------------------------------------------------


def config_digest(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def analysis_config(spec: ModelSpec, sizes, mode: str, privacy: bool) -> dict:
    """Everything besides the data and seed that determines a pooled dataset."""
    return {"model": format_model_config(spec), "sizes": repr(sizes), "mode": mode, "privacy": privacy}


def header_line(seed: int | None, config: Mapping) -> str:
    return f"# pooledlogit {__version__} seed={seed} config={config_digest(config)}"


def _strip_comments(lines: Iterable[str]) -> list[tuple[int, str]]:
    return [(i, line) for i, line in enumerate(lines, start=1) if line.strip() and not line.lstrip().startswith("#")]


# -- model config ----------------------------------------------------------------


def parse_factor(text: str) -> Factor:
    m = _FACTOR_RE.match(text)
    if not m:
        raise ValidationError(f"cannot parse factor {text.strip()!r}")
    if m.group("bare"):
        return Factor(m.group("bare"))
    if m.group("base"):
        k = int(m.group("k"))
        return Factor(m.group("base"), Transform("identity") if k == 1 else Transform("power", power=k))
    fn, arg = m.group("fn"), m.group("arg")
    return Factor(arg, Transform("log") if fn == "log" else Transform("custom", label=fn))


def parse_term(text: str) -> Term:
    parts = text.split("*")
    if len(parts) > 2:
        raise ValidationError(f"only two-way interactions are supported: {text.strip()!r}")
    head = parse_factor(parts[0])
    other = parse_factor(parts[1]) if len(parts) == 2 else None
    return Term(head.covariate, head.transform, other)


def parse_model_config(text: str, source: str = "<model>") -> ModelSpec:
    terms: list[Term] = []
    baseline = True
    for lineno, raw in _strip_comments(text.splitlines()):
        line = raw.split("#", 1)[0].strip()
        key, sep, value = line.partition("=")
        key, value = key.strip().lower(), value.strip()
        if not sep or not value:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        try:
            if key == "term":
                terms.append(parse_term(value))
            elif key == "baseline":
                if value.lower() not in _TRUE | _FALSE:
                    raise ValidationError(f"baseline must be yes or no, got {value!r}")
                baseline = value.lower() in _TRUE
            else:
                raise ValidationError(f"unknown key {key!r}")
        except ValidationError as exc:
            raise ParseError(str(exc), lineno, source) from None
    try:
        return ModelSpec(tuple(terms), baseline)
    except ValidationError as exc:
        raise ParseError(str(exc), source=source) from None


def format_model_config(spec: ModelSpec) -> str:
    lines = [f"baseline = {'yes' if spec.include_baseline else 'no'}"]
    lines += [f"term = {t.name}" for t in spec.terms]
    return "\n".join(lines) + "\n"


def load_model_config(path: str | Path) -> ModelSpec:
    return parse_model_config(Path(path).read_text(encoding="utf-8"), str(path))


# -- microdata -------------------------------------------------------------------


def parse_microdata(text: str, source: str = "<microdata>") -> list[MicroRecord]:
    rows = [(i, line) for i, line in enumerate(text.splitlines(), start=1) if not line.lstrip().startswith("#")]
    rows = [(i, line) for i, line in rows if line.strip()]
    if not rows:
        raise ParseError("file is empty", source=source)
    header_no, header_line_text = rows[0]
    header = [h.strip() for h in next(csv.reader([header_line_text]))]
    for required in ("subject_id", "outcome"):
        if required not in header:
            raise ParseError(f"missing required column {required!r}", header_no, source)
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names", header_no, source)
    covs = [h for h in header if h not in ("subject_id", "outcome")]
    records = []
    seen = set()
    for lineno, line in rows[1:]:
        fields = next(csv.reader([line]))
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(fields)}", lineno, source)
        row = dict(zip(header, (f.strip() for f in fields)))
        sid = row["subject_id"]
        if not sid:
            raise ParseError("empty subject_id", lineno, source)
        if sid in seen:
            raise ParseError(f"duplicate subject_id {sid!r}", lineno, source)
        seen.add(sid)
        if row["outcome"] not in ("0", "1"):
            raise ParseError(f"outcome must be 0 or 1, got {row['outcome']!r}", lineno, source)
        values = {}
        for c in covs:
            try:
                v = float(row[c])
            except ValueError:
                raise ParseError(f"column {c!r}: not a number: {row[c]!r}", lineno, source) from None
            if not math.isfinite(v):
                raise ParseError(f"column {c!r}: non-finite value {row[c]!r}", lineno, source)
            values[c] = v
        records.append(MicroRecord(sid, int(row["outcome"]), values))
    if not records:
        raise ParseError("no data rows", source=source)
    return records


def load_microdata(path: str | Path) -> list[MicroRecord]:
    return parse_microdata(Path(path).read_text(encoding="utf-8"), str(path))


def format_microdata(records: Sequence[MicroRecord], covariates: Sequence[str] | None = None, header: str | None = None) -> str:
    if covariates is None:
        covariates = list(records[0].covariates) if records else []
    buf = _io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "outcome", *covariates])
    for r in records:
        w.writerow([r.subject_id, r.outcome, *(repr(float(r.covariates[c])) for c in covariates)])
    return buf.getvalue()


# -- plan ------------------------------------------------------------------------


def format_plan(plan: PoolPlan, header: str | None = None, pools: Sequence[Pool] | None = None) -> str:
    """Plan CSV, one pool per row; ``pools`` restricts the rows (e.g. per node)."""
    pools = plan.pools if pools is None else pools
    width = max((len(p.member_ids) for p in pools), default=0)
    buf = _io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pool_id", "stratum", *(f"member_id_{i}" for i in range(1, width + 1))])
    for p in pools:
        w.writerow([p.pool_id, p.stratum, *p.member_ids])
    if plan.leftovers and pools is plan.pools:
        w.writerow(LEFTOVER_HEADER)
        for sid in plan.case_leftovers:
            w.writerow([CASE, sid])
        for sid in plan.control_leftovers:
            w.writerow([CONTROL, sid])
    return buf.getvalue()


def parse_plan_rows(text: str, source: str = "<plan>") -> tuple[list[Pool], list[str], list[str]]:
    lines = _strip_comments(text.splitlines())
    if not lines:
        raise ParseError("empty plan", source=source)
    head_no, head = lines[0]
    header = next(csv.reader([head]))
    if header[:2] != ["pool_id", "stratum"]:
        raise ParseError("plan header must start with pool_id,stratum", head_no, source)
    pools: list[Pool] = []
    left = {CASE: [], CONTROL: []}
    in_leftovers = False
    for lineno, line in lines[1:]:
        fields = next(csv.reader([line]))
        if fields == LEFTOVER_HEADER:
            in_leftovers = True
            continue
        try:
            if in_leftovers:
                stratum, sid = fields
                if stratum not in STRATA:
                    raise ValidationError(f"unknown stratum {stratum!r}")
                left[stratum].append(sid)
            else:
                pools.append(Pool(fields[0], fields[1], tuple(f for f in fields[2:] if f != "")))
        except (ValueError, ValidationError) as exc:
            raise ParseError(str(exc), lineno, source) from None
    return pools, left[CASE], left[CONTROL]


def parse_plan(text: str, seed: int | None = None, source: str = "<plan>") -> PoolPlan:
    pools, case_left, control_left = parse_plan_rows(text, source)
    return PoolPlan(tuple(pools), tuple(case_left), tuple(control_left), seed)


# -- pooled dataset ---------------------------------------------------------------------


def format_pooled(rows: Sequence[PooledRow], term_names: Sequence[str], header: str | None = None) -> str:
    buf = _io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_pool", "pool_id", "size_g", "offset", *term_names])
    for r in rows:
        w.writerow(["yes" if r.y else "no", r.pool_id, r.size_g, repr(float(r.offset)), *(repr(float(v)) for v in r.term_values)])
    return buf.getvalue()


def parse_pooled(text: str, source: str = "<pooled>") -> tuple[list[str], list[PooledRow]]:
    lines = _strip_comments(text.splitlines())
    if not lines:
        raise ParseError("empty pooled dataset", source=source)
    head_no, head = lines[0]
    header = next(csv.reader([head]))
    if header[:4] != ["case_pool", "pool_id", "size_g", "offset"]:
        raise ParseError("pooled header must start with case_pool,pool_id,size_g,offset", head_no, source)
    names = header[4:]
    rows = []
    for lineno, line in lines[1:]:
        f = next(csv.reader([line]))
        if len(f) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(f)}", lineno, source)
        if f[0] not in ("yes", "no"):
            raise ParseError(f"case_pool must be yes or no, got {f[0]!r}", lineno, source)
        try:
            rows.append(PooledRow(f[1], int(f[0] == "yes"), int(f[2]), tuple(float(v) for v in f[4:]), float(f[3])))
        except (ValueError, ValidationError) as exc:
            raise ParseError(str(exc), lineno, source) from None
    return names, rows


# -- fit records ------------------------------------------------------------------------


def fit_record(fit_result, **extra) -> str:
    record = {"tool": "pooledlogit", "version": __version__, **extra, "fit": fit_result.to_dict()}
    record["fit"]["table"] = fit_result.table()
    return json.dumps(record, indent=2, sort_keys=True) + "\n"


def write_text(path: str | Path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")
