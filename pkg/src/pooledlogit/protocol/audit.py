"""Privacy checks over a message transcript.

The audit looks at what actually went over the wire, not at what the state
machines intended to send.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from ..model import MicroRecord
from ..securesum import EXACT, to_fixed, wrap
from .messages import MASKED_TOTAL, PARTIAL_AGGREGATE, VALUE_KINDS, Message


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)
    coincidences: int = 0  # wire numbers equal to some individual value; expected to be ~0 by chance
    value_messages: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def _leaves(obj):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield k
            yield from _leaves(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _leaves(v)
    else:
        yield obj


def audit_transcript(
    messages: Iterable[Message],
    records: Sequence[MicroRecord],
    pool_sizes: dict[str, int] | None = None,
    mode: str = EXACT,
    privacy: bool = True,
) -> AuditReport:
    """Check a transcript against the individual records it must not reveal.

    * no subject id appears anywhere in any message;
    * value-carrying messages hold exactly ``pool_id``, ``term_index``, ``value``;
    * with ``privacy`` and ``pool_sizes``, every disclosed total covers at least two subjects;
    * wire numbers equal to an individual covariate value are counted as coincidences.
    """
    report = AuditReport()
    ids = {r.subject_id for r in records}
    raw = {float(v) for r in records for v in r.covariates.values()}
    # residues stay integers: a float cannot tell apart residues near 2**64
    individual = {wrap(to_fixed(v)) for v in raw} if mode == EXACT else raw
    for i, msg in enumerate(messages):
        for leaf in _leaves(msg.payload):
            if isinstance(leaf, str) and leaf in ids:
                report.violations.append(f"message {i} ({msg.kind}) carries subject id {leaf!r}")
        if msg.kind not in VALUE_KINDS:
            continue
        report.value_messages += 1
        if set(msg.payload) != {"pool_id", "term_index", "value"}:
            report.violations.append(f"message {i} ({msg.kind}) has extra payload fields {sorted(msg.payload)}")
        value = msg.payload["value"]
        number = int(value) if isinstance(value, str) else float(value)
        if number in individual:
            report.coincidences += 1
        if privacy and pool_sizes is not None and msg.kind == MASKED_TOTAL:
            size = pool_sizes.get(msg.payload["pool_id"])
            if size is None or size < 2:
                report.violations.append(f"message {i} discloses a total for pool {msg.payload['pool_id']} of size {size}")
    return report


def unmasked_partials(nodes) -> list[tuple[str, int]]:
    """(node id, log index) of every node-to-node partial that went out without a mask."""
    out = []
    for node in nodes:
        for j, (kind, inbound, local, outbound) in enumerate(node.outbound_log):
            if kind != PARTIAL_AGGREGATE:
                continue
            clear = wrap(int(inbound) + int(local)) if node.mode == EXACT else inbound + local
            if outbound == clear:
                out.append((node.node_id, j))
    return out
