"""Wire messages: one JSON object per line.

Every line carries ``v`` (wire version), ``session_id``, ``kind``,
``sender``, ``recipient`` and ``payload``. Payloads by kind:

=================  ===========================================================
kind               payload
=================  ===========================================================
Register           ``{"node_id", "address"}`` (address ``"host:port"`` or null)
CountRequest       ``{}``
CountResponse      ``{"n_cases", "m_controls"}``
PlanDistribute     ``{"plan_csv", "routes", "mode", "privacy", "g_min"}``;
                   ``plan_csv`` is the plan CSV restricted to the pools the
                   node contributes to, listing only that node's member slots
AggregateRequest   ``{"round", "model", "term_indices", "chains"}``; each chain
                   entry is ``{"pool_id", "term_index", "receives", "next",
                   "masked"}``, ``next`` being a node id or ``"coordinator"``
PartialAggregate   ``{"pool_id", "term_index", "value"}`` (node to node)
MaskedTotal        ``{"pool_id", "term_index", "value"}`` (node to coordinator)
MaskReveal         ``{"round", "masks": [{"pool_id", "term_index", "value"}]}``
PooledDatasetAck   ``{"round", "final"}``
Error              ``{"code", "detail"}``
=================  ===========================================================

Values are JSON numbers in ``real`` mode and decimal strings of the 64-bit
residue in ``exact`` mode, so no consumer has to handle integers beyond 2**53.
Member ids in ``plan_csv`` are slot tokens ``<node_id>:<stratum>:<index>``
that only the owning node can resolve to a record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..errors import ProtocolError

WIRE_VERSION = 1
COORDINATOR = "coordinator"

REGISTER = "Register"
COUNT_REQUEST = "CountRequest"
COUNT_RESPONSE = "CountResponse"
PLAN_DISTRIBUTE = "PlanDistribute"
AGGREGATE_REQUEST = "AggregateRequest"
PARTIAL_AGGREGATE = "PartialAggregate"
MASKED_TOTAL = "MaskedTotal"
MASK_REVEAL = "MaskReveal"
POOLED_DATASET_ACK = "PooledDatasetAck"
ERROR = "Error"

KINDS = (
    REGISTER,
    COUNT_REQUEST,
    COUNT_RESPONSE,
    PLAN_DISTRIBUTE,
    AGGREGATE_REQUEST,
    PARTIAL_AGGREGATE,
    MASKED_TOTAL,
    MASK_REVEAL,
    POOLED_DATASET_ACK,
    ERROR,
)

# kinds whose payload carries covariate-derived numbers
VALUE_KINDS = (PARTIAL_AGGREGATE, MASKED_TOTAL)

_REQUIRED = {
    REGISTER: ("node_id",),
    COUNT_REQUEST: (),
    COUNT_RESPONSE: ("n_cases", "m_controls"),
    PLAN_DISTRIBUTE: ("plan_csv", "routes", "mode", "privacy", "g_min"),
    AGGREGATE_REQUEST: ("round", "model", "term_indices", "chains"),
    PARTIAL_AGGREGATE: ("pool_id", "term_index", "value"),
    MASKED_TOTAL: ("pool_id", "term_index", "value"),
    MASK_REVEAL: ("round", "masks"),
    POOLED_DATASET_ACK: ("round", "final"),
    ERROR: ("code", "detail"),
}

_EXACT_KEYS = {PARTIAL_AGGREGATE: ("pool_id", "term_index", "value"), MASKED_TOTAL: ("pool_id", "term_index", "value")}
_COUNT_KEYS = ("n_cases", "m_controls")


@dataclass(frozen=True)
class Message:
    kind: str
    session_id: str
    sender: str
    recipient: str
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.payload]
        if missing:
            raise ProtocolError(f"{self.kind} payload lacks {', '.join(missing)}")
        if self.kind in _EXACT_KEYS and set(self.payload) != set(_EXACT_KEYS[self.kind]):
            raise ProtocolError(f"{self.kind} payload must hold exactly pool_id, term_index, value")
        if self.kind == COUNT_RESPONSE and set(self.payload) != set(_COUNT_KEYS):
            raise ProtocolError("CountResponse payload must hold exactly n_cases, m_controls")

    def to_line(self) -> str:
        return json.dumps(
            {
                "v": WIRE_VERSION,
                "session_id": self.session_id,
                "kind": self.kind,
                "sender": self.sender,
                "recipient": self.recipient,
                "payload": self.payload,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_line(cls, line: str) -> Message:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed message: {exc}") from None
        if not isinstance(obj, dict):
            raise ProtocolError("message must be a JSON object")
        if obj.get("v") != WIRE_VERSION:
            raise ProtocolError(f"unsupported wire version {obj.get('v')!r}")
        try:
            return cls(obj["kind"], obj["session_id"], obj["sender"], obj["recipient"], obj["payload"])
        except KeyError as exc:
            raise ProtocolError(f"message lacks field {exc.args[0]!r}") from None


def encode_value(value, mode: str):
    return str(int(value)) if mode == "exact" else float(value)


def decode_value(value, mode: str):
    if mode == "exact":
        if not isinstance(value, str) or not value.lstrip("-").isdigit():
            raise ProtocolError(f"exact-mode value must be a decimal string, got {value!r}")
        return int(value)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError(f"real-mode value must be a number, got {value!r}")
    return float(value)


def slot_token(node_id: str, stratum: str, index: int) -> str:
    return f"{node_id}:{stratum}:{index}"


def parse_slot_token(token: str) -> tuple[str, str, int]:
    parts = token.rsplit(":", 2)
    if len(parts) != 3 or not parts[2].isdigit():
        raise ProtocolError(f"malformed slot token {token!r}")
    return parts[0], parts[1], int(parts[2])
