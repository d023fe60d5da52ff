"""Data-node state machine.

A node holds its microdata and answers the coordinator. Records never enter a
message: the node reports stratum counts, resolves slot tokens from the plan
to its own records, and emits only masked running sums, pool totals and its
masks.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

from .. import rng as rngmod
from ..errors import ProtocolError, SpecRejected, StrictModePrivacyViolation, UnknownPool, UpstreamTimeout, ValidationError
from ..io import parse_plan_rows
from ..model import MicroRecord, ModelSpec, evaluate_term, validate_model_spec
from ..pooling import CASE, CONTROL
from ..securesum import EXACT, draw_mask, masked_contribute, to_fixed, wrap
from .messages import (
    AGGREGATE_REQUEST,
    COORDINATOR,
    COUNT_REQUEST,
    COUNT_RESPONSE,
    ERROR,
    MASK_REVEAL,
    MASKED_TOTAL,
    PARTIAL_AGGREGATE,
    PLAN_DISTRIBUTE,
    POOLED_DATASET_ACK,
    REGISTER,
    Message,
    decode_value,
    encode_value,
    parse_slot_token,
)

log = logging.getLogger(__name__)

IDLE = "Idle"
COUNTING = "Counting"
PLANNED = "Planned"
AGGREGATING = "Aggregating"
DONE = "Done"
FAILED = "Failed"


class Node:
    def __init__(
        self,
        node_id: str,
        records: Sequence[MicroRecord],
        session_id: str,
        mask_seed: int,
        strict: bool = False,
        address: str | None = None,
    ):
        if node_id == COORDINATOR:
            raise ValidationError("'coordinator' is reserved")
        self.node_id = node_id
        self.session_id = session_id
        self.strict = strict
        self.address = address
        self.mask_seed = rngmod.check_seed(mask_seed)
        self._cases = [r for r in records if r.outcome == 1]
        self._controls = [r for r in records if r.outcome == 0]
        self.phase = IDLE
        self.error: ProtocolError | None = None
        self.mode = EXACT
        self.routes: dict[str, str | None] = {}
        self.g_min: int | None = None
        self.members: dict[str, list[MicroRecord]] = {}
        self.round = -1
        self.spec: ModelSpec | None = None
        self.chains: dict[tuple[str, int], dict] = {}
        self.masks: dict[tuple[str, int], object] = {}
        self.local: dict[tuple[str, int], object] = {}
        self.done_keys: set[tuple[str, int]] = set()
        self.revealed_round = -1
        self.inbound: dict[tuple[str, int], object] = {}
        self._deferred: list[Message] = []
        self.outbound_log: list[tuple[str, object, object, object]] = []  # (kind, inbound, local, outbound)

    # -- helpers -----------------------------------------------------------------------

    def _to(self, kind: str, recipient: str, payload: dict) -> Message:
        return Message(kind, self.session_id, self.node_id, recipient, payload)

    def _fail(self, error: ProtocolError) -> list[Message]:
        self.error = error
        self.phase = FAILED
        return [self._to(ERROR, COORDINATOR, {"code": type(error).__name__, "detail": str(error)})]

    @property
    def terminal(self) -> bool:
        return self.phase in (DONE, FAILED)

    def on_timeout(self) -> list[Message]:
        """Called by the transport when nothing arrives in time."""
        if self.phase == AGGREGATING and len(self.done_keys) < len(self.chains):
            waiting = sorted(k for k in self.chains if k not in self.done_keys)[:5]
            return self._fail(UpstreamTimeout(f"no partial aggregate arrived for {waiting}"))
        return []

    def start(self) -> list[Message]:
        return [self._to(REGISTER, COORDINATOR, {"node_id": self.node_id, "address": self.address})]

    # -- dispatch ------------------------------------------------------------------------

    def handle(self, msg: Message) -> list[Message]:
        if msg.session_id != self.session_id or self.phase == FAILED:
            return []
        try:
            out = self._dispatch(msg)
        except ProtocolError as exc:
            return self._fail(exc)
        if out is None:
            self._deferred.append(msg)
            return []
        # state changed; earlier messages may now be processable
        progress = True
        while progress and self._deferred and self.phase != FAILED:
            progress = False
            for held in list(self._deferred):
                try:
                    res = self._dispatch(held)
                except ProtocolError as exc:
                    return out + self._fail(exc)
                if res is not None:
                    self._deferred.remove(held)
                    out += res
                    progress = True
        return out

    def _dispatch(self, msg: Message) -> list[Message] | None:
        """Returns None when the message must wait for an earlier one."""
        kind = msg.kind
        if kind == COUNT_REQUEST:
            self.phase = COUNTING
            return [self._to(COUNT_RESPONSE, COORDINATOR, {"n_cases": len(self._cases), "m_controls": len(self._controls)})]
        if kind == PLAN_DISTRIBUTE:
            return self._on_plan(msg)
        if kind == AGGREGATE_REQUEST:
            if not self.routes:
                return None
            return self._on_request(msg)
        if kind == PARTIAL_AGGREGATE:
            key = (msg.payload["pool_id"], msg.payload["term_index"])
            if self.routes and key[0] not in self.members and key not in self.chains:
                raise UnknownPool(f"partial aggregate for pool {key[0]!r}, which this node has no part in")
            if key not in self.chains:
                return None  # its AggregateRequest has not arrived yet
            return self._on_partial(key, decode_value(msg.payload["value"], self.mode))
        if kind == POOLED_DATASET_ACK:
            if msg.payload["final"]:
                self.phase = DONE
            return []
        if kind == ERROR:
            self.error = ProtocolError(f"coordinator: {msg.payload['code']}: {msg.payload['detail']}")
            self.phase = FAILED
            return []
        raise ProtocolError(f"node does not accept {kind}")

    def _on_plan(self, msg: Message) -> list[Message]:
        if self.routes:
            return []  # duplicate delivery
        p = msg.payload
        self.mode = p["mode"]
        self.g_min = int(p["g_min"])
        pools, _, _ = parse_plan_rows(p["plan_csv"], source=f"plan for {self.node_id}")
        members: dict[str, list[MicroRecord]] = {}
        for pool in pools:
            recs = []
            for token in pool.member_ids:
                node, stratum, index = parse_slot_token(token)
                table = self._cases if stratum == CASE else self._controls if stratum == CONTROL else None
                if node != self.node_id or table is None or not 0 <= index < len(table):
                    raise ProtocolError(f"plan lists slot {token!r} that this node does not hold")
                if stratum != pool.stratum:
                    raise ProtocolError(f"slot {token!r} is in a {pool.stratum} pool")
                recs.append(table[index])
            members[pool.pool_id] = recs
        self.members = members
        self.routes = dict(p["routes"]) or {COORDINATOR: None}
        self.phase = PLANNED
        return []

    def _on_request(self, msg: Message) -> list[Message]:
        p = msg.payload
        if int(p["round"]) <= self.round:
            return []  # duplicate delivery
        try:
            spec = ModelSpec.from_dict(p["model"])
        except (ValidationError, KeyError, TypeError) as exc:
            raise ProtocolError(f"bad model in aggregate request: {exc}") from None
        if self.strict:
            try:
                validate_model_spec(spec, self.g_min, strict=True)
            except StrictModePrivacyViolation as exc:
                raise SpecRejected(str(exc)) from None
        self.spec = spec
        self.round = int(p["round"])
        self.phase = AGGREGATING
        self.chains = {}
        self.masks = {}
        self.local = {}
        self.done_keys = set()
        self.inbound = {}
        gen = rngmod.stream(self.mask_seed, rngmod.MASK, self.node_id, self.session_id, self.round)
        out: list[Message] = []
        for entry in sorted(p["chains"], key=lambda e: (e["pool_id"], e["term_index"])):
            key = (entry["pool_id"], int(entry["term_index"]))
            self.chains[key] = entry
            self.local[key] = self._local_sum(entry["pool_id"], spec.terms[key[1]])
            self.masks[key] = draw_mask(gen, self.mode) if entry["masked"] else 0
        for key, entry in self.chains.items():
            if not entry["receives"]:
                out += self._emit(key, 0 if self.mode == EXACT else 0.0)
        return out

    def _local_sum(self, pool_id: str, t):
        recs = self.members.get(pool_id, [])
        if self.mode == EXACT:
            return sum(to_fixed(evaluate_term(t, r)) for r in recs)
        return math.fsum(evaluate_term(t, r) for r in recs)

    def _on_partial(self, key, value) -> list[Message]:
        # a partial this round cannot use belongs to a round whose request is still in flight
        if not self.chains[key]["receives"]:
            return None
        if key in self.done_keys:
            if self.inbound.get(key) == value:
                return []  # duplicate delivery
            return None  # same key in a later round
        self.inbound[key] = value
        return self._emit(key, value)

    def _emit(self, key, inbound) -> list[Message]:
        entry = self.chains[key]
        local, mask = self.local[key], self.masks[key]
        if self.mode == EXACT:
            outbound = masked_contribute(inbound, local, mask, EXACT) if entry["masked"] else wrap(inbound + local)
        else:
            outbound = masked_contribute(inbound, local, mask, self.mode)
        self.done_keys.add(key)
        self.outbound_log.append((PARTIAL_AGGREGATE if entry["next"] != COORDINATOR else MASKED_TOTAL, inbound, local, outbound))
        payload = {"pool_id": key[0], "term_index": key[1], "value": encode_value(outbound, self.mode)}
        if entry["next"] == COORDINATOR:
            out = [self._to(MASKED_TOTAL, COORDINATOR, payload)]
        else:
            out = [self._to(PARTIAL_AGGREGATE, entry["next"], payload)]
        if len(self.done_keys) == len(self.chains) and self.revealed_round != self.round:
            self.revealed_round = self.round
            masks = [
                {"pool_id": k[0], "term_index": k[1], "value": encode_value(self.masks[k], self.mode)}
                for k, e in self.chains.items()
                if e["masked"]
            ]
            out.append(self._to(MASK_REVEAL, COORDINATOR, {"round": self.round, "masks": masks}))
        return out
