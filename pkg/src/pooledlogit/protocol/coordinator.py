"""Analytical-centre state machine.

The coordinator is a pure message handler: ``handle(msg)`` mutates state and
returns the messages to send. Transports (in-process or sockets) feed it.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

from .. import glm, io
from ..errors import (
    AggregationIncomplete,
    NodeTimeout,
    NumericalError,
    PlanInfeasible,
    ProtocolError,
    SessionExpired,
    SpecRejected,
    StrictModePrivacyViolation,
    ValidationError,
)
from ..model import ModelSpec, StudyMeta, validate_model_spec
from ..pooling import CASE, CONTROL, PooledRow, PoolPlan, build_plan, offsets_for_plan
from ..securesum import EXACT, MaskLedger, check_mode, chain_is_masked, from_fixed, plan_chains
from .messages import (
    AGGREGATE_REQUEST,
    COORDINATOR,
    COUNT_REQUEST,
    COUNT_RESPONSE,
    ERROR,
    MASK_REVEAL,
    MASKED_TOTAL,
    PLAN_DISTRIBUTE,
    POOLED_DATASET_ACK,
    REGISTER,
    Message,
    decode_value,
    parse_slot_token,
    slot_token,
)

log = logging.getLogger(__name__)

COUNTING = "Counting"
PLANNING = "Planning"
AGGREGATING = "Aggregating"
FITTING = "Fitting"
DONE = "Done"
FAILED = "Failed"
PHASES = (COUNTING, PLANNING, AGGREGATING, FITTING, DONE, FAILED)


@dataclass
class CoordinatorConfig:
    session_id: str
    roster: Sequence[str]
    spec: ModelSpec
    sizes: object
    seed: int
    mode: str = EXACT
    privacy: bool = True
    strict: bool = False
    prevalence: float | None = None
    fit_options: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        check_mode(self.mode)
        if not self.roster:
            raise ValidationError("roster is empty")
        if len(set(self.roster)) != len(self.roster) or COORDINATOR in self.roster:
            raise ValidationError("roster node ids must be distinct and not 'coordinator'")

    def analysis_config(self, spec: ModelSpec | None = None) -> dict:
        """What determines the pooled dataset; embedded in output headers."""
        return io.analysis_config(spec or self.spec, self.sizes, self.mode, self.privacy)


class Coordinator:
    def __init__(self, config: CoordinatorConfig):
        self.config = config
        self.phase = COUNTING
        self.round = 0
        self.phase_log: list[tuple[int, str]] = [(0, COUNTING)]
        self.error: ProtocolError | None = None
        self.spec = config.spec
        self.meta: StudyMeta | None = None
        self.plan: PoolPlan | None = None
        self.ledger = MaskLedger(mode=config.mode)
        self.registered: dict[str, str | None] = {}
        self.counts: dict[str, tuple[int, int]] = {}
        self.totals: dict[tuple[str, int], int | float] = {}
        self.values: dict[tuple[str, str], float] = {}  # (pool_id, term name) -> pooled value
        self.pending: set[tuple[str, int]] = set()
        self.pooled: list[PooledRow] = []
        self.fit: glm.FitResult | None = None
        self.fits: list[glm.FitResult] = []
        self.node_membership: dict[str, str] = {}
        self._counts_requested = False

    # -- bookkeeping -----------------------------------------------------------------

    @property
    def terminal(self) -> bool:
        return self.phase in (DONE, FAILED)

    def _to(self, kind: str, recipient: str, payload: dict) -> Message:
        return Message(kind, self.config.session_id, COORDINATOR, recipient, payload)

    def _advance(self, phase: str) -> None:
        if phase != FAILED and PHASES.index(phase) < PHASES.index(self.phase):
            raise RuntimeError(f"phase cannot move back from {self.phase} to {phase}")
        self.phase = phase
        self.phase_log.append((self.round, phase))

    def fail(self, error: ProtocolError) -> list[Message]:
        if self.phase == FAILED:
            return []
        log.warning("session %s failed: %s", self.config.session_id, error)
        self.error = error
        self._advance(FAILED)
        return [
            self._to(ERROR, n, {"code": type(error).__name__, "detail": str(error)}) for n in self.config.roster
        ]

    # -- entry points ----------------------------------------------------------------

    def handle(self, msg: Message) -> list[Message]:
        if msg.session_id != self.config.session_id or self.phase == FAILED:
            return []
        if msg.sender not in self.config.roster:
            log.warning("ignoring message from unknown sender %r", msg.sender)
            return []
        try:
            handler = {
                REGISTER: self._on_register,
                COUNT_RESPONSE: self._on_count,
                MASKED_TOTAL: self._on_total,
                MASK_REVEAL: self._on_reveal,
                ERROR: self._on_error,
            }.get(msg.kind)
            if handler is None:
                raise ProtocolError(f"coordinator does not accept {msg.kind}")
            return handler(msg)
        except ProtocolError as exc:
            return self.fail(exc)

    def on_timeout(self) -> list[Message]:
        """Called by the transport when no further message arrives in time."""
        if self.terminal:
            return []
        if self.phase == COUNTING:
            silent = [n for n in self.config.roster if n not in self.counts]
            return self.fail(NodeTimeout(f"no count from node(s) {', '.join(silent)}"))
        missing = sorted(self.pending)[:5]
        return self.fail(
            AggregationIncomplete(
                f"{len(self.pending)} (pool, term) aggregates incomplete in round {self.round}, e.g. {missing}"
            )
        )

    def start(self, registered: Sequence[str] = ()) -> list[Message]:
        """Begin counting once every roster node is known to be reachable."""
        for n in registered:
            self.registered.setdefault(n, None)
        return self._maybe_request_counts()

    def resend(self, new_spec: ModelSpec) -> list[Message]:
        """Aggregate changed or added terms over the existing pools, then refit."""
        if self.phase != DONE or self.plan is None:
            raise SessionExpired(f"session is {self.phase}; a completed session is required")
        if self.config.strict:
            try:
                validate_model_spec(new_spec, self.plan.g_min, strict=True)
            except StrictModePrivacyViolation as exc:
                raise SpecRejected(str(exc)) from None
        self.spec = new_spec
        self.round += 1
        fresh = [
            i for i, t in enumerate(new_spec.terms) if any((p.pool_id, t.name) not in self.values for p in self.plan.pools)
        ]
        self.phase_log.append((self.round, AGGREGATING))
        self.phase = AGGREGATING
        if not fresh:
            return self._finish_round()
        return self._request_aggregation(fresh)

    def close(self) -> list[Message]:
        return [self._to(POOLED_DATASET_ACK, n, {"round": self.round, "final": True}) for n in self.config.roster]

    # -- handlers --------------------------------------------------------------------

    def _on_register(self, msg: Message) -> list[Message]:
        if msg.payload["node_id"] != msg.sender:
            raise ProtocolError(f"node {msg.sender!r} registered as {msg.payload['node_id']!r}")
        self.registered[msg.sender] = msg.payload.get("address")
        return self._maybe_request_counts()

    def _maybe_request_counts(self) -> list[Message]:
        if self.phase != COUNTING or len(self.registered) < len(self.config.roster):
            return []
        if self._counts_requested:
            return []
        self._counts_requested = True
        return [self._to(COUNT_REQUEST, n, {}) for n in self.config.roster]

    def _on_count(self, msg: Message) -> list[Message]:
        if self.phase != COUNTING:
            return []
        n, m = msg.payload["n_cases"], msg.payload["m_controls"]
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in (n, m)):
            raise ProtocolError(f"bad counts from {msg.sender}: {msg.payload}")
        prior = self.counts.get(msg.sender)
        if prior is not None and prior != (n, m):
            raise ProtocolError(f"node {msg.sender} reported conflicting counts")
        self.counts[msg.sender] = (n, m)
        if len(self.counts) < len(self.config.roster):
            return []
        return self._plan()

    def _plan(self) -> list[Message]:
        cfg = self.config
        self._advance(PLANNING)
        case_tokens, control_tokens = [], []
        for node in cfg.roster:
            n, m = self.counts[node]
            case_tokens += [slot_token(node, CASE, i) for i in range(n)]
            control_tokens += [slot_token(node, CONTROL, i) for i in range(m)]
        try:
            self.meta = StudyMeta(len(case_tokens), len(control_tokens), cfg.prevalence)
            self.plan = build_plan(self.meta, case_tokens, control_tokens, cfg.sizes, cfg.seed, privacy=cfg.privacy)
        except ValidationError as exc:
            raise PlanInfeasible(str(exc)) from None
        try:
            validate_model_spec(self.spec, self.plan.g_min, strict=cfg.strict)
        except StrictModePrivacyViolation as exc:
            raise SpecRejected(str(exc)) from None
        self.node_membership = {sid: parse_slot_token(sid)[0] for p in self.plan.pools for sid in p.member_ids}

        routes = {n: self.registered.get(n) for n in cfg.roster}
        out = []
        for node in cfg.roster:
            mine = []
            for p in self.plan.pools:
                own = tuple(s for s in p.member_ids if self.node_membership[s] == node)
                if own:
                    mine.append(type(p)(p.pool_id, p.stratum, own))
            out.append(
                self._to(
                    PLAN_DISTRIBUTE,
                    node,
                    {
                        "plan_csv": io.format_plan(self.plan, pools=mine),
                        "routes": routes,
                        "mode": cfg.mode,
                        "privacy": cfg.privacy,
                        "g_min": self.plan.g_min,
                    },
                )
            )
        self._advance(AGGREGATING)
        return out + self._request_aggregation(list(range(len(self.spec.terms))))

    def _request_aggregation(self, indices: list[int]) -> list[Message]:
        cfg = self.config
        ledger = plan_chains(self.plan, self.spec, self.node_membership, cfg.seed, indices, cfg.mode)
        self.ledger = ledger
        self.totals = {}
        self.pending = set(ledger.chain_orders)
        self._round_indices = indices
        per_node: dict[str, list[dict]] = {n: [] for n in cfg.roster}
        for (pool_id, ti), order in ledger.chain_orders.items():
            masked = chain_is_masked(order, cfg.mode)
            for pos, node in enumerate(order):
                per_node[node].append(
                    {
                        "pool_id": pool_id,
                        "term_index": ti,
                        "receives": pos > 0,
                        "next": order[pos + 1] if pos + 1 < len(order) else COORDINATOR,
                        "masked": masked,
                    }
                )
        model = self.spec.to_dict()
        return [
            self._to(
                AGGREGATE_REQUEST,
                node,
                {"round": self.round, "model": model, "term_indices": indices, "chains": per_node[node]},
            )
            for node in cfg.roster
        ]

    def _check_key(self, pool_id, ti) -> tuple[str, int]:
        key = (pool_id, ti)
        if key not in self.ledger.chain_orders:
            raise ProtocolError(f"aggregate for unknown (pool, term) {key}")
        return key

    def _on_total(self, msg: Message) -> list[Message]:
        if self.phase != AGGREGATING:
            return []
        key = self._check_key(msg.payload["pool_id"], msg.payload["term_index"])
        if self.ledger.chain_orders[key][-1] != msg.sender:
            raise ProtocolError(f"{msg.sender} is not the last node on the chain for {key}")
        value = decode_value(msg.payload["value"], self.config.mode)
        prior = self.totals.get(key)
        if prior is not None and prior != value:
            raise ProtocolError(f"conflicting totals for {key}")
        self.totals[key] = value
        return self._progress(key)

    def _on_reveal(self, msg: Message) -> list[Message]:
        if self.phase != AGGREGATING or msg.payload["round"] != self.round:
            return []
        touched = []
        for entry in msg.payload["masks"]:
            key = self._check_key(entry["pool_id"], entry["term_index"])
            try:
                self.ledger.record(key[0], key[1], msg.sender, decode_value(entry["value"], self.config.mode))
            except ValidationError as exc:
                raise ProtocolError(str(exc)) from None
            touched.append(key)
        out = []
        for key in touched:
            out += self._progress(key)
        return out

    def _on_error(self, msg: Message) -> list[Message]:
        code, detail = msg.payload["code"], msg.payload["detail"]
        exc_type = SpecRejected if code == "SpecRejected" else ProtocolError
        return self.fail(exc_type(f"node {msg.sender}: {code}: {detail}"))

    def _progress(self, key) -> list[Message]:
        if key in self.pending and key in self.totals and self.ledger.is_complete(*key):
            self.pending.discard(key)
            pool_id, ti = key
            value = self.ledger.unmask(pool_id, ti, self.totals[key])
            if self.config.mode == EXACT:
                value = from_fixed(value)
            self.values[(pool_id, self.spec.terms[ti].name)] = float(value)
        if self.pending or self.phase != AGGREGATING:
            return []
        return self._finish_round()

    def _finish_round(self) -> list[Message]:
        self._advance(FITTING)
        offsets = offsets_for_plan(self.plan)
        self.pooled = [
            PooledRow(
                p.pool_id,
                int(p.is_case),
                p.size_g,
                tuple(self.values[(p.pool_id, t.name)] for t in self.spec.terms),
                offsets[p.size_g],
            )
            for p in self.plan.pools
        ]
        try:
            self.fit = glm.fit(glm.pooled_design(self.pooled, self.spec), **self.config.fit_options)
        except ValidationError as exc:
            return self.fail(ProtocolError(f"fit failed: {exc}"))
        except NumericalError as exc:
            return self.fail(ProtocolError(f"fit failed: {type(exc).__name__}: {exc}"))
        self.fits.append(self.fit)
        self._advance(DONE)
        return [self._to(POOLED_DATASET_ACK, n, {"round": self.round, "final": False}) for n in self.config.roster]

    # -- outputs ----------------------------------------------------------------------

    def header(self) -> str:
        return io.header_line(self.config.seed, self.config.analysis_config(self.spec))

    def pooled_csv(self) -> str:
        return io.format_pooled(self.pooled, self.spec.names, header=self.header())

    def plan_csv(self) -> str:
        return io.format_plan(self.plan, header=self.header())
