"""Chained masked summation.

Each node on a chain adds its local pool sum plus a private random mask to
the running value and forwards it; the last node sends the masked total to
the coordinator, and every node separately reveals its masks to the
coordinator, which subtracts them. No node sees another node's unmasked
partial sum, and the coordinator only ever learns pool totals.

Two arithmetic modes:

``exact`` (default)
    Values are fixed-point integers (scale 1e9) added modulo 2**64; masks are
    uniform on [1, 2**64). Reconstruction is bit-exact and independent of
    chain order.
``real``
    Values are floats, masks uniform on [-2**20, 2**20]. Adding masks of
    that magnitude costs about six significant digits, so reconstruction is
    accurate to roughly 1e-9 relative for sums of order one and larger.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import IncompleteMasks, UnassignedSubject, ValidationError

EXACT = "exact"
REAL = "real"
MODES = (EXACT, REAL)

FIXED_SCALE = 10**9
MODULUS = 2**64
_HALF = 2**63
MASK_RANGE = float(2**20)


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValidationError(f"unknown arithmetic mode {mode!r}; expected one of {MODES}")
    return mode


def to_fixed(value: float) -> int:
    """Round ``value`` to the fixed-point grid (round half to even)."""
    q = round(value * FIXED_SCALE)
    if abs(q) >= _HALF:
        raise OverflowError(f"{value!r} does not fit the fixed-point range")
    return q


def to_fixed_array(values: np.ndarray) -> np.ndarray:
    scaled = np.rint(np.asarray(values, dtype=float) * FIXED_SCALE)
    if np.any(np.abs(scaled) >= 2.0**62):
        raise OverflowError("values do not fit the fixed-point range")
    return scaled.astype(np.int64)


def from_fixed(q: int) -> float:
    return int(q) / FIXED_SCALE


def wrap(q: int) -> int:
    return q % MODULUS


def signed(q: int) -> int:
    """Interpret a residue mod 2**64 as a two's-complement integer."""
    q %= MODULUS
    return q - MODULUS if q >= _HALF else q


def draw_mask(gen: np.random.Generator, mode: str = EXACT) -> int | float:
    if mode == EXACT:
        return int(gen.integers(1, MODULUS, dtype=np.uint64))
    while True:
        m = float(gen.uniform(-MASK_RANGE, MASK_RANGE))
        if m != 0.0:
            return m


def masked_contribute(partial_in, node_local_sum, mask, mode: str = REAL):
    """One hop of the chain: ``partial_in + node_local_sum + mask``."""
    if mode == EXACT:
        return wrap(int(partial_in) + int(node_local_sum) + int(mask))
    return partial_in + node_local_sum + mask


def unmask(masked_total, masks: Iterable, mode: str = REAL, expected: int | None = None):
    """Remove the masks from a chain total, recovering the true sum.

    In exact mode the result is the signed fixed-point integer sum.
    """
    masks = list(masks)
    if expected is not None and len(masks) != expected:
        raise IncompleteMasks(f"expected {expected} masks, got {len(masks)}")
    if any(m is None for m in masks):
        raise IncompleteMasks("mask list contains gaps")
    if mode == EXACT:
        return signed(int(masked_total) - sum(int(m) for m in masks))
    return masked_total - math.fsum(masks)


def run_chain(local_sums: Sequence, masks: Sequence, mode: str = REAL) -> tuple[object, list]:
    """Evaluate a whole chain in order; returns (masked total, outbound values).

    The outbound list holds the value each node forwards, the last one being
    the masked total delivered to the coordinator.
    """
    if len(local_sums) != len(masks):
        raise ValidationError("need one mask per chain position")
    partial = 0
    outbound = []
    for local, mask in zip(local_sums, masks):
        partial = masked_contribute(partial, local, mask, mode)
        outbound.append(partial)
    return partial, outbound


def chain_is_masked(order: Sequence[str], mode: str) -> bool:
    """Single-node chains skip masking in exact mode."""
    return len(order) >= 2 or mode == REAL


@dataclass
class MaskLedger:
    """Chain orders per (pool, term) and the masks revealed for them."""

    chain_orders: dict[tuple[str, int], tuple[str, ...]] = field(default_factory=dict)
    entries: dict[tuple[str, int, str], int | float] = field(default_factory=dict)
    mode: str = EXACT

    def record(self, pool_id: str, term_index: int, node_id: str, mask) -> None:
        key = (pool_id, term_index)
        if key not in self.chain_orders or node_id not in self.chain_orders[key]:
            raise ValidationError(f"node {node_id!r} is not on the chain for {key}")
        prior = self.entries.get((pool_id, term_index, node_id))
        if prior is not None and prior != mask:
            raise ValidationError(f"conflicting masks from {node_id!r} for {key}")
        self.entries[(pool_id, term_index, node_id)] = mask

    def masks_for(self, pool_id: str, term_index: int) -> list:
        order = self.chain_orders[(pool_id, term_index)]
        if not chain_is_masked(order, self.mode):
            return []
        missing = [n for n in order if (pool_id, term_index, n) not in self.entries]
        if missing:
            raise IncompleteMasks(f"pool {pool_id} term {term_index}: no mask from {', '.join(missing)}")
        return [self.entries[(pool_id, term_index, n)] for n in order]

    def is_complete(self, pool_id: str, term_index: int) -> bool:
        try:
            self.masks_for(pool_id, term_index)
        except IncompleteMasks:
            return False
        return True

    def unmask(self, pool_id: str, term_index: int, masked_total):
        return unmask(masked_total, self.masks_for(pool_id, term_index), self.mode)


def plan_chains(
    plan,
    spec,
    node_membership: Mapping[str, str],
    seed: int,
    term_indices: Iterable[int] | None = None,
    mode: str = EXACT,
) -> MaskLedger:
    """Draw an independent random node order for every (pool, term).

    Orders for a given pool and term name come from their own sub-stream, so
    adding terms later (or dropping some) leaves the other orders unchanged.
    """
    check_mode(mode)
    indices = range(len(spec.terms)) if term_indices is None else list(term_indices)
    ledger = MaskLedger(mode=mode)
    for pool in plan.pools:
        try:
            nodes = sorted({node_membership[sid] for sid in pool.member_ids})
        except KeyError as exc:
            raise UnassignedSubject(f"subject {exc.args[0]!r} in pool {pool.pool_id} has no node") from None
        for ti in indices:
            if len(nodes) == 1:
                order = tuple(nodes)
            else:
                gen = rngmod.stream(seed, rngmod.CHAIN_ORDER, pool.pool_id, spec.terms[ti].name)
                order = tuple(nodes[i] for i in gen.permutation(len(nodes)))
            ledger.chain_orders[(pool.pool_id, ti)] = order
    return ledger
