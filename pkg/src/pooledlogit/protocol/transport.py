"""Transports that move messages between the state machines.

``InProcessNetwork`` is a deterministic simulated network for tests: a single
queue, FIFO or seeded-random delivery order, and optional drop / duplicate /
delay faults. When the network goes quiet and the coordinator is still
waiting, its timeout fires.

``SocketEndpoint`` runs one party over TCP with newline-delimited JSON. Nodes
listen on their own port; the coordinator learns their addresses from
``Register`` and hands the routing table out with the plan.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from collections import deque
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ProtocolError
from ..model import MicroRecord
from .coordinator import DONE, Coordinator, CoordinatorConfig
from .messages import COORDINATOR, Message
from .node import Node

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class Transcript:
    """Every message put on the wire, in send order; optionally mirrored to an append-only JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.messages: list[Message] = []
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    def record(self, msg: Message) -> None:
        with self._lock:
            self.messages.append(msg)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(msg.to_line() + "\n")

    def __iter__(self):
        return iter(self.messages)

    def __len__(self) -> int:
        return len(self.messages)

    @staticmethod
    def load(path: str | Path) -> list[Message]:
        return [Message.from_line(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# -- simulated network ---------------------------------------------------------


@dataclass
class Faults:
    """Random fault rates plus an optional deterministic drop rule."""

    drop: float = 0.0
    duplicate: float = 0.0
    delay: float = 0.0
    drop_if: Callable[[Message], bool] | None = None


class InProcessNetwork:
    def __init__(
        self,
        parties: Mapping[str, object],
        schedule: str = "fifo",
        seed: int = 0,
        faults: Faults | None = None,
        transcript: Transcript | None = None,
    ):
        if schedule not in ("fifo", "random"):
            raise ValueError(f"schedule must be 'fifo' or 'random', got {schedule!r}")
        self.parties = dict(parties)
        self.schedule = schedule
        self.faults = faults or Faults()
        self.transcript = transcript if transcript is not None else Transcript()
        self._rng = np.random.default_rng(seed)
        self._queue: deque[Message] = deque()
        self.steps = 0
        self.timeouts = 0

    def send(self, messages: Iterable[Message]) -> None:
        f = self.faults
        for msg in messages:
            self.transcript.record(msg)
            if f.drop_if is not None and f.drop_if(msg):
                continue
            if f.drop and self._rng.random() < f.drop:
                continue
            self._queue.append(msg)
            if f.duplicate and self._rng.random() < f.duplicate:
                self._queue.append(msg)

    def _next(self) -> Message:
        if self.schedule == "random":
            i = int(self._rng.integers(len(self._queue)))
            self._queue.rotate(-i)
            msg = self._queue.popleft()
            self._queue.rotate(i)
            return msg
        return self._queue.popleft()

    def step(self) -> bool:
        if not self._queue:
            return False
        msg = self._next()
        if self.faults.delay and self._rng.random() < self.faults.delay and self._queue:
            self._queue.append(msg)  # goes to the back of the line
            return True
        target = self.parties.get(msg.recipient)
        if target is None:
            log.warning("dropping message for unknown recipient %r", msg.recipient)
            return True
        self.steps += 1
        self.send(target.handle(msg))
        return True

    def run(self, max_steps: int = 10_000_000, timeout_when_idle: bool = True) -> None:
        """Deliver until quiescent; an idle non-terminal coordinator then times out."""
        while self.steps < max_steps:
            if self.step():
                continue
            coord = self.parties.get(COORDINATOR)
            if not timeout_when_idle or coord is None or coord.terminal:
                return
            self.timeouts += 1
            self.send(coord.on_timeout())
        raise ProtocolError(f"network did not settle within {max_steps} deliveries")


@dataclass
class Session:
    coordinator: Coordinator
    nodes: dict[str, Node]
    network: InProcessNetwork

    def resend(self, spec) -> None:
        self.network.send(self.coordinator.resend(spec))
        self.network.run()

    def close(self) -> None:
        self.network.send(self.coordinator.close())
        self.network.run(timeout_when_idle=False)


def run_session(
    config: CoordinatorConfig,
    node_records: Mapping[str, Sequence[MicroRecord]],
    mask_seed: int = 0,
    schedule: str = "fifo",
    network_seed: int = 0,
    faults: Faults | None = None,
    transcript: Transcript | None = None,
    strict_nodes: bool = False,
) -> Session:
    """Run a whole session in process and return the parties for inspection."""
    coord = Coordinator(config)
    nodes = {
        nid: Node(nid, node_records.get(nid, ()), config.session_id, mask_seed, strict=strict_nodes)
        for nid in config.roster
    }
    net = InProcessNetwork({COORDINATOR: coord, **nodes}, schedule, network_seed, faults, transcript)
    for node in nodes.values():
        net.send(node.start())
    net.run()
    return Session(coord, nodes, net)


# -- sockets ---------------------------------------------------------------------------


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ProtocolError(f"address must be host:port, got {text!r}")
    return host, int(port)


class SocketEndpoint:
    """One party's listener plus outgoing connections.

    The transcript, if given, records both what this party sends and what it
    receives.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, transcript: Transcript | None = None):
        self.inbox: queue.Queue[Message | Exception] = queue.Queue()
        self.transcript = transcript
        self._server = socket.create_server((host, port))
        self.address = f"{host}:{self._server.getsockname()[1]}"
        self._out: dict[str, socket.socket] = {}
        self._closed = threading.Event()
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(target=self._read, args=(conn,), daemon=True).start()

    def _read(self, conn: socket.socket) -> None:
        with conn, conn.makefile("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    self.inbox.put(Message.from_line(line))
                except ProtocolError as exc:
                    self.inbox.put(exc)

    def send(self, msg: Message, address: str) -> None:
        if self.transcript is not None:
            self.transcript.record(msg)
        data = (msg.to_line() + "\n").encode("utf-8")
        sock = self._out.get(address)
        if sock is None:
            sock = socket.create_connection(parse_address(address), timeout=DEFAULT_TIMEOUT)
            self._out[address] = sock
        sock.sendall(data)

    def receive(self, timeout: float | None) -> Message | None:
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if isinstance(item, Exception):
            raise item
        if self.transcript is not None:
            self.transcript.record(item)
        return item

    def close(self) -> None:
        self._closed.set()
        self._server.close()
        for sock in self._out.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def _pump(party, endpoint: SocketEndpoint, route: Callable[[str], str], messages, timeout: float | None, done) -> None:
    pending = list(messages)
    while True:
        for msg in pending:
            try:
                endpoint.send(msg, route(msg.recipient))
            except (OSError, KeyError) as exc:
                log.warning("could not deliver %s to %s: %s", msg.kind, msg.recipient, exc)
        if done():
            return
        msg = endpoint.receive(timeout)
        pending = party.on_timeout() if msg is None else party.handle(msg)
        if msg is None and not pending and not done():
            raise ProtocolError(f"{type(party).__name__} timed out with nothing to do")


def run_coordinator(
    config: CoordinatorConfig,
    endpoint: SocketEndpoint,
    timeout: float | None = DEFAULT_TIMEOUT,
) -> Coordinator:
    """Serve one session; returns the coordinator in Done or Failed."""
    coord = Coordinator(config)

    def route(node_id: str) -> str:
        address = coord.registered.get(node_id)
        if not address:
            raise KeyError(node_id)
        return address

    _pump(coord, endpoint, route, [], timeout, lambda: coord.terminal)
    if coord.phase == DONE:
        for msg in coord.close():
            endpoint.send(msg, route(msg.recipient))
    return coord


def run_node(
    node: Node,
    endpoint: SocketEndpoint,
    coordinator_address: str,
    timeout: float | None = DEFAULT_TIMEOUT,
) -> Node:
    """Take part in one session; returns the node in Done or Failed."""
    node.address = endpoint.address

    def route(party: str) -> str:
        if party == COORDINATOR:
            return coordinator_address
        address = node.routes.get(party)
        if not address:
            raise KeyError(party)
        return address

    _pump(node, endpoint, route, node.start(), timeout, lambda: node.terminal)
    return node

