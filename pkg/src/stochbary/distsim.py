"""Coordinator/agent simulation of the iteration over a message transport.

The coordinator owns the pushforward chain, does all rejection sampling and
computes the metrics. Agent ``k`` owns the input measure ``nu_k``: it draws
target samples, fits the entropic estimators and evaluates them on request.

Each iteration proceeds as follows:

1. the coordinator sends ``SourceSamples`` (the ``N_t`` source points plus
   the fitting parameters) to every agent;
2. each agent draws its targets from the mirrored serial RNG stream, fits
   the estimator and answers ``EstimatorAck``;
3. after all ``K`` acks, every pushforward through a layer is done by sending
   ``EvalRequest`` to all agents and combining the ``EvalReply`` images with
   the layer weights.

Agents keep every estimator they fitted, because fresh base samples must be
pushed through all earlier layers. With matching seeds, the trajectories are
bit-identical to :func:`stochbary.fixed_point.run`.

Wire format: one JSON object per line. The float payload is either base64 of
little-endian IEEE-754 doubles (``raw``) or comma-separated 17-significant-digit
decimals (``decimal``). A sha256 checksum covers the header and the payload
bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .entropic_map import EntropicMap, build_entropic_map, support_radius
from .fixed_point import (
    BarycenterProblem,
    EvalConfig,
    IterationError,
    IterationState,
    MetricRecord,
    Schedule,
    run,
    weighted_sum,
)
from .measures import Measure
from .rng import Purpose, Stream, as_stream

KINDS = ("SourceSamples", "EvalRequest", "EvalReply", "EstimatorAck", "Shutdown")
MODES = ("raw", "decimal")
DEFAULT_TIMEOUT = 300.0


class ProtocolError(RuntimeError):
    """Malformed or unexpected message."""


class ChecksumError(ProtocolError):
    pass


class ChannelClosed(ConnectionError):
    pass


class AgentError(RuntimeError):
    """An agent failed, timed out or broke the protocol during iteration ``t``."""

    def __init__(self, t: int, k: int, reason: str):
        super().__init__(f"agent {k} failed at t={t}: {reason}")
        self.t = t
        self.k = k
        self.reason = reason


@dataclass
class Message:
    kind: str
    t: int
    k: int
    payload: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        if self.payload is not None:
            self.payload = np.ascontiguousarray(self.payload, dtype="<f8")
            if self.payload.ndim != 2:
                raise ProtocolError("payload must be a point matrix")
        if self.kind in ("SourceSamples", "EvalRequest", "EvalReply") and self.payload is None and "error" not in self.meta:
            raise ProtocolError(f"{self.kind} needs a point payload")


def _checksum(header: dict, data: bytes) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    h.update(data)
    return h.hexdigest()


def encode(msg: Message, mode: str = "raw") -> str:
    """One JSON line (without the trailing newline)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    header = {"kind": msg.kind, "t": int(msg.t), "k": int(msg.k), "meta": msg.meta}
    if msg.payload is None:
        header["shape"] = None
        raw = b""
        data = None
    else:
        header["shape"] = list(msg.payload.shape)
        raw = msg.payload.tobytes()
        if mode == "raw":
            data = base64.b64encode(raw).decode("ascii")
        else:
            data = ",".join(format(float(v), ".17g") for v in msg.payload.ravel())
    return json.dumps({**header, "mode": mode, "data": data, "checksum": _checksum(header, raw)})


def decode(line: str | bytes) -> Message:
    try:
        obj = json.loads(line)
        header = {key: obj[key] for key in ("kind", "t", "k", "meta", "shape")}
        mode, data = obj["mode"], obj["data"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed message: {exc}") from exc
    payload = None
    raw = b""
    if header["shape"] is not None:
        shape = tuple(int(s) for s in header["shape"])
        if mode == "raw":
            raw = base64.b64decode(data)
            payload = np.frombuffer(raw, dtype="<f8")
        elif mode == "decimal":
            payload = np.array([float(v) for v in data.split(",")] if data else [], dtype="<f8")
            raw = payload.tobytes()
        else:
            raise ProtocolError(f"unknown float mode {mode!r}")
        if payload.size != int(np.prod(shape)):
            raise ProtocolError(f"payload has {payload.size} values, header says {shape}")
        payload = payload.reshape(shape)
    if _checksum(header, raw) != obj.get("checksum"):
        raise ChecksumError(f"checksum mismatch on {header['kind']} (t={header['t']}, k={header['k']})")
    return Message(header["kind"], int(header["t"]), int(header["k"]), payload, header["meta"])


# -- transports -------------------------------------------------------------------


class Transport(Protocol):
    mode: str

    def send(self, msg: Message) -> None: ...

    def recv(self, timeout: float | None = None) -> Message: ...

    def close(self) -> None: ...


_CLOSED = object()


class QueueTransport:
    """One end of an in-process channel; messages still pass through the wire codec."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, mode: str = "raw"):
        self.inbox = inbox
        self.outbox = outbox
        self.mode = mode
        self.closed = False

    def send(self, msg: Message) -> None:
        if self.closed:
            raise ChannelClosed("transport is closed")
        self.outbox.put(encode(msg, self.mode))

    def recv(self, timeout: float | None = None) -> Message:
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message within {timeout} s") from None
        if item is _CLOSED:
            raise ChannelClosed("peer closed the channel")
        return decode(item)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.outbox.put(_CLOSED)


def inprocess_pair(mode: str = "raw") -> tuple[QueueTransport, QueueTransport]:
    """``(coordinator end, agent end)`` of a fresh in-process channel."""
    a, b = queue.Queue(), queue.Queue()
    return QueueTransport(a, b, mode), QueueTransport(b, a, mode)


class SocketTransport:
    """Newline-delimited JSON over a connected TCP socket."""

    def __init__(self, sock: socket.socket, mode: str = "raw"):
        self.sock = sock
        self.mode = mode
        self.reader = sock.makefile("rb")
        self.lock = threading.Lock()

    def send(self, msg: Message) -> None:
        line = (encode(msg, self.mode) + "\n").encode("ascii")
        with self.lock:
            try:
                self.sock.sendall(line)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def recv(self, timeout: float | None = None) -> Message:
        self.sock.settimeout(timeout)
        try:
            line = self.reader.readline()
        except socket.timeout:
            raise TimeoutError(f"no message within {timeout} s") from None
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc
        if not line:
            raise ChannelClosed("peer closed the connection")
        return decode(line)

    def close(self) -> None:
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass


def connect(address: str, mode: str = "raw", timeout: float = 30.0) -> SocketTransport:
    host, port = parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketTransport(sock, mode)


def listen(address: str) -> socket.socket:
    host, port = parse_address(address)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def accept(server: socket.socket, mode: str = "raw", timeout: float | None = None) -> SocketTransport:
    server.settimeout(timeout)
    conn, _ = server.accept()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketTransport(conn, mode)


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


# -- agent ------------------------------------------------------------------------


class Agent:
    """State and message handling of agent ``k``."""

    def __init__(self, k: int, measure: Measure, stream: Stream | int, radius: float | None = None):
        self.k = int(k)
        self.measure = measure
        self.stream = as_stream(stream)
        self.radius = radius
        self.estimators: dict[int, EntropicMap] = {}
        self.last_t = -1

    def fit(self, msg: Message) -> EntropicMap:
        X = msg.payload
        cfg = msg.meta
        n = X.shape[0]
        Y = self.measure.sample_points(n, self.stream.child(Purpose.TARGET, msg.t, self.k).generator())
        return build_entropic_map(
            X,
            Y,
            float(cfg["theta"]),
            r0_mu=float(cfg["r0_mu"]),
            r0_nu=support_radius(Y) if self.radius is None else self.radius,
            tol=float(cfg["tol"]),
            max_iter=int(cfg["max_iter"]),
        )

    def handle(self, msg: Message) -> Message | None:
        """Reply to one message; ``None`` for ``Shutdown``."""
        if msg.kind == "Shutdown":
            return None
        if msg.k != self.k:
            return _error_reply(msg, self.k, f"message addressed to agent {msg.k}")
        if msg.kind == "SourceSamples":
            if msg.t < self.last_t:
                return Message("EstimatorAck", msg.t, self.k, meta={"error": f"t={msg.t} after t={self.last_t}"})
            try:
                emap = self.fit(msg)
            except Exception as exc:
                return Message("EstimatorAck", msg.t, self.k, meta={"error": f"{type(exc).__name__}: {exc}"})
            self.last_t = msg.t
            self.estimators[msg.t + 1] = emap
            info = {
                "lambda_lb": emap.lambda_lb,
                "log_lambda_lb": emap.log_lambda_lb,
                "degenerate": emap.degenerate,
                **emap.solver,
            }
            meta = {"info": info}
            if msg.meta.get("export"):
                meta["estimator"] = emap.to_dict()
            return Message("EstimatorAck", msg.t, self.k, meta=meta)
        if msg.kind == "EvalRequest":
            layer = int(msg.meta.get("layer", msg.t))
            emap = self.estimators.get(layer)
            if emap is None:
                return _error_reply(msg, self.k, f"no estimator for layer {layer}")
            x = msg.payload
            out = np.empty((0, x.shape[1])) if x.shape[0] == 0 else emap(x).reshape(x.shape)
            return Message("EvalReply", msg.t, self.k, out, {"layer": layer})
        return _error_reply(msg, self.k, f"agents do not accept {msg.kind}")


def _error_reply(msg: Message, k: int, text: str) -> Message:
    kind = "EstimatorAck" if msg.kind == "SourceSamples" else "EvalReply"
    return Message(kind, msg.t, k, None, {"error": text})


def agent_serve(
    k: int,
    measure: Measure,
    transport: Transport,
    stream: Stream | int,
    radius: float | None = None,
    idle_timeout: float | None = None,
) -> int:
    """Serve messages until ``Shutdown``; returns the exit code (0 on clean shutdown)."""
    agent = Agent(k, measure, stream, radius)
    try:
        while True:
            try:
                msg = transport.recv(idle_timeout)
            except ChecksumError as exc:
                transport.send(Message("EvalReply", -1, k, None, {"error": str(exc)}))
                continue
            reply = agent.handle(msg)
            if reply is None:
                return 0
            transport.send(reply)
    except (ChannelClosed, TimeoutError):
        return 4
    finally:
        transport.close()


# -- coordinator ------------------------------------------------------------------


class CoordinatorBackend:
    """Drop-in replacement for the local layer builder that delegates to agents."""

    def __init__(
        self,
        problem: BarycenterProblem,
        schedule: Schedule,
        transports: Sequence[Transport],
        timeout: float = DEFAULT_TIMEOUT,
        export_estimators: bool = True,
    ):
        if len(transports) != problem.K:
            raise ValueError(f"need {problem.K} transports, got {len(transports)}")
        self.problem = problem
        self.schedule = schedule
        self.transports = list(transports)
        self.timeout = timeout
        self.export = export_estimators
        self.current_t = 0

    def _gather(self, t: int, kind: str) -> list[Message]:
        replies = []
        for k, tr in enumerate(self.transports):
            try:
                msg = tr.recv(self.timeout)
            except TimeoutError:
                raise AgentError(t, k, f"timeout after {self.timeout} s") from None
            except ChannelClosed as exc:
                raise AgentError(t, k, f"connection lost ({exc})") from None
            except ProtocolError as exc:
                raise AgentError(t, k, str(exc)) from None
            if msg.kind != kind or msg.k != k:
                raise AgentError(t, k, f"expected {kind} from agent {k}, got {msg.kind} from {msg.k}")
            if "error" in msg.meta:
                raise AgentError(t, k, msg.meta["error"])
            replies.append(msg)
        return replies

    def _send_all(self, t: int, make: Callable[[int], Message]) -> None:
        for k, tr in enumerate(self.transports):
            try:
                tr.send(make(k))
            except ChannelClosed as exc:
                raise AgentError(t, k, f"connection lost ({exc})") from None

    def build_layer(self, t: int, sources: list[np.ndarray], theta: float, radius: float) -> "RemoteLayer":
        self.current_t = t
        cfg = {
            "theta": float(theta),
            "r0_mu": float(radius),
            "tol": float(self.schedule.sinkhorn_tol),
            "max_iter": int(self.schedule.sinkhorn_max_iter),
            "export": self.export,
        }
        self._send_all(t, lambda k: Message("SourceSamples", t, k, sources[k], cfg))
        try:
            acks = self._gather(t, "EstimatorAck")
        except AgentError as exc:
            raise IterationError(exc.t, exc.k, exc) from exc
        return RemoteLayer(t + 1, self.problem.weights, self, [a.meta["info"] for a in acks],
                           [a.meta.get("estimator") for a in acks])

    def images(self, layer: int, x: np.ndarray) -> list[np.ndarray]:
        t = self.current_t
        self._send_all(t, lambda k: Message("EvalRequest", t, k, x, {"layer": layer}))
        replies = self._gather(t, "EvalReply")
        for k, r in enumerate(replies):
            if r.payload is None or r.payload.shape != x.shape:
                raise AgentError(t, k, f"reply shape {None if r.payload is None else r.payload.shape} != {x.shape}")
        return [r.payload for r in replies]

    def shutdown(self) -> None:
        for tr in self.transports:
            try:
                tr.send(Message("Shutdown", self.current_t, 0))
            except ChannelClosed:
                pass
            tr.close()


class RemoteLayer:
    """Layer ``t`` evaluated by the agents: ``x -> sum_k w_k reply_k(x)``."""

    def __init__(self, t: int, weights, backend: CoordinatorBackend, infos: list, estimators: list):
        self.t = int(t)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.backend = backend
        self._info = infos
        self._estimators = estimators

    def images(self, x: np.ndarray) -> list[np.ndarray]:
        return self.backend.images(self.t, np.asarray(x, dtype=np.float64))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return weighted_sum(self.weights, self.images(x))

    def info(self) -> list[dict]:
        return list(self._info)

    def to_dict(self) -> dict:
        if any(e is None for e in self._estimators):
            raise RuntimeError("estimators were not exported by the agents")
        return {"t": self.t, "weights": self.weights.tolist(), "maps": list(self._estimators)}


def coordinator_run(
    problem: BarycenterProblem,
    schedule: Schedule,
    T_iters: int,
    transports: Sequence[Transport],
    stream: Stream | int,
    eval_cfg: EvalConfig = EvalConfig(),
    timeout: float = DEFAULT_TIMEOUT,
    base: Measure | None = None,
    progress: Callable[[MetricRecord], None] | None = None,
    shutdown: bool = True,
) -> IterationState:
    """The serial engine with every layer fitted and evaluated by the agents."""
    backend = CoordinatorBackend(problem, schedule, transports, timeout)
    try:
        return run(problem, schedule, T_iters, eval_cfg, stream, base, backend=backend, progress=progress)
    finally:
        if shutdown:
            backend.shutdown()


def run_inprocess(
    problem: BarycenterProblem,
    schedule: Schedule,
    T_iters: int,
    stream: Stream | int,
    eval_cfg: EvalConfig = EvalConfig(),
    mode: str = "raw",
    timeout: float = DEFAULT_TIMEOUT,
    base: Measure | None = None,
    progress: Callable[[MetricRecord], None] | None = None,
) -> IterationState:
    """Start ``K`` agent threads on in-process channels and run the coordinator."""
    stream = as_stream(stream)
    pairs = [inprocess_pair(mode) for _ in range(problem.K)]
    threads = [
        threading.Thread(
            target=agent_serve,
            args=(k, problem.inputs[k], pairs[k][1], stream, problem.radii[k]),
            daemon=True,
            name=f"agent-{k}",
        )
        for k in range(problem.K)
    ]
    for th in threads:
        th.start()
    try:
        return coordinator_run(problem, schedule, T_iters, [p[0] for p in pairs], stream, eval_cfg, timeout, base,
                               progress)
    finally:
        for th in threads:
            th.join(timeout=10)


def run_loopback_tcp(
    problem: BarycenterProblem,
    schedule: Schedule,
    T_iters: int,
    stream: Stream | int,
    eval_cfg: EvalConfig = EvalConfig(),
    mode: str = "raw",
    timeout: float = DEFAULT_TIMEOUT,
    base: Measure | None = None,
    progress: Callable[[MetricRecord], None] | None = None,
) -> IterationState:
    """Like :func:`run_inprocess` but each agent listens on a loopback TCP port."""
    stream = as_stream(stream)
    servers = [listen("127.0.0.1:0") for _ in range(problem.K)]

    def serve(k):
        tr = accept(servers[k], mode, timeout)
        servers[k].close()
        agent_serve(k, problem.inputs[k], tr, stream, problem.radii[k])

    threads = [threading.Thread(target=serve, args=(k,), daemon=True, name=f"agent-{k}") for k in range(problem.K)]
    for th in threads:
        th.start()
    transports = [connect(f"127.0.0.1:{s.getsockname()[1]}", mode) for s in servers]
    try:
        return coordinator_run(problem, schedule, T_iters, transports, stream, eval_cfg, timeout, base, progress)
    finally:
        for th in threads:
            th.join(timeout=10)
