"""Framed request/response protocol between clients and directory servers.

Transport is a reliable byte stream (TCP).  Each message travels in one
frame: a 4-byte big-endian length followed by that many bytes of UTF-8
text.  The text starts with ``MDSLITE/1 <TYPE>``, then ``key: value``
header lines, a blank line, and an optional body (LDIF for results).

The query lifecycle is connect -> BIND -> SEARCH -> RESULT -> disconnect,
one query per connection by default so every observed response time
includes connection setup.  ``client_query`` instruments the three client
phases; the per-request handler passed to ``serve`` is responsible for
emitting the four server phases.
"""

from __future__ import annotations

import errno
import socket
import struct
import threading
from dataclasses import dataclass, field

from . import telemetry
from .directory import (
    Entry,
    EntryName,
    SearchRequest,
    format_filter,
    parse_filter,
    parse_ldif,
    parse_name,
)
from .telemetry import (
    PHASE_CLIENT_BIND,
    PHASE_CLIENT_CONNECT,
    PHASE_CLIENT_ENDCONNECT,
    EventSink,
    LogEvent,
    now_us,
    token,
)

PROTOCOL = "MDSLITE/1"
MAX_FRAME = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 300.0  # seconds; must exceed the worst uncached response times

T_BIND = "BIND"
T_BIND_OK = "BIND-OK"
T_BIND_ERR = "BIND-ERR"
T_SEARCH = "SEARCH"
T_RESULT = "RESULT"
T_REGISTER = "REGISTER"
T_REGISTER_OK = "REGISTER-OK"
T_ERROR = "ERROR"
T_UNBIND = "UNBIND"
KNOWN_TYPES = frozenset(
    (T_BIND, T_BIND_OK, T_BIND_ERR, T_SEARCH, T_RESULT, T_REGISTER, T_REGISTER_OK,
     T_ERROR, T_UNBIND)
)


class Oversize(ValueError):
    """Payload larger than the 16 MiB frame limit."""


class MalformedFrame(ValueError):
    pass


class MalformedMessage(ValueError):
    pass


class ConnectFailed(ConnectionError):
    pass


class BindRejected(PermissionError):
    pass


class ProtocolError(RuntimeError):
    pass


class ServerError(RuntimeError):
    """Server answered with an ERROR message."""

    def __init__(self, code: str, reason: str):
        super().__init__("%s: %s" % (code, reason))
        self.code = code
        self.reason = reason


class QueryTimeout(TimeoutError):
    pass


class AddressInUse(OSError):
    pass


@dataclass(frozen=True)
class Credential:
    identity: str
    secret: str

    def __post_init__(self):
        if not self.identity:
            raise ValueError("credential identity must be non-empty")


DEFAULT_CREDENTIAL = Credential("mdslite", "mdslite-secret")


@dataclass(frozen=True)
class Frame:
    payload: bytes

    @property
    def length(self) -> int:
        return len(self.payload)


@dataclass
class Message:
    type: str
    headers: dict[str, str] = field(default_factory=dict)
    body: str = ""


def encode(message: Message) -> Frame:
    """Message -> Frame; raises on malformed parts or oversize payloads."""
    if not message.type or any(c.isspace() for c in message.type):
        raise MalformedMessage("bad message type %r" % message.type)
    lines = ["%s %s" % (PROTOCOL, message.type)]
    for key, value in message.headers.items():
        if not key or ":" in key or any(c.isspace() for c in key):
            raise MalformedMessage("bad header key %r" % key)
        if "\n" in value:
            raise MalformedMessage("newline in header value for %r" % key)
        lines.append("%s: %s" % (key, value))
    text = "\n".join(lines) + "\n\n" + message.body
    payload = text.encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise Oversize("payload of %d bytes" % len(payload))
    return Frame(payload)


def decode(frame: Frame) -> Message:
    """Frame -> Message (bit-exact inverse of encode).

    Unknown TYPE tokens are preserved so newer peers stay decodable; the
    dispatcher answers them with ERROR.
    """
    if frame.length > MAX_FRAME:
        raise MalformedFrame("frame of %d bytes exceeds limit" % frame.length)
    try:
        text = frame.payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame("payload is not UTF-8: %s" % exc) from exc
    split = text.find("\n\n")
    if split < 0:
        raise MalformedMessage("missing blank line after headers")
    head, body = text[:split], text[split + 2 :]
    lines = head.split("\n")
    prefix = PROTOCOL + " "
    if not lines[0].startswith(prefix) or len(lines[0]) == len(prefix):
        raise MalformedMessage("bad protocol line %r" % lines[0])
    mtype = lines[0][len(prefix) :]
    if any(c.isspace() for c in mtype):
        raise MalformedMessage("bad message type %r" % mtype)
    headers: dict[str, str] = {}
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep or not key or ":" in key or any(c.isspace() for c in key):
            raise MalformedMessage("bad header line %r" % line)
        if key in headers:
            raise MalformedMessage("duplicate header %r" % key)
        headers[key] = value
    return Message(type=mtype, headers=headers, body=body)


# --- stream I/O ----------------------------------------------------------------


def write_frame(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(struct.pack(">I", frame.length) + frame.payload)


def read_frame(sock: socket.socket, on_first_bytes=None) -> Frame | None:
    """Read one frame; None on clean EOF at a frame boundary.

    ``on_first_bytes`` is called with a timestamp (µs) as soon as the
    first bytes of the frame arrive -- the client uses it to pin the
    start of Client-EndConnect to response arrival.
    """
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        if not chunk:
            if header:
                raise MalformedFrame("EOF inside frame header")
            return None
        if not header and on_first_bytes is not None:
            on_first_bytes(now_us())
        header += chunk
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise MalformedFrame("declared length %d exceeds limit" % length)
    parts = []
    remaining = length
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            raise MalformedFrame("EOF inside frame payload")
        parts.append(chunk)
        remaining -= len(chunk)
    return Frame(b"".join(parts))


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        raise ValueError("address must be host:port, got %r" % address)
    return host or "127.0.0.1", int(port)


def search_message(request: SearchRequest) -> Message:
    attrs = (
        "*" if request.attributes == "*" else ",".join(request.attributes)
    )
    return Message(
        T_SEARCH,
        {
            "base": request.base.text,
            "scope": request.scope,
            "filter": format_filter(request.filter),
            "attrs": attrs,
            "qid": request.qid,
        },
    )


def request_from_message(message: Message) -> SearchRequest:
    try:
        base = parse_name(message.headers["base"])
        scope = message.headers["scope"]
        flt = parse_filter(message.headers["filter"])
        attrs_text = message.headers["attrs"]
        qid = message.headers["qid"]
    except KeyError as exc:
        raise MalformedMessage("SEARCH missing header %s" % exc) from exc
    attributes = "*" if attrs_text == "*" else tuple(
        a for a in attrs_text.split(",") if a
    )
    return SearchRequest(base=base, scope=scope, filter=flt, attributes=attributes,
                         qid=qid)


# --- instrumented client ---------------------------------------------------------


@dataclass
class ClientPhases:
    """The three client-side intervals of one query (µs)."""

    connect: tuple[int, int]
    bind: tuple[int, int]
    end_connect: tuple[int, int]

    @property
    def ort_us(self) -> int:
        return self.end_connect[1] - self.connect[0]


def _phase_event(sink, host, prog, qid, phase, edge, ts):
    if sink is not None:
        sink.emit(
            LogEvent(ts=ts, host=host, prog=prog, lvl="INFO",
                     evnt="%s.%s" % (phase, edge), qid=qid)
        )


def client_query(
    endpoint: str,
    credential: Credential,
    request: SearchRequest,
    sink: EventSink | None = None,
    *,
    timeout: float = DEFAULT_TIMEOUT,
    prog: str = "bench",
    host: str | None = None,
) -> tuple[list[Entry], ClientPhases]:
    """One full connect / bind / search / disconnect round trip.

    Client-Connect covers TCP connection setup, Client-Bind the BIND
    round trip, and Client-EndConnect runs from the first response bytes
    to connection close; the wait for the server to process the SEARCH
    is deliberately left between phases so it shows up as the ORT
    residual, not inside a client phase.
    """
    host = host or socket.gethostname()
    qid = request.qid
    addr = parse_address(endpoint)

    t0 = now_us()
    _phase_event(sink, host, prog, qid, PHASE_CLIENT_CONNECT, "start", t0)
    try:
        sock = socket.create_connection(addr, timeout=timeout)
    except (ConnectionError, socket.timeout, OSError) as exc:
        _error_event(sink, host, prog, qid, "connect.failed", exc)
        if isinstance(exc, socket.timeout):
            raise QueryTimeout(endpoint) from exc
        raise ConnectFailed("%s: %s" % (endpoint, exc)) from exc
    t1 = now_us()
    _phase_event(sink, host, prog, qid, PHASE_CLIENT_CONNECT, "end", t1)

    try:
        sock.settimeout(timeout)
        _phase_event(sink, host, prog, qid, PHASE_CLIENT_BIND, "start", t1)
        write_frame(sock, encode(Message(T_BIND, {
            "identity": credential.identity,
            "secret": credential.secret,
        })))
        reply = _read_message(sock)
        if reply.type == T_BIND_ERR:
            _error_event(sink, host, prog, qid, "bind.rejected", reply.headers.get("reason", ""))
            raise BindRejected(reply.headers.get("reason", "bind rejected"))
        if reply.type != T_BIND_OK:
            raise ProtocolError("expected BIND-OK, got %s" % reply.type)
        t2 = now_us()
        _phase_event(sink, host, prog, qid, PHASE_CLIENT_BIND, "end", t2)

        write_frame(sock, encode(search_message(request)))

        arrival: list[int] = []
        frame = read_frame(sock, on_first_bytes=arrival.append)
        if frame is None:
            raise ProtocolError("connection closed before RESULT")
        t3 = arrival[0]
        _phase_event(sink, host, prog, qid, PHASE_CLIENT_ENDCONNECT, "start", t3)
        reply = decode(frame)
        if reply.type == T_ERROR:
            _error_event(sink, host, prog, qid, "server.error",
                         reply.headers.get("code", ""))
            raise ServerError(reply.headers.get("code", "error"),
                              reply.headers.get("reason", ""))
        if reply.type != T_RESULT:
            raise ProtocolError("expected RESULT, got %s" % reply.type)
        if reply.headers.get("qid") != qid:
            raise ProtocolError(
                "response qid %r does not match request qid %r"
                % (reply.headers.get("qid"), qid)
            )
        entries = parse_ldif(reply.body) if reply.body else []
    except socket.timeout as exc:
        _error_event(sink, host, prog, qid, "query.timeout", exc)
        sock.close()
        raise QueryTimeout(endpoint) from exc
    except BaseException:
        sock.close()
        raise
    sock.close()
    t4 = now_us()
    _phase_event(sink, host, prog, qid, PHASE_CLIENT_ENDCONNECT, "end", t4)
    return entries, ClientPhases(connect=(t0, t1), bind=(t1, t2), end_connect=(t3, t4))


def _error_event(sink, host, prog, qid, name, detail):
    if sink is not None:
        sink.emit(
            LogEvent(ts=now_us(), host=host, prog=prog, lvl="ERROR", evnt=name,
                     qid=qid, extra=(("DETAIL", token(detail)),))
        )


def _read_message(sock) -> Message:
    frame = read_frame(sock)
    if frame is None:
        raise ProtocolError("connection closed mid-exchange")
    return decode(frame)


class QueryConnection:
    """Persistent connection: bind once, then many searches.

    Exists behind a flag for what-if runs; replication-mode benchmarks
    reconnect per query so connection setup stays inside every ORT.
    """

    def __init__(self, endpoint: str, credential: Credential,
                 timeout: float = DEFAULT_TIMEOUT):
        addr = parse_address(endpoint)
        try:
            self._sock = socket.create_connection(addr, timeout=timeout)
        except (ConnectionError, socket.timeout, OSError) as exc:
            raise ConnectFailed("%s: %s" % (endpoint, exc)) from exc
        self._sock.settimeout(timeout)
        write_frame(self._sock, encode(Message(T_BIND, {
            "identity": credential.identity,
            "secret": credential.secret,
        })))
        reply = _read_message(self._sock)
        if reply.type == T_BIND_ERR:
            self._sock.close()
            raise BindRejected(reply.headers.get("reason", "bind rejected"))
        if reply.type != T_BIND_OK:
            self._sock.close()
            raise ProtocolError("expected BIND-OK, got %s" % reply.type)

    def search(self, request: SearchRequest) -> list[Entry]:
        write_frame(self._sock, encode(search_message(request)))
        reply = _read_message(self._sock)
        if reply.type == T_ERROR:
            raise ServerError(reply.headers.get("code", "error"),
                              reply.headers.get("reason", ""))
        if reply.type != T_RESULT or reply.headers.get("qid") != request.qid:
            raise ProtocolError("bad response to %s" % request.qid)
        return parse_ldif(reply.body) if reply.body else []

    def close(self) -> None:
        try:
            write_frame(self._sock, encode(Message(T_UNBIND)))
        except OSError:
            pass
        self._sock.close()


# --- server ---------------------------------------------------------------------


class ServerHandle:
    """Running server: address, stop() drains in-flight connections."""

    def __init__(self, sock, address, stop_event, accept_thread, conns, conns_lock):
        self._sock = sock
        self.address = address
        self._stop_event = stop_event
        self._accept_thread = accept_thread
        self._conns = conns
        self._conns_lock = conns_lock

    def stop(self, drain_timeout: float = 10.0) -> None:
        self._stop_event.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=drain_timeout)
        with self._conns_lock:
            threads = [t for _, t in self._conns]
        deadline = telemetry.now_us() + int(drain_timeout * 1e6)
        for thread in threads:
            remaining = max(0.0, (deadline - telemetry.now_us()) / 1e6)
            thread.join(timeout=remaining)
        with self._conns_lock:
            for conn, thread in self._conns:
                if thread.is_alive():
                    try:
                        conn.close()
                    except OSError:
                        pass


def serve(
    listen: str,
    search_handler,
    authenticator,
    sink: EventSink | None = None,
    *,
    register_handler=None,
    prog: str = "gris",
    host: str | None = None,
    conn_timeout: float = DEFAULT_TIMEOUT,
) -> ServerHandle:
    """Accept connections and run the bind/search lifecycle on each.

    ``search_handler(request) -> (count, body)`` must emit the four
    server phase events itself.  ``authenticator(identity, secret)``
    gates BIND.  REGISTER messages go to ``register_handler(message)``
    when provided.  Connections are accepted as fast as the OS allows
    and each one is handled on its own thread, so connect-time growth
    under load emerges from the host, not from deliberate throttling.
    """
    host = host or socket.gethostname()
    addr = parse_address(listen)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind(addr)
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            raise AddressInUse(listen) from exc
        raise
    sock.listen(512)
    actual = "%s:%d" % (addr[0], sock.getsockname()[1])

    stop_event = threading.Event()
    conns: list[tuple[socket.socket, threading.Thread]] = []
    conns_lock = threading.Lock()

    def connection_loop(conn: socket.socket) -> None:
        conn.settimeout(conn_timeout)
        bound = False
        try:
            while not stop_event.is_set():
                try:
                    frame = read_frame(conn)
                except (MalformedFrame, socket.timeout, OSError):
                    break
                if frame is None:
                    break
                try:
                    message = decode(frame)
                except (MalformedFrame, MalformedMessage) as exc:
                    _answer_error(conn, "-", "malformed", exc)
                    break
                if message.type == T_BIND:
                    identity = message.headers.get("identity", "")
                    secret = message.headers.get("secret", "")
                    if identity and authenticator(identity, secret):
                        bound = True
                        write_frame(conn, encode(Message(T_BIND_OK)))
                    else:
                        write_frame(conn, encode(Message(
                            T_BIND_ERR, {"reason": "invalid credentials"})))
                        break
                elif message.type == T_UNBIND:
                    break
                elif message.type == T_SEARCH:
                    qid = message.headers.get("qid", "-")
                    if not bound:
                        _answer_error(conn, qid, "not-bound", "bind before search")
                        break
                    if not _answer_search(conn, message, qid):
                        break
                elif message.type == T_REGISTER:
                    if not bound:
                        _answer_error(conn, "-", "not-bound", "bind before register")
                        break
                    if register_handler is None:
                        _answer_error(conn, "-", "unsupported", "no registrations here")
                        break
                    try:
                        write_frame(conn, encode(register_handler(message)))
                    except ValueError as exc:
                        _answer_error(conn, "-", "malformed-registration", exc)
                else:
                    _answer_error(conn, "-", "unsupported-type", message.type)
                    break
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _answer_search(conn, message, qid) -> bool:
        try:
            request = request_from_message(message)
        except (MalformedMessage, ValueError) as exc:
            _answer_error(conn, qid, "bad-request", exc)
            return False
        try:
            count, body = search_handler(request)
        except Exception as exc:  # handler owns failure classification
            code = getattr(exc, "wire_code", "server-failure")
            if sink is not None:
                sink.emit(LogEvent(
                    ts=now_us(), host=host, prog=prog, lvl="ERROR",
                    evnt="search.failed", qid=qid,
                    extra=(("CODE", token(code)), ("DETAIL", token(exc)))))
            _answer_error(conn, qid, code, exc)
            return True
        write_frame(conn, encode(Message(
            T_RESULT, {"qid": qid, "status": "ok", "count": str(count)}, body)))
        return True

    def _answer_error(conn, qid, code, detail) -> None:
        reason = " ".join(str(detail).split()) or code
        try:
            write_frame(conn, encode(Message(
                T_ERROR, {"qid": qid, "code": code, "reason": reason})))
        except OSError:
            pass

    def accept_loop() -> None:
        while not stop_event.is_set():
            try:
                conn, _peer = sock.accept()
            except OSError:
                break
            thread = threading.Thread(
                target=connection_loop, args=(conn,), daemon=True)
            with conns_lock:
                conns.append((conn, thread))
                if len(conns) > 4096:  # drop finished bookkeeping entries
                    conns[:] = [(c, t) for c, t in conns if t.is_alive()]
            thread.start()

    accept_thread = threading.Thread(target=accept_loop, daemon=True)
    accept_thread.start()
    return ServerHandle(sock, actual, stop_event, accept_thread, conns, conns_lock)
