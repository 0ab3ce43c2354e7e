"""Resource-level information server.

Fronts a set of information providers, each owning a disjoint namespace
subtree.  Provider execution is simulated by a configurable timed wait
so contention is reproducible; invocations of the same provider never
overlap (callers queue on a per-provider lock), and by default there is
no request coalescing: every query that finds a provider's cache stale
invokes it again itself.  Cached entry sets age out after ``cache-ttl``
seconds; ttl 0 means never fresh, ttl inf means always fresh once
filled.
"""

from __future__ import annotations

import math
import random
import socket
import threading
import time
from dataclasses import dataclass

from . import wire
from .directory import (
    PRESENT_ALL,
    Entry,
    EntryName,
    SearchRequest,
    parse_name,
    to_ldif,
)
from .service import DirectoryState, Refresher, execute_search
from .telemetry import EventSink, LogEvent, now_us, token


class ProviderFailed(RuntimeError):
    wire_code = "provider-failed"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProviderSpec:
    """One information provider: where its entries live and what they cost."""

    name: str
    suffix: EntryName
    cost_ms: float
    entry_count: int
    entry_bytes: int
    seed: int
    fail: bool = False  # deterministic failure for fault tests

    def __post_init__(self):
        if self.cost_ms < 0:
            raise ConfigError("provider %s: cost must be >= 0" % self.name)
        if self.entry_count < 1:
            raise ConfigError("provider %s: entry-count must be >= 1" % self.name)


@dataclass(frozen=True)
class CacheRecord:
    """Cached entry set with its insertion time and time-to-live."""

    source: str
    entries: tuple[Entry, ...]
    stored_at: int  # µs
    ttl: float  # seconds; 0 never fresh, inf always fresh once stored

    def fresh(self, now: int) -> bool:
        return (now - self.stored_at) / 1e6 < self.ttl


class CacheTable:
    """Per-source cache records, replaced atomically."""

    def __init__(self):
        self._records: dict[str, CacheRecord] = {}
        self._lock = threading.Lock()

    def lookup(self, source: str, now: int) -> tuple[Entry, ...] | None:
        """Fresh entries, or None as the stale marker."""
        record = self._records.get(source)
        if record is not None and record.fresh(now):
            return record.entries
        return None

    def record(self, source: str) -> CacheRecord | None:
        return self._records.get(source)

    def store(self, source: str, entries, now: int, ttl: float) -> None:
        record = CacheRecord(source=source, entries=tuple(entries),
                             stored_at=now, ttl=ttl)
        with self._lock:
            self._records[source] = record

    def drop(self, source: str) -> None:
        with self._lock:
            self._records.pop(source, None)

    def sources(self) -> list[str]:
        return list(self._records)


def cache_lookup(caches: CacheTable, source: str, now: int):
    return caches.lookup(source, now)


def cache_store(caches: CacheTable, source: str, entries, now: int, ttl: float):
    caches.store(source, entries, now, ttl)


class Provider:
    """Provider runtime: the spec plus its exclusive-execution lock."""

    def __init__(self, spec: ProviderSpec):
        self.spec = spec
        self._lock = threading.Lock()

    def invoke(self, sink: EventSink | None = None, qid: str = "-",
               host: str = "") -> list[Entry]:
        """Generate fresh entries after waiting out the configured cost.

        Concurrent callers queue: the cost wait and generation run under
        the provider lock, so invocation intervals in the log never
        overlap for one provider.
        """
        spec = self.spec
        with self._lock:
            start = now_us()
            if sink is not None:
                sink.emit(LogEvent(ts=start, host=host, prog="provider",
                                   lvl="INFO", evnt="provider.invoke.start",
                                   qid=qid, extra=(("PROVIDER", spec.name),)))
            if spec.fail:
                if sink is not None:
                    sink.emit(LogEvent(ts=now_us(), host=host, prog="provider",
                                       lvl="ERROR", evnt="provider.invoke.failed",
                                       qid=qid, extra=(("PROVIDER", spec.name),)))
                raise ProviderFailed(spec.name)
            if spec.cost_ms > 0:
                time.sleep(spec.cost_ms / 1000.0)
            entries = generate_entries(spec, now_us())
            if sink is not None:
                sink.emit(LogEvent(ts=now_us(), host=host, prog="provider",
                                   lvl="INFO", evnt="provider.invoke.end",
                                   qid=qid, extra=(("PROVIDER", spec.name),)))
        return entries


def invoke_provider(provider: Provider, sink=None, qid="-", host="") -> list[Entry]:
    return provider.invoke(sink=sink, qid=qid, host=host)


def generate_entries(spec: ProviderSpec, timestamp: int) -> list[Entry]:
    """Deterministic entry set for a spec; only timestamps change per call.

    Each entry is padded so its serialized size lands on entry_bytes
    (within ±10% as long as the target exceeds the structural minimum).
    """
    rng = random.Random(spec.seed)
    entries = []
    for i in range(spec.entry_count):
        name = EntryName(
            (("mds-device-name", "%s-%03d" % (spec.name, i)),) + spec.suffix.components
        )
        attributes = {
            "objectclass": ["MdsDevice"],
            "mds-provider-name": [spec.name],
            "mds-metric": [str(rng.randint(0, 99999)).zfill(5)],
        }
        entry = Entry(name=name, attributes=attributes, timestamp=timestamp)
        base_size = len(to_ldif([entry]).encode("utf-8"))
        pad = spec.entry_bytes - base_size - len("mds-pad: \n")
        if pad > 0:
            attributes["mds-pad"] = ["x" * pad]
        entries.append(entry)
    return entries


@dataclass
class GrisConfig:
    suffix: EntryName
    providers: list[ProviderSpec]
    cache_ttl: float
    listen: str = "127.0.0.1:0"
    log_path: str = "gris.log"
    secret: str = wire.DEFAULT_CREDENTIAL.secret

    def __post_init__(self):
        seen: list[EntryName] = []
        for spec in self.providers:
            if not spec.suffix.is_under(self.suffix):
                raise ConfigError(
                    "provider %s suffix %s outside server suffix %s"
                    % (spec.name, spec.suffix.text, self.suffix.text))
            for other in seen:
                if spec.suffix.is_under(other) or other.is_under(spec.suffix):
                    raise ConfigError(
                        "provider suffixes overlap: %s and %s"
                        % (spec.suffix.text, other.text))
            seen.append(spec.suffix)


def parse_ttl(text: str) -> float:
    text = text.strip().lower()
    if text in ("inf", "infinite", "always"):
        return math.inf
    return float(text)


def parse_gris_config(text: str) -> GrisConfig:
    """Line-oriented config: suffix=, cache-ttl=, provider=...  ('#' comments)."""
    suffix = None
    cache_ttl = None
    providers: list[ProviderSpec] = []
    listen = "127.0.0.1:0"
    log_path = "gris.log"
    secret = wire.DEFAULT_CREDENTIAL.secret
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError("line %d: expected key=value" % lineno)
        key = key.strip()
        value = value.strip()
        if key == "suffix":
            suffix = parse_name(value)
        elif key == "cache-ttl":
            cache_ttl = parse_ttl(value)
        elif key == "listen":
            listen = value
        elif key == "log":
            log_path = value
        elif key == "secret":
            secret = value
        elif key == "provider":
            parts = value.split(",")
            if len(parts) != 6:
                raise ConfigError(
                    "line %d: provider needs name,suffix,cost-ms,entry-count,"
                    "entry-bytes,seed" % lineno)
            name, psuffix, cost, count, nbytes, seed = (p.strip() for p in parts)
            providers.append(ProviderSpec(
                name=name, suffix=parse_name(psuffix), cost_ms=float(cost),
                entry_count=int(count), entry_bytes=int(nbytes), seed=int(seed)))
        else:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
    if suffix is None:
        raise ConfigError("config must set suffix=")
    if cache_ttl is None:
        raise ConfigError("config must set cache-ttl=")
    return GrisConfig(suffix=suffix, providers=providers, cache_ttl=cache_ttl,
                      listen=listen, log_path=log_path, secret=secret)


def load_gris_config(path) -> GrisConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_gris_config(fh.read())


class ProviderRefresher(Refresher):
    """Server-Invoking strategy: invoke every relevant stale provider.

    Providers are invoked one after the other in configuration order
    (within one query) and exclusively per provider (across queries).
    No coalescing: concurrent queries that both find a provider stale
    both invoke it and compete for the lock.
    """

    def __init__(self, config: GrisConfig, state: DirectoryState,
                 caches: CacheTable, host: str, coalesce: bool = False):
        self.config = config
        self.state = state
        self.caches = caches
        self.host = host
        self.coalesce = coalesce
        self.providers = [Provider(spec) for spec in config.providers]

    def relevant(self, request: SearchRequest) -> list[Provider]:
        hits = []
        for provider in self.providers:
            suffix = provider.spec.suffix
            if suffix.is_under(request.base) or request.base.is_under(suffix):
                hits.append(provider)
        return hits

    def stale_targets(self, request: SearchRequest, now: int) -> list[Provider]:
        return [
            p for p in self.relevant(request)
            if self.caches.lookup(p.spec.name, now) is None
        ]

    def refresh(self, targets, sink, qid) -> None:
        for provider in targets:
            name = provider.spec.name
            if self.coalesce and self.caches.lookup(name, now_us()) is not None:
                continue  # someone else refreshed while we queued
            entries = provider.invoke(sink=sink, qid=qid, host=self.host)
            self.caches.store(name, entries, now_us(), self.config.cache_ttl)
        merged: list[Entry] = []
        for provider in self.providers:
            record = self.caches.record(provider.spec.name)
            if record is not None:
                merged.extend(record.entries)
        self.state.swap(merged)


class GrisServer:
    """Running resource server plus its optional upstream registration loop."""

    def __init__(self, config: GrisConfig, *, register_to: str | None = None,
                 register_ttl: float = 30.0, coalesce: bool = False,
                 sink: EventSink | None = None):
        self.config = config
        self.host = socket.gethostname()
        self._own_sink = sink is None
        self.sink = sink if sink is not None else EventSink(config.log_path)
        self.state = DirectoryState(config.suffix)
        self.caches = CacheTable()
        self.refresher = ProviderRefresher(config, self.state, self.caches,
                                           self.host, coalesce=coalesce)
        self._stop = threading.Event()
        self._register_thread = None

        def handler(request: SearchRequest):
            return execute_search(request, state=self.state,
                                  refresher=self.refresher, sink=self.sink,
                                  prog="gris", host=self.host)

        def authenticate(identity: str, secret: str) -> bool:
            return secret == config.secret

        self.handle = wire.serve(config.listen, handler, authenticate,
                                 self.sink, prog="gris", host=self.host)
        self.address = self.handle.address
        if register_to:
            self._register_thread = threading.Thread(
                target=self._registration_loop, args=(register_to, register_ttl),
                daemon=True)
            self._register_thread.start()

    def _registration_loop(self, register_to: str, ttl: float) -> None:
        # Renew every ttl/3 so two missed renewals still keep us live.
        credential = wire.Credential("gris", self.config.secret)
        while not self._stop.is_set():
            try:
                register_once(register_to, credential, self.address,
                              self.config.suffix, ttl)
                self.sink.emit(LogEvent(
                    ts=now_us(), host=self.host, prog="gris", lvl="INFO",
                    evnt="register.renewed", qid="-",
                    extra=(("TARGET", token(register_to)),)))
            except Exception as exc:
                self.sink.emit(LogEvent(
                    ts=now_us(), host=self.host, prog="gris", lvl="ERROR",
                    evnt="register.failed", qid="-",
                    extra=(("TARGET", token(register_to)),
                           ("DETAIL", token(exc)))))
            self._stop.wait(ttl / 3.0)

    def warm(self) -> None:
        """Fill every provider cache once (the always-cached steady state)."""
        request = SearchRequest(base=self.config.suffix, scope="sub",
                                filter=__import__("mdslite.directory",
                                                  fromlist=["PRESENT_ALL"]).PRESENT_ALL,
                                attributes="*", qid="warmup")
        self.refresher.refresh(self.refresher.relevant(request), None, "warmup")

    def stop(self) -> None:
        self._stop.set()
        self.handle.stop()
        if self._register_thread is not None:
            self._register_thread.join(timeout=5)
        self.sink.flush()
        if self._own_sink:
            self.sink.close()


def register_once(giis_address: str, credential: wire.Credential,
                  endpoint: str, suffix: EntryName, ttl: float) -> None:
    """Single soft-state renewal: connect, bind, REGISTER, expect OK."""
    addr = wire.parse_address(giis_address)
    sock = socket.create_connection(addr, timeout=10)
    try:
        sock.settimeout(10)
        wire.write_frame(sock, wire.encode(wire.Message(wire.T_BIND, {
            "identity": credential.identity, "secret": credential.secret})))
        reply = wire.decode(wire.read_frame(sock))
        if reply.type != wire.T_BIND_OK:
            raise wire.BindRejected(reply.headers.get("reason", "bind rejected"))
        wire.write_frame(sock, wire.encode(wire.Message(wire.T_REGISTER, {
            "endpoint": endpoint,
            "suffix": suffix.text,
            "ttl-seconds": "%g" % ttl,
        })))
        reply = wire.decode(wire.read_frame(sock))
        if reply.type != wire.T_REGISTER_OK:
            raise wire.ProtocolError("registration refused: %s" % reply.headers)
    finally:
        sock.close()


def run_gris(config: GrisConfig, **kwargs) -> GrisServer:
    """Start a resource server; startup errors surface before return."""
    return GrisServer(config, **kwargs)
