"""Timestamped event logging and seven-phase query lifelines.

Every query is decomposed into seven phases: three on the client
(Client-Connect, Client-Bind, Client-EndConnect) and four on the server
(Server-InitSearch, Server-SearchIndex, Server-Invoking,
Server-GenResult).  Services emit ``<phase>.start`` / ``<phase>.end``
events tagged with the query id; ``correlate`` reassembles them into
lifelines and derives the two headline times:

  ORT (observed response time) = Client-EndConnect.end - Client-Connect.start
  RPT (request processing time) = sum of the four server phase durations

ORT exceeds the sum of the seven phase durations by the inter-phase gaps
(request/response transit and scheduling); that residual is reported
explicitly rather than attributed to any phase.

Timestamps are integer microseconds since the Unix epoch, so log lines
round-trip bit-exactly and phase arithmetic is exact.
"""

from __future__ import annotations

import calendar
import statistics
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Sequence


class SinkClosed(RuntimeError):
    """Emit attempted on a closed sink."""


class IncompleteLifeline(ValueError):
    """Operation that needs a complete lifeline got a partial one."""


class EmptyInput(ValueError):
    """Statistics requested over zero lifelines."""


PHASE_CLIENT_CONNECT = "Client-Connect"
PHASE_CLIENT_BIND = "Client-Bind"
PHASE_SERVER_INITSEARCH = "Server-InitSearch"
PHASE_SERVER_SEARCHINDEX = "Server-SearchIndex"
PHASE_SERVER_INVOKING = "Server-Invoking"
PHASE_SERVER_GENRESULT = "Server-GenResult"
PHASE_CLIENT_ENDCONNECT = "Client-EndConnect"

CLIENT_PHASES = (PHASE_CLIENT_CONNECT, PHASE_CLIENT_BIND, PHASE_CLIENT_ENDCONNECT)
SERVER_PHASES = (
    PHASE_SERVER_INITSEARCH,
    PHASE_SERVER_SEARCHINDEX,
    PHASE_SERVER_INVOKING,
    PHASE_SERVER_GENRESULT,
)
ALL_PHASES = (
    PHASE_CLIENT_CONNECT,
    PHASE_CLIENT_BIND,
    PHASE_SERVER_INITSEARCH,
    PHASE_SERVER_SEARCHINDEX,
    PHASE_SERVER_INVOKING,
    PHASE_SERVER_GENRESULT,
    PHASE_CLIENT_ENDCONNECT,
)
_PHASE_SET = frozenset(ALL_PHASES)


def now_us() -> int:
    """Wall clock in integer microseconds."""
    return time.time_ns() // 1000


def token(text: str) -> str:
    """Make text safe as a log VALUE token (no whitespace allowed)."""
    return "_".join(str(text).split()) or "-"


# --- timestamp text form -----------------------------------------------------

# RFC3339 UTC with exactly six fractional digits, e.g.
# 2026-08-09T12:00:00.123456Z.  The date/time prefix is cached per whole
# second: under load many events share a second and emit latency matters.

_ts_cache_lock = threading.Lock()
_ts_cache: tuple[int, str] = (-1, "")


def format_ts(ts_us: int) -> str:
    global _ts_cache
    sec, micro = divmod(ts_us, 1_000_000)
    cached_sec, prefix = _ts_cache
    if sec != cached_sec:
        tm = time.gmtime(sec)
        prefix = "%04d-%02d-%02dT%02d:%02d:%02d." % (
            tm.tm_year,
            tm.tm_mon,
            tm.tm_mday,
            tm.tm_hour,
            tm.tm_min,
            tm.tm_sec,
        )
        with _ts_cache_lock:
            _ts_cache = (sec, prefix)
    return "%s%06dZ" % (prefix, micro)


def parse_ts(text: str) -> int:
    if len(text) != 27 or text[10] != "T" or text[19] != "." or text[26] != "Z":
        raise ValueError("bad timestamp %r" % text)
    tm = (
        int(text[0:4]),
        int(text[5:7]),
        int(text[8:10]),
        int(text[11:13]),
        int(text[14:16]),
        int(text[17:19]),
    )
    return calendar.timegm(tm + (0, 0, 0)) * 1_000_000 + int(text[20:26])


# --- events -------------------------------------------------------------------


@dataclass(frozen=True)
class LogEvent:
    """One log line: fixed fields plus optional KEY=VALUE extras."""

    ts: int  # microseconds since epoch
    host: str
    prog: str  # gris | giis | bench | provider
    lvl: str  # INFO | ERROR
    evnt: str  # "<phase>.start" / "<phase>.end" or a free-form marker
    qid: str
    extra: tuple[tuple[str, str], ...] = ()

    def line(self) -> str:
        parts = [
            "TS=" + format_ts(self.ts),
            "HOST=" + self.host,
            "PROG=" + self.prog,
            "LVL=" + self.lvl,
            "EVNT=" + self.evnt,
            "QID=" + self.qid,
        ]
        for key, value in self.extra:
            parts.append("%s=%s" % (key, value))
        return " ".join(parts)


def format_event(event: LogEvent) -> str:
    return event.line()


def parse_event(line: str) -> LogEvent:
    fields = line.split(" ")
    if len(fields) < 6:
        raise ValueError("too few fields")
    fixed = {}
    for expected, chunk in zip(("TS", "HOST", "PROG", "LVL", "EVNT", "QID"), fields):
        key, sep, value = chunk.partition("=")
        if key != expected or not sep or not value:
            raise ValueError("expected %s=... got %r" % (expected, chunk))
        fixed[key] = value
    extra = []
    for chunk in fields[6:]:
        key, sep, value = chunk.partition("=")
        if not key or not sep:
            raise ValueError("bad extra token %r" % chunk)
        extra.append((key, value))
    return LogEvent(
        ts=parse_ts(fixed["TS"]),
        host=fixed["HOST"],
        prog=fixed["PROG"],
        lvl=fixed["LVL"],
        evnt=fixed["EVNT"],
        qid=fixed["QID"],
        extra=tuple(extra),
    )


class EventSink:
    """Append-only event log; writes are serialized, order preserved."""

    def __init__(self, path):
        self.path = str(path)
        self._fh = open(path, "a", encoding="utf-8", buffering=1024 * 1024)
        self._lock = threading.Lock()
        self._closed = False

    def emit(self, event: LogEvent) -> None:
        line = event.line()
        with self._lock:
            if self._closed:
                raise SinkClosed(self.path)
            self._fh.write(line)
            self._fh.write("\n")

    def flush(self) -> None:
        with self._lock:
            if not self._closed:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._closed = True
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit(sink: EventSink, event: LogEvent) -> None:
    sink.emit(event)


@dataclass
class ParsedLog:
    events: list[LogEvent]
    malformed: list[tuple[int, str]]  # (line number, reason)


def parse_log(stream) -> ParsedLog:
    """Parse a log text or line iterable; malformed lines become diagnostics."""
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = [line.rstrip("\n") for line in stream]
    events: list[LogEvent] = []
    malformed: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(parse_event(line))
        except ValueError as exc:
            malformed.append((lineno, str(exc)))
    return ParsedLog(events=events, malformed=malformed)


def read_log(path) -> ParsedLog:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_log(fh)


# --- lifelines -----------------------------------------------------------------


@dataclass
class PhaseLifeline:
    """One query's seven phase intervals plus derived ORT and RPT (µs)."""

    qid: str
    intervals: dict[str, tuple[int, int]]
    ort_us: int
    rpt_us: int

    def duration_us(self, phase: str) -> int:
        start, end = self.intervals[phase]
        return end - start

    @property
    def ort(self) -> float:
        return self.ort_us / 1e6

    @property
    def rpt(self) -> float:
        return self.rpt_us / 1e6

    def residual_us(self) -> int:
        """ORT minus the Eq-style component sum: inter-phase gaps."""
        parts = (
            self.duration_us(PHASE_CLIENT_CONNECT)
            + self.duration_us(PHASE_CLIENT_BIND)
            + self.rpt_us
            + self.duration_us(PHASE_CLIENT_ENDCONNECT)
        )
        return self.ort_us - parts


@dataclass
class IncompleteRecord:
    qid: str
    reason: str
    present_phases: tuple[str, ...]


@dataclass
class Correlation:
    lifelines: list[PhaseLifeline]
    incomplete: list[IncompleteRecord]


def correlate(events: Iterable[LogEvent]) -> Correlation:
    """Group phase events by query id into lifelines.

    Events may come unsorted from several files.  A lifeline is complete
    when every one of the seven phases has exactly one start and one end
    with end >= start and the four server phases are non-overlapping in
    order; anything else is quarantined with a reason.
    """
    marks: dict[str, dict[str, dict[str, list[int]]]] = {}
    for event in events:
        name, dot, edge = event.evnt.rpartition(".")
        if edge not in ("start", "end") or name not in _PHASE_SET:
            continue
        per_qid = marks.setdefault(event.qid, {})
        per_phase = per_qid.setdefault(name, {"start": [], "end": []})
        per_phase[edge].append(event.ts)

    lifelines: list[PhaseLifeline] = []
    incomplete: list[IncompleteRecord] = []
    for qid in sorted(marks):
        per_qid = marks[qid]
        present = tuple(p for p in ALL_PHASES if p in per_qid)
        problem = None
        intervals: dict[str, tuple[int, int]] = {}
        for phase in ALL_PHASES:
            stamps = per_qid.get(phase)
            if stamps is None:
                problem = "missing phase %s" % phase
                break
            if len(stamps["start"]) != 1 or len(stamps["end"]) != 1:
                problem = "duplicated events for phase %s" % phase
                break
            start, end = stamps["start"][0], stamps["end"][0]
            if end < start:
                problem = "negative interval for phase %s" % phase
                break
            intervals[phase] = (start, end)
        if problem is None:
            previous_end = None
            for phase in SERVER_PHASES:
                start, end = intervals[phase]
                if previous_end is not None and start < previous_end:
                    problem = "server phases overlap at %s" % phase
                    break
                previous_end = end
        if problem is not None:
            incomplete.append(
                IncompleteRecord(qid=qid, reason=problem, present_phases=present)
            )
            continue
        ort_us = (
            intervals[PHASE_CLIENT_ENDCONNECT][1] - intervals[PHASE_CLIENT_CONNECT][0]
        )
        rpt_us = sum(intervals[p][1] - intervals[p][0] for p in SERVER_PHASES)
        lifelines.append(
            PhaseLifeline(qid=qid, intervals=intervals, ort_us=ort_us, rpt_us=rpt_us)
        )
    return Correlation(lifelines=lifelines, incomplete=incomplete)


@dataclass
class DecompositionReport:
    qid: str
    ort_s: float
    component_sum_s: float
    residual_s: float
    epsilon_s: float
    passed: bool


def check_decomposition(lifeline: PhaseLifeline, epsilon: float) -> DecompositionReport:
    """Compare ORT against connect + bind + RPT + end-connect.

    The residual is the total inter-phase gap (network transit plus
    scheduling); the check passes when |residual| <= epsilon seconds.
    """
    if set(lifeline.intervals) != _PHASE_SET:
        raise IncompleteLifeline(lifeline.qid)
    residual_us = lifeline.residual_us()
    residual_s = residual_us / 1e6
    return DecompositionReport(
        qid=lifeline.qid,
        ort_s=lifeline.ort,
        component_sum_s=(lifeline.ort_us - residual_us) / 1e6,
        residual_s=residual_s,
        epsilon_s=epsilon,
        passed=abs(residual_s) <= epsilon,
    )


@dataclass
class PhaseSummary:
    mean: float
    median: float
    p95: float


@dataclass
class PhaseStats:
    count: int
    phases: dict[str, PhaseSummary]
    mean_ort: float
    mean_rpt: float
    rpt_over_ort: float
    connect_fraction: float


def _p95(values: Sequence[float]) -> float:
    """Nearest-rank 95th percentile."""
    xs = sorted(values)
    rank = max(1, -(-95 * len(xs) // 100))  # ceil without float error
    return xs[rank - 1]


def phase_stats(lifelines: Sequence[PhaseLifeline]) -> PhaseStats:
    """Per-phase mean/median/p95 over complete lifelines, plus the derived
    fractions rpt_over_ort and connect_fraction."""
    if not lifelines:
        raise EmptyInput("no complete lifelines")
    phases: dict[str, PhaseSummary] = {}
    for phase in ALL_PHASES:
        durations = [l.duration_us(phase) / 1e6 for l in lifelines]
        phases[phase] = PhaseSummary(
            mean=statistics.fmean(durations),
            median=statistics.median(durations),
            p95=_p95(durations),
        )
    mean_ort = statistics.fmean(l.ort_us for l in lifelines) / 1e6
    mean_rpt = statistics.fmean(l.rpt_us for l in lifelines) / 1e6
    connect = (
        phases[PHASE_CLIENT_CONNECT].mean + phases[PHASE_CLIENT_ENDCONNECT].mean
    )
    return PhaseStats(
        count=len(lifelines),
        phases=phases,
        mean_ort=mean_ort,
        mean_rpt=mean_rpt,
        rpt_over_ort=mean_rpt / mean_ort if mean_ort else 0.0,
        connect_fraction=connect / mean_ort if mean_ort else 0.0,
    )
