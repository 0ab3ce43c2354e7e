"""Four-phase server-side search pipeline shared by both server kinds.

Every query is answered in the fixed phase order Server-InitSearch ->
Server-SearchIndex -> Server-Invoking -> Server-GenResult.  Adjacent
phases share their boundary timestamp, so the intervals are contiguous
by construction and the request processing time equals the sum of the
four durations exactly.  When nothing needs refreshing, Server-Invoking
is a zero-length interval so every lifeline still carries seven phases.
"""

from __future__ import annotations

import threading

from .directory import (
    Entry,
    EntryName,
    NoSuchBase,
    SearchIndex,
    SearchRequest,
    build_index,
    search,
    to_ldif,
)
from .telemetry import (
    PHASE_SERVER_GENRESULT,
    PHASE_SERVER_INITSEARCH,
    PHASE_SERVER_INVOKING,
    PHASE_SERVER_SEARCHINDEX,
    EventSink,
    LogEvent,
    now_us,
)


class DirectoryState:
    """Current index; replaced atomically so readers never see a partial one."""

    def __init__(self, suffix: EntryName):
        self.suffix = suffix
        self._index = build_index([], suffix)
        self._lock = threading.Lock()

    @property
    def index(self) -> SearchIndex:
        return self._index

    def swap(self, entries) -> SearchIndex:
        new_index = build_index(entries, self.suffix)
        with self._lock:
            self._index = new_index
        return new_index


class Refresher:
    """What Server-Invoking does: find stale sources and refresh them.

    ``stale_targets`` returns the data sources relevant to the request
    whose cached data is stale; ``refresh`` fetches them and swaps the
    directory state.  Both servers plug in here: one invokes local
    information providers, the other consults registered downstream
    servers over the wire.
    """

    def stale_targets(self, request: SearchRequest, now: int) -> list:
        raise NotImplementedError

    def refresh(self, targets: list, sink: EventSink | None, qid: str) -> None:
        raise NotImplementedError


def execute_search(
    request: SearchRequest,
    *,
    state: DirectoryState,
    refresher: Refresher,
    sink: EventSink | None,
    prog: str,
    host: str,
) -> tuple[int, str]:
    """Run the four-phase pipeline; returns (entry count, LDIF body)."""

    def mark(phase, edge, ts):
        if sink is not None:
            sink.emit(LogEvent(ts=ts, host=host, prog=prog, lvl="INFO",
                               evnt="%s.%s" % (phase, edge), qid=request.qid))

    t1 = now_us()
    mark(PHASE_SERVER_INITSEARCH, "start", t1)
    if not request.base.is_under(state.suffix) and not state.suffix.is_under(request.base):
        # still emit nothing further: the query fails whole
        raise NoSuchBase(request.base.text)

    t2 = now_us()
    mark(PHASE_SERVER_INITSEARCH, "end", t2)
    mark(PHASE_SERVER_SEARCHINDEX, "start", t2)
    try:
        candidates = search(state.index, request)
    except NoSuchBase:
        candidates = []  # base may only appear after the refresh below

    t3 = now_us()
    mark(PHASE_SERVER_SEARCHINDEX, "end", t3)
    mark(PHASE_SERVER_INVOKING, "start", t3)
    stale = refresher.stale_targets(request, t3)
    if stale:
        refresher.refresh(stale, sink, request.qid)
        t4 = now_us()
    else:
        t4 = t3  # nothing invoked: zero-length interval, lifeline stays seven-phase
    mark(PHASE_SERVER_INVOKING, "end", t4)
    mark(PHASE_SERVER_GENRESULT, "start", t4)
    if stale:
        results = search(state.index, request)
    else:
        results = candidates
    body = to_ldif(results)
    t5 = now_us()
    mark(PHASE_SERVER_GENRESULT, "end", t5)
    return len(results), body
