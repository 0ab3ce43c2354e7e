"""Hierarchical directory information model.

Entries live in an LDAP-style namespace: a name is an ordered list of
``attribute=value`` components, most specific first, and every entry name
ends with the suffix its server owns.  Searches select entries by scope
(base / one / sub) relative to a base name and by a small filter grammar
(presence, equality, and, or).  The index built here is immutable once
constructed; servers replace it wholesale after a refresh.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence, Union


class MalformedName(ValueError):
    """Name text that does not parse: empty component, bad escape."""


class MalformedFilter(ValueError):
    """Filter text that does not parse."""


class DuplicateName(ValueError):
    """Two entries with identical names offered to one index."""


class ForeignEntry(ValueError):
    """Entry whose name does not end with the index suffix."""


class NoSuchBase(LookupError):
    """Search base absent from the index (scope base or one-level)."""

    wire_code = "no-such-base"


_ESCAPABLE = {",", "=", "\\"}

SCOPE_BASE = "base"
SCOPE_ONE = "one"
SCOPE_SUB = "sub"
SCOPES = (SCOPE_BASE, SCOPE_ONE, SCOPE_SUB)


@dataclass(frozen=True)
class EntryName:
    """Directory name: ((attr, value), ...) pairs, most specific first."""

    components: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.components:
            raise MalformedName("name needs at least one component")
        for attr, value in self.components:
            for part in (attr, value):
                if not part:
                    raise MalformedName("empty component in %r" % (self.components,))
                if part != part.strip():
                    raise MalformedName("component has edge whitespace: %r" % part)

    @property
    def text(self) -> str:
        return ", ".join(
            "%s=%s" % (_escape(a), _escape(v)) for a, v in self.components
        )

    def __str__(self) -> str:
        return self.text

    def parent(self) -> "EntryName | None":
        if len(self.components) == 1:
            return None
        return EntryName(self.components[1:])

    def is_under(self, suffix: "EntryName") -> bool:
        """True if this name equals ``suffix`` or lies in its subtree."""
        n = len(suffix.components)
        return (
            len(self.components) >= n and self.components[-n:] == suffix.components
        )


def _escape(text: str) -> str:
    out = []
    for ch in text:
        if ch in _ESCAPABLE:
            out.append("\\")
        out.append(ch)
    return "".join(out)


def parse_name(text: str) -> EntryName:
    """Parse ``attr=value, attr=value`` text into an EntryName.

    Whitespace around the ``,`` and ``=`` separators is trimmed;
    ``\\,`` ``\\=`` ``\\\\`` escape literal separator characters.
    """
    if not text or not text.strip():
        raise MalformedName("empty name text")
    components: list[tuple[str, str]] = []
    attr_parts: list[str] = []
    val_parts: list[str] = []
    current = attr_parts
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            if i + 1 >= n or text[i + 1] not in _ESCAPABLE:
                raise MalformedName("bad escape at offset %d in %r" % (i, text))
            current.append(text[i + 1])
            i += 2
            continue
        if ch == "=" and current is attr_parts:
            current = val_parts
        elif ch == ",":
            components.append(_finish_component(attr_parts, val_parts, current, text))
            attr_parts, val_parts = [], []
            current = attr_parts
        else:
            current.append(ch)
        i += 1
    components.append(_finish_component(attr_parts, val_parts, current, text))
    return EntryName(tuple(components))


def _finish_component(attr_parts, val_parts, current, text):
    if current is attr_parts:
        raise MalformedName("component without '=' in %r" % text)
    attr = "".join(attr_parts).strip()
    value = "".join(val_parts).strip()
    if not attr or not value:
        raise MalformedName("empty attribute or value in %r" % text)
    return (attr, value)


def format_name(name: EntryName) -> str:
    """Canonical text form (inverse of parse_name)."""
    return name.text


TIMESTAMP_ATTR = "mds-entry-ts"


@dataclass
class Entry:
    """Directory entry: name, multi-valued attributes, generation time (µs)."""

    name: EntryName
    attributes: dict[str, list[str]]
    timestamp: int = 0

    def serialized_size(self) -> int:
        return len(to_ldif([self]).encode("utf-8"))


def validate_entry(entry: Entry) -> None:
    """Directory-content rules: objectclass present, values non-empty."""
    if not entry.attributes.get("objectclass"):
        raise ValueError("entry %s lacks objectclass" % entry.name)
    for attr, values in entry.attributes.items():
        if not values:
            raise ValueError("attribute %r of %s has no values" % (attr, entry.name))


# --- filters ---------------------------------------------------------------


@dataclass(frozen=True)
class Presence:
    attr: str


@dataclass(frozen=True)
class Equality:
    attr: str
    value: str


@dataclass(frozen=True)
class And:
    items: tuple["Filter", ...]

    def __post_init__(self):
        if not self.items:
            raise MalformedFilter("And needs at least one item")


@dataclass(frozen=True)
class Or:
    items: tuple["Filter", ...]

    def __post_init__(self):
        if not self.items:
            raise MalformedFilter("Or needs at least one item")


Filter = Union[Presence, Equality, And, Or]


def eval_filter(entry: Entry, flt: Filter) -> bool:
    """Total evaluation; byte-exact value comparison."""
    if isinstance(flt, Presence):
        return bool(entry.attributes.get(flt.attr))
    if isinstance(flt, Equality):
        return flt.value in entry.attributes.get(flt.attr, ())
    if isinstance(flt, And):
        return all(eval_filter(entry, f) for f in flt.items)
    if isinstance(flt, Or):
        return any(eval_filter(entry, f) for f in flt.items)
    raise TypeError("not a filter: %r" % (flt,))


def parse_filter(text: str) -> Filter:
    """Parse ``(a=*)`` / ``(a=v)`` / ``(&(..)(..))`` / ``(|(..)(..))`` text."""
    flt, rest = _parse_filter_at(text.strip(), 0)
    if rest != len(text.strip()):
        raise MalformedFilter("trailing text in filter %r" % text)
    return flt


def _parse_filter_at(text: str, i: int) -> tuple[Filter, int]:
    if i >= len(text) or text[i] != "(":
        raise MalformedFilter("expected '(' at offset %d in %r" % (i, text))
    i += 1
    if i < len(text) and text[i] in "&|":
        op = text[i]
        i += 1
        items: list[Filter] = []
        while i < len(text) and text[i] == "(":
            item, i = _parse_filter_at(text, i)
            items.append(item)
        if i >= len(text) or text[i] != ")":
            raise MalformedFilter("unterminated %r group in %r" % (op, text))
        if not items:
            raise MalformedFilter("empty %r group in %r" % (op, text))
        node = And(tuple(items)) if op == "&" else Or(tuple(items))
        return node, i + 1
    end = text.find(")", i)
    if end < 0:
        raise MalformedFilter("unterminated item in %r" % text)
    body = text[i:end]
    attr, sep, value = body.partition("=")
    if not sep or not attr or not value:
        raise MalformedFilter("expected attr=value in %r" % body)
    if "(" in body:
        raise MalformedFilter("nested '(' in item %r" % body)
    if value == "*":
        return Presence(attr), end + 1
    return Equality(attr, value), end + 1


def format_filter(flt: Filter) -> str:
    if isinstance(flt, Presence):
        return "(%s=*)" % flt.attr
    if isinstance(flt, Equality):
        return "(%s=%s)" % (flt.attr, flt.value)
    if isinstance(flt, And):
        return "(&%s)" % "".join(format_filter(f) for f in flt.items)
    if isinstance(flt, Or):
        return "(|%s)" % "".join(format_filter(f) for f in flt.items)
    raise TypeError("not a filter: %r" % (flt,))


PRESENT_ALL = Presence("objectclass")


# --- search requests and index ----------------------------------------------


@dataclass(frozen=True)
class SearchRequest:
    base: EntryName
    scope: str
    filter: Filter
    attributes: tuple[str, ...] | str  # "*" or explicit attribute names
    qid: str

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError("bad scope %r" % self.scope)


class SearchIndex:
    """Immutable lookup structure over a fixed entry set.

    Holds the entries sorted by formatted name (the deterministic result
    order), an exact-name map, a parent -> children adjacency for
    one-level scope, and the set of every name prefix down to the suffix
    so base-existence checks cover virtual intermediate nodes.
    """

    def __init__(self, suffix: EntryName, entries: Sequence[Entry]):
        self.suffix = suffix
        self._sorted = tuple(sorted(entries, key=lambda e: e.name.text))
        self._by_name: dict[EntryName, Entry] = {}
        self._children: dict[EntryName, list[Entry]] = {}
        self._nodes: set[EntryName] = {suffix}
        for entry in self._sorted:
            if entry.name in self._by_name:
                raise DuplicateName(entry.name.text)
            self._by_name[entry.name] = entry
            parent = entry.name.parent()
            if parent is not None and parent.is_under(suffix):
                self._children.setdefault(parent, []).append(entry)
            name = entry.name
            while name is not None and name.is_under(suffix):
                self._nodes.add(name)
                name = name.parent()

    def __len__(self) -> int:
        return len(self._sorted)

    @property
    def entries(self) -> tuple[Entry, ...]:
        return self._sorted

    def lookup(self, name: EntryName) -> Entry | None:
        return self._by_name.get(name)

    def has_node(self, name: EntryName) -> bool:
        return name in self._nodes

    def children(self, name: EntryName) -> list[Entry]:
        return list(self._children.get(name, ()))


def build_index(entries: Iterable[Entry], suffix: EntryName) -> SearchIndex:
    """Index entries under ``suffix``; reject foreigners and duplicates."""
    collected = list(entries)
    for entry in collected:
        if not entry.name.is_under(suffix):
            raise ForeignEntry(
                "%s is outside suffix %s" % (entry.name.text, suffix.text)
            )
    return SearchIndex(suffix, collected)


def search(index: SearchIndex, request: SearchRequest) -> list[Entry]:
    """Entries in scope of ``request.base`` that satisfy the filter.

    Results are ordered lexicographically by formatted name and have
    attribute projection applied.  Subtree scope scans the whole entry
    list, so its cost grows with index size.
    """
    base = request.base
    if request.scope == SCOPE_BASE:
        if not index.has_node(base):
            raise NoSuchBase(base.text)
        entry = index.lookup(base)
        hits = [entry] if entry is not None and eval_filter(entry, request.filter) else []
    elif request.scope == SCOPE_ONE:
        if not index.has_node(base):
            raise NoSuchBase(base.text)
        hits = [e for e in index.children(base) if eval_filter(e, request.filter)]
        hits.sort(key=lambda e: e.name.text)
    else:
        hits = [
            e
            for e in index.entries
            if e.name.is_under(base) and eval_filter(e, request.filter)
        ]
    return [_project(e, request.attributes) for e in hits]


def _project(entry: Entry, attributes) -> Entry:
    if attributes == "*":
        return entry
    wanted = {a: list(v) for a, v in entry.attributes.items() if a in attributes}
    return replace(entry, attributes=wanted)


# --- LDIF-like serialization -------------------------------------------------

# One "dn: <name>" line, then one "attr: value" line per value, entries
# separated by exactly one blank line.  The generation timestamp rides
# in-band as the mds-entry-ts attribute so freshness survives the wire.


def to_ldif(entries: Sequence[Entry]) -> str:
    blocks = []
    for entry in entries:
        lines = ["dn: %s" % entry.name.text]
        lines.append("%s: %d" % (TIMESTAMP_ATTR, entry.timestamp))
        for attr, values in entry.attributes.items():
            if attr == TIMESTAMP_ATTR:
                continue
            for value in values:
                lines.append("%s: %s" % (attr, value))
        blocks.append("\n".join(lines))
    if not blocks:
        return ""
    return "\n\n".join(blocks) + "\n"


def parse_ldif(text: str) -> list[Entry]:
    entries: list[Entry] = []
    for block in text.split("\n\n"):
        block = block.strip("\n")
        if not block:
            continue
        lines = block.split("\n")
        if not lines[0].startswith("dn: "):
            raise ValueError("entry block must start with 'dn: ': %r" % lines[0])
        name = parse_name(lines[0][4:])
        attributes: dict[str, list[str]] = {}
        timestamp = 0
        for line in lines[1:]:
            attr, sep, value = line.partition(": ")
            if not sep or not attr:
                raise ValueError("bad attribute line %r" % line)
            if attr == TIMESTAMP_ATTR:
                timestamp = int(value)
            else:
                attributes.setdefault(attr, []).append(value)
        entries.append(Entry(name=name, attributes=attributes, timestamp=timestamp))
    return entries
