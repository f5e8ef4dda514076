"""Monitored predicates in disjunctive normal form, in the XML dialect::

    <predicate>
      <type>semilinear</type>
      <conjClause>
        <id>0</id>
        <var><name>x2</name> <value>1</value></var>
      </conjClause>
    </predicate>

Each clause is a conjunction of ``variable == literal`` terms; the predicate
holds when any clause does.  ``conjunctive`` is accepted as a type tag and
treated as ``linear``.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional
from xml.sax.saxutils import escape

DETECTION_CLASSES = {"linear": "linear", "conjunctive": "linear", "semilinear": "semilinear"}


class PredicateParseError(ValueError):
    """Rejected document; ``location`` is a slash path to the offending element."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class OwnershipError(ValueError):
    pass


@dataclass(frozen=True)
class Clause:
    id: int
    terms: tuple[tuple[str, str], ...]

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.terms)


@dataclass(frozen=True)
class PredicateSpec:
    detection_class: str
    clauses: tuple[Clause, ...]
    type_tag: str = ""
    source: str = ""

    def __post_init__(self) -> None:
        if not self.type_tag:
            object.__setattr__(self, "type_tag", self.detection_class)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PredicateSpec):
            return NotImplemented
        return (self.detection_class, self.clauses, self.type_tag) == (
            other.detection_class, other.clauses, other.type_tag)

    def __hash__(self) -> int:
        return hash((self.detection_class, self.clauses, self.type_tag))

    def clause(self, clause_id: int) -> Clause:
        return self.clauses[clause_id]


def _text(el: ET.Element, where: str) -> str:
    if len(el):
        raise PredicateParseError(where, f"<{el.tag}> must hold text only")
    text = (el.text or "").strip()
    if not text:
        raise PredicateParseError(where, f"<{el.tag}> is empty")
    return text


def _no_attrs(el: ET.Element, where: str) -> None:
    if el.attrib:
        raise PredicateParseError(where, f"unexpected attributes {sorted(el.attrib)}")
    if el.tail and el.tail.strip():
        raise PredicateParseError(where, "stray text after element")


def _expect(el: ET.Element, tag: str, where: str) -> None:
    if el.tag != tag:
        raise PredicateParseError(where, f"expected <{tag}>, found <{el.tag}>")
    _no_attrs(el, where)


def parse(xml_text: str) -> PredicateSpec:
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise PredicateParseError(f"line {line}, column {col}", f"malformed XML: {exc}") from None
    _expect(root, "predicate", "/predicate")
    if root.text and root.text.strip():
        raise PredicateParseError("/predicate", "stray text")
    children = list(root)
    if not children:
        raise PredicateParseError("/predicate", "missing <type>")
    _expect(children[0], "type", "/predicate/type")
    tag = _text(children[0], "/predicate/type")
    if tag not in DETECTION_CLASSES:
        raise PredicateParseError("/predicate/type", f"unknown predicate type {tag!r}")
    if len(children) == 1:
        raise PredicateParseError("/predicate", "no <conjClause>")

    clauses = []
    seen_ids: dict[int, str] = {}
    for ci, cel in enumerate(children[1:]):
        where = f"/predicate/conjClause[{ci}]"
        _expect(cel, "conjClause", where)
        if cel.text and cel.text.strip():
            raise PredicateParseError(where, "stray text")
        parts = list(cel)
        if not parts:
            raise PredicateParseError(where, "missing <id>")
        _expect(parts[0], "id", f"{where}/id")
        raw_id = _text(parts[0], f"{where}/id")
        try:
            cid = int(raw_id)
        except ValueError:
            raise PredicateParseError(f"{where}/id", f"clause id {raw_id!r} is not an integer") from None
        if cid in seen_ids:
            raise PredicateParseError(f"{where}/id", f"duplicate clause id {cid} (also at {seen_ids[cid]})")
        seen_ids[cid] = where
        if len(parts) == 1:
            raise PredicateParseError(where, "empty clause: no <var>")
        terms = []
        names = set()
        for vi, vel in enumerate(parts[1:]):
            vwhere = f"{where}/var[{vi}]"
            _expect(vel, "var", vwhere)
            if vel.text and vel.text.strip():
                raise PredicateParseError(vwhere, "stray text")
            fields = list(vel)
            if len(fields) != 2:
                raise PredicateParseError(vwhere, "<var> needs exactly <name> then <value>")
            _expect(fields[0], "name", f"{vwhere}/name")
            _expect(fields[1], "value", f"{vwhere}/value")
            name = _text(fields[0], f"{vwhere}/name")
            value = _text(fields[1], f"{vwhere}/value")
            if name in names:
                raise PredicateParseError(f"{vwhere}/name", f"variable {name!r} repeated in clause")
            names.add(name)
            terms.append((name, value))
        clauses.append(Clause(cid, tuple(terms)))

    ids = sorted(seen_ids)
    if ids != list(range(len(ids))):
        bad = next(i for i, want in zip(ids, range(len(ids))) if i != want)
        raise PredicateParseError(f"{seen_ids[bad]}/id", f"clause ids must be 0..{len(ids) - 1}, got {bad}")
    clauses.sort(key=lambda c: c.id)
    return PredicateSpec(DETECTION_CLASSES[tag], tuple(clauses), tag, xml_text)


def load(path) -> PredicateSpec:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def to_xml(spec: PredicateSpec) -> str:
    lines = ["<predicate>", f"  <type>{escape(spec.type_tag)}</type>"]
    for clause in spec.clauses:
        lines += ["  <conjClause>", f"    <id>{clause.id}</id>"]
        for name, value in clause.terms:
            lines += ["    <var>", f"      <name>{escape(name)}</name> <value>{escape(value)}</value>", "    </var>"]
        lines.append("  </conjClause>")
    lines.append("</predicate>")
    return "\n".join(lines) + "\n"


def conjunction(terms: Mapping[str, str] | Iterable[tuple[str, str]], detection_class: str = "linear") -> PredicateSpec:
    """Single-clause spec built in code."""
    items = tuple(terms.items()) if isinstance(terms, Mapping) else tuple(terms)
    return PredicateSpec(detection_class, (Clause(0, tuple((n, str(v)) for n, v in items)),))


# -- evaluation ---------------------------------------------------------------------


@dataclass(frozen=True)
class ViewEntry:
    value: Optional[str]
    server: int
    interval: Any = None


class GlobalView(dict):
    """variable -> ViewEntry, assembled by a monitor from a cut."""

    @classmethod
    def from_cut(cls, candidates) -> GlobalView:
        view = cls()
        for cand in candidates:
            for var, value in cand.state.items():
                view[var] = ViewEntry(value, cand.server_id, (cand.start, cand.end))
        return view

    def values_only(self) -> dict[str, Optional[str]]:
        return {k: e.value for k, e in self.items()}


def _lookup(view: Mapping, var: str):
    if var not in view:
        return False, None
    v = view[var]
    if isinstance(v, ViewEntry):
        v = v.value
    if v is None:
        return False, None
    return True, str(v).strip()


def eval_clause(clause: Clause, view: Mapping) -> Optional[bool]:
    """True, False, or None when no term is contradicted but some variable is missing."""
    missing = False
    for name, want in clause.terms:
        present, got = _lookup(view, name)
        if not present:
            missing = True
        elif got != want.strip():
            return False
    return None if missing else True


def eval_spec(spec: PredicateSpec, view: Mapping) -> Optional[bool]:
    results = [eval_clause(c, view) for c in spec.clauses]
    if any(r is True for r in results):
        return True
    if all(r is False for r in results):
        return False
    return None


def relevant_variables(spec: PredicateSpec) -> set[str]:
    return {name for c in spec.clauses for name in c.variables}


def local_partition(spec: PredicateSpec, owners: Mapping[str, int]) -> dict[tuple[int, int], Clause]:
    """(clause id, server) -> the clause's sub-conjunction over that server's variables."""
    if not owners:
        raise OwnershipError("no variable ownership configured")
    out: dict[tuple[int, int], list] = {}
    for clause in spec.clauses:
        for name, value in clause.terms:
            if name not in owners:
                raise OwnershipError(f"variable {name!r} is not mapped to any server")
            out.setdefault((clause.id, owners[name]), []).append((name, value))
    return {k: Clause(k[0], tuple(v)) for k, v in out.items()}


def participants(spec: PredicateSpec, owners: Mapping[str, int], clause_id: int) -> list[int]:
    return sorted({s for (c, s) in local_partition(spec, owners) if c == clause_id})
