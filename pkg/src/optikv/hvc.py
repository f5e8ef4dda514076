"""Hybrid vector clocks.

Every server keeps a vector of physical timestamps (milliseconds), one slot
per server.  The owner's slot is its own physical time; the other slots hold
the freshest value learned through communication, floored at ``now - epsilon``.
With ``epsilon = INFINITY`` the clock degenerates into a Fidge/Mattern vector
clock over physical timestamps.

Clocks are immutable; every rule returns a new :class:`Hvc`.
"""

from __future__ import annotations

import base64
import enum
import math
import struct
from dataclasses import dataclass
from typing import Sequence

INFINITY = math.inf

_WIRE_INF = -1


class ClockRegressionError(ValueError):
    """Raised when an event is stamped with a time earlier than the owner's entry."""


class ClockConfigError(ValueError):
    """Raised when clocks of different sizes meet."""


class ClockDecodeError(ValueError):
    """Raised on malformed compact or wire encodings."""


class CausalOrder(enum.Enum):
    BEFORE = "before"
    AFTER = "after"
    CONCURRENT = "concurrent"
    EQUAL = "equal"


def _check_epsilon(epsilon: float) -> float:
    if epsilon != INFINITY and (epsilon < 0 or int(epsilon) != epsilon):
        raise ClockConfigError(f"epsilon must be a non-negative integer or INFINITY, got {epsilon!r}")
    return epsilon if epsilon == INFINITY else int(epsilon)


@dataclass(frozen=True)
class Hvc:
    owner: int
    entries: tuple[int, ...]
    epsilon: float = INFINITY

    def __post_init__(self) -> None:
        if not 0 <= self.owner < len(self.entries):
            raise ClockConfigError(f"owner {self.owner} outside vector of size {len(self.entries)}")
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))
        object.__setattr__(self, "epsilon", _check_epsilon(self.epsilon))

    @classmethod
    def zero(cls, owner: int, n: int, epsilon: float = INFINITY) -> Hvc:
        return cls(owner, (0,) * n, epsilon)

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def own(self) -> int:
        """The owner's physical time at its most recent event."""
        return self.entries[self.owner]

    def __getitem__(self, j: int) -> int:
        return self.entries[j]

    def _floor(self, now: int) -> float:
        return now - self.epsilon

    def _advance(self, now: int, others: Sequence[int]) -> Hvc:
        if now < self.own:
            raise ClockRegressionError(
                f"clock regression at server {self.owner}: now={now} < own entry {self.own}"
            )
        floor = self._floor(now)
        entries = [
            now if j == self.owner else max(others[j], floor) for j in range(self.n)
        ]
        return Hvc(self.owner, tuple(int(e) for e in entries), self.epsilon)

    def tick(self, now: int) -> Hvc:
        """Local event (e.g. serving a PUT)."""
        return self._advance(now, self.entries)

    def on_send(self, now: int) -> Hvc:
        """Stamp for an outgoing message; same rule as :meth:`tick`."""
        return self._advance(now, self.entries)

    def on_receive(self, msg: Hvc, now: int) -> Hvc:
        """Merge a piggy-backed clock.

        Keeps the receiver's own prior knowledge in the max so entries never
        regress when an old message arrives late.
        """
        if msg.n != self.n:
            raise ClockConfigError(f"cannot merge clocks of size {self.n} and {msg.n}")
        merged = [max(a, b) for a, b in zip(self.entries, msg.entries)]
        return self._advance(now, merged)

    def compare(self, other: Hvc) -> CausalOrder:
        return compare(self, other)

    def __repr__(self) -> str:
        eps = "inf" if self.epsilon == INFINITY else self.epsilon
        return f"Hvc(s{self.owner}, {list(self.entries)}, eps={eps})"


def tick(h: Hvc, now: int) -> Hvc:
    return h.tick(now)


def on_send(h: Hvc, now: int) -> Hvc:
    return h.on_send(now)


def on_receive(h: Hvc, msg: Hvc, now: int) -> Hvc:
    return h.on_receive(msg, now)


def compare(a: Hvc, b: Hvc) -> CausalOrder:
    if a.n != b.n:
        raise ClockConfigError(f"cannot compare clocks of size {a.n} and {b.n}")
    le = ge = True
    for x, y in zip(a.entries, b.entries):
        if x < y:
            ge = False
        elif x > y:
            le = False
    if le and ge:
        return CausalOrder.EQUAL
    if le:
        return CausalOrder.BEFORE
    if ge:
        return CausalOrder.AFTER
    return CausalOrder.CONCURRENT


def happened_before(a: Hvc, b: Hvc) -> bool:
    return compare(a, b) is CausalOrder.BEFORE


# -- compact encoding -------------------------------------------------------


@dataclass(frozen=True)
class CompactHvc:
    """Bitmask of retained entries plus their values.

    Omitted entries decode to ``base - epsilon``.  The owner's entry is always
    retained so ``values`` starts from a real timestamp.
    """

    present: int
    values: tuple[int, ...]
    base: int
    epsilon: int

    def __post_init__(self) -> None:
        if bin(self.present).count("1") != len(self.values):
            raise ClockDecodeError(
                f"mask has {bin(self.present).count('1')} bits set but {len(self.values)} values"
            )

    def mask_string(self, n: int) -> str:
        """Bit string with index 0 first, e.g. ``1001001000``."""
        return "".join("1" if self.present >> j & 1 else "0" for j in range(n))

    def positions(self) -> list[int]:
        out, j, m = [], 0, self.present
        while m:
            if m & 1:
                out.append(j)
            m >>= 1
            j += 1
        return out


def compress(h: Hvc) -> CompactHvc:
    if h.epsilon == INFINITY:
        raise ClockConfigError("compression needs a finite epsilon")
    default = h.own - h.epsilon
    present = 0
    values = []
    for j, e in enumerate(h.entries):
        if j == h.owner or e != default:
            present |= 1 << j
            values.append(e)
    return CompactHvc(present, tuple(values), h.own, int(h.epsilon))


def decompress(c: CompactHvc, n: int, owner: int | None = None) -> Hvc:
    if c.present >> n:
        raise ClockDecodeError(f"mask {c.present:#x} has bits beyond n={n}")
    it = iter(c.values)
    entries = [next(it) if c.present >> j & 1 else c.base - c.epsilon for j in range(n)]
    if owner is None:
        matches = [j for j in range(n) if c.present >> j & 1 and entries[j] == c.base]
        if not matches:
            raise ClockDecodeError("no retained entry equals base; owner unknown")
        owner = matches[0]
    elif entries[owner] != c.base:
        raise ClockDecodeError(f"owner entry {entries[owner]} != base {c.base}")
    return Hvc(owner, tuple(entries), c.epsilon)


# -- binary wire form ---------------------------------------------------------


def encode(h: Hvc) -> bytes:
    """Little-endian: n, epsilon (-1 = INFINITY), then the vector or compact form."""
    if h.epsilon == INFINITY:
        return struct.pack(f"<iq{h.n}q", h.n, _WIRE_INF, *h.entries)
    c = compress(h)
    mask = c.present.to_bytes((h.n + 7) // 8, "little")
    return struct.pack("<iqq", h.n, c.epsilon, c.base) + mask + struct.pack(f"<{len(c.values)}q", *c.values)


def decode(data: bytes, owner: int) -> Hvc:
    try:
        n, eps = struct.unpack_from("<iq", data, 0)
        if n <= 0:
            raise ClockDecodeError(f"bad vector size {n}")
        if eps == _WIRE_INF:
            entries = struct.unpack_from(f"<{n}q", data, 12)
            if len(data) != 12 + 8 * n:
                raise ClockDecodeError("trailing bytes after full vector")
            return Hvc(owner, entries, INFINITY)
        (base,) = struct.unpack_from("<q", data, 12)
        nbytes = (n + 7) // 8
        present = int.from_bytes(data[20 : 20 + nbytes], "little")
        k = bin(present).count("1")
        if len(data) != 20 + nbytes + 8 * k:
            raise ClockDecodeError("length does not match mask population")
        values = struct.unpack_from(f"<{k}q", data, 20 + nbytes)
    except struct.error as exc:
        raise ClockDecodeError(str(exc)) from exc
    return decompress(CompactHvc(present, values, base, eps), n, owner)


def to_b64(h: Hvc) -> str:
    return base64.b64encode(encode(h)).decode("ascii")


def from_b64(text: str, owner: int) -> Hvc:
    try:
        raw = base64.b64decode(text, validate=True)
    except ValueError as exc:
        raise ClockDecodeError(f"bad base64: {exc}") from exc
    return decode(raw, owner)
