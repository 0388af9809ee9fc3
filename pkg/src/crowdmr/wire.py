"""Line-oriented datagram frames plus per-sender duplicate suppression.

Frame grammar (byte-exact wire contract, one UTF-8 line per datagram):

    CMR1 <TYPE> <sender> <term> <seq> <k=v;k=v...>\n

An empty payload renders as '-'.  Payload keys and values percent-escape
'%', space, newline, carriage return, '=' and ';' so any string round-trips.
Frames are capped at 1200 bytes to stay under a single typical datagram;
senders split larger item sets across frames (see chunk_counts).

The same bytes travel over real UDP sockets in live mode and over the
simulated links in sim mode.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

MAGIC = "CMR1"
MAX_FRAME = 1200
DEDUP_WINDOW = 1024


class WireError(ValueError):
    """Base for malformed-frame errors; receivers drop the datagram, never crash."""


class BadMagic(WireError):
    pass


class UnknownType(WireError):
    pass


class MalformedField(WireError):
    def __init__(self, fieldname: str, detail: str = ""):
        super().__init__(f"malformed field {fieldname}" + (f": {detail}" if detail else ""))
        self.fieldname = fieldname


class OversizeMessage(WireError):
    pass


class MsgType(enum.Enum):
    HELLO = "HELLO"
    HB = "HB"
    HB_ACK = "HB_ACK"
    LEADER_CLAIM = "LEADER_CLAIM"
    LEADER_ACK = "LEADER_ACK"
    LEADER_ANNOUNCE = "LEADER_ANNOUNCE"
    ABDICATE = "ABDICATE"
    TASK = "TASK"
    MAP_OUT = "MAP_OUT"
    RED_OUT = "RED_OUT"
    CYCLE_DONE = "CYCLE_DONE"


_TYPES = {t.value: t for t in MsgType}

_ESCAPES = {"%": "%25", " ": "%20", "\n": "%0A", "\r": "%0D", "=": "%3D", ";": "%3B"}


def _escape(s: str) -> str:
    if not any(ch in s for ch in _ESCAPES):
        return s
    for ch, rep in _ESCAPES.items():
        s = s.replace(ch, rep)
    return s


def _unescape(s: str) -> str:
    if "%" not in s:
        return s
    out: list[str] = []
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "%":
            hexpart = s[i + 1 : i + 3]
            if len(hexpart) != 2:
                raise MalformedField("payload", f"truncated escape in {s!r}")
            try:
                out.append(chr(int(hexpart, 16)))
            except ValueError:
                raise MalformedField("payload", f"bad escape %{hexpart}") from None
            i += 3
        else:
            out.append(ch)
            i += 1
    return "".join(out)


@dataclass(frozen=True)
class Message:
    """One versioned, term- and sequence-stamped frame between nodes."""

    msg_type: MsgType
    sender: int
    term: int
    seq: int
    payload: dict[str, str] = field(default_factory=dict)


def encode(msg: Message) -> bytes:
    if msg.payload:
        body = ";".join(f"{_escape(k)}={_escape(v)}" for k, v in msg.payload.items())
    else:
        body = "-"
    line = f"{MAGIC} {msg.msg_type.value} {msg.sender} {msg.term} {msg.seq} {body}\n"
    data = line.encode("utf-8")
    if len(data) > MAX_FRAME:
        raise OversizeMessage(f"encoded frame is {len(data)} bytes (budget {MAX_FRAME})")
    return data


def _parse_uint(fieldname: str, token: str) -> int:
    if not token.isdigit():
        raise MalformedField(fieldname, repr(token))
    return int(token)


def decode(data: bytes) -> Message:
    """Inverse of encode. Raises a WireError naming the offending field."""
    try:
        line = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedField("frame", str(exc)) from None
    line = line.rstrip("\n")
    if "\n" in line:
        raise MalformedField("frame", "embedded newline")
    parts = line.split(" ")
    if len(parts) != 6:
        raise MalformedField("frame", f"expected 6 fields, got {len(parts)}")
    magic, type_tok, sender_tok, term_tok, seq_tok, body = parts
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if type_tok not in _TYPES:
        raise UnknownType(f"unknown message type {type_tok!r}")
    sender = _parse_uint("sender", sender_tok)
    term = _parse_uint("term", term_tok)
    seq = _parse_uint("seq", seq_tok)
    payload: dict[str, str] = {}
    if body != "-":
        if not body:
            raise MalformedField("payload", "empty body")
        for pair in body.split(";"):
            k, sep, v = pair.partition("=")
            if not sep or not k:
                raise MalformedField("payload", f"bad pair {pair!r}")
            key = _unescape(k)
            if key in payload:
                raise MalformedField("payload", f"duplicate key {key!r}")
            payload[key] = _unescape(v)
    return Message(_TYPES[type_tok], sender, term, seq, payload)


class DedupWindow:
    """Per-sender duplicate suppression over (sender, seq) pairs.

    Tracks the highest contiguous seq plus a sparse set of out-of-order
    seqs, bounded to the most recent DEDUP_WINDOW entries per sender;
    pairs older than the window may be misjudged, which callers tolerate
    because the application layer is idempotent anyway.
    """

    def __init__(self, window: int = DEDUP_WINDOW):
        self.window = window
        self._high: dict[int, int] = {}
        self._seen: dict[int, set[int]] = {}

    def reset(self, sender: int) -> None:
        """Forget a sender entirely (used when it announces a fresh boot)."""
        self._high.pop(sender, None)
        self._seen.pop(sender, None)

    def check(self, sender: int, seq: int) -> bool:
        """Record a sighting; True when fresh, False when a duplicate."""
        high = self._high.get(sender, -1)
        if seq <= high:
            return False
        seen = self._seen.setdefault(sender, set())
        if seq in seen:
            return False
        if seq == high + 1:
            high += 1
            while high + 1 in seen:
                high += 1
                seen.remove(high)
        else:
            seen.add(seq)
            if len(seen) > self.window:
                # Fold the oldest stragglers into the contiguous edge.
                cutoff = max(seen) - self.window
                for s in [s for s in seen if s <= cutoff]:
                    seen.remove(s)
                high = max(high, cutoff)
                while high + 1 in seen:
                    high += 1
                    seen.remove(high)
        self._high[sender] = high
        return True


# Worst-case prefix "CMR1 MAP_OUT <sender> <term> <seq> " with 20-digit numbers.
_HEADER_ALLOWANCE = 80


def chunk_counts(
    meta: dict[str, str], items: list[tuple[str, int]]
) -> list[dict[str, str]]:
    """Split key=count items into payload dicts that each fit one frame.

    Every chunk repeats the meta pairs and carries p=<i>;pn=<n> part
    markers so receivers can detect completeness.  An empty item list
    still yields one (metadata-only) chunk.
    """
    budget = MAX_FRAME - _HEADER_ALLOWANCE
    meta_len = sum(len(k) + len(v) + 2 for k, v in meta.items()) + len("p=999;pn=999;")
    groups: list[list[tuple[str, int]]] = [[]]
    used = meta_len
    for key, count in items:
        pair_len = len(key) + len(str(count)) + 2
        if groups[-1] and used + pair_len > budget:
            groups.append([])
            used = meta_len
        groups[-1].append((key, count))
        used += pair_len
    payloads = []
    for i, group in enumerate(groups, start=1):
        payload = dict(meta)
        payload["p"] = str(i)
        payload["pn"] = str(len(groups))
        for key, count in group:
            payload[key] = str(count)
        payloads.append(payload)
    return payloads
