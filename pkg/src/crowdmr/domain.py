"""Core value types shared by every layer: tag categories, visitor events, counting keys.

All types here are immutable and hashable, so they can be passed freely
between mapper/reducer contexts and used as dict keys.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

# Node and room identifiers are small non-negative integers.  Nodes are
# totally ordered by id (used for deterministic tie-breaking); rooms are
# 0-indexed and render as "room0", "room1", ...
NodeId = int
RoomId = int


class UnknownCategory(ValueError):
    """Raised when a tag label is not one of the three known categories."""


class TagCategory(enum.Enum):
    """The three wristband tag categories. OTHER covers animals/service animals."""

    MAN = "Man"
    WOMAN = "Woman"
    OTHER = "Other"

    def __str__(self) -> str:
        return self.value


# Canonical category order, used everywhere a stable rendering is needed.
CATEGORIES: tuple[TagCategory, ...] = (TagCategory.MAN, TagCategory.WOMAN, TagCategory.OTHER)

_BY_LABEL = {c.value.lower(): c for c in TagCategory}


def parse_category(label: str) -> TagCategory:
    """Parse a trimmed token into a TagCategory, case-insensitively."""
    try:
        return _BY_LABEL[label.lower()]
    except KeyError:
        raise UnknownCategory(f"unknown tag category: {label!r}") from None


@dataclass(frozen=True)
class VisitorEvent:
    """One simulated RFID read: a tagged visitor seen in a room at a point in time.

    event_id is unique within a scenario and is the idempotence key under
    at-least-once delivery.  timestamp is in simulated milliseconds since
    scenario start and is non-decreasing within one room's stream.
    """

    event_id: int
    category: TagCategory
    room: RoomId
    timestamp: int


@dataclass(frozen=True)
class CompositeKey:
    """A (category, room) counting key with a canonical textual form."""

    category: TagCategory
    room: RoomId

    def text(self) -> str:
        return f"{self.category.value}-room{self.room}"

    def sort_key(self) -> tuple[int, int]:
        return (CATEGORIES.index(self.category), self.room)


def composite_key_text(key: CompositeKey) -> str:
    """Canonical rendering, e.g. 'Other-room5'. Injective over (category, room)."""
    return key.text()


def parse_composite_key(text: str) -> CompositeKey:
    """Inverse of composite_key_text."""
    head, sep, tail = text.partition("-room")
    if not sep or not tail.isdigit():
        raise ValueError(f"not a composite key: {text!r}")
    return CompositeKey(parse_category(head), int(tail))
