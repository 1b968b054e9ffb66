from __future__ import annotations

from dataclasses import dataclass

from circov.core.errors import ValidationFailed


@dataclass(frozen=True, order=True)
class YearSpan:
    first: int
    last: int

    def __post_init__(self) -> None:
        if self.first > self.last:
            raise ValidationFailed("Year range is reversed", {"first": self.first, "last": self.last})

    def contains(self, year: int) -> bool:
        return self.first <= year <= self.last

    def overlaps(self, other: YearSpan) -> bool:
        return self.first <= other.last and other.first <= self.last

    def clip(self, first: int, last: int) -> YearSpan | None:
        """The part of this span inside [first, last], or None when they do not meet."""
        lo, hi = max(self.first, first), min(self.last, last)
        return YearSpan(lo, hi) if lo <= hi else None
