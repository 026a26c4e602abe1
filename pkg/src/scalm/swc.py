"""SWC weakness registry: the 35 audited categories and id parsing."""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass
from importlib import resources

from .errors import ParseError, UnknownSwcId

_ID_RE = re.compile(r"^\s*swc[-_]?(\d+)\s*$", re.IGNORECASE)


@functools.total_ordering
@dataclass(frozen=True)
class SwcId:
    number: int

    def __str__(self) -> str:
        return f"SWC-{self.number}"

    def __lt__(self, other: SwcId) -> bool:
        return self.number < other.number


@dataclass(frozen=True)
class SwcCategory:
    id: SwcId
    title: str
    description: str
    keywords: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"id": str(self.id), "title": self.title, "keywords": list(self.keywords)}


@functools.lru_cache(maxsize=1)
def _registry() -> dict[int, SwcCategory]:
    raw = json.loads(resources.files("scalm").joinpath("data/swc_registry.json").read_text("utf-8"))
    entries = {}
    for row in raw:
        number = int(row["id"].split("-")[1])
        entries[number] = SwcCategory(
            id=SwcId(number),
            title=row["title"],
            description=row["description"],
            keywords=tuple(k.lower() for k in row["keywords"]),
        )
    return dict(sorted(entries.items()))


def all_categories() -> list[SwcCategory]:
    """All registry entries, ascending by id."""
    return list(_registry().values())


def lookup(swc: SwcId | int) -> SwcCategory:
    number = swc.number if isinstance(swc, SwcId) else int(swc)
    try:
        return _registry()[number]
    except KeyError:
        raise UnknownSwcId(number) from None


def parse_swc_id(text: str) -> SwcId:
    """Normalize ``SWC-107`` / ``swc107`` / ``Swc_107`` to a registered id.

    Raises ParseError when the text is not an SWC id at all and
    UnknownSwcId when the number is well formed but unregistered.
    """
    if not isinstance(text, str):
        raise ParseError(f"expected an SWC id string, got {type(text).__name__}")
    m = _ID_RE.match(text)
    if m is None:
        raise ParseError(f"not an SWC id: {text!r}")
    number = int(m.group(1))
    if number not in _registry():
        raise UnknownSwcId(number)
    return SwcId(number)


def keywords(swc: SwcId) -> tuple[str, ...]:
    return lookup(swc).keywords
