"""Bundled specifications with their expected diagnostics and plan summaries.

Each entry is a ``<name>.iotecs`` file plus a ``<name>.json`` sidecar holding
the expected diagnostic codes, the expected plan summary and a provenance tag
for every expected value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from ..errors import EdgeStressError


class CorpusError(EdgeStressError):
    pass


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    text: str
    description: str
    expected_codes: tuple[str, ...]
    plan: Optional[dict] = None
    provenance: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not any(c.startswith("E-") for c in self.expected_codes)


def _entry(name: str, text: str, meta: dict) -> CorpusEntry:
    try:
        entry = CorpusEntry(
            name=meta["name"],
            text=text,
            description=meta["description"],
            expected_codes=tuple(meta["expected_codes"]),
            plan=meta.get("plan"),
            provenance=meta["provenance"],
        )
    except KeyError as exc:
        raise CorpusError(f"corpus sidecar {name}.json lacks {exc}") from None
    if entry.name != name:
        raise CorpusError(f"corpus sidecar {name}.json names itself {entry.name!r}")
    if entry.valid != meta.get("valid"):
        raise CorpusError(f"corpus sidecar {name}.json has an inconsistent 'valid' flag")
    untagged = {"expected_codes"} | ({"plan"} if entry.plan is not None else set())
    untagged -= set(entry.provenance)
    if untagged:
        raise CorpusError(f"corpus entry {name} lacks provenance for {sorted(untagged)}")
    return entry


def load_corpus() -> list[CorpusEntry]:
    """All entries sorted by name; a spec without a sidecar (or vice versa) is an error."""
    root = resources.files(__name__)
    specs = {p.name[: -len(".iotecs")]: p for p in root.iterdir() if p.name.endswith(".iotecs")}
    sidecars = {p.name[: -len(".json")]: p for p in root.iterdir() if p.name.endswith(".json")}
    if set(specs) != set(sidecars):
        raise CorpusError(f"unpaired corpus files: {sorted(set(specs) ^ set(sidecars))}")
    entries = []
    for name in sorted(specs):
        try:
            meta = json.loads(sidecars[name].read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"corpus sidecar {name}.json is not JSON: {exc}") from None
        entries.append(_entry(name, specs[name].read_text(encoding="utf-8"), meta))
    return entries


def get(name: str) -> CorpusEntry:
    for entry in load_corpus():
        if entry.name == name:
            return entry
    raise KeyError(name)
