"""Two-level coarse/fine class hierarchy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    """Immutable coarse -> fine hierarchy with index maps in both directions.

    Indices follow file order. ``fine_to_coarse[i]`` is the parent of fine
    class ``i``.
    """

    coarse_names: tuple[str, ...]
    fine_names: tuple[str, ...]
    fine_to_coarse: tuple[int, ...]
    _children: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "coarse_names", tuple(self.coarse_names))
        object.__setattr__(self, "fine_names", tuple(self.fine_names))
        object.__setattr__(self, "fine_to_coarse", tuple(int(c) for c in self.fine_to_coarse))
        _check_invariants(self.coarse_names, self.fine_names, self.fine_to_coarse)
        children = tuple(
            tuple(i for i, c in enumerate(self.fine_to_coarse) if c == k)
            for k in range(len(self.coarse_names))
        )
        object.__setattr__(self, "_children", children)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_names)

    @property
    def n_fine(self) -> int:
        return len(self.fine_names)

    def _check_fine(self, fine_index: int) -> int:
        if not 0 <= fine_index < self.n_fine:
            raise IndexError(f"fine index {fine_index} out of range [0, {self.n_fine})")
        return int(fine_index)

    def group_of(self, fine_index: int) -> int:
        return self.fine_to_coarse[self._check_fine(fine_index)]

    def children_of(self, coarse_index: int) -> tuple[int, ...]:
        if not 0 <= coarse_index < self.n_coarse:
            raise IndexError(f"coarse index {coarse_index} out of range [0, {self.n_coarse})")
        return self._children[coarse_index]

    def siblings_of(self, fine_index: int) -> frozenset[int]:
        """Fine classes sharing the parent of ``fine_index``, itself included."""
        return frozenset(self._children[self.group_of(fine_index)])

    def complement_of(self, fine_index: int) -> frozenset[int]:
        siblings = self.siblings_of(fine_index)
        return frozenset(i for i in range(self.n_fine) if i not in siblings)

    def coarse_index(self, name: str) -> int:
        return self.coarse_names.index(name)

    def fine_index(self, name: str) -> int:
        return self.fine_names.index(name)

    def to_raw(self) -> list[dict[str, Any]]:
        return [
            {"name": name, "fine": [self.fine_names[i] for i in self._children[k]]}
            for k, name in enumerate(self.coarse_names)
        ]

    def dumps(self) -> str:
        return json.dumps(self.to_raw(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _check_invariants(coarse_names, fine_names, fine_to_coarse):
    if not coarse_names:
        raise TaxonomyError("taxonomy has no coarse classes")
    if len(fine_to_coarse) != len(fine_names):
        raise TaxonomyError("fine_to_coarse length does not match fine_names")
    for names, level in ((coarse_names, "coarse"), (fine_names, "fine")):
        seen = set()
        for name in names:
            if name in seen:
                raise TaxonomyError(f"duplicate {level} class name: {name!r}")
            seen.add(name)
    for name, parent in zip(fine_names, fine_to_coarse):
        if not 0 <= parent < len(coarse_names):
            raise TaxonomyError(f"fine class {name!r} has no valid coarse parent")
    used = set(fine_to_coarse)
    for k, name in enumerate(coarse_names):
        if k not in used:
            raise TaxonomyError(f"coarse class {name!r} has no fine children")


def validate(raw: Any) -> Taxonomy:
    """Build a Taxonomy from a parsed hierarchy file.

    The expected shape is an ordered list of ``{"name": str, "fine": [str, ...]}``
    entries. A bare string at the top level is a fine class with no parent.
    Nested fine entries (anything but a string) mean a deeper tree and are
    rejected.
    """
    if isinstance(raw, dict) and set(raw) == {"coarse"}:
        raw = raw["coarse"]
    if not isinstance(raw, list):
        raise TaxonomyError("hierarchy must be a list of coarse entries")
    coarse_names: list[str] = []
    fine_names: list[str] = []
    fine_to_coarse: list[int] = []
    for entry in raw:
        if isinstance(entry, str):
            raise TaxonomyError(f"orphan fine class (no coarse parent): {entry!r}")
        if not isinstance(entry, dict):
            raise TaxonomyError(f"malformed coarse entry: {entry!r}")
        unknown = set(entry) - {"name", "fine"}
        if unknown:
            raise TaxonomyError(f"unknown keys in coarse entry: {sorted(unknown)}")
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise TaxonomyError(f"coarse entry without a name: {entry!r}")
        children = entry.get("fine", [])
        if not isinstance(children, list):
            raise TaxonomyError(f"fine list of {name!r} must be a list")
        if not children:
            raise TaxonomyError(f"coarse class {name!r} has no fine children")
        k = len(coarse_names)
        coarse_names.append(name)
        for child in children:
            if not isinstance(child, str):
                raise TaxonomyError(
                    f"fine entry under {name!r} is not a name; only two-level hierarchies are supported"
                )
            fine_names.append(child)
            fine_to_coarse.append(k)
    return Taxonomy(tuple(coarse_names), tuple(fine_names), tuple(fine_to_coarse))


def load(path) -> Taxonomy:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"taxonomy file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return validate(json.load(fh))


def gastric() -> Taxonomy:
    """The bundled 4-coarse / 14-fine gastric biopsy hierarchy."""
    text = resources.files("hiclass_mil").joinpath("data/gastric.json").read_text(encoding="utf-8")
    return validate(json.loads(text))


def balanced(n_fine: int, n_coarse: int = 1) -> Taxonomy:
    """Synthetic hierarchy with ``n_fine`` classes split into contiguous, near-equal groups."""
    if n_coarse < 1 or n_fine < n_coarse:
        raise TaxonomyError("need at least one fine class per coarse class")
    sizes = [n_fine // n_coarse + (1 if k < n_fine % n_coarse else 0) for k in range(n_coarse)]
    fine_to_coarse = [k for k, size in enumerate(sizes) for _ in range(size)]
    return Taxonomy(
        tuple(f"C{k}" for k in range(n_coarse)),
        tuple(f"F{i}" for i in range(n_fine)),
        tuple(fine_to_coarse),
    )
