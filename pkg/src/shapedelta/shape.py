"""Hierarchical part trees of oriented boxes, taxonomies and shape file I/O."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import (
    DEFAULT_GRID_M,
    box_grid_points,
    box_surface_area,
    quat_canonical,
    sample_box_surface,
)

FORMAT_VERSION = 1
MAX_DEPTH = 12
QUAT_NORM_TOL = 1e-9


class ShapeError(Exception):
    pass


class ShapeFormatError(ShapeError):
    """Malformed shape or taxonomy file; the message names the offending node path."""


class ValidationError(ShapeError):
    pass


@dataclass(frozen=True, eq=False)
class Part:
    """One oriented bounding box with a semantic label and ordered children."""

    center: tuple[float, float, float]
    quat: tuple[float, float, float, float]
    extents: tuple[float, float, float]
    semantic: str
    children: tuple["Part", ...] = ()

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        q = tuple(float(v) for v in self.quat)
        r = tuple(float(v) for v in self.extents)
        if len(c) != 3 or len(q) != 4 or len(r) != 3:
            raise ValidationError(f"bad box parameter lengths for part {self.semantic!r}")
        if not all(math.isfinite(v) for v in c + q + r):
            raise ValidationError(f"non-finite box parameters for part {self.semantic!r}")
        qn = math.sqrt(sum(v * v for v in q))
        if abs(qn - 1.0) > QUAT_NORM_TOL:
            raise ValidationError(f"quaternion norm {qn!r} != 1 for part {self.semantic!r}")
        if min(r) < 0.0:
            raise ValidationError(f"negative extents {r} for part {self.semantic!r}")
        if q[0] < 0.0 or (q[0] == 0.0 and q != tuple(quat_canonical(q))):
            q = tuple(float(v) for v in quat_canonical(q))
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "extents", r)
        object.__setattr__(self, "children", tuple(self.children))

    @classmethod
    def from_params(cls, center, quat, extents, semantic, children=()) -> "Part":
        """Like the constructor but normalizes ``quat`` first."""
        return cls(center, tuple(quat_canonical(quat)), extents, semantic, tuple(children))

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def with_children(self, children) -> "Part":
        return Part(self.center, self.quat, self.extents, self.semantic, tuple(children))

    def box_params(self) -> np.ndarray:
        return np.array(self.center + self.quat + self.extents)

    @cached_property
    def grid_points(self) -> np.ndarray:
        """Deterministic 6-face grid samples with the default matching grid."""
        pts = box_grid_points(self.center, self.quat, self.extents, DEFAULT_GRID_M)
        pts.setflags(write=False)
        return pts

    def walk(self) -> Iterator["Part"]:
        """Depth-first pre-order traversal."""
        stack = [self]
        while stack:
            p = stack.pop()
            yield p
            stack.extend(reversed(p.children))

    def content_key(self) -> str:
        """Child-order independent digest of this subtree."""
        kids = sorted(ch.content_key() for ch in self.children)
        payload = repr((self.semantic, self.center, self.quat, self.extents, kids))
        return hashlib.sha256(payload.encode()).hexdigest()

    def same_as(self, other: "Part", tol: float = 1e-12) -> bool:
        """Ordered structural equality with box fields compared within ``tol``."""
        if self.semantic != other.semantic or len(self.children) != len(other.children):
            return False
        if np.max(np.abs(self.box_params() - other.box_params())) > tol:
            return False
        return all(a.same_as(b, tol) for a, b in zip(self.children, other.children))


@dataclass(frozen=True)
class Taxonomy:
    labels: tuple[str, ...]
    children_of: dict[str, frozenset[str]] = field(hash=False)

    def __post_init__(self):
        known = set(self.labels)
        for parent, kids in self.children_of.items():
            if parent not in known or not set(kids) <= known:
                raise ValidationError(f"taxonomy references unknown labels under {parent!r}")

    def allows(self, parent: str, child: str) -> bool:
        return child in self.children_of.get(parent, ())

    def index(self, label: str) -> int:
        return self._index[label]

    @cached_property
    def _index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "children_of": {k: sorted(v) for k, v in sorted(self.children_of.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        try:
            labels = tuple(d["labels"])
            children = {k: frozenset(v) for k, v in d["children_of"].items()}
        except (KeyError, TypeError) as exc:
            raise ShapeFormatError(f"taxonomy: missing or malformed field ({exc})") from exc
        return cls(labels, children)


_TAXONOMIES: dict[str, Taxonomy] = {}


def register_taxonomy(category: str, taxonomy: Taxonomy) -> None:
    _TAXONOMIES[category] = taxonomy


def load_taxonomy(category: str) -> Taxonomy:
    """Taxonomy for ``category``; shipped ones live in ``shapedelta/data/<category>.taxonomy.json``."""
    if category not in _TAXONOMIES:
        try:
            text = resources.files("shapedelta.data").joinpath(f"{category}.taxonomy.json").read_text()
        except FileNotFoundError as exc:
            raise ValidationError(f"no taxonomy registered for category {category!r}") from exc
        _TAXONOMIES[category] = Taxonomy.from_dict(json.loads(text))
    return _TAXONOMIES[category]


def read_taxonomy(path) -> Taxonomy:
    try:
        return Taxonomy.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ShapeFormatError(f"taxonomy {path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ShapeTree:
    """A shape ``(P, H)``: parts are the nodes of ``root``; edges are parent/child links."""

    category: str
    taxonomy: Taxonomy
    root: Part
    max_depth: int = MAX_DEPTH

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        tax = self.taxonomy
        if self.root.semantic not in tax._index:
            raise ValidationError(f"root: label {self.root.semantic!r} not in taxonomy")
        stack = [(self.root, "root", 0)]
        while stack:
            part, path, depth = stack.pop()
            if depth > self.max_depth:
                raise ValidationError(f"{path}: depth exceeds {self.max_depth}")
            for i, ch in enumerate(part.children):
                cpath = f"{path}/children[{i}]"
                if ch.semantic not in tax._index:
                    raise ValidationError(f"{cpath}: label {ch.semantic!r} not in taxonomy")
                if not tax.allows(part.semantic, ch.semantic):
                    raise ValidationError(
                        f"{cpath}: {part.semantic!r} -> {ch.semantic!r} not allowed by taxonomy"
                    )
                stack.append((ch, cpath, depth + 1))

    @cached_property
    def parts(self) -> tuple[Part, ...]:
        """All parts in depth-first pre-order; the index is the part id."""
        return tuple(self.root.walk())

    @cached_property
    def parent_ids(self) -> tuple[int, ...]:
        parents = []
        stack = [(self.root, -1)]
        counter = 0
        while stack:
            part, parent = stack.pop()
            parents.append(parent)
            me = counter
            counter += 1
            stack.extend((ch, me) for ch in reversed(part.children))
        return tuple(parents)

    @cached_property
    def child_ids(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in self.parts]
        for i, p in enumerate(self.parent_ids):
            if p >= 0:
                kids[p].append(i)
        return tuple(tuple(k) for k in kids)

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def leaves(self) -> list[Part]:
        return [p for p in self.parts if p.is_leaf]

    def depth(self) -> int:
        def rec(p):
            return 1 + max((rec(c) for c in p.children), default=0)
        return rec(self.root) - 1

    @cached_property
    def content_key(self) -> str:
        """Child-order independent content digest (used for sampling seeds and caching)."""
        return hashlib.sha256((self.category + self.root.content_key()).encode()).hexdigest()

    @cached_property
    def ordered_key(self) -> str:
        """Order-sensitive digest; part ids (and therefore deltas) are bound to it."""
        return hashlib.sha256(json.dumps(shape_to_dict(self), sort_keys=True).encode()).hexdigest()

    def same_as(self, other: "ShapeTree", tol: float = 1e-12) -> bool:
        return self.category == other.category and self.root.same_as(other.root, tol)


def bare_shape(shape: ShapeTree, root: Part) -> ShapeTree:
    """A new tree of the same category/taxonomy (validated)."""
    return ShapeTree(shape.category, shape.taxonomy, root, shape.max_depth)


# ----------------------------------------------------------------------------
# sampling

def sample_box_points(part: Part, grid_m: int = DEFAULT_GRID_M) -> np.ndarray:
    """6 faces x ``grid_m^2`` deterministic grid samples of the part's box."""
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    if grid_m == DEFAULT_GRID_M:
        return part.grid_points
    return box_grid_points(part.center, part.quat, part.extents, grid_m)


def box_distance(p: Part, q: Part, grid_m: int = DEFAULT_GRID_M) -> float:
    """Chamfer distance between the grid samples of two boxes (labels/children ignored)."""
    from .geometry import chamfer_distance

    return chamfer_distance(sample_box_points(p, grid_m), sample_box_points(q, grid_m))


def sample_shape_points(shape: ShapeTree, n: int = 2048, seed: int = 0) -> np.ndarray:
    """``n`` random points on the leaf boxes, allocated by surface area.

    Leaves are visited in a child-order independent order so two trees that
    differ only in sibling order give identical samples for the same seed.
    """
    leaves = sorted(shape.leaves(), key=lambda p: (p.semantic, p.center, p.quat, p.extents))
    if not leaves:
        raise ValidationError("shape has no leaves")
    areas = np.array([box_surface_area(p.extents) for p in leaves])
    total = areas.sum()
    if total <= 0.0:
        raise ValidationError("shape has zero total surface area")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, areas / total)
    chunks = [
        sample_box_surface(p.center, p.quat, p.extents, int(k), rng)
        for p, k in zip(leaves, counts) if k > 0
    ]
    return np.concatenate(chunks, axis=0)


# ----------------------------------------------------------------------------
# I/O

def part_to_dict(part: Part) -> dict:
    return {
        "semantic": part.semantic,
        "box": {"c": list(part.center), "q": list(part.quat), "r": list(part.extents)},
        "children": [part_to_dict(ch) for ch in part.children],
    }


def part_from_dict(d, path: str = "root") -> Part:
    if not isinstance(d, dict):
        raise ShapeFormatError(f"{path}: expected an object")
    try:
        semantic = d["semantic"]
        box = d["box"]
        c, q, r = box["c"], box["q"], box["r"]
        raw_children = d.get("children", [])
    except (KeyError, TypeError) as exc:
        raise ShapeFormatError(f"{path}: missing field {exc}") from exc
    if not isinstance(semantic, str):
        raise ShapeFormatError(f"{path}/semantic: expected a string")
    for name, v, k in (("c", c, 3), ("q", q, 4), ("r", r, 3)):
        if not (isinstance(v, list) and len(v) == k and all(isinstance(x, (int, float)) for x in v)):
            raise ShapeFormatError(f"{path}/box/{name}: expected {k} numbers")
    if not isinstance(raw_children, list):
        raise ShapeFormatError(f"{path}/children: expected a list")
    children = tuple(part_from_dict(ch, f"{path}/children[{i}]") for i, ch in enumerate(raw_children))
    try:
        return Part(tuple(c), tuple(q), tuple(r), semantic, children)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def shape_to_dict(shape: ShapeTree) -> dict:
    return {"format_version": FORMAT_VERSION, "category": shape.category, "root": part_to_dict(shape.root)}


def shape_from_dict(d, taxonomy: Taxonomy | None = None) -> ShapeTree:
    if not isinstance(d, dict):
        raise ShapeFormatError("top level: expected an object")
    if d.get("format_version") != FORMAT_VERSION:
        raise ShapeFormatError(f"top level: unsupported format_version {d.get('format_version')!r}")
    category = d.get("category")
    if not isinstance(category, str):
        raise ShapeFormatError("top level/category: expected a string")
    root = part_from_dict(d.get("root"), "root")
    return ShapeTree(category, taxonomy or load_taxonomy(category), root)


def write_shape(shape: ShapeTree, path) -> None:
    Path(path).write_text(json.dumps(shape_to_dict(shape), indent=1) + "\n", encoding="utf-8")


def read_shape(path, taxonomy: Taxonomy | None = None) -> ShapeTree:
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ShapeFormatError(f"{path}: {exc}") from exc
    return shape_from_dict(d, taxonomy)
