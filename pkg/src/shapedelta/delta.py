"""Part matching between shapes, shape deltas, and delta application."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import linear_assignment
from .geometry import IDENTITY_QUAT, batched_grid_chamfer, quat_canonical, quat_conj, quat_mul
from .shape import (
    Part,
    ShapeError,
    ShapeFormatError,
    ShapeTree,
    ValidationError,
    bare_shape,
    part_from_dict,
    part_to_dict,
)

FORMAT_VERSION = 1
NEG_EXTENT_TOL = 1e-12


class DeltaError(ShapeError):
    pass


@dataclass(frozen=True)
class PartDelta:
    dc: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dq: tuple[float, float, float, float] = IDENTITY_QUAT
    dr: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def is_zero(self, tol: float = 0.0) -> bool:
        v = np.array(self.dc + self.dr + tuple(np.subtract(self.dq, IDENTITY_QUAT)))
        return bool(np.all(np.abs(v) <= tol))

    def params(self) -> np.ndarray:
        return np.array(self.dc + self.dq + self.dr)


class _Deletion:
    __slots__ = ()

    def __repr__(self):
        return "DELETE"


DELETE = _Deletion()


@dataclass(frozen=True)
class Addition:
    """An added subtree attached under a source part or under an earlier addition's root."""

    anchor_kind: str  # "source" | "added"
    anchor_id: int
    subtree: Part


@dataclass(frozen=True)
class ShapeDelta:
    """Per-source-part actions (indexed by pre-order part id) plus added subtrees."""

    actions: tuple  # PartDelta | DELETE
    additions: tuple[Addition, ...] = ()
    source_hash: str = ""

    @property
    def deleted_ids(self) -> list[int]:
        return [i for i, a in enumerate(self.actions) if a is DELETE]

    def is_identity(self, tol: float = 0.0) -> bool:
        return not self.additions and all(a is not DELETE and a.is_zero(tol) for a in self.actions)


@dataclass
class PartMatching:
    pairs: list[tuple[int, int]]
    unmatched_source: list[int]
    unmatched_target: list[int]
    cost: float = 0.0
    group_costs: list = field(default_factory=list, repr=False)

    @property
    def num_unmatched(self) -> int:
        return len(self.unmatched_source) + len(self.unmatched_target)


def _subtree_ids(shape: ShapeTree, pid: int) -> list[int]:
    out, stack = [], [pid]
    kids = shape.child_ids
    while stack:
        k = stack.pop()
        out.append(k)
        stack.extend(kids[k])
    return out


def match_children(src_parts, tgt_parts, with_cost: bool = True,
                   exact: bool = True) -> tuple[list[tuple[int, int]], float, list]:
    """Match two sibling lists: same-label groups, min-cost on box distance.

    Returns index pairs into the two lists, the summed cost, and per-group
    ``(cost matrix, pairs)`` records.  With ``with_cost=False`` one-to-one
    groups are paired without evaluating their (irrelevant) cost.  ``exact=False``
    uses the faster matrix-product Chamfer, whose roundoff may reorder exact ties.
    """
    groups: dict[str, tuple[list[int], list[int]]] = {}
    for i, p in enumerate(src_parts):
        groups.setdefault(p.semantic, ([], []))[0].append(i)
    for j, p in enumerate(tgt_parts):
        groups.setdefault(p.semantic, ([], []))[1].append(j)
    pairs: list[tuple[int, int]] = []
    total = 0.0
    records = []
    for label in sorted(groups):
        si, tj = groups[label]
        if not si or not tj:
            continue
        if not with_cost and len(si) == 1 and len(tj) == 1:
            pairs.append((si[0], tj[0]))
            continue
        xs = np.stack([src_parts[i].grid_points for i in si])
        ys = np.stack([tgt_parts[j].grid_points for j in tj])
        cost = batched_grid_chamfer(xs, ys, exact=exact)
        local = linear_assignment(cost)
        records.append((cost, local))
        for a, b in local:
            pairs.append((si[a], tj[b]))
            total += cost[a, b]
    pairs.sort()
    return pairs, total, records


def match_shapes(src: ShapeTree, tgt: ShapeTree, with_cost: bool = True, exact: bool = True) -> PartMatching:
    """Recursive semantic-constrained matching starting at the roots.

    ``with_cost=False`` skips cost evaluation where it cannot change the
    result; ``PartMatching.cost`` then only covers contested groups.
    """
    if src.category != tgt.category:
        raise DeltaError(f"category mismatch: {src.category!r} vs {tgt.category!r}")
    pairs = [(0, 0)]
    total = 0.0
    records = []
    stack = [(0, 0)]
    sp, tp = src.parts, tgt.parts
    skids, tkids = src.child_ids, tgt.child_ids
    while stack:
        a, b = stack.pop()
        sc, tc = skids[a], tkids[b]
        if not sc or not tc:
            continue
        local, cost, recs = match_children([sp[i] for i in sc], [tp[j] for j in tc], with_cost, exact)
        total += cost
        records.extend(recs)
        for i, j in local:
            pairs.append((sc[i], tc[j]))
            stack.append((sc[i], tc[j]))
    pairs.sort()
    ms = {i for i, _ in pairs}
    mt = {j for _, j in pairs}
    return PartMatching(
        pairs,
        [i for i in range(src.num_parts) if i not in ms],
        [j for j in range(tgt.num_parts) if j not in mt],
        total,
        records,
    )


def part_delta_between(p: Part, q: Part) -> PartDelta:
    dq = quat_canonical(quat_mul(q.quat, quat_conj(p.quat)))
    return PartDelta(
        tuple(np.subtract(q.center, p.center)),
        tuple(dq),
        tuple(np.subtract(q.extents, p.extents)),
    )


def compute_delta(src: ShapeTree, tgt: ShapeTree, matching: PartMatching | None = None) -> ShapeDelta:
    m = matching or match_shapes(src, tgt, with_cost=False)
    to_tgt = dict(m.pairs)
    actions = []
    for i, p in enumerate(src.parts):
        j = to_tgt.get(i)
        actions.append(DELETE if j is None else part_delta_between(p, tgt.parts[j]))
    to_src = {j: i for i, j in m.pairs}
    unmatched = set(m.unmatched_target)
    additions = []
    for j in m.unmatched_target:
        parent = tgt.parent_ids[j]
        if parent in unmatched:
            continue  # carried inside its ancestor's subtree
        additions.append(Addition("source", to_src[parent], tgt.parts[j]))
    return ShapeDelta(tuple(actions), tuple(additions), src.ordered_key)


def identity_delta(shape: ShapeTree) -> ShapeDelta:
    return ShapeDelta(tuple(PartDelta() for _ in shape.parts), (), shape.ordered_key)


def validate_delta(shape: ShapeTree, delta: ShapeDelta) -> None:
    if len(delta.actions) != shape.num_parts:
        raise DeltaError(
            f"delta covers {len(delta.actions)} parts but source has {shape.num_parts}"
        )
    if delta.source_hash and delta.source_hash != shape.ordered_key:
        raise DeltaError("delta is bound to a different source shape")
    if delta.actions[0] is DELETE:
        raise DeltaError("the root part cannot be deleted")
    for i, a in enumerate(delta.actions):
        if a is not DELETE and not isinstance(a, PartDelta):
            raise DeltaError(f"part {i}: unknown action {a!r}")
        if a is DELETE:
            for k in _subtree_ids(shape, i):
                if delta.actions[k] is not DELETE:
                    raise DeltaError(f"part {k} survives although ancestor {i} is deleted")
    for n, add in enumerate(delta.additions):
        if add.anchor_kind == "source":
            if not 0 <= add.anchor_id < shape.num_parts:
                raise DeltaError(f"addition {n}: anchor {add.anchor_id} out of range")
            if delta.actions[add.anchor_id] is DELETE:
                raise DeltaError(f"addition {n}: anchored to deleted part {add.anchor_id}")
        elif add.anchor_kind == "added":
            if not 0 <= add.anchor_id < n:
                raise DeltaError(f"addition {n}: must anchor to an earlier addition")
        else:
            raise DeltaError(f"addition {n}: unknown anchor kind {add.anchor_kind!r}")


def apply_part_delta(p: Part, d: PartDelta, children=()) -> Part:
    r = np.add(p.extents, d.dr)
    if np.min(r) < -NEG_EXTENT_TOL:
        raise DeltaError(f"delta makes extents negative for part {p.semantic!r}: {r}")
    r = np.maximum(r, 0.0)
    q = quat_canonical(quat_mul(d.dq, p.quat))
    return Part(tuple(np.add(p.center, d.dc)), tuple(q), tuple(r), p.semantic, tuple(children))


def apply_delta(shape: ShapeTree, delta: ShapeDelta) -> ShapeTree:
    """``S + dS``: transform kept parts, drop deleted subtrees, attach additions."""
    validate_delta(shape, delta)
    added_roots: list[Part] = [a.subtree for a in delta.additions]
    # resolve additions anchored to other additions, innermost last
    for n in range(len(delta.additions) - 1, -1, -1):
        add = delta.additions[n]
        if add.anchor_kind == "added":
            host = added_roots[add.anchor_id]
            added_roots[add.anchor_id] = host.with_children(host.children + (added_roots[n],))
    by_anchor: dict[int, list[Part]] = {}
    for add, sub in zip(delta.additions, added_roots):
        if add.anchor_kind == "source":
            by_anchor.setdefault(add.anchor_id, []).append(sub)

    parts, kids = shape.parts, shape.child_ids

    def build(i: int) -> Part:
        children = [build(k) for k in kids[i] if delta.actions[k] is not DELETE]
        children.extend(by_anchor.get(i, ()))
        return apply_part_delta(parts[i], delta.actions[i], children)

    try:
        return bare_shape(shape, build(0))
    except ValidationError as exc:
        raise DeltaError(f"delta result violates taxonomy: {exc}") from exc


def delta_label_multisets(shape: ShapeTree, delta: ShapeDelta) -> tuple[list[str], list[str]]:
    """Sorted labels of deleted source parts and of all added parts."""
    deleted = sorted(shape.parts[i].semantic for i in delta.deleted_ids)
    added = sorted(p.semantic for a in delta.additions for p in a.subtree.walk())
    return deleted, added


# ----------------------------------------------------------------------------
# I/O

def delta_to_dict(delta: ShapeDelta) -> dict:
    actions = []
    for i, a in enumerate(delta.actions):
        if a is DELETE:
            actions.append({"part": i, "kind": "delete"})
        else:
            actions.append({"part": i, "kind": "delta", "dc": list(a.dc), "dq": list(a.dq), "dr": list(a.dr)})
    additions = [
        {"anchor": {"kind": a.anchor_kind, "id": a.anchor_id}, "subtree": part_to_dict(a.subtree)}
        for a in delta.additions
    ]
    return {"format_version": FORMAT_VERSION, "source_hash": delta.source_hash,
            "actions": actions, "additions": additions}


def delta_from_dict(d) -> ShapeDelta:
    if not isinstance(d, dict) or d.get("format_version") != FORMAT_VERSION:
        raise ShapeFormatError("delta: missing or unsupported format_version")
    raw = d.get("actions")
    if not isinstance(raw, list):
        raise ShapeFormatError("delta/actions: expected a list")
    actions: list = [None] * len(raw)
    for n, a in enumerate(raw):
        try:
            i = a["part"]
            if a["kind"] == "delete":
                act = DELETE
            elif a["kind"] == "delta":
                act = PartDelta(tuple(map(float, a["dc"])), tuple(map(float, a["dq"])), tuple(map(float, a["dr"])))
            else:
                raise ShapeFormatError(f"delta/actions[{n}]: unknown kind {a['kind']!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise ShapeFormatError(f"delta/actions[{n}]: malformed ({exc})") from exc
        if not isinstance(i, int) or not 0 <= i < len(raw) or actions[i] is not None:
            raise ShapeFormatError(f"delta/actions[{n}]: bad or repeated part id {i!r}")
        actions[i] = act
    additions = []
    for n, a in enumerate(d.get("additions", [])):
        try:
            anchor = a["anchor"]
            additions.append(Addition(anchor["kind"], int(anchor["id"]),
                                      part_from_dict(a["subtree"], f"delta/additions[{n}]/subtree")))
        except (KeyError, TypeError) as exc:
            raise ShapeFormatError(f"delta/additions[{n}]: malformed ({exc})") from exc
    return ShapeDelta(tuple(actions), tuple(additions), str(d.get("source_hash", "")))


def write_delta(delta: ShapeDelta, path) -> None:
    Path(path).write_text(json.dumps(delta_to_dict(delta), indent=1) + "\n", encoding="utf-8")


def read_delta(path) -> ShapeDelta:
    try:
        return delta_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ShapeFormatError(f"{path}: {exc}") from exc
