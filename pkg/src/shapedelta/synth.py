"""Procedural chair / sofa / stool families with ground-truth edit correspondence.

Every group draws 8 global parameters and expands them into 96 structural
variants.  A variant is the product of four independent axes; the flat index
is ``back * 24 + legs * 12 + arms * 4 + stretcher``.

Variant enumeration (normative for this dataset):

========== ===================================================================
back       0 solid panel; 1 frame + 3 vertical bars; 2 frame + 3 horizontal
           bars; 3 frame only (two posts and a top rail)
legs       0 long legs; 1 short legs (60 % of ``h_leg``)
arms       0 none; 1 armrest + front support; 2 armrest + front and back
           supports (one ``arm`` node per side)
stretcher  0 squared (4 bars); 1 H-like (3 bars); 2 X-like (2 diagonal
           bars); 3 none
========== ===================================================================

Sofas have no leg base (legs/stretcher axes do nothing), stools have no back
and no arms.  Coordinates: ``y`` up, ``x`` across, ``z`` front.  All variants
of one group share one normalization transform (centre of their joint
bounding box, scaled into the unit sphere), so an edit only moves the parts
it touches.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import astuple, dataclass, fields
from functools import lru_cache

import numpy as np

from .delta import ShapeDelta, compute_delta, identity_delta
from .geometry import IDENTITY_QUAT, quat_from_axis_angle, quat_to_matrix
from .shape import Part, ShapeTree, load_taxonomy

CATEGORY = "synthetic_chair"
SUBTYPES = ("chair", "sofa", "stool")
AXES = ("back", "legs", "arms", "stretcher")
AXIS_SIZES = (4, 2, 3, 4)
NUM_VARIANTS = 96

STRETCHER_HEIGHT = 0.03
SHORT_LEG_FACTOR = 0.6
BACK_BAR_WIDTH = 0.05  # fraction of w_back
BACK_POST_WIDTH = 0.1  # fraction of w_back
BACK_RAIL_HEIGHT = 0.15  # fraction of h_back
ARM_HEIGHT = 0.35  # armrest top above the seat, fraction of h_back
ARMREST_THICKNESS = 0.04
SOFA_SEAT_EXTRA = 0.3

PARAM_RANGES = {
    "w_leg": (0.04, 0.1),
    "h_leg": (0.3, 1.2),
    "w_seat": (0.8, 1.6),
    "d_seat": (0.8, 1.6),
    "h_seat": (0.05, 0.2),
    "h_back": (0.3, 1.2),
    "w_back": (0.8, 1.6),
    "d_back": (0.04, 0.12),
}

# axes that have no effect on (and so no correspondence in) a subtype
INAPPLICABLE = {
    "chair": frozenset(),
    "sofa": frozenset({"legs", "stretcher"}),
    "stool": frozenset({"back", "arms"}),
}


@dataclass(frozen=True)
class GlobalParams:
    w_leg: float
    h_leg: float
    w_seat: float
    d_seat: float
    h_seat: float
    h_back: float
    w_back: float
    d_back: float


@dataclass(frozen=True)
class VariantIndex:
    back: int
    legs: int
    arms: int
    stretcher: int

    def __post_init__(self):
        for name, size in zip(AXES, AXIS_SIZES):
            v = getattr(self, name)
            if not 0 <= v < size:
                raise ValueError(f"{name} variant {v} out of range 0..{size - 1}")

    @property
    def flat(self) -> int:
        return self.back * 24 + self.legs * 12 + self.arms * 4 + self.stretcher

    @classmethod
    def from_flat(cls, flat: int) -> "VariantIndex":
        if not 0 <= flat < NUM_VARIANTS:
            raise ValueError(f"flat variant index {flat} out of range")
        return cls(flat // 24, (flat // 12) % 2, (flat // 4) % 3, flat % 4)

    def changed_axes(self, other: "VariantIndex") -> frozenset[str]:
        return frozenset(a for a in AXES if getattr(self, a) != getattr(other, a))


@dataclass(frozen=True)
class SyntheticGroup:
    subtype: str
    group_id: int
    params: GlobalParams
    shapes: tuple[ShapeTree, ...]

    @property
    def transferable(self) -> dict[str, bool]:
        return {a: a not in INAPPLICABLE[self.subtype] for a in AXES}


def derive_seed(*parts) -> int:
    h = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def sample_global_params(seed: int) -> GlobalParams:
    rng = np.random.default_rng(seed)
    vals = {f.name: float(rng.uniform(*PARAM_RANGES[f.name])) for f in fields(GlobalParams)}
    return GlobalParams(**vals)


# ----------------------------------------------------------------------------
# grammar


def _leaf(label, center, extents, quat=IDENTITY_QUAT):
    return Part(tuple(map(float, center)), tuple(quat), tuple(map(float, extents)), label)


def _corners(p: Part) -> np.ndarray:
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    return (signs * p.extents) @ quat_to_matrix(p.quat).T + p.center


def _node(label, children) -> Part:
    """Internal node whose box is the axis-aligned hull of its leaves."""
    pts = np.concatenate([_corners(q) for ch in children for q in ch.walk() if q.is_leaf])
    lo, hi = pts.min(0), pts.max(0)
    return Part(tuple((lo + hi) / 2), IDENTITY_QUAT, tuple((hi - lo) / 2), label, tuple(children))


def _back(p: GlobalParams, v: int, y0: float) -> Part:
    zb = -p.d_seat / 2 + p.d_back / 2
    hw, hh, hd = p.w_back / 2, p.h_back / 2, p.d_back / 2
    if v == 0:
        return _node("back", [_leaf("back_surface", (0, y0 + hh, zb), (hw, hh, hd))])
    post = BACK_POST_WIDTH * p.w_back
    rail = BACK_RAIL_HEIGHT * p.h_back
    inner_hw = hw - post
    kids = [
        _leaf("back_post", (-hw + post / 2, y0 + hh, zb), (post / 2, hh, hd)),
        _leaf("back_post", (hw - post / 2, y0 + hh, zb), (post / 2, hh, hd)),
        _leaf("back_rail", (0, y0 + p.h_back - rail / 2, zb), (inner_hw, rail / 2, hd)),
    ]
    open_h = p.h_back - rail
    bar = BACK_BAR_WIDTH * p.w_back
    if v == 1:
        for k in (-1, 0, 1):
            kids.append(_leaf("back_bar", (k * inner_hw / 2, y0 + open_h / 2, zb),
                              (bar / 2, open_h / 2, 0.6 * hd)))
    elif v == 2:
        for k in (1, 2, 3):
            kids.append(_leaf("back_bar", (0, y0 + k * open_h / 4, zb),
                              (inner_hw, bar / 2, 0.6 * hd)))
    return _node("back", kids)


def _arms(p: GlobalParams, v: int, y0: float) -> list[Part]:
    if v == 0:
        return []
    aw = max(p.w_leg, 0.05)
    top = y0 + ARM_HEIGHT * p.h_back
    z_mid = -p.d_seat / 2 + p.d_back + p.d_seat / 4
    support_h = top - ARMREST_THICKNESS - y0
    arms = []
    for side in (-1, 1):
        x = side * (p.w_seat / 2 - aw / 2)
        kids = [_leaf("arm_rest", (x, top - ARMREST_THICKNESS / 2, z_mid),
                      (aw / 2, ARMREST_THICKNESS / 2, p.d_seat / 4))]
        zs = [z_mid + p.d_seat / 4 - aw / 2]
        if v == 2:
            zs.append(z_mid - p.d_seat / 4 + aw / 2)
        for z in zs:
            kids.append(_leaf("arm_support", (x, y0 + support_h / 2, z), (aw / 2, support_h / 2, aw / 2)))
        arms.append(_node("arm", kids))
    return arms


def _base(p: GlobalParams, legs: int, stretcher: int, leg_h: float) -> Part:
    hl = p.w_leg / 2
    xl, zl = p.w_seat / 2 - hl, p.d_seat / 2 - hl
    kids = [
        _leaf("leg", (sx * xl, leg_h / 2, sz * zl), (hl, leg_h / 2, hl))
        for sx in (-1, 1) for sz in (-1, 1)
    ]
    ys = 0.3 * leg_h
    hs = STRETCHER_HEIGHT / 2
    t = 0.6 * hl
    if stretcher == 0:
        kids += [
            _leaf("stretcher_bar", (0, ys, -zl), (xl, hs, t)),
            _leaf("stretcher_bar", (0, ys, zl), (xl, hs, t)),
            _leaf("stretcher_bar", (-xl, ys, 0), (t, hs, zl)),
            _leaf("stretcher_bar", (xl, ys, 0), (t, hs, zl)),
        ]
    elif stretcher == 1:
        kids += [
            _leaf("stretcher_bar", (-xl, ys, 0), (t, hs, zl)),
            _leaf("stretcher_bar", (xl, ys, 0), (t, hs, zl)),
            _leaf("stretcher_bar", (0, ys, 0), (xl, hs, t)),
        ]
    elif stretcher == 2:
        half_len = math.hypot(xl, zl)
        ang = math.atan2(zl, xl)
        for a in (-ang, ang):
            q = tuple(quat_from_axis_angle((0, 1, 0), a))
            kids.append(_leaf("stretcher_bar", (0, ys, 0), (half_len, hs, t), q))
    return _node("base", kids)


def _build_raw(p: GlobalParams, v: VariantIndex, subtype: str) -> Part:
    if subtype == "sofa":
        leg_h = 0.0
        seat_h = p.h_seat + SOFA_SEAT_EXTRA
    else:
        leg_h = p.h_leg * (SHORT_LEG_FACTOR if v.legs == 1 else 1.0)
        seat_h = p.h_seat
    y1 = leg_h + seat_h
    kids = []
    if subtype != "stool":
        kids.append(_back(p, v.back, y1))
    kids.append(_node("seat", [_leaf("seat_surface", (0, leg_h + seat_h / 2, 0),
                                     (p.w_seat / 2, seat_h / 2, p.d_seat / 2))]))
    if subtype != "stool":
        kids.extend(_arms(p, v.arms, y1))
    if subtype != "sofa":
        kids.append(_base(p, v.legs, v.stretcher, leg_h))
    return _node("chair", kids)


def _transform(part: Part, shift: np.ndarray, scale: float) -> Part:
    return Part(
        tuple((np.array(part.center) - shift) * scale),
        part.quat,
        tuple(np.array(part.extents) * scale),
        part.semantic,
        tuple(_transform(ch, shift, scale) for ch in part.children),
    )


@lru_cache(maxsize=256)
def _normalization(p: GlobalParams, subtype: str) -> tuple[tuple[float, ...], float]:
    pts = np.concatenate([
        _corners(q)
        for flat in range(NUM_VARIANTS)
        for q in _build_raw(p, VariantIndex.from_flat(flat), subtype).walk() if q.is_leaf
    ])
    shift = (pts.min(0) + pts.max(0)) / 2
    radius = np.linalg.norm(pts - shift, axis=1).max()
    return tuple(shift), float(1.0 / radius)


def build_variant(params: GlobalParams, v: VariantIndex | int, subtype: str = "chair",
                  normalize: bool = True) -> ShapeTree:
    """One of the 96 structural variants of a parameter set."""
    if subtype not in SUBTYPES:
        raise ValueError(f"unknown subtype {subtype!r}")
    if isinstance(v, int):
        v = VariantIndex.from_flat(v)
    root = _build_raw(params, v, subtype)
    if normalize:
        shift, scale = _normalization(params, subtype)
        root = _transform(root, np.array(shift), scale)
    return ShapeTree(CATEGORY, load_taxonomy(CATEGORY), root)


def build_group(subtype: str, group_id: int, seed: int) -> SyntheticGroup:
    params = sample_global_params(derive_seed(seed, subtype, group_id))
    shapes = tuple(build_variant(params, i, subtype) for i in range(NUM_VARIANTS))
    return SyntheticGroup(subtype, group_id, params, shapes)


def generate_dataset(groups_per_subtype: int = 10, seed: int = 0,
                     subtypes=SUBTYPES) -> list[SyntheticGroup]:
    if groups_per_subtype < 1:
        raise ValueError("need at least one group per subtype")
    return [build_group(st, g, seed) for st in subtypes for g in range(groups_per_subtype)]


def is_test_group(subtype: str, group_id: int, groups_per_subtype: int, seed: int,
                  test_fraction: float = 0.2) -> bool:
    """Group-level split: the ``test_fraction`` of groups with the lowest hash are held out."""
    n_test = max(1, round(test_fraction * groups_per_subtype)) if groups_per_subtype > 1 else 0
    ranked = sorted(range(groups_per_subtype), key=lambda g: derive_seed("split", seed, subtype, g))
    return group_id in ranked[:n_test]


def effective_axes(subtype: str, i: int, j: int) -> frozenset[str]:
    """Variant axes that actually differ between shapes ``i`` and ``j`` of ``subtype``."""
    return VariantIndex.from_flat(i).changed_axes(VariantIndex.from_flat(j)) - INAPPLICABLE[subtype]


def transfer_applicable(subtype_a: str, subtype_b: str, i: int, j: int) -> bool:
    return not (effective_axes(subtype_a, i, j) & INAPPLICABLE[subtype_b])


def analogous_variant(subtype_a: str, i: int, j: int) -> int:
    """Variant ``i`` with only the axes the edit ``i -> j`` changes in ``subtype_a`` taken from ``j``."""
    vi, vj = VariantIndex.from_flat(i), VariantIndex.from_flat(j)
    axes = effective_axes(subtype_a, i, j)
    return VariantIndex(**{a: getattr(vj if a in axes else vi, a) for a in AXES}).flat


def ground_truth_transfer(group_a: SyntheticGroup, i: int, j: int, group_b: SyntheticGroup) -> ShapeDelta:
    """The analogue in ``group_b`` of the edit ``A_i -> A_j``, or identity if it has none.

    Axes the edit does not change in ``A`` (because its subtype ignores them)
    are held at ``i`` in ``B`` too.
    """
    b_i = group_b.shapes[i]
    if not effective_axes(group_a.subtype, i, j) or not transfer_applicable(group_a.subtype, group_b.subtype, i, j):
        return identity_delta(b_i)
    return compute_delta(b_i, group_b.shapes[analogous_variant(group_a.subtype, i, j)])


def params_as_tuple(p: GlobalParams) -> tuple[float, ...]:
    return astuple(p)
