"""Shape distances, k-NN neighborhoods and normalized evaluation errors."""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .delta import ShapeDelta, apply_delta, match_shapes
from .shape import ShapeTree, sample_shape_points
from .synth import derive_seed

GEOMETRIC = "geometric"
STRUCTURAL = "structural"
METRICS = (GEOMETRIC, STRUCTURAL)
NUM_POINTS = 2048


def shape_seed(shape: ShapeTree, seed: int) -> int:
    """Per-shape sampling seed: equal shapes (up to sibling order) sample identically."""
    return derive_seed(seed, shape.content_key)


def structural_distance(a: ShapeTree, b: ShapeTree) -> float:
    """Unmatched parts in both shapes over the number of parts (all nodes) of ``a``."""
    # roundoff only reorders candidates whose costs agree to ~1e-16
    m = match_shapes(a, b, with_cost=False, exact=False)
    return m.num_unmatched / a.num_parts


class DistanceCache:
    """Memoized shape samples and pairwise distances under one master seed."""

    def __init__(self, seed: int = 0, num_points: int = NUM_POINTS, max_shapes: int = 4096):
        self.seed = seed
        self.num_points = num_points
        self.max_shapes = max_shapes
        self._samples: OrderedDict[str, tuple[np.ndarray, cKDTree]] = OrderedDict()
        self._dists: dict[tuple[str, str, str], float] = {}

    def samples(self, shape: ShapeTree) -> tuple[np.ndarray, cKDTree]:
        key = shape.content_key
        hit = self._samples.get(key)
        if hit is None:
            pts = sample_shape_points(shape, self.num_points, shape_seed(shape, self.seed))
            hit = (pts, cKDTree(pts))
            self._samples[key] = hit
            if len(self._samples) > self.max_shapes:
                self._samples.popitem(last=False)
        else:
            self._samples.move_to_end(key)
        return hit

    def geometric(self, a: ShapeTree, b: ShapeTree) -> float:
        ka, kb = a.content_key, b.content_key
        if ka == kb:
            return 0.0
        key = (GEOMETRIC,) + ((ka, kb) if ka < kb else (kb, ka))
        d = self._dists.get(key)
        if d is None:
            pa, ta = self.samples(a)
            pb, tb = self.samples(b)
            da, _ = tb.query(pa)
            db, _ = ta.query(pb)
            d = float(np.mean(da * da) + np.mean(db * db))
            self._dists[key] = d
        return d

    def structural(self, a: ShapeTree, b: ShapeTree) -> float:
        key = (STRUCTURAL, a.content_key, b.content_key)
        d = self._dists.get(key)
        if d is None:
            if key[1] == key[2]:
                d = 0.0
            else:
                d = structural_distance(a, b)
            self._dists[key] = d
        return d

    def distance(self, a: ShapeTree, b: ShapeTree, metric: str) -> float:
        if metric == GEOMETRIC:
            return self.geometric(a, b)
        if metric == STRUCTURAL:
            return self.structural(a, b)
        raise ValueError(f"unknown metric {metric!r}")


def geometric_distance(a: ShapeTree, b: ShapeTree, seed: int = 0) -> float:
    """Chamfer distance between 2048-point leaf-box samples of the two shapes."""
    from .geometry import chamfer_distance

    pa = sample_shape_points(a, NUM_POINTS, shape_seed(a, seed))
    pb = sample_shape_points(b, NUM_POINTS, shape_seed(b, seed))
    return chamfer_distance(pa, pb)


def shape_distance(a: ShapeTree, b: ShapeTree, metric: str, seed: int = 0,
                   cache: DistanceCache | None = None) -> float:
    if cache is not None:
        return cache.distance(a, b, metric)
    if metric == GEOMETRIC:
        return geometric_distance(a, b, seed)
    if metric == STRUCTURAL:
        return structural_distance(a, b)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class NeighborhoodTable:
    metric: str
    k: int
    neighbors: list[list[tuple[int, float]]]
    radius: float
    split: str = ""
    ids: list[str] | None = None

    def neighbor_ids(self, i: int) -> list[int]:
        return [j for j, _ in self.neighbors[i]]

    def truncated(self, k: int) -> "NeighborhoodTable":
        nb = [lst[:k] for lst in self.neighbors]
        return NeighborhoodTable(self.metric, k, nb, _mean_radius(nb), self.split, self.ids)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "k": self.k, "r_N": self.radius, "split": self.split,
            "ids": self.ids,
            "neighbors": [[[j, d] for j, d in lst] for lst in self.neighbors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeighborhoodTable":
        nb = [[(int(j), float(x)) for j, x in lst] for lst in d["neighbors"]]
        return cls(d["metric"], int(d["k"]), nb, float(d["r_N"]), d.get("split", ""), d.get("ids"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NeighborhoodTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _mean_radius(neighbors) -> float:
    flat = [d for lst in neighbors for _, d in lst]
    return float(np.mean(flat)) if flat else 0.0


def build_neighborhoods(shapes: Sequence[ShapeTree], k: int, metric: str, seed: int = 0,
                        cache: DistanceCache | None = None, candidates=None,
                        split: str = "") -> NeighborhoodTable:
    """Exact k-NN by exhaustive distances from each source (self excluded).

    ``candidates``, if given, maps each source index to the indices it may
    draw neighbors from (e.g. the members of its synthetic group).
    """
    n = len(shapes)
    if n < 2:
        raise ValueError("need at least two shapes")
    cache = cache or DistanceCache(seed)
    neighbors = []
    for i in range(n):
        pool = range(n) if candidates is None else candidates[i]
        ds = [(cache.distance(shapes[i], shapes[j], metric), j) for j in pool if j != i]
        ds.sort()
        kk = min(k, len(ds))
        neighbors.append([(j, d) for d, j in ds[:kk]])
    return NeighborhoodTable(metric, k, neighbors, _mean_radius(neighbors), split)


def reconstruction_error(pairs, radius: float, metric: str, seed: int = 0,
                         cache: DistanceCache | None = None) -> float:
    """Mean over ``(true target, reconstructed target)`` pairs of ``d / r_N``."""
    if radius <= 0:
        raise ValueError("r_N must be positive")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs")
    total = sum(shape_distance(t, p, metric, seed, cache) for t, p in pairs)
    return total / (radius * len(pairs))


def generation_errors(sources, generated, neighbor_shapes, radius: float, metric: str,
                      seed: int = 0, cache: DistanceCache | None = None) -> tuple[float, float, float]:
    """Quality, coverage and combined errors of generated edits.

    ``generated[i]`` are the modified shapes ``S_i + dS'`` sampled for source
    ``i``; ``neighbor_shapes[i]`` are its ground-truth neighbors.
    """
    if radius <= 0:
        raise ValueError("r_N must be positive")
    eq_terms, ec_terms = [], []
    for gen, nbrs in zip(generated, neighbor_shapes):
        if not gen:
            raise ValueError("empty sample set")
        if not nbrs:
            raise ValueError("empty neighborhood")
        d = np.array([[shape_distance(g, s, metric, seed, cache) for s in nbrs] for g in gen])
        eq_terms.append(d.min(axis=1).mean())
        ec_terms.append(d.min(axis=0).mean())
    if not eq_terms:
        raise ValueError("no sources")
    e_q = float(np.mean(eq_terms)) / radius
    e_c = float(np.mean(ec_terms)) / radius
    e_qc = float(np.mean(np.add(eq_terms, ec_terms))) / radius
    return e_q, e_c, e_qc


def transfer_error(predicted: ShapeDelta, truth: ShapeDelta, source: ShapeTree, radius: float,
                   metric: str, seed: int = 0, cache: DistanceCache | None = None) -> float:
    """``d(S_k + dS_kl, S_k + dS'_kl) / r_N``."""
    if radius <= 0:
        raise ValueError("r_N must be positive")
    return shape_distance(apply_delta(source, truth), apply_delta(source, predicted),
                          metric, seed, cache) / radius
