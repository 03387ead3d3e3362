"""Datasets on disk, pair construction, evaluation protocols, baselines and reports.

All randomness derives from one master seed through :func:`derive_seed`
with a stage name, e.g. ``derive_seed(seed, "eval-pairs", source_id)``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .delta import (
    DELETE,
    Addition,
    PartDelta,
    ShapeDelta,
    apply_delta,
    compute_delta,
    delta_from_dict,
    delta_to_dict,
    identity_delta,
    match_shapes,
    validate_delta,
)
from .metrics import (
    GEOMETRIC,
    METRICS,
    STRUCTURAL,
    DistanceCache,
    NeighborhoodTable,
    build_neighborhoods,
    generation_errors,
)
from .shape import ShapeTree, read_shape, write_shape
from .synth import (
    CATEGORY,
    NUM_VARIANTS,
    SUBTYPES,
    build_group,
    derive_seed,
    ground_truth_transfer,
    is_test_group,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
EXPERIMENTS = ("reconstruction", "generation", "transfer")
BASELINES = ("identity", "retrieval")


class DataError(Exception):
    """Missing or malformed input files."""


# ----------------------------------------------------------------------------
# datasets


@dataclass
class ShapeRecord:
    id: str
    subtype: str
    group: int
    variant: int
    split: str
    shape: ShapeTree


@dataclass
class Dataset:
    category: str
    seed: int
    groups_per_subtype: int
    records: list[ShapeRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def shapes(self) -> list[ShapeTree]:
        return [r.shape for r in self.records]

    def indices(self, split: str | None = None) -> list[int]:
        return [i for i, r in enumerate(self.records) if split is None or r.split == split]

    def group_key(self, i: int) -> tuple[str, int]:
        r = self.records[i]
        return r.subtype, r.group

    def groups(self, split: str | None = None) -> dict[tuple[str, int], list[int]]:
        """``(subtype, group) -> dataset indices`` ordered by variant."""
        out: dict[tuple[str, int], list[int]] = {}
        for i in self.indices(split):
            out.setdefault(self.group_key(i), []).append(i)
        for v in out.values():
            v.sort(key=lambda i: self.records[i].variant)
        return out

    def manifest_hash(self) -> str:
        rows = [(r.id, r.split, r.shape.ordered_key) for r in self.records]
        return hashlib.sha256(json.dumps(rows).encode()).hexdigest()


def synthetic_dataset(groups_per_subtype: int = 10, seed: int = 0, subtypes=SUBTYPES) -> Dataset:
    records = []
    for st in subtypes:
        for g in range(groups_per_subtype):
            grp = build_group(st, g, seed)
            split = "test" if is_test_group(st, g, groups_per_subtype, seed) else "train"
            for v, shape in enumerate(grp.shapes):
                records.append(ShapeRecord(f"{st}-{g:04d}-{v:02d}", st, g, v, split, shape))
    return Dataset(CATEGORY, seed, groups_per_subtype, records)


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in ds.records:
        rel = f"shapes/{r.id}.json"
        write_shape(r.shape, out / rel)
        entries.append({"id": r.id, "file": rel, "subtype": r.subtype, "group": r.group,
                        "variant": r.variant, "split": r.split})
    manifest = {"format_version": 1, "category": ds.category, "seed": ds.seed,
                "groups_per_subtype": ds.groups_per_subtype, "shapes": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out / MANIFEST


def read_dataset(path) -> Dataset:
    p = Path(path)
    mpath = p / MANIFEST if p.is_dir() else p
    if not mpath.exists():
        raise DataError(f"{mpath}: dataset manifest not found")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
        records = [
            ShapeRecord(e["id"], e["subtype"], int(e["group"]), int(e["variant"]), e["split"],
                        read_shape(mpath.parent / e["file"]))
            for e in m["shapes"]
        ]
        return Dataset(m["category"], int(m["seed"]), int(m["groups_per_subtype"]), records)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise DataError(f"{mpath}: {exc}") from exc


# ----------------------------------------------------------------------------
# neighborhoods and pairs


def group_neighborhoods(ds: Dataset, split: str, metric: str, k: int = NUM_VARIANTS - 1,
                        seed: int | None = None, cache: DistanceCache | None = None) -> NeighborhoodTable:
    """k-NN restricted to each shape's own synthetic group (self excluded)."""
    idx = ds.indices(split)
    if len(idx) < 2:
        raise DataError(f"split {split!r} has fewer than two shapes")
    local = {g: i for i, g in enumerate(idx)}
    members: dict[tuple[str, int], list[int]] = {}
    for g in idx:
        members.setdefault(ds.group_key(g), []).append(local[g])
    candidates = [members[ds.group_key(g)] for g in idx]
    cache = cache or DistanceCache(ds.seed if seed is None else seed)
    table = build_neighborhoods([ds.records[g].shape for g in idx], k, metric, cache=cache,
                                candidates=candidates, split=split)
    table.ids = [ds.records[g].id for g in idx]
    return table


@dataclass
class PairRecord:
    source: str
    target: str
    delta: ShapeDelta | None
    error: str = ""


def delta_residual(a: ShapeTree, b: ShapeTree) -> float:
    """Largest box-parameter gap over matched parts, ``inf`` if anything is unmatched."""
    m = match_shapes(a, b, with_cost=False)
    if m.num_unmatched:
        return float("inf")
    pa, pb = a.parts, b.parts
    return max(float(np.max(np.abs(pa[i].box_params() - pb[j].box_params()))) for i, j in m.pairs)


def build_pairs(ds: Dataset, table: NeighborhoodTable, audit: bool = True) -> list[PairRecord]:
    """``compute_delta(S_i, S_j)`` for every source and listed neighbor; failures are recorded."""
    by_id = {r.id: r.shape for r in ds.records}
    ids = table.ids or []
    out = []
    for i, lst in enumerate(table.neighbors):
        src = by_id[ids[i]]
        for j, _ in lst:
            tgt = by_id[ids[j]]
            try:
                d = compute_delta(src, tgt)
                if audit and delta_residual(apply_delta(src, d), tgt) > 1e-9:
                    raise ValueError("stored delta does not reproduce its target")
                out.append(PairRecord(ids[i], ids[j], d))
            except Exception as exc:  # recorded per pair
                out.append(PairRecord(ids[i], ids[j], None, f"{type(exc).__name__}: {exc}"))
    return out


def write_pairs(pairs: list[PairRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            row = {"source": p.source, "target": p.target, "error": p.error,
                   "delta": delta_to_dict(p.delta) if p.delta is not None else None}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_pairs(path) -> list[PairRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            d = delta_from_dict(row["delta"]) if row["delta"] is not None else None
            out.append(PairRecord(row["source"], row["target"], d, row.get("error", "")))
    return out


def training_pairs(ds: Dataset, max_pairs: int | None, seed: int, split: str = "train"):
    """Within-group ``(source, target)`` index pairs (``i != j``), optionally subsampled."""
    all_pairs = [(a, b) for members in ds.groups(split).values() for a in members for b in members if a != b]
    if max_pairs is not None and max_pairs < len(all_pairs):
        rng = np.random.default_rng(derive_seed(seed, "train-pairs"))
        pick = np.sort(rng.choice(len(all_pairs), size=max_pairs, replace=False))
        all_pairs = [all_pairs[k] for k in pick]
    return all_pairs


def pair_data(ds: Dataset, index_pairs) -> list:
    """:class:`~shapedelta.model.PairData` for index pairs, sharing deltas of duplicate shapes."""
    from .model import make_pair_data

    cache: dict[tuple[str, str], object] = {}
    out = []
    for a, b in index_pairs:
        sa, sb = ds.records[a].shape, ds.records[b].shape
        key = (sa.ordered_key, sb.ordered_key)
        pd = cache.get(key)
        if pd is None:
            pd = make_pair_data(sa, compute_delta(sa, sb))
            cache[key] = pd
        out.append(pd)
    return out


# ----------------------------------------------------------------------------
# retrieval baseline


def box_descriptor(shape: ShapeTree) -> np.ndarray:
    """Per label: part count, mean centre and mean extents (zeros when absent)."""
    tax = shape.taxonomy
    out = np.zeros((len(tax.labels), 7))
    for p in shape.parts:
        row = out[tax.index(p.semantic)]
        row[0] += 1
        row[1:4] += p.center
        row[4:7] += p.extents
    present = out[:, 0] > 0
    out[present, 1:] /= out[present, :1]
    return out.ravel()


def transport_delta(delta: ShapeDelta, src_from: ShapeTree, src_to: ShapeTree) -> ShapeDelta:
    """Re-bind ``delta`` to ``src_to`` through the part matching of the two sources."""
    m = match_shapes(src_to, src_from, with_cost=False)
    to_from = dict(m.pairs)
    actions = []
    for i, part in enumerate(src_to.parts):
        k = to_from.get(i)
        a = PartDelta() if k is None else delta.actions[k]
        if a is not DELETE:
            # a shrink copied from a larger part may overshoot this one
            a = PartDelta(a.dc, a.dq, tuple(np.maximum(a.dr, -np.asarray(part.extents)).tolist()))
        actions.append(a)
    actions[0] = actions[0] if actions[0] is not DELETE else PartDelta()
    for i, p in enumerate(src_to.parent_ids):  # pre-order: close deletions over subtrees
        if p >= 0 and actions[p] is DELETE:
            actions[i] = DELETE
    from_to = {k: i for i, k in m.pairs}
    additions = []
    remap: dict[int, int] = {}
    for n, add in enumerate(delta.additions):
        if add.anchor_kind == "source":
            tgt = from_to.get(add.anchor_id)
            if tgt is None or actions[tgt] is DELETE:
                continue
            remap[n] = len(additions)
            additions.append(Addition("source", tgt, add.subtree))
        elif add.anchor_id in remap:
            remap[n] = len(additions)
            additions.append(Addition("added", remap[add.anchor_id], add.subtree))
    out = ShapeDelta(tuple(actions), tuple(additions), src_to.ordered_key)
    validate_delta(src_to, out)
    return out


class RetrievalBaseline:
    """Copies the delta of the most box-similar training pair (not a learned model).

    Similarity is the Euclidean distance between :func:`box_descriptor`
    vectors; a candidate pair ``(k, l)`` is scored by how close ``S_k`` is to
    the query source plus how close its descriptor change is to the wanted one.
    """

    def __init__(self, ds: Dataset, split: str = "train", shortlist: int = 8):
        self.ds = ds
        self.groups = list(ds.groups(split).values())
        self.idx = [i for g in self.groups for i in g]
        self.desc = {i: box_descriptor(ds.records[i].shape) for i in self.idx}
        self.members = {i: g for g in self.groups for i in g}
        self.shortlist = shortlist
        self._mat = np.stack([self.desc[i] for i in self.idx])

    def _nearest_sources(self, shape: ShapeTree) -> list[int]:
        d = np.linalg.norm(self._mat - box_descriptor(shape), axis=1)
        order = np.lexsort((np.arange(len(d)), d))
        return [self.idx[o] for o in order[:self.shortlist]]

    def _best_pair(self, source: ShapeTree, change: np.ndarray) -> tuple[int, int]:
        base = box_descriptor(source)
        best, best_key = None, None
        for k in self._nearest_sources(source):
            for l in self.members[k]:
                if l == k:
                    continue
                score = np.linalg.norm(self.desc[k] - base) + np.linalg.norm(self.desc[l] - self.desc[k] - change)
                key = (score, k, l)
                if best_key is None or key < best_key:
                    best, best_key = (k, l), key
        return best

    def _copy(self, k: int, l: int, source: ShapeTree) -> ShapeDelta:
        sk, sl = self.ds.records[k].shape, self.ds.records[l].shape
        return transport_delta(compute_delta(sk, sl), sk, source)

    def reconstruct(self, source: ShapeTree, target: ShapeTree) -> ShapeDelta:
        return self._copy(*self._best_pair(source, box_descriptor(target) - box_descriptor(source)), source)

    def transfer(self, a_src: ShapeTree, a_tgt: ShapeTree, b_src: ShapeTree) -> ShapeDelta:
        return self._copy(*self._best_pair(b_src, box_descriptor(a_tgt) - box_descriptor(a_src)), b_src)

    def generate(self, source: ShapeTree, count: int) -> list[ShapeDelta]:
        k = self._nearest_sources(source)[0]
        others = [l for l in self.members[k] if l != k][:count]
        return [self._copy(k, l, source) for l in others]


# ----------------------------------------------------------------------------
# experiments and reports


@dataclass
class ExperimentSpec:
    kind: str
    metrics: tuple[str, ...] = METRICS
    split: str = "test"
    k: int | None = None  # None: all other group members, the synthetic neighborhood
    baselines: tuple[str, ...] = ("identity",)
    checkpoint: str | None = None
    seed: int = 0
    pairs_per_source: int | None = None
    num_sources: int = 50
    samples: int = 100
    num_transfers: int = 300

    def __post_init__(self):
        if self.kind not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.kind!r}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ValueError(f"unknown baseline {b!r}")
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")

    @property
    def neighborhood_k(self) -> int:
        if self.k is not None:
            return self.k
        return NUM_VARIANTS - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        d["baselines"] = list(self.baselines)
        return d


@dataclass
class Report:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("experiment", "method", "metric", "error", "value", "r_N", "k", "split",
               "neighborhood", "count")

    def add(self, **row) -> None:
        self.rows.append({c: row.get(c) for c in self.COLUMNS})

    def value(self, experiment: str, method: str, metric: str, error: str) -> float:
        for r in self.rows:
            if (r["experiment"], r["method"], r["metric"], r["error"]) == (experiment, method, metric, error):
                return r["value"]
        raise KeyError((experiment, method, metric, error))

    def extend(self, other: "Report") -> None:
        self.rows.extend(other.rows)
        for k, v in other.meta.items():
            self.meta.setdefault(k, v)

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "rows": self.rows}, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pj, pc = out / f"{stem}.json", out / f"{stem}.csv"
        pj.write_text(self.to_json(), encoding="utf-8")
        pc.write_text(self.to_csv(), encoding="utf-8")
        return pj, pc

    @classmethod
    def read(cls, path) -> "Report":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["rows"], d["meta"])


def config_hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


class Evaluator:
    """Runs the protocols on one dataset split, sharing distances and neighborhoods."""

    def __init__(self, ds: Dataset, seed: int = 0, cache: DistanceCache | None = None):
        self.ds = ds
        self.seed = seed
        self.cache = cache or DistanceCache(seed)
        self._tables: dict[tuple[str, str, int], NeighborhoodTable] = {}
        self._retrieval: RetrievalBaseline | None = None

    def table(self, split: str, metric: str, k: int) -> NeighborhoodTable:
        key = (split, metric, k)
        if key not in self._tables:
            full = (split, metric, NUM_VARIANTS - 1)
            if full not in self._tables:
                self._tables[full] = group_neighborhoods(self.ds, split, metric, NUM_VARIANTS - 1,
                                                         cache=self.cache)
            t = self._tables[full]
            self._tables[key] = t if k >= NUM_VARIANTS - 1 else t.truncated(k)
        return self._tables[key]

    def retrieval(self) -> RetrievalBaseline:
        if self._retrieval is None:
            self._retrieval = RetrievalBaseline(self.ds)
        return self._retrieval

    def _d(self, a: ShapeTree, b: ShapeTree, metric: str) -> float:
        return self.cache.distance(a, b, metric)

    # -- protocols ------------------------------------------------------------

    def eval_pairs(self, spec: ExperimentSpec) -> list[tuple[int, int]]:
        """Dataset index pairs (source, neighbor) evaluated by reconstruction."""
        table = self.table(spec.split, GEOMETRIC, spec.neighborhood_k)
        idx = self.ds.indices(spec.split)
        out = []
        for i, lst in enumerate(table.neighbors):
            nb = sorted(j for j, _ in lst)
            if spec.pairs_per_source is not None and spec.pairs_per_source < len(nb):
                rng = np.random.default_rng(derive_seed(spec.seed, "eval-pairs", table.ids[i]))
                nb = sorted(rng.choice(nb, size=spec.pairs_per_source, replace=False).tolist())
            out.extend((idx[i], idx[j]) for j in nb)
        return out

    def reconstruction(self, spec: ExperimentSpec, model=None) -> Report:
        from .model import decode_batch, encode_deltas, make_pair_data

        rep = Report()
        pairs = self.eval_pairs(spec)
        recs = self.ds.records
        outputs: dict[str, list[ShapeTree]] = {}
        outputs["identity"] = [recs[a].shape for a, _ in pairs]
        if "retrieval" in spec.baselines:
            rb = self.retrieval()
            outputs["retrieval"] = [apply_delta(recs[a].shape, rb.reconstruct(recs[a].shape, recs[b].shape))
                                    for a, b in pairs]
        if model is not None:
            shapes = []
            for s in range(0, len(pairs), 64):
                chunk = pairs[s:s + 64]
                data = [make_pair_data(recs[a].shape, compute_delta(recs[a].shape, recs[b].shape)) for a, b in chunk]
                post = encode_deltas(model, data)
                dec = decode_batch(model, [d.source for d in data], post.mean,
                                   [make_pair_data(d.source) for d in data])
                shapes.extend(apply_delta(d.source, o.delta) for d, o in zip(data, dec))
            outputs["model"] = shapes
        for metric in spec.metrics:
            table = self.table(spec.split, metric, spec.neighborhood_k)
            for method in ("identity", "retrieval", "model"):
                if method not in outputs:
                    continue
                vals = [self._d(recs[b].shape, out, metric) for (a, b), out in zip(pairs, outputs[method])]
                rep.add(experiment="reconstruction", method=method, metric=metric, error="E_r",
                        value=float(np.mean(vals)) / table.radius, r_N=table.radius,
                        k=spec.neighborhood_k, split=spec.split, neighborhood=metric, count=len(pairs))
        for method, outs in outputs.items():
            exact = [self.cache.structural(recs[b].shape, out) == 0.0 for (a, b), out in zip(pairs, outs)]
            rep.add(experiment="reconstruction", method=method, metric=STRUCTURAL, error="structure_match",
                    value=float(np.mean(exact)), r_N=None, k=spec.neighborhood_k, split=spec.split,
                    neighborhood=GEOMETRIC, count=len(pairs))
        return rep

    def generation_sources(self, spec: ExperimentSpec) -> list[int]:
        idx = self.ds.indices(spec.split)
        n = min(spec.num_sources, len(idx))
        rng = np.random.default_rng(derive_seed(spec.seed, "generation-sources"))
        return sorted(rng.choice(idx, size=n, replace=False).tolist())

    def generation(self, spec: ExperimentSpec, model=None) -> Report:
        from .model import generate_edits

        rep = Report()
        recs = self.ds.records
        sources = self.generation_sources(spec)
        local = {g: i for i, g in enumerate(self.ds.indices(spec.split))}
        generated: dict[str, list[list[ShapeTree]]] = {"identity": [[recs[s].shape] for s in sources]}
        if "retrieval" in spec.baselines:
            rb = self.retrieval()
            generated["retrieval"] = [[apply_delta(recs[s].shape, d) for d in rb.generate(recs[s].shape, spec.samples)]
                                      for s in sources]
        if model is not None:
            gen = []
            for s in sources:
                src = recs[s].shape
                edits = generate_edits(model, src, spec.samples, seed=derive_seed(spec.seed, "generate", recs[s].id))
                gen.append([apply_delta(src, e.delta) for e in edits])
            generated["model"] = gen
        idx = self.ds.indices(spec.split)
        for metric in spec.metrics:
            table = self.table(spec.split, metric, spec.neighborhood_k)
            nbrs = [[recs[idx[j]].shape for j in table.neighbor_ids(local[s])] for s in sources]
            for method, gen in generated.items():
                e_q, e_c, e_qc = generation_errors([recs[s].shape for s in sources], gen, nbrs,
                                                   table.radius, metric, cache=self.cache)
                for name, v in (("E_q", e_q), ("E_c", e_c), ("E_qc", e_qc)):
                    rep.add(experiment="generation", method=method, metric=metric, error=name, value=v,
                            r_N=table.radius, k=spec.neighborhood_k, split=spec.split,
                            neighborhood=metric, count=len(sources))
        return rep

    def transfer_cases(self, spec: ExperimentSpec) -> list[tuple[tuple[str, int], tuple[str, int], int, int]]:
        """``(group A, group B, i, j)`` with A != B of one subtype and ``i != j``."""
        groups = self.ds.groups(spec.split)
        by_sub: dict[str, list[tuple[str, int]]] = {}
        for key in sorted(groups):
            by_sub.setdefault(key[0], []).append(key)
        combos = [(a, b) for keys in by_sub.values() for a in keys for b in keys if a != b]
        if not combos:
            return []
        rng = np.random.default_rng(derive_seed(spec.seed, "transfer-cases"))
        out = []
        for _ in range(spec.num_transfers):
            a, b = combos[int(rng.integers(len(combos)))]
            i, j = rng.choice(NUM_VARIANTS, size=2, replace=False).tolist()
            out.append((a, b, i, j))
        return out

    def transfer(self, spec: ExperimentSpec, model=None) -> Report:
        from .model import transfer_edit
        from .synth import SyntheticGroup

        rep = Report()
        recs = self.ds.records
        groups = self.ds.groups(spec.split)

        def group(key) -> SyntheticGroup:
            members = groups[key]
            return SyntheticGroup(key[0], key[1], None, tuple(recs[m].shape for m in members))

        cases = self.transfer_cases(spec)
        truth_shapes, outputs = [], {"identity": [], "oracle": []}
        if "retrieval" in spec.baselines:
            outputs["retrieval"] = []
        if model is not None:
            outputs["model"] = []
        for ka, kb, i, j in cases:
            ga, gb = group(ka), group(kb)
            b_i = gb.shapes[i]
            truth = ground_truth_transfer(ga, i, j, gb)
            t_shape = apply_delta(b_i, truth)
            truth_shapes.append(t_shape)
            outputs["identity"].append(b_i)
            outputs["oracle"].append(t_shape)
            if "retrieval" in outputs:
                outputs["retrieval"].append(apply_delta(b_i, self.retrieval().transfer(ga.shapes[i], ga.shapes[j], b_i)))
            if model is not None:
                d = compute_delta(ga.shapes[i], ga.shapes[j])
                outputs["model"].append(apply_delta(b_i, transfer_edit(model, ga.shapes[i], d, b_i).delta))
        for metric in spec.metrics:
            table = self.table(spec.split, metric, spec.neighborhood_k)
            for method, outs in outputs.items():
                vals = [self._d(t, o, metric) for t, o in zip(truth_shapes, outs)]
                value = float(np.mean(vals)) / table.radius if vals else float("nan")
                rep.add(experiment="transfer", method=method, metric=metric, error="E_t", value=value,
                        r_N=table.radius, k=spec.neighborhood_k, split=spec.split,
                        neighborhood=metric, count=len(cases))
        return rep


def run_experiment(ds: Dataset, spec: ExperimentSpec, model=None, evaluator: Evaluator | None = None,
                   extra_config: dict | None = None) -> Report:
    """Runs one protocol; the identity baseline is always included."""
    if spec.checkpoint and model is None:
        from .train import load_model

        if not Path(spec.checkpoint).exists():
            raise DataError(f"checkpoint {spec.checkpoint} not found")
        model, _ = load_model(spec.checkpoint)
    ev = evaluator or Evaluator(ds, spec.seed)
    rep = getattr(ev, spec.kind)(spec, model)
    hashed = spec.to_dict()
    if spec.checkpoint:
        # identify the weights, not where they happen to live
        hashed["checkpoint"] = hashlib.sha256(Path(spec.checkpoint).read_bytes()).hexdigest()
    rep.meta = {
        "config_hash": config_hash(hashed, ds.manifest_hash(), extra_config or {}),
        "seed": spec.seed,
        "version": f"shapedelta-{__version__}",
        "experiments": [spec.kind],
        "model": model is not None,
    }
    return rep
