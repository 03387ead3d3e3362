"""Source-conditioned variational autoencoder over shape deltas.

Trees are processed level by level: all parts at one depth across a
minibatch go through a network in one call, and child sets are padded and
max-pooled.  Part ids inside each tree follow the pre-order of the source
shape, so a parent always precedes its children.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .assignment import linear_assignment
from .delta import (
    DELETE,
    Addition,
    PartDelta,
    ShapeDelta,
    apply_part_delta,
    part_delta_between,
    validate_delta,
)
from .geometry import DEFAULT_GRID_M, quat_canonical, unit_box_grid
from .nn import FeatureNet, SetPool, check_finite, init_linear, leaky
from .shape import Part, ShapeTree, Taxonomy

log = logging.getLogger(__name__)

BOX_DIM = 10
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    feature_width: int = 64
    latent_width: int = 0  # 0: same as feature_width
    num_slots: int = 10
    max_depth: int = 12
    skip_connections: bool = True
    group_norm: bool = True
    leaf_classifier: bool = True
    box_deltas: bool = True
    dtype: str = "float32"

    @property
    def latent(self) -> int:
        return self.latent_width or self.feature_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class LossWeights:
    box_delta: float = 10.0
    kl: float = 0.05
    added_box: float = 20.0
    leaf: float = 0.1


@dataclass
class LatentPosterior:
    mean: torch.Tensor
    log_variance: torch.Tensor


# ----------------------------------------------------------------------------
# differentiable box geometry


@lru_cache(maxsize=4)
def _grid(dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor(unit_box_grid(DEFAULT_GRID_M), dtype=dtype)


_IDENTITY = (1.0, 0.0, 0.0, 0.0)


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = quat_normalize(q).unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def decode_box(raw: torch.Tensor) -> torch.Tensor:
    """Network output -> box params with a unit quaternion biased towards identity."""
    q = quat_normalize(raw[..., 3:7] + raw.new_tensor(_IDENTITY))
    return torch.cat([raw[..., :3], q, raw[..., 7:10]], dim=-1)


def compose_box(box: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """``P + dP`` for decoded deltas ``delta = (dc, dq, dr)`` with ``dq`` normalized."""
    q = quat_mul(delta[..., 3:7], box[..., 3:7])
    return torch.cat([box[..., :3] + delta[..., :3], q, box[..., 7:10] + delta[..., 7:10]], dim=-1)


def box_points(box: torch.Tensor) -> torch.Tensor:
    """``(..., 10)`` box params -> ``(..., 96, 3)`` face-grid points."""
    grid = _grid(box.dtype)
    rot = quat_matrix(box[..., 3:7])
    scaled = grid * box[..., None, 7:10]
    return scaled @ rot.transpose(-1, -2) + box[..., None, :3]


def _nearest(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-neighbour indices both ways between batched point sets (no gradient)."""
    with torch.no_grad():
        d = torch.cdist(a, b)
        return d.min(dim=-1).indices, d.min(dim=-2).indices


def _gather_points(pts: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return pts.gather(-2, idx[..., None].expand(idx.shape + (3,)))


def paired_chamfer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Chamfer between matching point sets ``a[k]``, ``b[k]``: ``(K, P, 3), (K, Q, 3) -> (K,)``.

    Only the nearest pairs enter the graph, which gives the same gradient as
    differentiating the min directly.
    """
    ia, ib = _nearest(a, b)
    da = ((a - _gather_points(b, ia)) ** 2).sum(-1).mean(-1)
    db = ((b - _gather_points(a, ib)) ** 2).sum(-1).mean(-1)
    return da + db


def box_distance_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return paired_chamfer(box_points(a), box_points(b))


def cost_to_slots(gt_pts: torch.Tensor, slot_pts: torch.Tensor) -> torch.Tensor:
    """``(G, P, 3)`` vs ``(G, n, Q, 3)`` -> ``(G, n)`` Chamfer costs."""
    n = slot_pts.shape[1]
    return paired_chamfer(gt_pts[:, None].expand(-1, n, -1, -1), slot_pts)


# ----------------------------------------------------------------------------
# per-pair data


@dataclass
class PairData:
    """Array view of a source shape and (optionally) one delta bound to it."""

    source: ShapeTree
    box: np.ndarray
    label: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    action: np.ndarray  # 0 = part delta, 1 = deletion
    dparams: np.ndarray
    tgt_box: np.ndarray
    add_box: np.ndarray
    add_label: np.ndarray
    add_parent: np.ndarray  # < N: source part id, else N + index of an added part
    add_depth: np.ndarray
    add_leaf: np.ndarray
    delta: ShapeDelta | None = None

    @property
    def num_parts(self) -> int:
        return len(self.label)

    @property
    def num_added(self) -> int:
        return len(self.add_label)


def _resolved_additions(delta: ShapeDelta) -> list[tuple[int, Part]]:
    """Additions as ``(source anchor, full subtree)`` with added-to-added anchors folded in."""
    roots = [a.subtree for a in delta.additions]
    for n in range(len(delta.additions) - 1, -1, -1):
        add = delta.additions[n]
        if add.anchor_kind == "added":
            host = roots[add.anchor_id]
            roots[add.anchor_id] = host.with_children(host.children + (roots[n],))
    return [(a.anchor_id, r) for a, r in zip(delta.additions, roots) if a.anchor_kind == "source"]


def make_pair_data(shape: ShapeTree, delta: ShapeDelta | None = None) -> PairData:
    tax = shape.taxonomy
    parts = shape.parts
    n = len(parts)
    box = np.stack([p.box_params() for p in parts])
    label = np.array([tax.index(p.semantic) for p in parts], dtype=np.int64)
    parent = np.array(shape.parent_ids, dtype=np.int64)
    depth = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        depth[i] = depth[parent[i]] + 1
    action = np.zeros(n, dtype=np.int64)
    dparams = np.tile(np.array(PartDelta().params()), (n, 1))
    tgt_box = box.copy()
    add_box, add_label, add_parent, add_depth, add_leaf = [], [], [], [], []
    if delta is not None:
        validate_delta(shape, delta)
        for i, a in enumerate(delta.actions):
            if a is DELETE:
                action[i] = 1
            else:
                dparams[i] = a.params()
                tgt_box[i] = apply_part_delta(parts[i], a).box_params()
        for anchor, sub in _resolved_additions(delta):
            stack = [(sub, anchor, depth[anchor] + 1)]
            while stack:
                p, par, d = stack.pop()
                me = n + len(add_label)
                add_box.append(p.box_params())
                add_label.append(tax.index(p.semantic))
                add_parent.append(par)
                add_depth.append(d)
                add_leaf.append(p.is_leaf)
                stack.extend((ch, me, d + 1) for ch in reversed(p.children))
    return PairData(
        shape, box, label, parent, depth, action, dparams, tgt_box,
        np.array(add_box, dtype=float).reshape(-1, BOX_DIM),
        np.array(add_label, dtype=np.int64),
        np.array(add_parent, dtype=np.int64),
        np.array(add_depth, dtype=np.int64),
        np.array(add_leaf, dtype=bool),
        delta,
    )


def _padded(parents, kids) -> tuple[np.ndarray, np.ndarray]:
    cmax = max(len(kids[p]) for p in parents)
    pad = np.zeros((len(parents), cmax), dtype=np.int64)
    mask = np.zeros((len(parents), cmax), dtype=bool)
    for r, p in enumerate(parents):
        ks = kids[p]
        pad[r, :len(ks)] = ks
        mask[r, :len(ks)] = True
    return pad, mask


class Batch:
    """Several :class:`PairData` concatenated with global node indices.

    Source parts occupy ``[0, M)``; added parts ``[M, M + Q)`` in the
    extended (source plus additions) tree.
    """

    def __init__(self, pairs: list[PairData], taxonomy: Taxonomy, dtype: torch.dtype):
        self.pairs = pairs
        self.size = len(pairs)
        sizes = [p.num_parts for p in pairs]
        asizes = [p.num_added for p in pairs]
        src_off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        add_off = np.concatenate([[0], np.cumsum(asizes)[:-1]]).astype(np.int64)
        M, Q = int(sum(sizes)), int(sum(asizes))
        self.M, self.Q = M, Q
        self.src_off = src_off
        self.roots = torch.as_tensor(src_off)

        cat = np.concatenate
        parent = cat([np.where(p.parent >= 0, p.parent + o, -1) for p, o in zip(pairs, src_off)])
        depth = cat([p.depth for p in pairs])
        label = cat([p.label for p in pairs])
        pair_of = np.repeat(np.arange(len(pairs)), sizes)
        add_parent = np.zeros(Q, dtype=np.int64)
        for b, p in enumerate(pairs):
            n = p.num_parts
            ap = p.add_parent
            add_parent[add_off[b]:add_off[b] + len(ap)] = np.where(
                ap < n, ap + src_off[b], M + add_off[b] + ap - n)
        add_depth = cat([p.add_depth for p in pairs]) if Q else np.zeros(0, np.int64)
        add_label = cat([p.add_label for p in pairs]) if Q else np.zeros(0, np.int64)
        add_leaf = cat([p.add_leaf for p in pairs]) if Q else np.zeros(0, bool)
        add_box = cat([p.add_box for p in pairs]) if Q else np.zeros((0, BOX_DIM))

        self.parent, self.depth, self.label, self.pair_of = parent, depth, label, pair_of
        self.add_parent, self.add_depth, self.add_label, self.add_leaf = add_parent, add_depth, add_label, add_leaf
        self.action = cat([p.action for p in pairs])
        self.allows_kids = np.array([bool(taxonomy.children_of.get(lab)) for lab in taxonomy.labels])
        T = len(taxonomy.labels)

        t = lambda a: torch.as_tensor(a, dtype=dtype)
        self.box = t(cat([p.box for p in pairs]))
        self.dparams = t(cat([p.dparams for p in pairs]))
        self.tgt_box = t(cat([p.tgt_box for p in pairs]))
        self.add_box_t = t(add_box)
        ext_label = cat([label, add_label])
        self.onehot = F.one_hot(torch.as_tensor(ext_label), T).to(dtype)
        self.label_t = torch.as_tensor(label)
        self.add_label_t = torch.as_tensor(add_label)
        self.action_t = torch.as_tensor(self.action)
        self.pair_t = torch.as_tensor(pair_of)

        # source-tree children and extended-tree children
        src_kids: list[list[int]] = [[] for _ in range(M)]
        for i, p in enumerate(parent):
            if p >= 0:
                src_kids[p].append(i)
        ext_kids: list[list[int]] = [list(k) for k in src_kids] + [[] for _ in range(Q)]
        add_kids: list[list[int]] = [[] for _ in range(M + Q)]  # added children only (Q-local ids)
        for k, p in enumerate(add_parent):
            ext_kids[p].append(M + k)
            add_kids[p].append(k)
        self.add_kids = add_kids

        maxd = int(max(depth.max(initial=0), add_depth.max(initial=0)))
        self.src_by_depth = [np.nonzero(depth == d)[0] for d in range(int(depth.max()) + 1)]
        self.src_pool = []  # bottom-up: (parents, pad, mask)
        for d in range(int(depth.max()) - 1, -1, -1):
            par = [i for i in self.src_by_depth[d] if src_kids[i]]
            if par:
                self.src_pool.append((torch.as_tensor(par), *map(torch.as_tensor, _padded(par, src_kids))))
        self.ext_levels = []  # bottom-up per depth
        for d in range(maxd, -1, -1):
            src_nodes = self.src_by_depth[d] if d < len(self.src_by_depth) else np.zeros(0, np.int64)
            add_nodes = np.nonzero(add_depth == d)[0]
            add_leaf_n = add_nodes[add_leaf[add_nodes]] if len(add_nodes) else add_nodes
            add_int_n = add_nodes[~add_leaf[add_nodes]] if len(add_nodes) else add_nodes
            src_par_rows = [r for r, i in enumerate(src_nodes) if ext_kids[i]]
            src_par = [src_nodes[r] for r in src_par_rows]
            add_int_ext = [M + k for k in add_int_n]
            level = {
                "src": torch.as_tensor(src_nodes),
                "src_pool_rows": torch.as_tensor(src_par_rows, dtype=torch.int64),
                "src_pool": tuple(map(torch.as_tensor, _padded(src_par, ext_kids))) if src_par else None,
                "add_leaf": torch.as_tensor(add_leaf_n),
                "add_int": torch.as_tensor(add_int_n),
                "add_pool": tuple(map(torch.as_tensor, _padded(add_int_ext, ext_kids))) if add_int_ext else None,
            }
            self.ext_levels.append(level)


def collate(pairs: list[PairData], taxonomy: Taxonomy, dtype=torch.float32) -> Batch:
    return Batch(pairs, taxonomy, dtype)


# ----------------------------------------------------------------------------
# networks


class AddDecoder(nn.Module):
    """Parent feature -> ``n`` child features and existence logits."""

    def __init__(self, width: int, slots: int, gen: torch.Generator, skip: bool = True):
        super().__init__()
        self.width, self.slots, self.skip = width, slots, skip
        self.expand = init_linear(nn.Linear(width, slots * width), gen)
        self.slot = init_linear(nn.Linear(width, width + 1), gen)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        check_finite(x, "AddDecoder")
        h = leaky(self.expand(x)).reshape(x.shape[0], self.slots, self.width)
        out = self.slot(h)
        feats = out[..., :self.width]
        if self.skip:
            feats = feats + h
        return feats, out[..., self.width]


class DeltaVAE(nn.Module):
    def __init__(self, taxonomy: Taxonomy, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.taxonomy = taxonomy
        self.config = config
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        Fw, L, T = config.feature_width, config.latent, len(taxonomy.labels)
        self.num_labels = T
        opts = dict(skip=config.skip_connections, group_norm=config.group_norm)
        self.f_box = FeatureNet(BOX_DIM, Fw, gen, **opts)
        self.f_tree = SetPool(Fw + T, Fw, gen, **opts)
        self.c_dbox = FeatureNet(BOX_DIM, Fw, gen, **opts)
        self.c_tree = SetPool(Fw + T, Fw, gen, **opts)
        self.c_part = FeatureNet(3 * Fw + 2 + T, Fw, gen, **opts)
        self.mean_head = init_linear(nn.Linear(Fw, L), gen)
        self.logvar_head = init_linear(nn.Linear(Fw, L), gen)
        self.d_tree = FeatureNet(L + 3 * Fw + T, Fw, gen, **opts)
        self.d_type = init_linear(nn.Linear(Fw, 2), gen)
        self.d_dbox = FeatureNet(Fw, Fw, gen, out_dim=BOX_DIM, **opts)
        self.d_add_src = AddDecoder(Fw, config.num_slots, gen, config.skip_connections)
        self.d_add_added = AddDecoder(Fw, config.num_slots, gen, config.skip_connections)
        self.d_box = FeatureNet(Fw, Fw, gen, out_dim=BOX_DIM + T + int(config.leaf_classifier), **opts)
        self.to(self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.dtype]

    def batch(self, pairs: list[PairData]) -> Batch:
        return Batch(pairs, self.taxonomy, self.dtype)

    # -- encoders -------------------------------------------------------------

    def encode_source(self, b: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        v_box = self.f_box(b.box)
        v_tree = v_box
        for par, pad, mask in b.src_pool:
            x = torch.cat([v_tree[pad], b.onehot[:b.M][pad]], dim=-1)
            v_tree = v_tree.index_copy(0, par, self.f_tree(x, mask))
        return v_box, v_tree

    def _delta_input(self, b: Batch) -> torch.Tensor:
        return b.dparams if self.config.box_deltas else b.tgt_box

    def encode_delta(self, b: Batch, v_box: torch.Tensor) -> LatentPosterior:
        Fw = self.config.feature_width
        y = v_box.new_zeros((b.M + b.Q, Fw))
        keep = (b.action_t == 0).to(v_box.dtype)[:, None]
        y_dbox_all = self.c_dbox(self._delta_input(b)) * keep
        rho = F.one_hot(b.action_t, 2).to(v_box.dtype)
        for lv in b.ext_levels:
            if len(lv["add_leaf"]):
                idx = lv["add_leaf"]
                y = y.index_copy(0, idx + b.M, self.f_box(b.add_box_t[idx]))
            if lv["add_pool"] is not None:
                pad, mask = lv["add_pool"]
                x = torch.cat([y[pad], b.onehot[pad]], dim=-1)
                y = y.index_copy(0, lv["add_int"] + b.M, self.f_tree(x, mask))
            src = lv["src"]
            if len(src):
                y_tree = v_box.new_zeros((len(src), Fw))
                if lv["src_pool"] is not None:
                    pad, mask = lv["src_pool"]
                    x = torch.cat([y[pad], b.onehot[pad]], dim=-1)
                    y_tree = y_tree.index_copy(0, lv["src_pool_rows"], self.c_tree(x, mask))
                inp = torch.cat([y_dbox_all[src], y_tree, rho[src], v_box[src], b.onehot[src]], dim=-1)
                y = y.index_copy(0, src, self.c_part(inp))
        root = y[b.roots]
        return LatentPosterior(self.mean_head(root), self.logvar_head(root))

    # -- decoder --------------------------------------------------------------

    def decode_parts(self, b: Batch, z: torch.Tensor, v_box, v_tree) -> torch.Tensor:
        """Top-down features ``x_k`` for every source part."""
        Fw = self.config.feature_width
        x = v_box.new_zeros((b.M + 1, Fw))  # last row: zero parent feature of roots
        par = torch.as_tensor(np.where(b.parent >= 0, b.parent, b.M))
        for nodes in b.src_by_depth:
            nodes_t = torch.as_tensor(nodes)
            inp = torch.cat([z[b.pair_t[nodes_t]], x[par[nodes_t]], v_box[nodes_t],
                             v_tree[nodes_t], b.onehot[nodes_t]], dim=-1)
            x = x.index_copy(0, nodes_t, self.d_tree(inp))
        return x[:b.M]

    def _slot_outputs(self, feats: torch.Tensor):
        out = self.d_box(feats)
        T = self.num_labels
        boxes = decode_box(out[..., :BOX_DIM])
        labels = out[..., BOX_DIM:BOX_DIM + T]
        leaf = out[..., BOX_DIM + T] if self.config.leaf_classifier else None
        return boxes, labels, leaf

    def _predicted_boxes(self, b: Batch, raw: torch.Tensor) -> torch.Tensor:
        if self.config.box_deltas:
            return compose_box(b.box, decode_box(raw))
        return decode_box(raw)

    def loss(self, b: Batch, weights: LossWeights = LossWeights(), variational: bool = True,
             generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict[str, float]]:
        """Teacher-forced reconstruction loss, averaged over the pairs of ``b``."""
        v_box, v_tree = self.encode_source(b)
        post = self.encode_delta(b, v_box)
        if variational:
            z = sample_latent(post, generator=generator)
        else:
            z = post.mean
        x = self.decode_parts(b, z, v_box, v_tree)

        l_type = F.cross_entropy(self.d_type(x), b.action_t, reduction="sum")
        keep = np.nonzero(b.action == 0)[0]
        keep_t = torch.as_tensor(keep)
        pred = self._predicted_boxes(b, self.d_dbox(x))
        l_dbox = box_distance_t(pred[keep_t], b.tgt_box[keep_t]).sum()

        l_add_box, l_label, l_leaf, l_exist = (x.new_zeros(()) for _ in range(4))
        parents = [int(i) for i in keep if b.allows_kids[b.label[i]] and b.depth[i] < self.config.max_depth]
        feats_in = x[torch.as_tensor(parents, dtype=torch.int64)]
        gt_kids = [b.add_kids[i] for i in parents]
        decoder = self.d_add_src
        level = 0
        w = weights
        while parents and level <= self.config.max_depth:
            feats, logits = decoder(feats_in)
            boxes, labels, leaf = self._slot_outputs(feats)
            target = torch.zeros_like(logits)
            rows, slots, gts = [], [], []
            g_rows = [r for r, ks in enumerate(gt_kids) for _ in ks]
            g_ids = [k for ks in gt_kids for k in ks]
            if g_ids:
                gi = torch.as_tensor(g_ids)
                gr = torch.as_tensor(g_rows)
                cost = cost_to_slots(box_points(b.add_box_t[gi]), box_points(boxes[gr]))
                cost_np = cost.detach().cpu().numpy()
                start = 0
                cost_rows, cost_cols = [], []
                for r, ks in enumerate(gt_kids):
                    if not ks:
                        continue
                    block = cost_np[start:start + len(ks)]
                    for gk, s in linear_assignment(block):
                        rows.append(r)
                        slots.append(s)
                        gts.append(ks[gk])
                        cost_rows.append(start + gk)
                        cost_cols.append(s)
                    start += len(ks)
                rt, st, gt = map(torch.as_tensor, (rows, slots, gts))
                target[rt, st] = 1.0
                l_add_box = l_add_box + cost[torch.as_tensor(cost_rows), torch.as_tensor(cost_cols)].sum()
                l_label = l_label + F.cross_entropy(labels[rt, st], b.add_label_t[gt], reduction="sum")
                if leaf is not None:
                    leaf_t = torch.as_tensor(b.add_leaf[gts]).to(x.dtype)
                    l_leaf = l_leaf + F.binary_cross_entropy_with_logits(leaf[rt, st], leaf_t, reduction="sum")
            l_exist = l_exist + F.binary_cross_entropy_with_logits(logits, target, reduction="sum")
            nxt = []
            for r, s, g in zip(rows, slots, gts):
                if b.add_depth[g] >= self.config.max_depth:
                    continue
                if self.config.leaf_classifier:
                    go = not b.add_leaf[g]
                else:
                    go = bool(b.allows_kids[b.add_label[g]])
                if go:
                    nxt.append((r, s, g))
            if not nxt:
                break
            feats_in = feats[torch.as_tensor([r for r, _, _ in nxt]), torch.as_tensor([s for _, s, _ in nxt])]
            gt_kids = [b.add_kids[b.M + g] for _, _, g in nxt]
            parents = nxt
            decoder = self.d_add_added
            level += 1

        kl = kl_divergence(post)
        l_added = w.added_box * l_add_box + l_label + w.leaf * l_leaf + l_exist
        beta = w.kl if variational else 0.0
        total = (w.box_delta * l_dbox + l_added + l_type + beta * kl.sum()) / b.size
        n = b.size
        terms = {
            "total": float(total.detach()),
            "delta_box": float(l_dbox.detach()) / n,
            "added": float(l_added.detach()) / n,
            "added_box": float(l_add_box.detach()) / n,
            "added_label": float(l_label.detach()) / n,
            "added_leaf": float(l_leaf.detach()) / n,
            "existence": float(l_exist.detach()) / n,
            "type": float(l_type.detach()) / n,
            "kl": float(kl.sum().detach()) / n,
        }
        return total, terms


def kl_divergence(post: LatentPosterior) -> torch.Tensor:
    """Per-row KL(N(mean, exp(log_variance)) || N(0, I))."""
    mu, lv = post.mean, post.log_variance
    return 0.5 * (mu * mu + torch.expm1(lv) - lv).sum(dim=-1)


def sample_latent(post: LatentPosterior | None = None, seed: int | None = None, count: int = 1,
                  width: int | None = None, generator: torch.Generator | None = None,
                  dtype=torch.float64) -> torch.Tensor:
    """Reparameterized posterior sample, or ``count`` standard-normal prior samples."""
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    if post is None:
        if width is None:
            raise ValueError("prior sampling needs the latent width")
        return torch.randn((count, width), generator=generator, dtype=dtype)
    eps = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
    return post.mean + torch.exp(0.5 * post.log_variance) * eps


# ----------------------------------------------------------------------------
# inference


@dataclass
class DecodedDelta:
    delta: ShapeDelta
    type_probs: np.ndarray  # (N, 2): [part delta, deletion]
    existence: list[np.ndarray] = field(default_factory=list)  # one array per d_add call
    added_leaf_probs: list[float] = field(default_factory=list)
    added_label_probs: list[np.ndarray] = field(default_factory=list)
    pruned: int = 0
    truncated: bool = False


@dataclass
class _Node:
    box: np.ndarray
    label: str
    leaf_prob: float
    label_probs: np.ndarray
    kids: list = field(default_factory=list)

    def part(self) -> Part:
        c, q, r = self.box[:3], self.box[3:7], np.abs(self.box[7:10])
        return Part.from_params(c, q / np.linalg.norm(q), r, self.label, [k.part() for k in self.kids])


def _part_delta_from(raw_box: np.ndarray, part: Part, box_deltas: bool) -> PartDelta:
    if not box_deltas:
        tgt = Part.from_params(raw_box[:3], raw_box[3:7] / np.linalg.norm(raw_box[3:7]),
                               np.abs(raw_box[7:10]), part.semantic)
        return part_delta_between(part, tgt)
    dq = quat_canonical(raw_box[3:7] / np.linalg.norm(raw_box[3:7]))
    r = np.asarray(part.extents)
    dr = np.abs(r + raw_box[7:10]) - r
    return PartDelta(tuple(map(float, raw_box[:3])), tuple(map(float, dq)), tuple(map(float, dr)))


@torch.no_grad()
def decode_batch(model: DeltaVAE, sources: list[ShapeTree], z: torch.Tensor,
                 data: list[PairData] | None = None) -> list[DecodedDelta]:
    """Free-running decode of ``z[k]`` against ``sources[k]``."""
    cfg, tax = model.config, model.taxonomy
    data = data or [make_pair_data(s) for s in sources]
    b = model.batch(data)
    z = z.to(model.dtype)
    if z.shape != (b.size, cfg.latent):
        raise ValueError(f"expected latents of shape {(b.size, cfg.latent)}, got {tuple(z.shape)}")
    check_finite(z, "decoder latent")
    v_box, v_tree = model.encode_source(b)
    x = model.decode_parts(b, z, v_box, v_tree)
    type_p = torch.softmax(model.d_type(x), dim=-1).double().numpy()
    raw = model.d_dbox(x)
    raw_box = decode_box(raw).double().numpy()

    deleted = type_p[:, 1] >= 0.5
    deleted[b.src_off] = False
    for i in range(b.M):  # pre-order: parents first
        p = b.parent[i]
        if p >= 0 and deleted[p]:
            deleted[i] = True

    existence: list[list[np.ndarray]] = [[] for _ in range(b.size)]
    pruned = [0] * b.size
    truncated = [False] * b.size
    top_nodes: list[list[tuple[int, _Node]]] = [[] for _ in range(b.size)]
    # frontier entries: (pair, source anchor or None, host node or None, label, depth)
    parents = [(int(b.pair_of[i]), int(i) - int(b.src_off[b.pair_of[i]]), None, tax.labels[b.label[i]], int(b.depth[i]))
               for i in range(b.M) if not deleted[i] and b.allows_kids[b.label[i]] and b.depth[i] < cfg.max_depth]
    feats_in = x[torch.as_tensor([i for i in range(b.M) if not deleted[i] and b.allows_kids[b.label[i]]
                                  and b.depth[i] < cfg.max_depth], dtype=torch.int64)]
    decoder = model.d_add_src
    while parents:
        feats, logits = decoder(feats_in)
        boxes, labels, leaf = model._slot_outputs(feats)
        probs = torch.sigmoid(logits).double().numpy()
        lab_p = torch.softmax(labels, dim=-1).double().numpy()
        leaf_p = torch.sigmoid(leaf).double().numpy() if leaf is not None else None
        boxes_np = boxes.double().numpy()
        nxt, nxt_rows = [], []
        for r, (pair, anchor, host, plabel, pdepth) in enumerate(parents):
            existence[pair].append(probs[r].copy())
            for s in range(cfg.num_slots):
                if probs[r, s] < 0.5:
                    continue
                lab = tax.labels[int(np.argmax(lab_p[r, s]))]
                if not tax.allows(plabel, lab):
                    pruned[pair] += 1
                    log.debug("pruned added %r under %r", lab, plabel)
                    continue
                lp = float(leaf_p[r, s]) if leaf_p is not None else 0.0
                node = _Node(boxes_np[r, s], lab, lp, lab_p[r, s].copy())
                if host is None:
                    top_nodes[pair].append((anchor, node))
                else:
                    host.kids.append(node)
                depth = pdepth + 1
                wants = (lp < 0.5 if cfg.leaf_classifier else True) and bool(tax.children_of.get(lab))
                if wants and depth >= cfg.max_depth:
                    truncated[pair] = True
                    log.info("added-part recursion truncated at depth %d", depth)
                elif wants:
                    nxt.append((pair, None, node, lab, depth))
                    nxt_rows.append((r, s))
        if not nxt:
            break
        feats_in = feats[torch.as_tensor([r for r, _ in nxt_rows]), torch.as_tensor([s for _, s in nxt_rows])]
        parents = nxt
        decoder = model.d_add_added

    results = []
    for k, src in enumerate(sources):
        off, n = int(b.src_off[k]), src.num_parts
        actions = []
        for i in range(n):
            g = off + i
            actions.append(DELETE if deleted[g] else _part_delta_from(raw_box[g], src.parts[i], cfg.box_deltas))
        additions = []
        leaf_probs, label_probs = [], []
        for anchor, node in top_nodes[k]:
            additions.append(Addition("source", anchor, node.part()))
            stack = [node]
            while stack:
                nd = stack.pop()
                leaf_probs.append(nd.leaf_prob)
                label_probs.append(nd.label_probs)
                stack.extend(reversed(nd.kids))
        delta = ShapeDelta(tuple(actions), tuple(additions), src.ordered_key)
        results.append(DecodedDelta(delta, type_p[off:off + n].copy(), existence[k], leaf_probs,
                                    label_probs, pruned[k], truncated[k]))
    return results


def encode_source(model: DeltaVAE, shape: ShapeTree) -> tuple[torch.Tensor, torch.Tensor]:
    return model.encode_source(model.batch([make_pair_data(shape)]))


def encode_delta(model: DeltaVAE, shape: ShapeTree, delta: ShapeDelta) -> LatentPosterior:
    b = model.batch([make_pair_data(shape, delta)])
    v_box, _ = model.encode_source(b)
    post = model.encode_delta(b, v_box)
    return LatentPosterior(post.mean[0], post.log_variance[0])


def encode_deltas(model: DeltaVAE, data: list[PairData]) -> LatentPosterior:
    with torch.no_grad():
        b = model.batch(data)
        v_box, _ = model.encode_source(b)
        return model.encode_delta(b, v_box)


def decode_delta(model: DeltaVAE, shape: ShapeTree, z: torch.Tensor) -> DecodedDelta:
    return decode_batch(model, [shape], z.reshape(1, -1))[0]


def reconstruct(model: DeltaVAE, shape: ShapeTree, delta: ShapeDelta) -> DecodedDelta:
    with torch.no_grad():
        return decode_delta(model, shape, encode_delta(model, shape, delta).mean)


def transfer_edit(model: DeltaVAE, source: ShapeTree, delta: ShapeDelta, other: ShapeTree) -> DecodedDelta:
    """Encode ``delta`` against ``source`` (posterior mean) and decode it against ``other``."""
    if source.category != other.category:
        raise ValueError("transfer needs shapes of the same category")
    with torch.no_grad():
        return decode_delta(model, other, encode_delta(model, source, delta).mean)


def generate_edits(model: DeltaVAE, source: ShapeTree, count: int = 100, seed: int = 0,
                   chunk: int = 100) -> list[DecodedDelta]:
    z = sample_latent(None, seed=seed, count=count, width=model.config.latent, dtype=model.dtype)
    data = make_pair_data(source)
    out = []
    for s in range(0, count, chunk):
        zz = z[s:s + chunk]
        out.extend(decode_batch(model, [source] * len(zz), zz, [data] * len(zz)))
    return out


def interpolate_edits(model: DeltaVAE, source: ShapeTree, delta_a: ShapeDelta, delta_b: ShapeDelta,
                      steps: int = 8) -> list[DecodedDelta]:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    with torch.no_grad():
        za = encode_delta(model, source, delta_a).mean
        zb = encode_delta(model, source, delta_b).mean
        ts = torch.linspace(0.0, 1.0, steps, dtype=za.dtype)[:, None]
        z = (1 - ts) * za + ts * zb
        z[0], z[-1] = za, zb
        return decode_batch(model, [source] * steps, z)
