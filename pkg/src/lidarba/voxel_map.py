"""Adaptive voxel map: a hash of octrees whose leaves each hold one feature.

Root cells have a fixed size and are indexed by integer keys.  A cell is
kept whole when its points form a single plane (or edge); otherwise it is
split into octants, down to a minimum size.  Points of scans that left the
sliding window are folded into per-cell statistics and no longer stored.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .features import (
    FeatureGeometry,
    FeatureKind,
    PointCluster,
    cluster_from_points,
    eig_sym3,
    eig_sym3_batch,
)
from .geometry import Pose

_EPS = 1e-12


@dataclass
class VoxelMapConfig:
    root_size: float = 1.0
    min_size: float = 0.125
    min_points: int = 10
    plane_test: float = 0.01
    edge_test: float = 0.05
    max_points_per_scan_per_voxel: int = 20
    match_radius: float = 1.0

    def __post_init__(self):
        if not 0 < self.min_size <= self.root_size:
            raise ValueError("need 0 < min_size <= root_size")
        for name in ("plane_test", "edge_test"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def max_depth(self) -> int:
        return int(round(math.log2(self.root_size / self.min_size)))


class NodeState(enum.Enum):
    LEAF = "leaf"
    INTERNAL = "internal"
    UNRESOLVED = "unresolved"


Key = tuple[int, int, int]


def voxel_key(p, size: float) -> Key:
    p = np.asarray(p, dtype=float)
    if size <= 0:
        raise ValueError("voxel size must be positive")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point")
    k = np.floor(p / size).astype(np.int64)
    return int(k[0]), int(k[1]), int(k[2])


def _ratio(lam: np.ndarray, kind: FeatureKind) -> float:
    idx = 2 if kind is FeatureKind.PLANE else 1
    return float(lam[idx] / max(lam[0], _EPS))


def _passes(lam, count, kind: FeatureKind, cfg: VoxelMapConfig) -> bool:
    if count < cfg.min_points:
        return False
    limit = cfg.plane_test if kind is FeatureKind.PLANE else cfg.edge_test
    return _ratio(lam, kind) < limit


def feature_test(stats: PointCluster, kind: FeatureKind, cfg: VoxelMapConfig) -> bool:
    """Eigenvalue-ratio test that a cell's points form one plane or edge."""
    if stats.count < cfg.min_points:
        return False
    return _passes(eig_sym3(stats.cov()).lam, stats.count, kind, cfg)


@dataclass(eq=False)
class OctreeNode:
    center: np.ndarray
    half_size: float
    depth: int
    key: Key  # lattice index at this depth's cell size
    root_key: Key
    state: NodeState = NodeState.UNRESOLVED
    children: list = field(default_factory=lambda: [None] * 8)
    scan_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    local: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    world: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    fixed_stats: PointCluster | None = None
    feature: FeatureGeometry | None = None
    lam: np.ndarray | None = None
    axis: np.ndarray | None = None  # principal direction at the last resolve

    @property
    def size(self) -> float:
        return 2.0 * self.half_size

    @property
    def n_window(self) -> int:
        return len(self.scan_ids)

    @property
    def count(self) -> int:
        return self.n_window + (self.fixed_stats.count if self.fixed_stats else 0)

    def window_cluster(self) -> PointCluster | None:
        if self.n_window == 0:
            return None
        return cluster_from_points(self.world, self.scan_ids, self.local)

    def stats(self) -> PointCluster | None:
        """Combined window and marginalized statistics."""
        w = self.window_cluster()
        if w is None:
            return self.fixed_stats
        if self.fixed_stats is None:
            return w
        return PointCluster(w.count + self.fixed_stats.count, w.sum + self.fixed_stats.sum,
                            w.outer + self.fixed_stats.outer, w.scan_ids, w.local, w.world)

    def contains(self, p) -> bool:
        lo = self.center - self.half_size
        hi = self.center + self.half_size
        p = np.asarray(p)
        return bool(np.all(p >= lo) and np.all(p < hi))

    def iter_nodes(self):
        yield self
        for c in self.children:
            if c is not None:
                yield from c.iter_nodes()

    def _append(self, ids, loc, wld):
        self.scan_ids = np.concatenate([self.scan_ids, ids])
        self.local = np.vstack([self.local, loc])
        self.world = np.vstack([self.world, wld])


_PACK_BITS = 21
_PACK_BIAS = 1 << (_PACK_BITS - 1)


def _pack(keys: np.ndarray) -> np.ndarray:
    """Integer cell keys ``(n, 3)`` -> one sortable int64 per row."""
    k = keys + _PACK_BIAS
    if k.size and (k.min() < 0 or k.max() >= 1 << _PACK_BITS):
        raise ValueError("cell index out of range")
    return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]


def _unpack(packed: np.ndarray) -> np.ndarray:
    mask = (1 << _PACK_BITS) - 1
    return np.stack([packed >> (2 * _PACK_BITS), (packed >> _PACK_BITS) & mask, packed & mask], axis=1) - _PACK_BIAS


def _pack1(key) -> int:
    b = _PACK_BIAS
    return ((key[0] + b) << (2 * _PACK_BITS)) | ((key[1] + b) << _PACK_BITS) | (key[2] + b)


def _octant_of(key) -> int:
    return (key[0] & 1) | ((key[1] & 1) << 1) | ((key[2] & 1) << 2)


class VoxelMap:
    def __init__(self, kind: FeatureKind, config: VoxelMapConfig | None = None):
        self.kind = FeatureKind(kind)
        self.config = config or VoxelMapConfig()
        self.roots: dict[Key, OctreeNode] = {}
        # marginalized statistics per cube: root key -> {(depth, key): cluster}
        self.fixed: dict[Key, dict[tuple[int, Key], PointCluster]] = {}
        self.scans: set[int] = set()
        self.n_inserted = 0
        self._index: LeafIndex | None = None
        self._fixed_under: dict[tuple[int, int], list[tuple[int, Key]]] = {}  # cell -> fixed slots at or below
        self._node_at: dict[tuple[int, int], OctreeNode] = {}  # (depth, packed key) -> live node
        self._holders: dict[Key, dict[tuple[int, int], OctreeNode]] = {}  # non-internal nodes per root
        self._scan_roots: dict[int, set[Key]] = {}
        self._rebuilt: set[Key] = set()
        self._pending: dict[int, OctreeNode] = {}  # cells that received points since the last rebuild

    # ------------------------------------------------------------------ cells

    def _cell_size(self, depth: int) -> float:
        return self.config.root_size / (2 ** depth)

    def _new_node(self, depth: int, key: Key) -> OctreeNode:
        size = self._cell_size(depth)
        center = (np.array(key, dtype=float) + 0.5) * size
        root_key = tuple(v >> depth for v in key)
        node = OctreeNode(center, size / 2.0, depth, key, root_key)
        self._link(node)
        return node

    def _link(self, node: OctreeNode, parent: OctreeNode | None = None) -> None:
        """Hang ``node`` in the tree, replacing whatever sat at its position."""
        d, k = node.depth, node.key
        if d == 0:
            self.roots[k] = node
        else:
            if parent is None:
                parent = self._node_at[(d - 1, _pack1(tuple(v >> 1 for v in k)))]
            parent.children[_octant_of(k)] = node
        slot = (d, _pack1(k))
        self._node_at[slot] = node
        holders = self._holders.setdefault(node.root_key, {})
        if node.state is NodeState.INTERNAL:
            holders.pop(slot, None)
        else:
            holders[slot] = node

    # -------------------------------------------------------------- insertion

    def insert_points(self, scan_id: int, local, world) -> None:
        local = np.asarray(local, dtype=float).reshape(-1, 3)
        world = np.asarray(world, dtype=float).reshape(-1, 3)
        if len(local) != len(world):
            raise ValueError("local and world point counts differ")
        self.scans.add(int(scan_id))
        if len(world) == 0:
            return
        if not np.all(np.isfinite(world)):
            raise ValueError("non-finite point")
        self._insert(np.full(len(world), int(scan_id), dtype=int), local, world)
        self.n_inserted += len(world)

    def insert_point(self, scan_id: int, p_local, p_global) -> None:
        self.insert_points(scan_id, np.reshape(p_local, (1, 3)), np.reshape(p_global, (1, 3)))

    def _insert(self, ids, local, world) -> None:
        """Drop points into the deepest existing cell that contains them.

        Routing runs one depth at a time over all points still above their
        holding cell; missing cells are created empty on the way down.
        """
        active = np.arange(len(world))
        for depth in range(self.config.max_depth + 1):
            if len(active) == 0:
                break
            keys = np.floor(world[active] / self._cell_size(depth)).astype(np.int64)
            packed, inv = np.unique(_pack(keys), return_inverse=True)
            inv = inv.reshape(-1)
            order = np.argsort(inv, kind="stable")
            bounds = np.searchsorted(inv[order], np.arange(len(packed) + 1))
            descend = np.zeros(len(packed), dtype=bool)
            for u, (pk, key) in enumerate(zip(packed.tolist(), map(tuple, _unpack(packed).tolist()))):
                node = self._node_at.get((depth, pk))
                if node is None:
                    node = self._new_node(depth, key)
                if node.state is NodeState.INTERNAL:
                    descend[u] = True
                    continue
                sel = active[order[bounds[u]:bounds[u + 1]]]
                node._append(ids[sel], local[sel], world[sel])
                node.state = NodeState.UNRESOLVED
                node.feature = None
                self._pending[id(node)] = node
                for sid in np.unique(ids[sel]).tolist():
                    self._scan_roots.setdefault(sid, set()).add(node.root_key)
            active = active[descend[inv]]
        self._index = None

    # ---------------------------------------------------------------- rebuild

    def rebuild(self) -> None:
        """Resolve every cell that received points since the last call.

        Each such cell is re-tested where it sits and split further if its
        points no longer form a single feature.  Cells never merge back.
        """
        if not self._pending:
            return
        seeds = []
        done: set[Key] = set()
        for node in self._pending.values():
            if self._node_at.get((node.depth, _pack1(node.key))) is not node:
                continue  # replaced since it was marked
            if node.n_window == 0 and not self._fixed_entries(node.depth, node.key):
                # every point moved away: nothing left to resolve
                node.state, node.feature, node.fixed_stats = NodeState.UNRESOLVED, None, None
                continue
            seeds.append((node.depth, node.key, node.scan_ids, node.local, node.world))
            done.add(node.root_key)
        self._pending.clear()
        self._index = None
        self._resolve(seeds)
        self._rebuilt = done

    def _fixed_entries(self, depth: int, key: Key):
        slots = self._fixed_under.get((depth, _pack1(key)))
        if not slots:
            return []
        entries = self.fixed[tuple(v >> depth for v in key)]
        return [(d, k, entries[(d, k)]) for d, k in slots]

    def _add_fixed(self, root_key: Key, depth: int, key: Key, c: PointCluster) -> None:
        entries = self.fixed.setdefault(root_key, {})
        slot = (depth, key)
        if slot in entries:
            entries[slot] = entries[slot] + c
            return
        entries[slot] = c
        for a in range(depth + 1):
            anc = tuple(v >> (depth - a) for v in key)
            self._fixed_under.setdefault((a, _pack1(anc)), []).append(slot)

    def _resolve(self, seeds) -> None:
        """Level-by-level vectorized construction of subtrees.

        ``seeds`` are disjoint cubes ``(depth, key, ids, local, world)``;
        each is rebuilt from its window points plus the marginalized cubes at
        or below it and replaces the node at its position.
        """
        cfg = self.config
        if not seeds:
            return
        by_depth: dict[int, list] = {}
        for sd in seeds:
            by_depth.setdefault(sd[0], []).append(sd)
        seed_keys = {(sd[0], sd[1]) for sd in seeds}
        last_seed_depth = max(by_depth)
        ids = np.zeros(0, dtype=int)
        loc = np.zeros((0, 3))
        wld = np.zeros((0, 3))
        fixed: list = []
        parents: dict[Key, OctreeNode] = {}
        for depth in range(cfg.max_depth + 1):
            level = by_depth.get(depth, ())
            if level:
                ids = np.concatenate([ids] + [sd[2] for sd in level])
                loc = np.concatenate([loc] + [sd[3] for sd in level])
                wld = np.concatenate([wld] + [sd[4] for sd in level])
                for sd in level:
                    fixed.extend(self._fixed_entries(depth, sd[1]))
            f_depth = np.array([d for d, _, _ in fixed], dtype=np.int64)
            f_key = np.array([k for _, k, _ in fixed], dtype=np.int64).reshape(-1, 3)
            f_n = np.array([c.count for _, _, c in fixed], dtype=float)
            f_sum = np.array([c.sum for _, _, c in fixed]).reshape(-1, 3)
            f_outer = np.array([c.outer for _, _, c in fixed]).reshape(-1, 3, 3)
            pkeys = np.floor(wld / self._cell_size(depth)).astype(np.int64)
            fkeys = f_key >> (f_depth - depth)[:, None]
            allkeys = np.vstack([pkeys, fkeys])
            if len(allkeys) == 0:
                if depth >= last_seed_depth:
                    break
                continue
            packed, inv = np.unique(_pack(allkeys), return_inverse=True)
            nodes_k = _unpack(packed)
            inv = inv.reshape(-1)
            pinv, finv = inv[:len(pkeys)], inv[len(pkeys):]
            n_nodes = len(nodes_k)
            nw = np.bincount(pinv, minlength=n_nodes).astype(float)
            sw = np.stack([np.bincount(pinv, wld[:, a], minlength=n_nodes) for a in range(3)], axis=1)
            nf = np.bincount(finv, f_n, minlength=n_nodes)
            sf = np.zeros((n_nodes, 3))
            of = np.zeros((n_nodes, 3, 3))
            if len(finv):
                np.add.at(sf, finv, f_sum)
                np.add.at(of, finv, f_outer)
            N = nw + nf
            mean = (sw + sf) / N[:, None]
            dv = wld - mean[pinv]
            cw = np.stack([np.bincount(pinv, dv[:, a] * dv[:, b], minlength=n_nodes)
                           for a in range(3) for b in range(3)], axis=1).reshape(-1, 3, 3)
            fs = sf[:, :, None] * mean[:, None, :]
            C = cw + of - fs - np.swapaxes(fs, 1, 2) + nf[:, None, None] * mean[:, :, None] * mean[:, None, :]
            lam, U = eig_sym3_batch(0.5 * (C + np.swapaxes(C, 1, 2)) / N[:, None, None])
            sel = 2 if self.kind is FeatureKind.PLANE else 1
            ratio = lam[:, sel] / np.maximum(lam[:, 0], _EPS)
            limit = cfg.plane_test if self.kind is FeatureKind.PLANE else cfg.edge_test
            floor = 1e-6 * np.maximum(lam[:, 0], _EPS)
            gap = (lam[:, 1] - lam[:, 2]) if self.kind is FeatureKind.PLANE else (lam[:, 0] - lam[:, 1])
            enough = N >= cfg.min_points
            leaf = enough & (ratio < limit) & (gap > floor)
            split = enough & ~leaf & (depth < cfg.max_depth)

            order = np.argsort(pinv, kind="stable")
            bounds = np.searchsorted(pinv[order], np.arange(n_nodes + 1))
            size = self._cell_size(depth)
            centers = (nodes_k + 0.5) * size
            nxt: dict[Key, OctreeNode] = {}
            for i, (k, pk) in enumerate(zip(map(tuple, nodes_k.tolist()), packed.tolist())):
                node = None
                if not split[i] and level:
                    # a seed that stays whole is updated in place
                    node = self._node_at.get((depth, pk))
                    if node is not None and (depth, k) not in seed_keys:
                        node = None
                fresh = node is None
                if fresh:
                    root_key = tuple(v >> depth for v in k)
                    node = OctreeNode(centers[i], size / 2.0, depth, k, root_key)
                node.lam = lam[i]
                node.axis = U[i][:, 0]
                if split[i]:
                    node.state = NodeState.INTERNAL
                    nxt[k] = node
                else:
                    sl = order[bounds[i]:bounds[i + 1]]
                    node.scan_ids, node.local, node.world = ids[sl], loc[sl], wld[sl]
                    node.fixed_stats = PointCluster(int(nf[i]), sf[i].copy(), of[i].copy()) if nf[i] > 0 else None
                    if leaf[i]:
                        node.state = NodeState.LEAF
                        n = U[i][:, 2] if self.kind is FeatureKind.PLANE else U[i][:, 0]
                        node.feature = FeatureGeometry(self.kind, mean[i].copy(), n / np.linalg.norm(n))
                    else:
                        node.state = NodeState.UNRESOLVED
                        node.feature = None
                if fresh:
                    self._link(node, parents.get(tuple(v >> 1 for v in k)))
            parents = nxt
            # descend: points and strictly deeper marginalized cubes of split nodes
            keep_p = split[pinv]
            ids, loc, wld = ids[keep_p], loc[keep_p], wld[keep_p]
            keep_f = split[finv] & (f_depth > depth)
            fixed = [f for f, keep in zip(fixed, keep_f) if keep]

    # ------------------------------------------------------------- iteration

    def nodes(self):
        for key in sorted(self.roots):
            yield from self.roots[key].iter_nodes()

    def _held(self, roots=None):
        keys = sorted(self._holders) if roots is None else sorted(k for k in roots if k in self._holders)
        for key in keys:
            yield from self._holders[key].values()

    def leaves(self) -> list[OctreeNode]:
        self.rebuild()
        return [n for n in self._held() if n.state is NodeState.LEAF]

    def window_leaves(self, roots=None) -> list[OctreeNode]:
        self.rebuild()
        return [n for n in self._held(roots) if n.state is NodeState.LEAF and n.n_window]

    def roots_of_scans(self, scan_ids) -> set[Key]:
        out: set[Key] = set()
        for s in scan_ids:
            out |= self._scan_roots.get(int(s), set())
        return out

    def total_points(self) -> int:
        window = sum(n.n_window for n in self.nodes())
        fixed = sum(c.count for entries in self.fixed.values() for c in entries.values())
        return window + fixed

    # -------------------------------------------------------- marginalization

    def marginalize_scan(self, scan_id: int, final_pose: Pose) -> None:
        """Fold one scan's points into fixed per-cube statistics."""
        scan_id = int(scan_id)
        if scan_id not in self.scans:
            raise KeyError(f"unknown scan id {scan_id}")
        self.rebuild()
        nodes = [n for n in self._held(self._scan_roots.pop(scan_id, set())) if len(n.scan_ids)]
        self.scans.discard(scan_id)
        if not nodes:
            return
        lens = np.array([n.n_window for n in nodes])
        hit_all = np.concatenate([n.scan_ids for n in nodes]) == scan_id
        owner = np.repeat(np.arange(len(nodes)), lens)[hit_all]
        masks = np.split(hit_all, np.cumsum(lens)[:-1])
        hit_nodes = np.unique(owner)
        pts = final_pose.apply(np.concatenate([nodes[i].local[masks[i]] for i in hit_nodes]))
        # per-node moments; owner is ascending so the hit order matches
        slot = np.searchsorted(hit_nodes, owner)
        k = len(hit_nodes)
        cnt = np.bincount(slot, minlength=k)
        sums = np.stack([np.bincount(slot, pts[:, a], minlength=k) for a in range(3)], axis=1)
        outer = np.stack([np.bincount(slot, pts[:, a] * pts[:, b], minlength=k)
                          for a in range(3) for b in range(3)], axis=1).reshape(-1, 3, 3)
        for j, i in enumerate(hit_nodes.tolist()):
            node, m = nodes[i], masks[i]
            c = PointCluster(int(cnt[j]), sums[j], outer[j])
            self._add_fixed(node.root_key, node.depth, node.key, c)
            node.fixed_stats = c if node.fixed_stats is None else node.fixed_stats + c
            keep = ~m
            node.scan_ids, node.local, node.world = node.scan_ids[keep], node.local[keep], node.world[keep]

    # ----------------------------------------------------------------- update

    def update_features(self, poses: Mapping[int, Pose]) -> None:
        """Re-transform window points with refined poses and re-test their cells.

        Points that left their cell are routed again from the root; every
        touched cell is re-tested and split further if it no longer holds a
        single feature.
        """
        self.rebuild()
        sids = np.array(sorted(int(s) for s in poses), dtype=int)
        if len(sids) == 0:
            return
        R = np.array([poses[int(s)].rotation for s in sids])
        t = np.array([poses[int(s)].translation for s in sids])
        touched = self.roots_of_scans(sids)
        nodes = [n for n in self._held(touched) if len(n.scan_ids)]
        moved = []
        if nodes:
            lens = np.array([len(n.scan_ids) for n in nodes])
            cuts = np.cumsum(lens)[:-1]
            ids = np.concatenate([n.scan_ids for n in nodes])
            loc = np.concatenate([n.local for n in nodes])
            wld = np.concatenate([n.world for n in nodes])
            j = np.minimum(np.searchsorted(sids, ids), len(sids) - 1)
            m = sids[j] == ids
            jm = j[m]
            wld[m] = np.matmul(R[jm], loc[m][:, :, None])[:, :, 0] + t[jm]
            size = np.repeat([n.size for n in nodes], lens)
            key = np.repeat(np.array([n.key for n in nodes], dtype=np.int64), lens, axis=0)
            out = np.any(np.floor(wld / size[:, None]).astype(np.int64) != key, axis=1)
            hit = np.add.reduceat(m, np.r_[0, cuts]) > 0
            n_out = np.add.reduceat(out, np.r_[0, cuts])
            if np.any(out):
                moved.append((ids[out], loc[out], wld[out]))
            for i, (node, sl_ids, sl_loc, sl_wld, sl_out) in enumerate(zip(
                    nodes, np.split(ids, cuts), np.split(loc, cuts), np.split(wld, cuts), np.split(out, cuts))):
                if not hit[i]:
                    continue
                if n_out[i]:
                    keep = ~sl_out
                    sl_ids, sl_loc, sl_wld = sl_ids[keep], sl_loc[keep], sl_wld[keep]
                node.scan_ids, node.local, node.world = sl_ids, sl_loc, sl_wld
                self._pending[id(node)] = node
        if moved:
            self._insert(np.concatenate([m[0] for m in moved]), np.vstack([m[1] for m in moved]),
                         np.vstack([m[2] for m in moved]))
        touched = self.roots_of_scans(sids)
        self.rebuild()
        # scans may have left some root cells entirely
        for rk in touched | self._rebuilt:
            holders = list(self._holders.get(rk, {}).values())
            present = set(np.unique(np.concatenate([n.scan_ids for n in holders])).tolist()) if holders else set()
            for s in sids.tolist():
                if s in present:
                    self._scan_roots.setdefault(s, set()).add(rk)
                elif s in self._scan_roots:
                    self._scan_roots[s].discard(rk)

    # ------------------------------------------------------------- matching

    def index(self) -> "LeafIndex":
        self.rebuild()
        if self._index is None:
            self._index = LeafIndex(self)
        return self._index

    def nearest_voxel_match(self, p, match_radius: float | None = None):
        index = self.index()
        idx, dist = index.match(np.reshape(p, (1, 3)), match_radius)
        if idx[0] < 0:
            return None
        return index.leaves[idx[0]], float(dist[0])

    # ------------------------------------------------------------------ debug

    def dump(self) -> list[dict]:
        out = []
        for n in self.leaves():
            lam = n.lam
            out.append({
                "center": n.center.tolist(),
                "size": n.size,
                "depth": n.depth,
                "kind": self.kind.value,
                "n": n.count,
                "n_window": n.n_window,
                "ratio_21": float(lam[1] / max(lam[0], _EPS)),
                "ratio_31": float(lam[2] / max(lam[0], _EPS)),
            })
        return out

    def dump_json(self, indent: int | None = None) -> str:
        return json.dumps(self.dump(), indent=indent)


class LeafIndex:
    """Snapshot of leaf features for point-to-feature correspondence search.

    Root cells are pulled in lazily, as queries reach them, so building an
    index costs nothing for the parts of the map that are never matched.
    """

    def __init__(self, vmap: VoxelMap):
        self.kind = vmap.kind
        self.root_size = vmap.config.root_size
        self.match_radius = vmap.config.match_radius
        self._holders = vmap._holders
        self.leaves: list[OctreeNode] = []
        self._q: list[np.ndarray] = []
        self._n: list[np.ndarray] = []
        self.q = np.zeros((0, 3))
        self.n = np.zeros((0, 3))
        self.by_root: dict[Key, list[int]] = {}
        self._cand: dict[Key, np.ndarray] = {}
        self._empty: bool | None = None

    @property
    def empty(self) -> bool:
        if self._empty is None:
            self._empty = not any(n.state is NodeState.LEAF for h in self._holders.values() for n in h.values())
        return self._empty

    def _root(self, key: Key) -> list[int]:
        out = self.by_root.get(key)
        if out is None:
            out = []
            for n in self._holders.get(key, {}).values():
                if n.state is NodeState.LEAF:
                    out.append(len(self.leaves))
                    self.leaves.append(n)
                    self._q.append(n.feature.q)
                    self._n.append(n.feature.n)
            self.by_root[key] = out
        return out

    def _sync(self) -> None:
        if len(self.q) != len(self.leaves):
            self.q = np.array(self._q).reshape(-1, 3)
            self.n = np.array(self._n).reshape(-1, 3)

    def candidates(self, key: Key) -> np.ndarray:
        c = self._cand.get(key)
        if c is None:
            out = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        out.extend(self._root((key[0] + dx, key[1] + dy, key[2] + dz)))
            c = self._cand[key] = np.array(sorted(out), dtype=int)
        return c

    def distances(self, points: np.ndarray, idx: np.ndarray) -> np.ndarray:
        d = points - self.q[idx]
        along = np.einsum("...a,...a->...", d, self.n[idx])
        if self.kind is FeatureKind.PLANE:
            return np.abs(along)
        return np.sqrt(np.maximum(np.einsum("...a,...a->...", d, d) - along ** 2, 0.0))

    def match(self, points, match_radius: float | None = None):
        """Best leaf per point among the 27 surrounding root cells.

        Returns ``(idx, dist)``; ``idx`` is -1 where nothing lies within
        ``match_radius`` of the point.
        """
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        radius = self.match_radius if match_radius is None else match_radius
        idx = np.full(len(P), -1, dtype=int)
        dist = np.full(len(P), np.inf)
        if len(P) == 0 or self.empty:
            return idx, dist
        keys = np.floor(P / self.root_size).astype(np.int64)
        packed, inv = np.unique(_pack(keys), return_inverse=True)
        uniq = _unpack(packed)
        inv = inv.reshape(-1)
        cands = [self.candidates(tuple(k)) for k in uniq.tolist()]
        self._sync()
        # group cells by candidate count (power-of-two classes) to limit padding
        widths = np.array([len(c) for c in cands])
        cls = np.ceil(np.log2(np.maximum(widths, 1))).astype(int)
        cls[widths == 0] = -1
        pcls = cls[inv]
        for c_id in np.unique(cls[cls >= 0]).tolist():
            cells = np.flatnonzero(cls == c_id)
            width = int(widths[cells].max())
            table = np.full((len(uniq), width), -1, dtype=int)
            for u in cells.tolist():
                table[u, :widths[u]] = cands[u]
            pts = np.flatnonzero(pcls == c_id)
            cand = table[inv[pts]]
            valid = cand >= 0
            d = self.distances(P[pts, None, :], np.where(valid, cand, 0))
            d = np.where(valid, d, np.inf)
            best = np.argmin(d, axis=1)
            rows = np.arange(len(pts))
            bd = d[rows, best]
            ok = bd <= radius
            idx[pts[ok]] = cand[rows, best][ok]
            dist[pts[ok]] = bd[ok]
        return idx, dist


def compress_per_scan(node: OctreeNode, cfg: VoxelMapConfig) -> OctreeNode:
    """Copy of ``node`` where scans with too many points are averaged.

    Each over-full scan is cut into ``ceil(n / cap)`` groups along the
    cell's principal direction and every group is replaced by its mean
    local point.  The mean is taken in the scan frame, which commutes with
    the rigid transform.
    """
    cap = cfg.max_points_per_scan_per_voxel
    if not cap or node.n_window == 0:
        return node
    ids_u, counts = np.unique(node.scan_ids, return_counts=True)
    if counts.max() <= cap:
        return node
    axis = node.axis if node.axis is not None else eig_sym3(node.stats().cov()).U[:, 0]
    ids, loc, wld = [], [], []
    for sid, cnt in zip(ids_u, counts):
        m = np.flatnonzero(node.scan_ids == sid)
        if cnt <= cap:
            ids.append(node.scan_ids[m])
            loc.append(node.local[m])
            wld.append(node.world[m])
            continue
        order = m[np.argsort(node.world[m] @ axis, kind="stable")]
        for grp in np.array_split(order, math.ceil(cnt / cap)):
            ids.append([sid])
            loc.append(node.local[grp].mean(axis=0, keepdims=True))
            wld.append(node.world[grp].mean(axis=0, keepdims=True))
    out = OctreeNode(node.center, node.half_size, node.depth, node.key, node.root_key, node.state,
                     list(node.children), np.concatenate(ids).astype(int), np.vstack(loc), np.vstack(wld),
                     node.fixed_stats, node.feature, node.lam)
    return out
