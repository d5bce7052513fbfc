"""Multi-level clustered index over lifted key embeddings.

Every point draws a level from a geometric distribution (ratio r): level
1 + the number of consecutive uniform draws below r. A point at level l is
present at every level from 1 up to l. At its top level it joins the node
(cluster) of its nearest neighbour one level up; below that it heads its own
chain of singleton-seeded nodes down to a level-1 leaf. Leaf nodes own the
physical pages holding their members' cache entries, so every indexed token
lives in exactly one leaf and one page slot.

Queries descend from the virtual root: at each level the members of the
surviving clusters are ranked by lifted distance, the best `beam` survive,
and their child nodes are searched next. With the sentinel target level the
candidates of every level feed a global top-k. Within a node, candidates are
ranked exhaustively for small nodes, or by prioritized projection lower
bounds for large ones: with unit directions u_1..u_m,
max_j |u_j . (p - q)| <= |p - q|, so visiting members in ascending order of
that bound and stopping after `visit_cap` true-distance evaluations is a
principled truncation, and is exact once every member has been visited.
"""

from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .geometry import KeyScale, transform_key, transform_query
from .pagestore import INDEXED, DEFAULT_PAGE_SIZE, PageTable, TierStore

# Target-level sentinel: descend to the bottom, collecting at every level.
SENTINEL_LEVEL = -1

# Owner id of the virtual root's node (the top-level cluster).
ROOT_OWNER = -1

# Nodes at or below this size are scanned exhaustively (exact).
EXHAUSTIVE_NODE_LIMIT = 64

# Number of random projection directions per large node.
NUM_PROJECTIONS = 8

# Effectively unbounded beam / visit cap.
UNBOUNDED = 2**62


@dataclass(frozen=True)
class SearchBudget:
    """Work bounds for one query: result count, per-level survivors, and
    true-distance evaluations per node."""

    k: int
    beam: int
    visit_cap: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.beam < self.k:
            raise ConfigError(f"beam ({self.beam}) must be >= k ({self.k})")
        if self.visit_cap < self.k:
            raise ConfigError(f"visit_cap ({self.visit_cap}) must be >= k ({self.k})")

    @classmethod
    def for_k(cls, k: int, beam: int | None = None, visit_cap: int | None = None) -> "SearchBudget":
        return cls(k, beam if beam is not None else 2 * k,
                   visit_cap if visit_cap is not None else 4 * k)

    @classmethod
    def exhaustive(cls, k: int) -> "SearchBudget":
        return cls(k, UNBOUNDED, UNBOUNDED)


# Budget used for 1-NN parent assignment during dynamic insertion.
PARENT_BUDGET = SearchBudget(k=1, beam=8, visit_cap=64)


def assign_level(r: float, rng: np.random.Generator) -> int:
    """Draw a level: 1 + number of consecutive uniform draws below r."""
    if not 0.0 < r < 1.0:
        raise ConfigError(f"promotion ratio must lie in (0, 1), got {r}")
    level = 1
    while rng.random() < r:
        level += 1
    return level


class _NodeSearch:
    """Prioritized projection index over one node's members.

    Keeps m sorted (projection, point id) lists. visit_order() merges the
    per-direction ladders outward from the query's projections; a point is
    emitted once it has been popped from every direction, i.e. in ascending
    order of its max-over-directions projected distance.
    """

    __slots__ = ("dirs", "entries")

    def __init__(self, dirs: np.ndarray):
        self.dirs = dirs
        self.entries: list[list[tuple[float, int]]] = [[] for _ in range(dirs.shape[0])]

    def add(self, point_id: int, vec: np.ndarray) -> None:
        projs = self.dirs @ vec
        for j in range(self.dirs.shape[0]):
            bisect.insort(self.entries[j], (float(projs[j]), point_id))

    def visit_order(self, q_vec: np.ndarray, cap: int) -> list[int]:
        m = self.dirs.shape[0]
        q_proj = self.dirs @ q_vec
        heap: list[tuple[float, int, int, int]] = []
        for j in range(m):
            entries = self.entries[j]
            start = bisect.bisect_left(entries, (float(q_proj[j]), -1))
            for pos, step in ((start - 1, -1), (start, 1)):
                if 0 <= pos < len(entries):
                    gap = abs(entries[pos][0] - float(q_proj[j]))
                    heapq.heappush(heap, (gap, j, pos, step))
        counts: dict[int, int] = {}
        out: list[int] = []
        while heap and len(out) < cap:
            _, j, pos, step = heapq.heappop(heap)
            pid = self.entries[j][pos][1]
            seen = counts.get(pid, 0) + 1
            counts[pid] = seen
            if seen == m:
                out.append(pid)
            nxt = pos + step
            if 0 <= nxt < len(self.entries[j]):
                gap = abs(self.entries[j][nxt][0] - float(q_proj[j]))
                heapq.heappush(heap, (gap, j, nxt, step))
        return out


@dataclass
class DciNode:
    """One cluster: the points at `level` sharing the same parent point."""

    node_id: int
    level: int
    parent_id: int | None      # parent node id; None for the top node
    owner_id: int              # owning point id, ROOT_OWNER for the top node
    member_ids: list[int] = field(default_factory=list)
    page_ids: list[int] = field(default_factory=list)  # leaf nodes only
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _search: _NodeSearch | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.level == 1


class DciTree:
    """Per-head hierarchical index with dynamic insertion.

    One tree has one writer; reads are pure. All randomness (level draws,
    per-node projection directions) derives from the constructor seed, so
    identical inputs reproduce identical trees.
    """

    def __init__(self, dim: int, scale: KeyScale, promotion_ratio: float,
                 seed: int | tuple = 0, *, store: TierStore | None = None,
                 table: PageTable | None = None, page_size: int = DEFAULT_PAGE_SIZE,
                 parent_budget: SearchBudget = PARENT_BUDGET):
        if not 0.0 < promotion_ratio < 1.0:
            raise ConfigError(f"promotion ratio must lie in (0, 1), got {promotion_ratio}")
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.scale = scale
        self.promotion_ratio = promotion_ratio
        self.page_size = page_size
        self.store = store
        self.table = table if table is not None else (PageTable() if store is not None else None)
        self.parent_budget = parent_budget

        entropy = seed if isinstance(seed, int) else list(seed)
        self._seed_seq = np.random.SeedSequence(entropy)
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self._seed_seq.entropy, spawn_key=(0,)))

        self.levels = 0
        self.nodes: dict[int, DciNode] = {}
        self.top_node_id: int | None = None
        self.point_level: dict[int, int] = {}
        self._row: dict[int, int] = {}          # point id -> row in the point buffer
        self._ids: list[int] = []               # row -> point id
        self._buf = np.empty((0, dim + 1))
        self._n = 0
        self._owner_node: dict[tuple[int, int], int] = {}   # (owner point, level) -> node
        self._membership: dict[tuple[int, int], int] = {}   # (point, level) -> containing node
        self._next_node_id = 0

        self.query_count = 0
        self.distance_evals = 0
        self.scale_clamps = 0

    # -- storage helpers ------------------------------------------------

    def __len__(self) -> int:
        return len(self.point_level)

    @property
    def point_ids(self) -> list[int]:
        return list(self._ids)

    def _add_row(self, point_id: int, vec: np.ndarray) -> int:
        if self._n == self._buf.shape[0]:
            grown = np.empty((max(64, 2 * self._buf.shape[0]), self.dim + 1))
            grown[: self._n] = self._buf[: self._n]
            self._buf = grown
        row = self._n
        self._buf[row] = vec
        self._row[point_id] = row
        self._ids.append(point_id)
        self._n += 1
        return row

    def lifted(self, point_id: int) -> np.ndarray:
        return self._buf[self._row[point_id]]

    def _lift_clamped(self, key: np.ndarray) -> np.ndarray:
        """Lift a key, normalizing out-of-envelope norms instead of failing.

        A decode-time key with |k| > c maps to [k/|k|, 0], which keeps the
        image on the unit sphere at the cost of a slightly perturbed
        ordering; the event is counted in scale_clamps.
        """
        key = np.asarray(key, dtype=float)
        norm = float(np.linalg.norm(key))
        if norm > self.scale.c:
            self.scale_clamps += 1
            out = np.empty(key.size + 1)
            out[:-1] = key / norm
            out[-1] = 0.0
            return out
        return transform_key(key, self.scale)

    # -- node helpers -----------------------------------------------------

    def _new_node(self, level: int, parent_id: int | None, owner_id: int,
                  member_ids: list[int] | None = None) -> DciNode:
        node = DciNode(self._next_node_id, level, parent_id, owner_id,
                       member_ids if member_ids is not None else [])
        self._next_node_id += 1
        self.nodes[node.node_id] = node
        self._owner_node[(owner_id, level)] = node.node_id
        for pid in node.member_ids:
            self._membership[(pid, level)] = node.node_id
        return node

    def _add_member(self, node: DciNode, point_id: int) -> None:
        node.member_ids.append(point_id)
        self._membership[(point_id, node.level)] = node.node_id
        node._matrix = None
        if node._search is not None:
            node._search.add(point_id, self.lifted(point_id))

    def _node_matrix(self, node: DciNode) -> np.ndarray:
        if node._matrix is None:
            rows = [self._row[pid] for pid in node.member_ids]
            node._matrix = self._buf[rows]
        return node._matrix

    def _node_search(self, node: DciNode) -> _NodeSearch:
        if node._search is None:
            rng = np.random.default_rng(np.random.SeedSequence(
                entropy=self._seed_seq.entropy, spawn_key=(1, node.node_id)))
            dirs = rng.normal(size=(NUM_PROJECTIONS, self.dim + 1))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            search = _NodeSearch(dirs)
            for pid in node.member_ids:
                search.add(pid, self.lifted(pid))
            node._search = search
        return node._search

    # -- within-node search -----------------------------------------------

    def pdci_query(self, q_vec: np.ndarray, node: DciNode | int, k: int,
                   budget: SearchBudget | None = None) -> list[int]:
        """The node's k nearest member ids to a lifted query.

        Exact for nodes up to EXHAUSTIVE_NODE_LIMIT members or whenever the
        visit cap covers the whole node; otherwise the prioritized
        projection order is truncated at visit_cap evaluations.
        """
        if isinstance(node, int):
            node = self.nodes[node]
        if not node.member_ids:
            raise InputError(f"node {node.node_id} has no members")
        if budget is None:
            budget = SearchBudget.for_k(k)
        ids, d2 = self._node_candidates(node, q_vec, budget.visit_cap)
        order = np.lexsort((ids, d2))
        return [int(ids[i]) for i in order[: min(k, len(ids))]]

    def _node_candidates(self, node: DciNode, q_vec: np.ndarray,
                         visit_cap: int) -> tuple[np.ndarray, np.ndarray]:
        """Member ids and their squared distances, truncated by visit_cap."""
        members = node.member_ids
        if len(members) <= EXHAUSTIVE_NODE_LIMIT or visit_cap >= len(members):
            mat = self._node_matrix(node)
            ids = np.fromiter(members, dtype=np.int64, count=len(members))
        else:
            visited = self._node_search(node).visit_order(q_vec, visit_cap)
            mat = self._buf[[self._row[pid] for pid in visited]]
            ids = np.fromiter(visited, dtype=np.int64, count=len(visited))
        diff = mat - q_vec
        d2 = np.einsum("ij,ij->i", diff, diff)
        self.distance_evals += len(ids)
        return ids, d2

    # -- multi-level query --------------------------------------------------

    def query(self, q_vec: np.ndarray, target_level: int, k: int,
              budget: SearchBudget | None = None) -> list[int]:
        """Descend the tree and return up to k point ids nearest to q_vec.

        target_level SENTINEL_LEVEL descends to the bottom and ranks
        candidates collected at every level (the ids whose keys maximize
        inner product with the query); target_level = l collects only the
        points found at level l, which is how parents are assigned. Targets
        above the current top level clamp to it.
        """
        if k < 1:
            raise InputError(f"k must be >= 1, got {k}")
        if self.levels == 0:
            raise InputError("query on an empty tree")
        if target_level != SENTINEL_LEVEL and target_level < 1:
            raise InputError(f"target level must be {SENTINEL_LEVEL} or >= 1, got {target_level}")
        if budget is None:
            budget = SearchBudget.for_k(k)
        collect_all = target_level == SENTINEL_LEVEL
        floor = 1 if collect_all else min(target_level, self.levels)
        self.query_count += 1

        best: dict[int, float] = {}
        survivors: list[int] = []
        for level in range(self.levels, floor - 1, -1):
            if level == self.levels:
                node_ids = [self.top_node_id]
            else:
                node_ids = [self._owner_node[(pid, level)] for pid in survivors]
            cand_ids: list[np.ndarray] = []
            cand_d2: list[np.ndarray] = []
            for nid in node_ids:
                ids, d2 = self._node_candidates(self.nodes[nid], q_vec, budget.visit_cap)
                cand_ids.append(ids)
                cand_d2.append(d2)
            ids = np.concatenate(cand_ids)
            d2 = np.concatenate(cand_d2)
            if collect_all or level == floor:
                for pid, dist in zip(ids.tolist(), d2.tolist()):
                    if pid not in best or dist < best[pid]:
                        best[pid] = dist
            if level > floor:
                order = np.lexsort((ids, d2))[: min(budget.beam, len(ids))]
                survivors = [int(ids[i]) for i in order]

        ranked = sorted(best.items(), key=lambda item: (item[1], item[0]))
        return [pid for pid, _ in ranked[: min(k, len(ranked))]]

    # -- page placement -----------------------------------------------------

    def _place_entry(self, leaf: DciNode, point_id: int, key: np.ndarray,
                     value: np.ndarray | None) -> None:
        if self.store is None:
            return
        if value is None:
            value = np.zeros(self.store.d_prime)
        if leaf.page_ids and not self.store.page(leaf.page_ids[-1]).full:
            page = self.store.page(leaf.page_ids[-1])
        else:
            page = self.store.allocate_page(self.page_size, INDEXED, resident=False)
            leaf.page_ids.append(page.page_id)
            self.table.assign_page(leaf.node_id, page.page_id)
        page.append(point_id, key, value)
        self.table.map_token(point_id, page.page_id)

    # -- dynamic insertion ----------------------------------------------------

    def insert(self, point_id: int, key, value=None, *,
               rng: np.random.Generator | None = None, level: int | None = None) -> int:
        """Insert one key during decode; returns the level it was assigned.

        The level is drawn from the tree's stream (or the supplied rng), the
        parent is the nearest point one level up, and the entry is appended
        to the owning leaf's current page, opening a new page on overflow.
        A draw above the current top level grows the tree and re-parents the
        former top-level points to the newcomer.
        """
        point_id = int(point_id)
        if point_id in self.point_level:
            raise InputError(f"point id {point_id} already indexed")
        key = np.asarray(key, dtype=float)
        if key.shape != (self.dim,):
            raise InputError(f"key must have shape ({self.dim},), got {key.shape}")
        if level is None:
            level = assign_level(self.promotion_ratio, rng if rng is not None else self.rng)
        vec = self._lift_clamped(key)
        self._add_row(point_id, vec)

        if self.levels == 0:
            self.levels = level
            top = self._new_node(level, None, ROOT_OWNER, [point_id])
            self.top_node_id = top.node_id
            self._membership[(point_id, level)] = top.node_id
            chain_from = level - 1
        elif level > self.levels:
            chain_from = self.levels - 1  # _grow_top covers the levels above
            self._grow_top(point_id, level)
        else:
            if level == self.levels:
                container = self.nodes[self.top_node_id]
            else:
                parent = self.query(vec, level + 1, 1, self.parent_budget)[0]
                container = self.nodes[self._owner_node[(parent, level)]]
            self._add_member(container, point_id)
            chain_from = level - 1

        for lv in range(chain_from, 0, -1):
            parent_node = self._membership[(point_id, lv + 1)]
            self._new_node(lv, parent_node, point_id, [point_id])

        self.point_level[point_id] = level
        leaf = self.nodes[self._membership[(point_id, 1)]]
        self._place_entry(leaf, point_id, key, value)
        return level

    def _grow_top(self, point_id: int, new_level: int) -> None:
        """Raise the tree to new_level with point_id as the sole top point."""
        old_top = self.nodes[self.top_node_id]
        old_level = self.levels
        top = self._new_node(new_level, None, ROOT_OWNER, [point_id])
        del self._owner_node[(ROOT_OWNER, old_level)]
        self.top_node_id = top.node_id
        prev = top
        for lv in range(new_level - 1, old_level, -1):
            prev = self._new_node(lv, prev.node_id, point_id, [point_id])
        # The former top cluster becomes the newcomer's node at the old top
        # level; its members re-parent to the only point above them.
        old_top.owner_id = point_id
        old_top.parent_id = prev.node_id
        self._owner_node[(point_id, old_level)] = old_top.node_id
        self._add_member(old_top, point_id)
        self.levels = new_level

    # -- integrity ------------------------------------------------------------

    def check_invariants(self) -> None:
        """Full structural walk; raises AssertionError on violation."""
        assert self.levels >= 1 and self.top_node_id is not None
        seen_levels = {node.level for node in self.nodes.values()}
        assert seen_levels == set(range(1, self.levels + 1)), "empty level present"
        leaf_members: list[int] = []
        for node in self.nodes.values():
            assert node.member_ids, f"empty node {node.node_id}"
            if node.node_id == self.top_node_id:
                assert node.parent_id is None and node.owner_id == ROOT_OWNER
            else:
                parent = self.nodes[node.parent_id]
                assert parent.level == node.level + 1, "parent not one level up"
                assert node.owner_id in parent.member_ids, "owner missing from parent"
            if node.is_leaf:
                leaf_members.extend(node.member_ids)
                if self.store is not None:
                    fills = sum(self.store.page(pid).fill for pid in node.page_ids)
                    assert fills == len(node.member_ids), "page fill != leaf membership"
        assert sorted(leaf_members) == sorted(self.point_level), "leaf coverage broken"
        assert len(set(leaf_members)) == len(leaf_members), "duplicate leaf membership"
        for pid, lv in self.point_level.items():
            for present in range(1, lv + 1):
                assert (pid, present) in self._membership, "missing level copy"


def dci_indexing(keys, promotion_ratio: float, seed: int | tuple = 0, *,
                 values=None, store: TierStore | None = None,
                 table: PageTable | None = None, page_size: int = DEFAULT_PAGE_SIZE,
                 scale: KeyScale | None = None,
                 parent_budget: SearchBudget = PARENT_BUDGET) -> DciTree:
    """Batch-build a tree over (point id, key vector) pairs.

    Levels are drawn for every point first and empty levels removed; then
    each point's parent is its exact nearest lifted neighbour one level up,
    computed level-by-level with dense distance blocks (the same result as
    an exhaustive-budget tree query, orders of magnitude faster). Leaf
    membership is materialized into pages when a store is supplied.
    """
    pairs = list(keys)
    if not pairs:
        raise InputError("cannot index an empty key set")
    ids = [int(pid) for pid, _ in pairs]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate point ids in index input")
    mat = np.asarray([np.asarray(k, dtype=float) for _, k in pairs])
    if mat.ndim != 2:
        raise InputError("keys must share one dimension")
    if values is not None:
        values = [np.asarray(v, dtype=float) for v in values]
        if len(values) != len(ids):
            raise InputError("values must align one-to-one with keys")

    if scale is None:
        scale = KeyScale.from_keys(mat)
    tree = DciTree(mat.shape[1], scale, promotion_ratio, seed, store=store,
                   table=table, page_size=page_size, parent_budget=parent_budget)

    drawn = [assign_level(promotion_ratio, tree.rng) for _ in ids]
    occupied = sorted(set(drawn))
    compact = {lv: i + 1 for i, lv in enumerate(occupied)}  # drop empty levels
    top = {pid: compact[lv] for pid, lv in zip(ids, drawn)}
    n_levels = len(occupied)

    norms = np.linalg.norm(mat, axis=1)
    over = norms > scale.c
    tree.scale_clamps += int(over.sum())
    safe_norms = np.where(over, norms, scale.c)
    lifted = np.empty((len(ids), mat.shape[1] + 1))
    lifted[:, :-1] = mat / safe_norms[:, None]
    lifted[:, -1] = np.sqrt(np.maximum(0.0, 1.0 - (norms / safe_norms) ** 2))
    for pid, vec in zip(ids, lifted):
        tree._add_row(pid, vec)

    # Exact 1-NN parent per level: points topping out at `lv` against all
    # points present at lv + 1, in blocks to bound memory.
    parent_of: dict[int, int] = {}
    for lv in range(n_levels - 1, 0, -1):
        pts = [pid for pid in ids if top[pid] == lv]
        cands = [pid for pid in ids if top[pid] > lv]
        if not pts:
            continue
        cand_rows = lifted[[tree._row[p] for p in cands]]
        cand_sq = np.einsum("ij,ij->i", cand_rows, cand_rows)
        pt_rows = lifted[[tree._row[p] for p in pts]]
        for start in range(0, len(pts), 2048):
            block = pt_rows[start:start + 2048]
            d2 = cand_sq[None, :] - 2.0 * (block @ cand_rows.T)
            nearest = np.argmin(d2, axis=1)
            for offset, ci in enumerate(nearest):
                parent_of[pts[start + offset]] = cands[int(ci)]

    tree.levels = n_levels
    top_members = [pid for pid in ids if top[pid] == n_levels]
    top_node = tree._new_node(n_levels, None, ROOT_OWNER, top_members)
    tree.top_node_id = top_node.node_id
    for lv in range(n_levels - 1, 0, -1):
        groups: dict[int, list[int]] = {}
        for pid in ids:
            if top[pid] < lv:
                continue
            owner = parent_of[pid] if top[pid] == lv else pid
            groups.setdefault(owner, []).append(pid)
        for owner, members in groups.items():
            parent_node = tree._membership[(owner, lv + 1)]
            tree._new_node(lv, parent_node, owner, members)

    tree.point_level = dict(top)
    if store is not None:
        for node in tree.nodes.values():
            if node.is_leaf:
                for pid in node.member_ids:
                    row = tree._row[pid]
                    value = values[row] if values is not None else None
                    tree._place_entry(node, pid, mat[row], value)
    return tree


def query_raw(tree: DciTree, q, target_level: int, k: int,
              budget: SearchBudget | None = None) -> list[int]:
    """Convenience wrapper: lift a raw query, then run the tree query."""
    return tree.query(transform_query(q), target_level, k, budget)
