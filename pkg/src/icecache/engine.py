"""End-to-end orchestration over a pre-generated q/k/v stream.

Prefill splits the prompt into sink pages (pinned hot), window pages
(pinned hot, rotating), and a middle region whose keys are clustered into a
per-(layer, head) tree with the entries materialized into cold pages.
Decode then runs, per layer: window rotation (offload the oldest window
page and fold its tokens into the tree) when the newest window page is one
entry short of full, query-aware page selection per query head, group-wise
page union, bulk backload, and sparse attention over the selected pages
plus the always-resident sink and window tokens.

The first skip_layers layers hold their full KV unindexed and attend
exactly, as does the whole engine when the prompt is too short to split.
The engine is not a transformer: embeddings come from the workload.

Layers are processed sequentially within a step; kv-head groups within a
layer are independent (own tree, store, page table) and may be processed by
a thread pool. Metrics are merged after the parallel section.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionOutput, HeadGroup, full_attention, gqa_union, sparse_attention
from .dci import SENTINEL_LEVEL, DciTree, SearchBudget, dci_indexing
from .errors import ConfigError, InputError
from .geometry import exact_topk, transform_query
from .pagestore import SINK, WINDOW, PageTable, TierStore, find_page_index
from .workload import DecodeStep, Workload


@dataclass
class EngineConfig:
    """Shape, paging, and search-budget knobs for one run."""

    layers: int = 4
    kv_heads: int = 2
    query_heads_per_group: int = 1
    d: int = 64
    d_prime: int = 64
    page_size: int = 16
    token_budget: int = 64
    promotion_ratio: float = 0.1
    sink_pages: int = 1
    window_pages: int = 2
    skip_layers: int = 2
    reuse_stride: int = 0        # 0 disables selection reuse; >= 2 enables
    beam: int | None = None      # survivors per level; default 2 x budget
    visit_cap: int | None = None  # per-node evaluations; default 4 x budget
    seed: int = 0
    scalar_bytes: int = 4
    evaluate: bool = False        # compute exact oracles per step
    compare_baseline: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if min(self.layers, self.kv_heads, self.query_heads_per_group,
               self.d, self.d_prime) < 1:
            raise ConfigError("layers, head counts and dims must be >= 1")
        if self.page_size < 2:
            raise ConfigError("page_size must be >= 2")
        if self.token_budget < 1:
            raise ConfigError("token_budget must be >= 1")
        if not 0.0 < self.promotion_ratio < 1.0:
            raise ConfigError("promotion_ratio must lie in (0, 1)")
        if self.sink_pages < 1 or self.window_pages < 1:
            raise ConfigError("sink_pages and window_pages must be >= 1")
        if self.skip_layers < 0:
            raise ConfigError("skip_layers must be >= 0")
        if self.reuse_stride == 1 or self.reuse_stride < 0:
            raise ConfigError("reuse_stride must be 0 (off) or >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.scalar_bytes < 1:
            raise ConfigError("scalar_bytes must be >= 1")

    @property
    def n_query_heads(self) -> int:
        return self.kv_heads * self.query_heads_per_group

    def budget(self) -> SearchBudget:
        return SearchBudget.for_k(self.token_budget, self.beam, self.visit_cap)

    def head_groups(self) -> list[HeadGroup]:
        g = self.query_heads_per_group
        return [HeadGroup(h, tuple(range(h * g, (h + 1) * g)))
                for h in range(self.kv_heads)]


@dataclass
class StepMetrics:
    """Per-step evaluation row, averaged over indexed layers and query heads."""

    step: int
    token_id: int
    recall_at_k: float
    page_hit_rate: float
    covered_attention_mass: float
    approx_rel_error: float
    pages_selected: int
    pages_loaded: int
    tokens_loaded: int
    bytes_moved: int
    transactions: int
    dci_queries: int
    baseline_hit_rate: float | None = None


class _GrowArray:
    """Row-appendable float matrix with amortized doubling."""

    __slots__ = ("_buf", "n")

    def __init__(self, width: int, capacity: int = 64):
        self._buf = np.empty((capacity, width))
        self.n = 0

    def append(self, row: np.ndarray) -> None:
        if self.n == self._buf.shape[0]:
            grown = np.empty((2 * self._buf.shape[0], self._buf.shape[1]))
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n] = row
        self.n += 1

    def extend(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=float)
        need = self.n + rows.shape[0]
        if need > self._buf.shape[0]:
            cap = self._buf.shape[0]
            while cap < need:
                cap *= 2
            grown = np.empty((cap, self._buf.shape[1]))
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n: need] = rows
        self.n = need

    def view(self) -> np.ndarray:
        return self._buf[: self.n]


class TokenOrderBaseline:
    """Token-order page layout with per-page coordinate min/max metadata.

    Pages fill in arrival order; a page's relevance to a query is the
    upper bound sum_i max(q_i * lo_i, q_i * hi_i) over its coordinate-wise
    envelope, and the top-scoring pages are selected.
    """

    def __init__(self, page_size: int):
        self.page_size = page_size
        self.pages: list[list[int]] = []
        self.lo: list[np.ndarray] = []
        self.hi: list[np.ndarray] = []

    def add(self, token_id: int, key: np.ndarray) -> None:
        key = np.asarray(key, dtype=float)
        if not self.pages or len(self.pages[-1]) >= self.page_size:
            self.pages.append([])
            self.lo.append(key.copy())
            self.hi.append(key.copy())
        self.pages[-1].append(int(token_id))
        np.minimum(self.lo[-1], key, out=self.lo[-1])
        np.maximum(self.hi[-1], key, out=self.hi[-1])

    def select_tokens(self, q: np.ndarray, n_pages: int) -> set[int]:
        if not self.pages or n_pages < 1:
            return set()
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        scores = np.maximum(lo * q, hi * q).sum(axis=1)
        order = np.lexsort((np.arange(len(scores)), -scores))
        out: set[int] = set()
        for idx in order[: min(n_pages, len(scores))]:
            out.update(self.pages[int(idx)])
        return out


@dataclass
class _HeadState:
    """Private per-(layer, kv head) machinery."""

    tree: DciTree
    store: TierStore
    table: PageTable
    sink: list = field(default_factory=list)     # sink Page objects
    window: list = field(default_factory=list)   # window Page deque, oldest first
    baseline: TokenOrderBaseline | None = None


class Engine:
    """Engine state: one prefilled stream being decoded step by step."""

    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.groups = cfg.head_groups()
        self.prefilled = False
        self.fallback = False
        self.n_prefill = 0
        self.steps_done = 0
        self.heads: dict[tuple[int, int], _HeadState] = {}
        self._mirror_k: dict[tuple[int, int], _GrowArray] = {}
        self._mirror_v: dict[tuple[int, int], _GrowArray] = {}
        self.sink_tokens: list[int] = []
        self.indexed_tokens: list[int] = []
        self.selection_queries = 0
        self._anchor_tokens: dict[int, set[int]] = {}

    # -- prefill -----------------------------------------------------------

    def _check_workload(self, workload: Workload) -> None:
        spec = workload.spec
        cfg = self.cfg
        if (spec.layers, spec.kv_heads, spec.query_heads_per_group) != \
                (cfg.layers, cfg.kv_heads, cfg.query_heads_per_group):
            raise ConfigError("workload head/layer shape does not match the engine config")
        if (spec.d, spec.d_prime) != (cfg.d, cfg.d_prime):
            raise ConfigError("workload dims do not match the engine config")

    def prefill(self, workload: Workload, n_prefill: int) -> "Engine":
        """Index the first n_prefill tokens of the stream."""
        if self.prefilled:
            raise ConfigError("engine already prefilled")
        self._check_workload(workload)
        if n_prefill < 1:
            raise ConfigError("prefill needs at least one token")
        cfg = self.cfg
        keys, values = workload.prefill_view(n_prefill)
        self.n_prefill = n_prefill

        for layer in range(cfg.layers):
            for h in range(cfg.kv_heads):
                mk = _GrowArray(cfg.d, max(64, n_prefill))
                mv = _GrowArray(cfg.d_prime, max(64, n_prefill))
                mk.extend(keys[:, layer, h])
                mv.extend(values[:, layer, h])
                self._mirror_k[(layer, h)] = mk
                self._mirror_v[(layer, h)] = mv

        s = cfg.page_size
        page_count = math.ceil(n_prefill / s)
        if page_count < cfg.sink_pages + cfg.window_pages + 1 or cfg.skip_layers >= cfg.layers:
            self.fallback = True
            self.prefilled = True
            return self

        sink_end = cfg.sink_pages * s
        window_start = (page_count - cfg.window_pages) * s
        self.sink_tokens = list(range(sink_end))
        self.indexed_tokens = list(range(sink_end, window_start))

        jobs = [(layer, h) for layer in range(cfg.skip_layers, cfg.layers)
                for h in range(cfg.kv_heads)]

        def build(job: tuple[int, int]) -> tuple[tuple[int, int], _HeadState]:
            layer, h = job
            store = TierStore(cfg.d, cfg.d_prime, cfg.scalar_bytes)
            table = PageTable()
            sink_list = []
            for start in range(0, sink_end, s):
                page = store.allocate_page(s, SINK, resident=True, pinned=True)
                for t in range(start, min(start + s, n_prefill)):
                    page.append(t, keys[t, layer, h], values[t, layer, h])
                sink_list.append(page)
            window_list = []
            for start in range(window_start, n_prefill, s):
                page = store.allocate_page(s, WINDOW, resident=True, pinned=True)
                for t in range(start, min(start + s, n_prefill)):
                    page.append(t, keys[t, layer, h], values[t, layer, h])
                window_list.append(page)
            middle = [(t, keys[t, layer, h]) for t in self.indexed_tokens]
            tree = dci_indexing(
                middle, cfg.promotion_ratio, seed=(cfg.seed, layer, h),
                values=[values[t, layer, h] for t in self.indexed_tokens],
                store=store, table=table, page_size=s)
            baseline = None
            if cfg.compare_baseline:
                baseline = TokenOrderBaseline(s)
                for t in self.indexed_tokens:
                    baseline.add(t, keys[t, layer, h])
            return job, _HeadState(tree=tree, store=store, table=table,
                                   sink=sink_list, window=window_list,
                                   baseline=baseline)

        if cfg.workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                for job, state in pool.map(build, jobs):
                    self.heads[job] = state
        else:
            for job in jobs:
                key, state = build(job)
                self.heads[key] = state

        self.prefilled = True
        return self

    # -- selection ----------------------------------------------------------

    def page_select(self, q, layer: int, kv_head: int,
                    budget: SearchBudget | None = None) -> list[int]:
        """Pages containing the tree's top-budget tokens for one query."""
        tokens = self._select_tokens(q, layer, kv_head, budget)
        state = self.heads[(layer, kv_head)]
        return find_page_index(tokens, state.table)

    def _select_tokens(self, q, layer: int, kv_head: int,
                       budget: SearchBudget | None = None) -> list[int]:
        if (layer, kv_head) not in self.heads:
            raise ConfigError(f"no tree for layer {layer}, head {kv_head}")
        state = self.heads[(layer, kv_head)]
        budget = budget if budget is not None else self.cfg.budget()
        self.selection_queries += 1
        return state.tree.query(transform_query(q), SENTINEL_LEVEL, budget.k, budget)

    def is_anchor_layer(self, layer: int) -> bool:
        if self.cfg.reuse_stride < 2:
            raise ConfigError("selection reuse is disabled")
        return layer >= self.cfg.skip_layers and \
            (layer - self.cfg.skip_layers) % self.cfg.reuse_stride == 0

    def anchor_layers(self) -> list[int]:
        return [l for l in range(self.cfg.skip_layers, self.cfg.layers)
                if self.is_anchor_layer(l)]

    def select_with_reuse(self, layer: int, layer_queries: np.ndarray
                          ) -> tuple[dict[int, list[int]], dict[int, set[int]]]:
        """Per-group page and token selections under reuse.

        Anchor layers run fresh per-head queries exactly as vanilla mode
        does and record the group's token union; intermediate layers reuse
        the most recent anchor's token ids, mapped through their own page
        table without touching the tree.
        """
        if self.cfg.reuse_stride < 2:
            raise ConfigError("selection reuse is disabled")
        pages_by_head: dict[int, list[int]] = {}
        tokens_by_head: dict[int, set[int]] = {}
        for group in self.groups:
            h = group.kv_head_id
            state = self.heads[(layer, h)]
            if self.is_anchor_layer(layer):
                per_head_pages = []
                union_tokens: set[int] = set()
                for qh in group.query_head_ids:
                    tokens = self._select_tokens(layer_queries[qh], layer, h)
                    union_tokens.update(tokens)
                    per_head_pages.append(find_page_index(tokens, state.table))
                self._anchor_tokens[h] = union_tokens
                pages_by_head[h] = sorted(gqa_union(per_head_pages))
                tokens_by_head[h] = union_tokens
            else:
                if h not in self._anchor_tokens:
                    raise ConfigError(f"no anchor selection recorded yet for head {h}")
                tokens = self._anchor_tokens[h]
                pages_by_head[h] = find_page_index(tokens, state.table)
                tokens_by_head[h] = set(tokens)
        return pages_by_head, tokens_by_head

    # -- decode ---------------------------------------------------------------

    def _full_reference(self, layer: int, kv_head: int, q: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
        """Exact attention weights (indexed by token id) and output."""
        keys = self._mirror_k[(layer, kv_head)].view()
        values = self._mirror_v[(layer, kv_head)].view()
        logits = (keys @ q) / np.sqrt(q.size)
        logits = logits - logits.max()
        w = np.exp(logits)
        w /= w.sum()
        return w, w @ values

    def _full_output(self, layer: int, kv_head: int, q: np.ndarray) -> AttentionOutput:
        keys = self._mirror_k[(layer, kv_head)].view()
        values = self._mirror_v[(layer, kv_head)].view()
        return full_attention(q, keys, values)

    def decode_step(self, step: DecodeStep
                    ) -> tuple[list[list[AttentionOutput | None]], StepMetrics]:
        """Process one decode token through every layer.

        Returns per-layer, per-query-head attention outputs plus the step's
        metrics row (oracle fields populated only when cfg.evaluate).
        """
        if not self.prefilled:
            raise ConfigError("decode_step before prefill")
        cfg = self.cfg
        token = self.n_prefill + self.steps_done
        if step.token_id != token:
            raise InputError(f"stream misaligned: expected token {token}, got {step.token_id}")

        outputs: list[list[AttentionOutput | None]] = \
            [[None] * cfg.n_query_heads for _ in range(cfg.layers)]
        recalls: list[float] = []
        hits: list[float] = []
        masses: list[float] = []
        rel_errors: list[float] = []
        base_hits: list[float] = []
        traffic = {"pages_selected": 0, "pages_loaded": 0, "tokens_loaded": 0,
                   "bytes": 0, "transactions": 0}
        queries_before = self.selection_queries

        rotate = False
        if not self.fallback:
            rep = self.heads[(cfg.skip_layers, 0)]
            rotate = rep.window[-1].fill >= cfg.page_size - 1

        for layer in range(cfg.layers):
            for h in range(cfg.kv_heads):
                self._mirror_k[(layer, h)].append(step.keys[layer, h])
                self._mirror_v[(layer, h)].append(step.values[layer, h])

            if self.fallback or layer < cfg.skip_layers:
                for qh in range(cfg.n_query_heads):
                    outputs[layer][qh] = self._full_output(
                        layer, qh // cfg.query_heads_per_group, step.queries[layer, qh])
                continue

            if rotate:
                self._rotate_layer(layer)
            for h in range(cfg.kv_heads):
                state = self.heads[(layer, h)]
                target = next(p for p in state.window if not p.full)
                target.append(token, step.keys[layer, h], step.values[layer, h])

            if cfg.reuse_stride >= 2:
                pages_by_head, tokens_by_head = self.select_with_reuse(
                    layer, step.queries[layer])
                qh_tokens = {qh: tokens_by_head[qh // cfg.query_heads_per_group]
                             for qh in range(cfg.n_query_heads)}
            else:
                pages_by_head = {}
                qh_tokens = {}
                for group in self.groups:
                    h = group.kv_head_id
                    state = self.heads[(layer, h)]
                    per_head_pages = []
                    for qh in group.query_head_ids:
                        tokens = self._select_tokens(step.queries[layer, qh], layer, h)
                        qh_tokens[qh] = set(tokens)
                        per_head_pages.append(find_page_index(tokens, state.table))
                    pages_by_head[h] = sorted(gqa_union(per_head_pages))

            def attend_group(group: HeadGroup) -> tuple[list, list]:
                h = group.kv_head_id
                state = self.heads[(layer, h)]
                selected = pages_by_head[h]
                delta = state.store.backload(selected)
                window_tokens = [t for page in state.window for t in page.token_ids]
                attended = list(self.sink_tokens) + window_tokens + \
                    state.store.tokens_in(selected)
                entries = []
                for page in state.sink + state.window:
                    entries.extend(page.entries())
                for pid in selected:
                    entries.extend(state.store.page(pid).entries())
                group_rows = []
                group_eval = []
                group_rows.append((h, delta, len(selected),
                                   sum(state.store.page(p).fill for p in selected)))
                for qh in group.query_head_ids:
                    q = step.queries[layer, qh]
                    out = sparse_attention(q, attended, entries)
                    outputs[layer][qh] = out
                    if cfg.evaluate:
                        group_eval.append(self._evaluate_head(
                            layer, h, q, qh_tokens[qh], attended, out,
                            len(selected), state))
                state.store.evict_unselected(selected)
                return group_rows, group_eval

            if cfg.workers > 1 and len(self.groups) > 1:
                with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                    results = list(pool.map(attend_group, self.groups))
            else:
                results = [attend_group(g) for g in self.groups]

            for group_rows, group_eval in results:
                for _, delta, n_sel, n_tok in group_rows:
                    traffic["pages_selected"] += n_sel
                    traffic["tokens_loaded"] += n_tok
                    traffic["pages_loaded"] += delta.pages_backloaded
                    traffic["bytes"] += delta.bytes_moved
                    traffic["transactions"] += delta.transactions
                for recall, hit, mass, rel, base in group_eval:
                    recalls.append(recall)
                    hits.append(hit)
                    masses.append(mass)
                    rel_errors.append(rel)
                    if base is not None:
                        base_hits.append(base)

        self.steps_done += 1
        metrics = StepMetrics(
            step=self.steps_done - 1,
            token_id=token,
            recall_at_k=float(np.mean(recalls)) if recalls else 1.0,
            page_hit_rate=float(np.mean(hits)) if hits else 1.0,
            covered_attention_mass=float(np.mean(masses)) if masses else 1.0,
            approx_rel_error=float(np.mean(rel_errors)) if rel_errors else 0.0,
            pages_selected=traffic["pages_selected"],
            pages_loaded=traffic["pages_loaded"],
            tokens_loaded=traffic["tokens_loaded"],
            bytes_moved=traffic["bytes"],
            transactions=traffic["transactions"],
            dci_queries=self.selection_queries - queries_before,
            baseline_hit_rate=float(np.mean(base_hits)) if base_hits else None,
        )
        return outputs, metrics

    def _rotate_layer(self, layer: int) -> None:
        """Offload the oldest window page and fold its tokens into the tree."""
        cfg = self.cfg
        rotated_tokens: list[int] | None = None
        for h in range(cfg.kv_heads):
            state = self.heads[(layer, h)]
            old = state.window.pop(0)
            state.store.offload(old.page_id)
            for t, k, v in old.entries():
                state.tree.insert(t, k, v)
                if state.baseline is not None:
                    state.baseline.add(t, k)
            state.store.release(old.page_id)
            fresh = state.store.allocate_page(cfg.page_size, WINDOW,
                                              resident=True, pinned=True)
            state.window.append(fresh)
            rotated_tokens = old.token_ids
        if layer == cfg.skip_layers and rotated_tokens:
            self.indexed_tokens.extend(rotated_tokens)

    def _evaluate_head(self, layer: int, kv_head: int, q: np.ndarray,
                       selected_tokens: set[int], attended: list[int],
                       out: AttentionOutput, n_pages: int, state: _HeadState
                       ) -> tuple[float, float, float, float, float | None]:
        cfg = self.cfg
        ref_w, ref_v = self._full_reference(layer, kv_head, q)
        attended_set = set(attended)

        k_eff = min(cfg.token_budget, len(self.indexed_tokens))
        indexed = np.asarray(self.indexed_tokens)
        indexed_keys = self._mirror_k[(layer, kv_head)].view()[indexed]
        oracle_idx = exact_topk(q, indexed_keys, k_eff)
        oracle_indexed = {int(indexed[i]) for i in oracle_idx}
        recall = len(oracle_indexed & selected_tokens) / k_eff

        n_all = ref_w.size
        k_all = min(cfg.token_budget, n_all)
        oracle_all = exact_topk(q, self._mirror_k[(layer, kv_head)].view(), k_all)
        hit = sum(1 for t in oracle_all if t in attended_set) / k_all

        mass = float(ref_w[sorted(attended_set)].sum())
        denom = float(np.linalg.norm(ref_v))
        rel = float(np.linalg.norm(out.value_out - ref_v)) / max(denom, 1e-300)

        base_hit = None
        if state.baseline is not None:
            base_tokens = state.baseline.select_tokens(q, n_pages)
            base_attended = base_tokens | set(self.sink_tokens) | \
                {t for page in state.window for t in page.token_ids}
            base_hit = sum(1 for t in oracle_all if t in base_attended) / k_all
        return recall, hit, mass, rel, base_hit

    # -- bookkeeping ----------------------------------------------------------

    def token_census(self, layer: int, kv_head: int) -> int:
        """Tokens across sink + window + indexed pages for one head."""
        state = self.heads[(layer, kv_head)]
        sink = sum(p.fill for p in state.sink)
        window = sum(p.fill for p in state.window)
        indexed = sum(p.fill for p in state.store.pages.values()
                      if p.role not in (SINK, WINDOW))
        return sink + window + indexed


def prefill(workload: Workload, cfg: EngineConfig, n_prefill: int | None = None) -> Engine:
    """Build an engine and run its prefill phase over the stream's head."""
    if n_prefill is None:
        n_prefill = workload.n_tokens
    return Engine(cfg).prefill(workload, n_prefill)


def pipeline_estimate(t_prefill: float, t_offload: float, t_index: float,
                      layers: int) -> tuple[float, float]:
    """Serial versus pipelined total time for the three per-layer stages.

    Serial runs prefill, offload, and index back to back for every layer;
    the pipelined bound overlaps them, paying the dominant stage per layer
    plus one fill/drain tail of the two smaller stages. The pipelined total
    never exceeds the serial one.
    """
    times = [t_prefill, t_offload, t_index]
    if any(t < 0 or not np.isfinite(t) for t in times):
        raise InputError("stage times must be finite and non-negative")
    if layers < 1:
        raise InputError("layers must be >= 1")
    serial = layers * sum(times)
    lo, mid, hi = sorted(times)
    pipelined = layers * hi + lo + mid
    return serial, pipelined
