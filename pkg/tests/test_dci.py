"""Tree construction, querying, and dynamic insertion against brute force."""

import numpy as np
import pytest

from icecache import (ConfigError, DciTree, InputError, KeyScale, SearchBudget,
                      SENTINEL_LEVEL, TierStore, assign_level, dci_indexing,
                      exact_topk, transform_key, transform_query)
from icecache.dci import EXHAUSTIVE_NODE_LIMIT, ROOT_OWNER


def _pairs(keys):
    return [(i, k) for i, k in enumerate(keys)]


def _clustered(seed, n, d, clusters, spread=0.1):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, clusters, size=n)
    keys = centers[labels] + rng.normal(size=(n, d)) * spread / np.sqrt(d)
    return keys, labels, centers


# -- level assignment -------------------------------------------------------


def test_assign_level_never_promotes_at_vanishing_ratio():
    rng = np.random.default_rng(0)
    assert all(assign_level(1e-12, rng) == 1 for _ in range(1000))


def test_assign_level_matches_geometric_law():
    rng = np.random.default_rng(1)
    draws = np.array([assign_level(0.25, rng) for _ in range(100_000)])
    assert abs((draws >= 2).mean() - 0.25) < 0.01
    assert abs((draws >= 3).mean() - 0.0625) < 0.01


def test_assign_level_rejects_bad_ratio():
    rng = np.random.default_rng(2)
    for r in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ConfigError):
            assign_level(r, rng)


# -- batch indexing ----------------------------------------------------------


def test_single_key_builds_degenerate_tree():
    store = TierStore(4, 4)
    tree = dci_indexing([(7, np.ones(4))], 0.3, seed=0,
                        values=[np.ones(4)], store=store)
    assert tree.levels == 1
    assert len(tree.nodes) == 1
    top = tree.nodes[tree.top_node_id]
    assert top.owner_id == ROOT_OWNER and top.member_ids == [7]
    assert len(top.page_ids) == 1 and store.page(top.page_ids[0]).fill == 1
    tree.check_invariants()


def test_duplicate_point_ids_rejected():
    with pytest.raises(InputError):
        dci_indexing([(1, np.ones(3)), (1, np.zeros(3))], 0.1)


def test_parents_stay_within_generating_cluster():
    rng = np.random.default_rng(3)
    centers = np.zeros((2, 16))
    centers[0, 0] = 10.0
    centers[1, 0] = -10.0
    labels = rng.integers(0, 2, size=2000)
    keys = centers[labels] + rng.normal(size=(2000, 16))
    tree = dci_indexing(_pairs(keys), 0.1, seed=3)
    bottom = [pid for pid, lv in tree.point_level.items() if lv == 1]
    same = 0
    for pid in bottom:
        node = tree.nodes[tree._membership[(pid, 1)]]
        same += labels[node.owner_id] == labels[pid]
    assert same / len(bottom) >= 0.95


def test_self_retrieval_of_indexed_keys():
    rng = np.random.default_rng(4)
    keys = rng.normal(size=(2000, 16))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)  # equal norms: self is argmax
    tree = dci_indexing(_pairs(keys), 0.1, seed=4)
    budget = SearchBudget(1, beam=32, visit_cap=128)
    hits = 0
    sample = rng.choice(2000, size=500, replace=False)
    for pid in sample:
        got = tree.query(transform_query(keys[pid]), SENTINEL_LEVEL, 1, budget)
        hits += got[0] == pid
    assert hits / len(sample) >= 0.99


def test_tree_structure_invariants_hold():
    keys, _, _ = _clustered(5, 1500, 12, 8)
    store = TierStore(12, 4)
    tree = dci_indexing(_pairs(keys), 0.2, seed=5,
                        values=[np.zeros(4)] * 1500, store=store, page_size=8)
    tree.check_invariants()
    # parent-level invariant, walked explicitly over points
    for pid, lv in tree.point_level.items():
        if lv < tree.levels:
            node = tree.nodes[tree._membership[(pid, lv)]]
            parent = tree.nodes[node.parent_id]
            assert parent.level == lv + 1


# -- within-node search -------------------------------------------------------


def test_pdci_query_single_member_node():
    tree = dci_indexing([(3, np.array([1.0, 2.0]))], 0.5, seed=6)
    top = tree.nodes[tree.top_node_id]
    assert tree.pdci_query(np.array([0.0, 0.0, 1.0]), top, 5) == [3]


def test_pdci_query_exhaustive_cap_matches_brute_force():
    rng = np.random.default_rng(7)
    keys = rng.normal(size=(256, 10))
    tree = dci_indexing(_pairs(keys), 1e-9, seed=7)  # one flat node
    top = tree.nodes[tree.top_node_id]
    assert len(top.member_ids) == 256
    scale = tree.scale
    for _ in range(20):
        q = rng.normal(size=10)
        tq = transform_query(q)
        got = tree.pdci_query(tq, top, 8, SearchBudget(8, 16, 256))
        lifted = np.stack([transform_key(k, scale) for k in keys])
        d2 = ((lifted - tq) ** 2).sum(axis=1)
        want = [int(i) for i in np.lexsort((np.arange(256), d2))[:8]]
        assert got == want


def test_pdci_query_full_k_returns_all_ranked():
    rng = np.random.default_rng(8)
    keys = rng.normal(size=(40, 6))
    tree = dci_indexing(_pairs(keys), 1e-9, seed=8)
    top = tree.nodes[tree.top_node_id]
    q = transform_query(rng.normal(size=6))
    got = tree.pdci_query(q, top, 40)
    assert sorted(got) == list(range(40))
    d2 = [float(((tree.lifted(p) - q) ** 2).sum()) for p in got]
    assert d2 == sorted(d2)


def test_pdci_projection_path_respects_visit_cap():
    rng = np.random.default_rng(9)
    keys = rng.normal(size=(500, 8))
    tree = dci_indexing(_pairs(keys), 1e-9, seed=9)
    top = tree.nodes[tree.top_node_id]
    assert len(top.member_ids) > EXHAUSTIVE_NODE_LIMIT
    before = tree.distance_evals
    tree.pdci_query(transform_query(rng.normal(size=8)), top, 4, SearchBudget(4, 8, 100))
    assert tree.distance_evals - before == 100


# -- multi-level query ---------------------------------------------------------


def test_query_with_everything_unbounded_returns_all_ids():
    rng = np.random.default_rng(10)
    keys = rng.normal(size=(300, 8))
    tree = dci_indexing(_pairs(keys), 0.2, seed=10)
    got = tree.query(transform_query(rng.normal(size=8)), SENTINEL_LEVEL,
                     300, SearchBudget.exhaustive(300))
    assert sorted(got) == list(range(300))


def test_exhaustive_budget_query_equals_exact_topk():
    rng = np.random.default_rng(11)
    for trial in range(50):
        n = int(rng.integers(50, 400))
        keys = rng.normal(size=(n, 12))
        tree = dci_indexing(_pairs(keys), 0.15, seed=trial)
        q = rng.normal(size=12)
        got = tree.query(transform_query(q), SENTINEL_LEVEL, 16,
                         SearchBudget.exhaustive(16))
        assert set(got) == set(exact_topk(q, keys, 16))


def test_query_clamps_target_level_above_top():
    keys = np.eye(5)
    tree = dci_indexing(_pairs(keys), 0.2, seed=12)
    got = tree.query(transform_query(keys[0]), tree.levels + 5, 2,
                     SearchBudget.exhaustive(2))
    assert len(got) == min(2, len(tree.nodes[tree.top_node_id].member_ids))


def test_planted_needle_is_always_retrieved():
    d = 32
    for seed in range(100):
        rng = np.random.default_rng(seed)
        target = rng.normal(size=d)
        target /= np.linalg.norm(target)
        keys = rng.normal(size=(1000, d))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        scale = KeyScale.from_keys(keys[:999])
        keys[999] = scale.c * target  # strongest possible inner product
        tree = dci_indexing(_pairs(keys), 0.1, seed=seed)
        got = tree.query(transform_query(target), SENTINEL_LEVEL, 16,
                         SearchBudget.for_k(16))
        assert 999 in got


def test_default_budget_recall_on_clustered_data():
    keys, _, centers = _clustered(13, 10_000, 64, 32)
    tree = dci_indexing(_pairs(keys), 0.1, seed=13)
    rng = np.random.default_rng(14)
    budget = SearchBudget.for_k(32, beam=64)
    recalls = []
    for _ in range(30):
        q = centers[rng.integers(0, 32)] + rng.normal(size=64) * 0.1 / 8.0
        got = set(tree.query(transform_query(q), SENTINEL_LEVEL, 32, budget))
        want = set(exact_topk(q, keys, 32))
        recalls.append(len(got & want) / 32)
    assert float(np.mean(recalls)) >= 0.90


def test_recall_is_monotone_in_beam():
    keys, _, centers = _clustered(15, 3000, 32, 16)
    tree = dci_indexing(_pairs(keys), 0.1, seed=15)
    rng = np.random.default_rng(16)
    queries = [centers[rng.integers(0, 16)] + rng.normal(size=32) * 0.02
               for _ in range(25)]
    k = 16
    means = []
    for beam in (k, 2 * k, 4 * k):
        budget = SearchBudget.for_k(k, beam=beam)
        r = [len(set(tree.query(transform_query(q), SENTINEL_LEVEL, k, budget))
                 & set(exact_topk(q, keys, k))) / k for q in queries]
        means.append(float(np.mean(r)))
    assert means[0] <= means[1] + 1e-12 and means[1] <= means[2] + 1e-12


def test_query_counters_and_empty_tree_error():
    keys = np.eye(4)
    tree = dci_indexing(_pairs(keys), 0.2, seed=17)
    before = tree.query_count
    tree.query(transform_query(keys[0]), SENTINEL_LEVEL, 2)
    assert tree.query_count == before + 1
    empty = DciTree(4, KeyScale(1.0), 0.2, seed=0)
    with pytest.raises(InputError):
        empty.query(transform_query(keys[0]), SENTINEL_LEVEL, 1)


# -- dynamic insertion -----------------------------------------------------------


def test_insert_into_empty_tree():
    store = TierStore(3, 3)
    tree = DciTree(3, KeyScale(2.0), 0.2, seed=18, store=store, page_size=4)
    tree.insert(0, np.ones(3), np.ones(3), level=1)
    assert tree.levels == 1 and len(tree.nodes) == 1
    leaf = tree.nodes[tree.top_node_id]
    assert leaf.page_ids and store.page(leaf.page_ids[0]).fill == 1
    tree.check_invariants()


def test_insert_overflow_opens_second_page():
    s = 8
    store = TierStore(2, 2)
    tree = DciTree(2, KeyScale(5.0), 0.2, seed=19, store=store, page_size=s)
    rng = np.random.default_rng(19)
    for i in range(s + 1):  # all level 1 -> single leaf
        tree.insert(i, np.array([1.0, 0.0]) + rng.normal(size=2) * 1e-3,
                    np.zeros(2), level=1)
    leaf = tree.nodes[tree._membership[(0, 1)]]
    assert len(leaf.page_ids) == 2
    fills = [store.page(p).fill for p in leaf.page_ids]
    assert fills == [s, 1]
    tree.check_invariants()


def test_insert_duplicate_id_rejected():
    tree = DciTree(2, KeyScale(5.0), 0.2, seed=20)
    tree.insert(1, np.ones(2))
    with pytest.raises(InputError):
        tree.insert(1, np.zeros(2))


def test_insert_above_top_grows_tree():
    rng = np.random.default_rng(21)
    keys = rng.normal(size=(50, 6))
    tree = dci_indexing(_pairs(keys), 0.1, seed=21)
    old_levels = tree.levels
    tree.insert(100, rng.normal(size=6), level=old_levels + 2)
    assert tree.levels == old_levels + 2
    tree.check_invariants()
    # the grown tree still answers exactly under unbounded budgets
    got = tree.query(transform_query(keys[0]), SENTINEL_LEVEL, 51,
                     SearchBudget.exhaustive(51))
    assert sorted(got) == sorted(tree.point_level)


def test_insert_clamps_out_of_envelope_keys():
    tree = DciTree(2, KeyScale(1.0), 0.2, seed=22)
    tree.insert(0, np.array([5.0, 0.0]))
    assert tree.scale_clamps == 1
    assert abs(np.linalg.norm(tree.lifted(0)) - 1.0) < 1e-12


def test_incremental_matches_batch_recall():
    keys, _, centers = _clustered(23, 2000, 32, 16)
    batch = dci_indexing(_pairs(keys), 0.1, seed=23)
    incr = DciTree(32, KeyScale.from_keys(keys), 0.1, seed=23)
    for i, k in enumerate(keys):
        incr.insert(i, k)
    incr.check_invariants()
    rng = np.random.default_rng(24)
    k = 32
    budget = SearchBudget.for_k(k)
    diffs = []
    for _ in range(50):
        q = centers[rng.integers(0, 16)] + rng.normal(size=32) * 0.02
        want = set(exact_topk(q, keys, k))
        rb = len(set(batch.query(transform_query(q), SENTINEL_LEVEL, k, budget)) & want) / k
        ri = len(set(incr.query(transform_query(q), SENTINEL_LEVEL, k, budget)) & want) / k
        diffs.append(rb - ri)
    assert abs(float(np.mean(diffs))) <= 0.05


def test_identical_seeds_build_identical_trees():
    keys, _, _ = _clustered(25, 800, 16, 8)
    a = dci_indexing(_pairs(keys), 0.15, seed=99)
    b = dci_indexing(_pairs(keys), 0.15, seed=99)
    assert a.point_level == b.point_level
    assert {(n.node_id, n.level, n.owner_id, tuple(n.member_ids))
            for n in a.nodes.values()} == \
           {(n.node_id, n.level, n.owner_id, tuple(n.member_ids))
            for n in b.nodes.values()}
    q = transform_query(keys[0])
    assert a.query(q, SENTINEL_LEVEL, 8) == b.query(q, SENTINEL_LEVEL, 8)
