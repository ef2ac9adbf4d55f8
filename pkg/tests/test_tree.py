"""Draft-tree growth, pruning optimality, and the tree attention mask."""

import numpy as np
import pytest

from speclab.draft_fused import FusedDrafter
from speclab.draft_tree import (DraftNode, DraftTree, TreeConfig,
                                build_tree_mask, expand_tree, rerank_prune,
                                toy_tree_config)
from speclab.drafting import build_distill_set
from speclab.sampling import Rng


class StubSession:
    """Scripted drafter: every (parent slot, token) has a fixed child dist."""

    def __init__(self, root_dist, table):
        self._root = np.asarray(root_dist, dtype=np.float64)
        self.table = table
        self.logits = {}
        self.next_slot = 1
        self.appended = []

    @property
    def root_slot(self):
        return 0

    @property
    def root_logits(self):
        return np.log(self._root)

    def append_draft(self, parent_slot, token):
        slot = self.next_slot
        self.next_slot += 1
        self.appended.append((parent_slot, token))
        self.logits[slot] = np.log(self.table[(parent_slot, token)])
        return slot


def _random_monotone_tree(rng, size):
    """Random topology with strictly decreasing distinct path scores."""
    nodes = [DraftNode(token=0, parent=-1, depth=1, dist=np.ones(2) / 2,
                       log_path_score=-rng.uniform(), slot=1)]
    for i in range(1, size):
        parent = rng.randint(i + 1) - 1  # -1 grows a new root child
        if parent < 0:
            depth, score = 1, 0.0
        else:
            depth = nodes[parent].depth + 1
            score = nodes[parent].log_path_score
        nodes.append(DraftNode(token=i, parent=parent, depth=depth,
                               dist=np.ones(2) / 2,
                               log_path_score=score - 0.1 - rng.uniform(),
                               slot=i + 2))
    return DraftTree(nodes)


class TestConfig:
    def test_defaults_and_toy(self):
        cfg = TreeConfig()
        assert (cfg.total_tokens, cfg.depth, cfg.expand_k) == (60, 6, 10)
        toy = toy_tree_config()
        assert toy.total_tokens == 16 and toy.depth == 5

    def test_validation(self):
        with pytest.raises(ValueError):
            TreeConfig(total_tokens=4, depth=0, expand_k=1, children=1)
        with pytest.raises(ValueError):
            TreeConfig(total_tokens=2, depth=3, expand_k=1, children=1)


class TestDraftTree:
    def test_parents_first_enforced(self):
        bad = [DraftNode(0, parent=1, depth=1, dist=np.ones(2) / 2,
                         log_path_score=0.0, slot=1),
               DraftNode(1, parent=-1, depth=1, dist=np.ones(2) / 2,
                         log_path_score=0.0, slot=2)]
        with pytest.raises(ValueError):
            DraftTree(bad)

    def test_paths_and_children(self):
        tree = _random_monotone_tree(Rng(60), 9)
        for i in range(len(tree)):
            path = tree.path_to(i)
            assert path[-1] == i
            for a, b in zip(path, path[1:]):
                assert tree.nodes[b].parent == a
        roots = [i for i, n in enumerate(tree.nodes) if n.parent == -1]
        covered = set()
        for i in range(len(tree)):
            covered.update(tree.children_of(i))
        assert covered | set(roots) == set(range(len(tree)))


class TestExpand:
    def test_hand_built_two_levels(self):
        """Widths, parents, tokens, and path scores match a worked example."""
        root = np.array([0.5, 0.3, 0.2])
        table = {
            (0, 0): np.array([0.7, 0.2, 0.1]),
            (0, 1): np.array([0.1, 0.1, 0.8]),
            (1, 0): np.array([1 / 3, 1 / 3, 1 / 3]),
            (1, 1): np.array([1 / 3, 1 / 3, 1 / 3]),
            (2, 2): np.array([1 / 3, 1 / 3, 1 / 3]),
            (2, 0): np.array([1 / 3, 1 / 3, 1 / 3]),
        }
        session = StubSession(root, table)
        cfg = TreeConfig(total_tokens=8, depth=2, expand_k=2, children=2)
        tree = expand_tree(session, cfg)
        toks = [(n.parent, n.token, n.depth) for n in tree.nodes]
        # level 1: root's two best tokens; level 2: both children expand,
        #   the 0.5-path first, each picking its own two best tokens
        assert toks == [(-1, 0, 1), (-1, 1, 1),
                        (0, 0, 2), (0, 1, 2), (1, 2, 2), (1, 0, 2)]
        np.testing.assert_allclose(
            [n.log_path_score for n in tree.nodes[:2]],
            [np.log(0.5), np.log(0.3)], atol=1e-12)
        np.testing.assert_allclose(
            tree.nodes[2].log_path_score, np.log(0.5) + np.log(0.7), atol=1e-12)

    def test_expansion_respects_frontier_budget(self):
        """Only the expand_k best frontier nodes get children per level."""
        root = np.array([0.4, 0.3, 0.2, 0.1])
        table = {(0, t): np.array([0.97, 0.01, 0.01, 0.01]) for t in range(4)}
        for slot in range(1, 4):
            for t in range(4):
                table[(slot, t)] = np.full(4, 0.25)
        session = StubSession(root, table)
        cfg = TreeConfig(total_tokens=16, depth=2, expand_k=2, children=3)
        tree = expand_tree(session, cfg)
        assert sum(1 for n in tree.nodes if n.depth == 1) == 3
        assert sum(1 for n in tree.nodes if n.depth == 2) == 6
        expanded_parents = {n.parent for n in tree.nodes if n.depth == 2}
        assert expanded_parents == {0, 1}

    def test_single_branch_equals_chain(self, small_target):
        """expand_k=1, children=1 reproduces chain drafting token for token."""
        drafter = FusedDrafter(small_target, Rng(61))
        data = build_distill_set(small_target, [[1, 2, 3, 4]], 8, 0.0, Rng(62))

        def prepared():
            s = drafter.session()
            s.reset(int(data.tokens[0, 0]))
            s.observe(data.taps.select(0).select(slice(7)), data.tokens[0, 1:8])
            return s

        chain_tokens, _ = prepared().draft_chain(4, 0.0, None)
        tree = expand_tree(prepared(), TreeConfig(total_tokens=4, depth=4,
                                                  expand_k=1, children=1))
        assert [n.token for n in tree.nodes] == chain_tokens
        assert [n.parent for n in tree.nodes] == [-1, 0, 1, 2]


class TestPrune:
    def test_matches_bruteforce_on_random_trees(self):
        """Kept sets are the best ancestor-closed subsets, exhaustively."""
        from itertools import combinations
        rng = Rng(63)
        for trial in range(8):
            size = 6 + rng.randint(5)
            budget = 3 + rng.randint(3)
            tree = _random_monotone_tree(rng, size)
            pruned = rerank_prune(tree, budget)
            want_size = min(budget, size)
            assert len(pruned) == want_size
            best, best_score = None, -np.inf
            for combo in combinations(range(size), want_size):
                keep = set(combo)
                if any(tree.nodes[i].parent >= 0
                       and tree.nodes[i].parent not in keep for i in keep):
                    continue
                score = sum(tree.nodes[i].log_path_score for i in keep)
                if score > best_score:
                    best, best_score = keep, score
            got = {n.slot for n in pruned.nodes}
            assert got == {tree.nodes[i].slot for i in best}

    def test_renumbering_keeps_structure(self):
        """Surviving nodes keep their fields and their original parents."""
        rng = Rng(64)
        tree = _random_monotone_tree(rng, 10)
        pruned = rerank_prune(tree, 6)
        by_slot = {n.slot: n for n in tree.nodes}
        for node in pruned.nodes:
            orig = by_slot[node.slot]
            assert node.token == orig.token
            assert node.log_path_score == orig.log_path_score
            want_parent_slot = (tree.nodes[orig.parent].slot
                                if orig.parent >= 0 else -1)
            got_parent_slot = (pruned.nodes[node.parent].slot
                               if node.parent >= 0 else -1)
            assert got_parent_slot == want_parent_slot


class TestMask:
    def _mask_reference(self, tree, prefix_len):
        n = prefix_len + len(tree)
        out = np.zeros((n, n), dtype=bool)
        for r in range(prefix_len):
            out[r, : r + 1] = True
        for i in range(len(tree)):
            out[prefix_len + i, :prefix_len] = True
            out[prefix_len + i, prefix_len + i] = True
            j = tree.nodes[i].parent
            while j >= 0:
                out[prefix_len + i, prefix_len + j] = True
                j = tree.nodes[j].parent
        return out

    def test_matches_reference_on_random_trees(self):
        rng = Rng(65)
        for _ in range(6):
            tree = _random_monotone_tree(rng, 4 + rng.randint(8))
            prefix = 1 + rng.randint(4)
            np.testing.assert_array_equal(build_tree_mask(tree, prefix),
                                          self._mask_reference(tree, prefix))

    def test_siblings_cannot_see_each_other(self):
        nodes = [DraftNode(0, -1, 1, np.ones(2) / 2, -0.1, 1),
                 DraftNode(1, -1, 1, np.ones(2) / 2, -0.2, 2),
                 DraftNode(0, 0, 2, np.ones(2) / 2, -0.3, 3),
                 DraftNode(1, 0, 2, np.ones(2) / 2, -0.4, 4)]
        mask = build_tree_mask(DraftTree(nodes), 2)
        assert not mask[2 + 0, 2 + 1] and not mask[2 + 1, 2 + 0]
        assert not mask[2 + 2, 2 + 3] and not mask[2 + 3, 2 + 2]
        assert mask[2 + 2, 2 + 0] and not mask[2 + 2, 2 + 1]
