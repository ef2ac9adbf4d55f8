"""Confidence-guided draft trees.

A drafting session proposes several candidate continuations per position;
the tree grows level by level, expanding only the highest-scoring frontier
nodes, where a node's score is the sum of log draft confidences along its
root path.  After expansion the tree is cut back to a fixed node budget and
the survivors are verified in one masked target forward.

Confidence is always the temperature-1 softmax of the drafter's logits,
whatever temperature the verifier will sample at; the scores only steer
which candidates get explored, never the acceptance math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sampling import dist_from_logits


@dataclass(frozen=True)
class TreeConfig:
    """Node budget, growth depth, per-level expansion width, and branching.

    Defaults mirror the documented full-scale settings (60-node budget,
    depth 6, 10 expansions per level); toy benchmarks use smaller values.
    """

    total_tokens: int = 60
    depth: int = 6
    expand_k: int = 10
    children: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.expand_k < 1 or self.children < 1:
            raise ValueError("depth, expand_k and children must be >= 1")
        if self.total_tokens < self.depth:
            raise ValueError("node budget below tree depth")


def toy_tree_config() -> TreeConfig:
    return TreeConfig(total_tokens=16, depth=5, expand_k=3, children=3)


@dataclass
class DraftNode:
    token: int
    parent: int            # index into the node array; -1 means the committed root
    depth: int             # root children are depth 1
    dist: np.ndarray       # drafter distribution at this node (proposes children)
    log_path_score: float  # sum of log confidences along the root path
    slot: int              # drafting-session slot that produced `dist`


class DraftTree:
    """Nodes in topological order with precomputed strict-ancestor index sets."""

    def __init__(self, nodes: list[DraftNode]):
        self.nodes = nodes
        self.ancestors: list[tuple[int, ...]] = []
        for i, node in enumerate(nodes):
            if node.parent >= i:
                raise ValueError("nodes must be ordered parents-first")
            if node.parent < 0:
                self.ancestors.append(())
            else:
                self.ancestors.append(self.ancestors[node.parent] + (node.parent,))

    def __len__(self) -> int:
        return len(self.nodes)

    def path_to(self, index: int) -> tuple[int, ...]:
        """Root-to-node index path, the node itself included."""
        return self.ancestors[index] + (index,)

    def children_of(self, index: int) -> list[int]:
        return [j for j, n in enumerate(self.nodes) if n.parent == index]


def expand_tree(session, cfg: TreeConfig) -> DraftTree:
    """Grow a draft tree from the session's current root distribution.

    Level by level: the cfg.expand_k frontier nodes with the highest path
    scores each propose their cfg.children most confident tokens.  Every
    proposed token is forwarded through the drafter immediately, so each
    node carries the distribution for its own children.  The result is the
    raw expansion; cut it down with rerank_prune before verification.
    """
    root_dist = dist_from_logits(session.root_logits, 1.0)
    # frontier entries: (log_path_score, node index or -1, dist, slot)
    frontier = [(0.0, -1, root_dist, session.root_slot)]
    nodes: list[DraftNode] = []
    for level in range(1, cfg.depth + 1):
        order = sorted(range(len(frontier)), key=lambda i: (-frontier[i][0], i))
        grown = []
        for fi in order[: cfg.expand_k]:
            score, parent, dist, slot = frontier[fi]
            picks = np.argsort(-dist, kind="stable")[: cfg.children]
            for tok in picks:
                conf = dist[tok]
                child_slot = session.append_draft(slot, int(tok))
                child_dist = dist_from_logits(session.logits[child_slot], 1.0)
                node = DraftNode(
                    token=int(tok), parent=parent, depth=level, dist=child_dist,
                    log_path_score=score + (math.log(conf) if conf > 0 else -math.inf),
                    slot=child_slot)
                nodes.append(node)
                grown.append((node.log_path_score, len(nodes) - 1,
                              child_dist, child_slot))
        frontier = grown
    return DraftTree(nodes)


def rerank_prune(tree: DraftTree, total_tokens: int) -> DraftTree:
    """Keep the total_tokens best-scoring nodes, ancestors always included.

    Ties break by depth then token id.  Scores never increase along a path,
    so the top slice is already ancestor-closed; the closure pass below is
    belt and braces for exact-tie layouts.
    """
    order = sorted(range(len(tree)),
                   key=lambda i: (-tree.nodes[i].log_path_score,
                                  tree.nodes[i].depth, tree.nodes[i].token))
    kept = set(order[: total_tokens])
    stack = list(kept)
    while stack:
        parent = tree.nodes[stack.pop()].parent
        if parent >= 0 and parent not in kept:
            kept.add(parent)
            stack.append(parent)
    old_order = sorted(kept)
    renumber = {old: new for new, old in enumerate(old_order)}
    nodes = []
    for old in old_order:
        n = tree.nodes[old]
        nodes.append(DraftNode(n.token, renumber.get(n.parent, -1), n.depth,
                               n.dist, n.log_path_score, n.slot))
    return DraftTree(nodes)


def build_tree_mask(tree: DraftTree, prefix_len: int) -> np.ndarray:
    """Boolean attention mask over prefix positions followed by tree nodes.

    Prefix rows are plain causal.  A node row may see the whole prefix, its
    strict ancestors, and itself — never a sibling or a cousin."""
    n = prefix_len + len(tree)
    mask = np.zeros((n, n), dtype=bool)
    mask[:prefix_len, :prefix_len] = np.tril(np.ones((prefix_len, prefix_len), bool))
    for i in range(len(tree)):
        row = prefix_len + i
        mask[row, :prefix_len] = True
        for a in tree.ancestors[i]:
            mask[row, prefix_len + a] = True
        mask[row, row] = True
    return mask
