"""Lossless verification of drafted tokens.

One target forward scores a whole chain or tree of drafted tokens; an
acceptance walk then commits a prefix of them plus exactly one more token
(a residual replacement where the walk stopped, or a bonus after full
acceptance), leaving the committed token stream distributed exactly as
plain autoregressive decoding from the target.

Chains accept each sampled token with probability min(1, p/q) and fall
back to the normalized positive part of p - q on rejection.  Tree
candidates are picked deterministically by drafter confidence, so the
chain rule does not apply; instead each child is accepted with the
residual target mass at its token, a rejected child's mass is removed and
the residual renormalized, and an exhausted child list commits a residual
sample.  That walk is equivalent to sampling one token from the target and
descending only when it names a child, which is what makes it lossless for
any deterministic candidate-selection rule.

The enumeration helpers at the bottom recompute the committed-token
distribution for both walks by exact case analysis over tiny vocabularies;
they share no code with the walks and serve as their oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .draft_tree import DraftTree, TreeConfig, build_tree_mask
from .sampling import Rng, dist_from_logits, greedy_token, residual, sample
from .target import KvCache, LayerTaps, TargetModel, forward_infer


@dataclass
class VerificationResult:
    """Outcome of one drafting-verification cycle.

    committed holds accepted_count draft tokens plus one replacement or
    bonus token.  taps row i is the target feature vector at the position
    just before committed token i, which is exactly the feature a pair
    drafter must pair with that token; the target cache is left holding
    every committed position except the newest."""

    accepted_count: int
    committed: list[int]
    taps: LayerTaps


def _require_rng(temperature: float, rng: Rng | None) -> None:
    if temperature > 0.0 and rng is None:
        raise ValueError("sampling temperatures require an rng")


# ---------------------------------------------------------------------------
# chain verification


def chain_accept_walk(
    drafts: list[int],
    draft_dists: list[np.ndarray],
    target_dists: list[np.ndarray],
    rng: Rng,
) -> tuple[int, list[int]]:
    """Sampled-candidate acceptance: token i survives with probability
    min(1, p_i/q_i); the first rejection commits a residual sample, full
    survival commits a bonus from the one-past-the-end target dist."""
    if len(target_dists) != len(drafts) + 1:
        raise ValueError("need one target dist per draft plus the bonus dist")
    for i, tok in enumerate(drafts):
        p, q = target_dists[i], draft_dists[i]
        if p.shape != q.shape:
            raise ValueError("draft and target dists disagree on vocab")
        if q[tok] <= 0.0:
            raise ValueError("draft token has zero draft probability")
        if rng.uniform() >= min(1.0, p[tok] / q[tok]):
            return i, list(drafts[:i]) + [sample(rng, residual(p, q))]
    return len(drafts), list(drafts) + [sample(rng, target_dists[-1])]


def verify_chain(
    model: TargetModel,
    cache: KvCache,
    last_token: int,
    drafts: list[int],
    draft_dists: list[np.ndarray],
    temperature: float,
    rng: Rng | None = None,
) -> VerificationResult:
    """Score a drafted chain in one forward and commit the lossless prefix.

    The cache must hold every committed token except last_token; the
    forward appends last_token plus the drafts, and the cache is truncated
    back so the invariant also holds for the returned committed tokens.
    """
    _require_rng(temperature, rng)
    if len(draft_dists) != len(drafts):
        raise ValueError("need exactly one draft dist per draft token")
    base = cache.length
    rows = np.asarray([last_token] + list(drafts), dtype=np.int64)
    logits, taps = forward_infer(model, rows, cache)
    if temperature == 0.0:
        accepted = len(drafts)
        committed = []
        for i, tok in enumerate(drafts):
            good = greedy_token(logits[i])
            if tok != good:
                accepted, committed = i, list(drafts[:i]) + [good]
                break
        else:
            committed = list(drafts) + [greedy_token(logits[-1])]
    else:
        target_dists = [dist_from_logits(row, temperature) for row in logits]
        accepted, committed = chain_accept_walk(drafts, draft_dists,
                                                target_dists, rng)
    cache.truncate(base + accepted + 1)
    return VerificationResult(accepted, committed,
                              taps.select(slice(0, accepted + 1)))


# ---------------------------------------------------------------------------
# tree verification


def tree_accept_walk(
    children_tokens: "callable",
    target_dist_at: "callable",
    rng: Rng,
) -> tuple[list[int], int]:
    """Thinning acceptance over a deterministic candidate tree.

    children_tokens(path) lists the candidate tokens under the node at
    `path` (a tuple of child indices from the root); target_dist_at(path)
    is the target distribution there.  Returns the accepted index path and
    the final committed token.  Pure walk, shared by verify_tree and free
    of model bookkeeping."""
    path: list[int] = []
    while True:
        cands = children_tokens(tuple(path))
        p_res = np.array(target_dist_at(tuple(path)), dtype=np.float64)
        descended = False
        for j, tok in enumerate(cands):
            if rng.uniform() < p_res[tok]:
                path.append(j)
                descended = True
                break
            p_res[tok] = 0.0
            total = p_res.sum()
            if total <= 0.0:
                raise ValueError("residual exhausted; dists are degenerate")
            p_res = p_res / total
        if not descended:
            return path, sample(rng, p_res)
        if not children_tokens(tuple(path)):
            return path, sample(rng, target_dist_at(tuple(path)))


def verify_tree(
    model: TargetModel,
    cache: KvCache,
    last_token: int,
    tree: DraftTree,
    temperature: float,
    rng: Rng | None = None,
) -> VerificationResult:
    """Score a pruned draft tree in one masked forward and walk it.

    Temperature 0 descends into whichever child matches the target argmax
    and stops at the first level without a match; temperature > 0 runs the
    thinning walk.  The cache keeps the prefix plus the accepted path."""
    _require_rng(temperature, rng)
    base = cache.length
    rows = np.asarray([last_token] + [n.token for n in tree.nodes],
                      dtype=np.int64)
    positions = np.asarray([base] + [base + n.depth for n in tree.nodes])
    mask = build_tree_mask(tree, base + 1)
    attends = [np.flatnonzero(mask[base + j]) for j in range(len(rows))]
    logits, taps = forward_infer(model, rows, cache, positions, attends)

    def node_children(path: tuple[int, ...]) -> list[int]:
        parent = -1
        for step in path:
            parent = [j for j, n in enumerate(tree.nodes)
                      if n.parent == parent][step]
        return [n.token for n in tree.nodes if n.parent == parent]

    def node_index(path: tuple[int, ...]) -> int:
        parent = -1
        for step in path:
            parent = [j for j, n in enumerate(tree.nodes)
                      if n.parent == parent][step]
        return parent

    if temperature == 0.0:
        path: list[int] = []
        while True:
            row = node_index(tuple(path))
            good = greedy_token(logits[0 if row < 0 else 1 + row])
            cands = [(j, n) for j, n in enumerate(tree.nodes)
                     if n.parent == row]
            hit = next((j for j, (_, n) in enumerate(cands)
                        if n.token == good), None)
            if hit is None:
                final = good
                break
            path.append(hit)
            if not any(n.parent == cands[hit][0] for n in tree.nodes):
                final = greedy_token(logits[1 + cands[hit][0]])
                break
    else:
        def dist_at(path: tuple[int, ...]) -> np.ndarray:
            row = node_index(path)
            return dist_from_logits(logits[0 if row < 0 else 1 + row],
                                    temperature)

        path, final = tree_accept_walk(node_children, dist_at, rng)

    accepted_nodes: list[int] = []
    parent = -1
    for step in path:
        parent = [j for j, n in enumerate(tree.nodes)
                  if n.parent == parent][step]
        accepted_nodes.append(parent)
    committed = [tree.nodes[i].token for i in accepted_nodes] + [final]
    keep_rows = [0] + [1 + i for i in accepted_nodes]
    cache.select(np.concatenate([np.arange(base + 1),
                                 base + 1 + np.asarray(accepted_nodes,
                                                       dtype=np.int64)]))
    return VerificationResult(len(accepted_nodes), committed,
                              taps.select(np.asarray(keep_rows)))


# ---------------------------------------------------------------------------
# exact enumeration oracles (independent of the walks above)


def _check_enum_bounds(vocab: int, depth: int) -> None:
    if vocab > 16 or depth > 3:
        raise ValueError("enumeration bounds exceeded (vocab <= 16, depth <= 3)")


def chain_cycle_blocks(
    history: tuple[int, ...],
    target_dist_fn,
    draft_dist_fn,
    depth: int,
) -> dict[tuple[int, ...], float]:
    """Exact distribution over the committed block of one chain cycle.

    Enumerates every draft chain, every accept/reject pattern, and every
    residual or bonus choice, multiplying probabilities symbolically."""
    vocab = int(np.asarray(target_dist_fn(history)).size)
    _check_enum_bounds(vocab, depth)
    blocks: dict[tuple[int, ...], float] = {}

    def add(block: tuple[int, ...], prob: float) -> None:
        if prob > 0.0:
            blocks[block] = blocks.get(block, 0.0) + prob

    for chain in product(range(vocab), repeat=depth):
        q_prob = 1.0
        qs, ps = [], []
        for i in range(depth):
            q = np.asarray(draft_dist_fn(history + chain[:i]))
            p = np.asarray(target_dist_fn(history + chain[:i]))
            qs.append(q)
            ps.append(p)
            q_prob *= q[chain[i]]
        if q_prob == 0.0:
            continue
        survive = 1.0
        for i in range(depth):
            alpha = min(1.0, ps[i][chain[i]] / qs[i][chain[i]])
            reject = survive * (1.0 - alpha)
            if reject > 0.0:
                res = residual(ps[i], qs[i])
                for tok in range(vocab):
                    add(chain[:i] + (tok,), q_prob * reject * res[tok])
            survive *= alpha
            if survive == 0.0:
                break
        if survive > 0.0:
            bonus = np.asarray(target_dist_fn(history + chain))
            for tok in range(vocab):
                add(chain + (tok,), q_prob * survive * bonus[tok])
    return blocks


def _enum_tree_children(draft_dist_fn, history, path, cfg: TreeConfig):
    """Candidate tokens the deterministic expansion would propose under
    `path`, ignoring budget pruning (enumeration trees stay tiny)."""
    if len(path) >= cfg.depth:
        return []
    q = np.asarray(draft_dist_fn(history + path))
    return [int(t) for t in np.argsort(-q, kind="stable")[: cfg.children]]


def tree_cycle_blocks(
    history: tuple[int, ...],
    target_dist_fn,
    draft_dist_fn,
    cfg: TreeConfig,
) -> dict[tuple[int, ...], float]:
    """Exact committed-block distribution for one thinning-walk tree cycle
    over the unpruned deterministic expansion of draft_dist_fn."""
    vocab = int(np.asarray(target_dist_fn(history)).size)
    _check_enum_bounds(vocab, cfg.depth)
    blocks: dict[tuple[int, ...], float] = {}

    def add(block, prob):
        if prob > 0.0:
            blocks[block] = blocks.get(block, 0.0) + prob

    def walk(path: tuple[int, ...], mass: float) -> None:
        if mass <= 0.0:
            return
        cands = _enum_tree_children(draft_dist_fn, history, path, cfg)
        p = np.asarray(target_dist_fn(history + path), dtype=np.float64)
        if not cands:
            for tok in range(vocab):
                add(path + (tok,), mass * p[tok])
            return
        p_res = p.copy()
        reach = 1.0
        for tok in cands:
            # descend with prob p_res[tok]; collapsing the walk analytically,
            # the chance of committing token t after exhausting all children
            # is reach * p_res[t] with every candidate zeroed out.
            walk(path + (tok,), mass * reach * p_res[tok])
            keep = 1.0 - p_res[tok]
            if keep <= 0.0:
                reach = 0.0
                break
            p_res = p_res.copy()
            p_res[tok] = 0.0
            p_res /= keep
            reach *= keep
        if reach > 0.0:
            for tok in range(vocab):
                add(path + (tok,), mass * reach * p_res[tok])

    walk((), 1.0)
    return blocks


def process_joint(
    cycle_fn,
    target_dist_fn,
    horizon: int,
) -> np.ndarray:
    """Joint distribution of the first `horizon` committed tokens when
    cycles repeat until the horizon is filled.  cycle_fn(history) must
    return a committed-block distribution for one cycle from `history`."""
    vocab = int(np.asarray(target_dist_fn(())).size)
    joint = np.zeros((vocab,) * horizon)

    def run(history: tuple[int, ...], mass: float) -> None:
        if len(history) >= horizon:
            joint[history[:horizon]] += mass
            return
        for block, prob in cycle_fn(history).items():
            run(history + block, mass * prob)

    run((), 1.0)
    return joint


def autoregressive_joint(target_dist_fn, horizon: int) -> np.ndarray:
    """Plain sampling joint over the first `horizon` tokens."""
    vocab = int(np.asarray(target_dist_fn(())).size)
    joint = np.zeros((vocab,) * horizon)
    for seq in product(range(vocab), repeat=horizon):
        prob = 1.0
        for i in range(horizon):
            prob *= np.asarray(target_dist_fn(seq[:i]))[seq[i]]
        joint[seq] = prob
    return joint


def spec_output_distribution(
    target_dist_fn,
    draft_dist_fn,
    depth: int,
    horizon: int = 2,
) -> np.ndarray:
    """Exact committed-token joint for chain speculative decoding."""
    return process_joint(
        lambda h: chain_cycle_blocks(h, target_dist_fn, draft_dist_fn, depth),
        target_dist_fn, horizon)


def tree_output_distribution(
    target_dist_fn,
    draft_dist_fn,
    cfg: TreeConfig,
    horizon: int = 2,
) -> np.ndarray:
    """Exact committed-token joint for tree speculative decoding."""
    return process_joint(
        lambda h: tree_cycle_blocks(h, target_dist_fn, draft_dist_fn, cfg),
        target_dist_fn, horizon)
