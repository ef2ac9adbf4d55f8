"""Shared draft-model machinery.

Feature-based drafters consume (feature, next-token-embedding) pairs: the
pair at sequence position j carries the target-derived feature for position
j and the embedding of the already-chosen token at position j+1, and its
output proposes the token for position j+2.  During decoding the exact
feature of the newest positions is unavailable, so drafted pairs substitute
the drafter's own previous output state.  ``PairDraftSession`` owns that
bookkeeping: a single-layer key/value cache over pairs, exact rollback of
drafted pairs after verification, and ancestor-restricted attention so the
same session serves both chain and tree drafting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import Rng, dist_from_logits, sample
from .target import (KvCache, LayerTaps, TargetModel, forward_full, generate,
                     greedy_token, layer_infer_step)


@dataclass
class DistillSet:
    """Target-model generations plus the supervision harvested from them:
    feature taps at every position and the target's next-token distribution."""

    tokens: np.ndarray  # (S, N) int
    taps: LayerTaps     # arrays of shape (S, N, k)
    probs: np.ndarray   # (S, N, V): row j is the distribution after token j

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def subset(self, count: int) -> "DistillSet":
        """First `count` sequences: subsets are nested by construction."""
        return DistillSet(self.tokens[:count], self.taps.select(slice(count)),
                          self.probs[:count])


def build_distill_set(
    model: TargetModel,
    prompts: list[list[int]],
    total_len: int,
    temperature: float,
    rng: Rng,
) -> DistillSet:
    """Let the target continue each prompt, then record taps and distributions
    along the full generated sequence."""
    toks, lows, mids, highs, tops, probs = [], [], [], [], [], []
    for i, prompt in enumerate(prompts):
        seq_rng = rng.split(i)
        seq = _generate_seq(model, prompt, total_len, temperature, seq_rng)
        logits, taps = forward_full(model, np.asarray(seq))
        toks.append(seq)
        lows.append(taps.low)
        mids.append(taps.mid)
        highs.append(taps.high)
        tops.append(taps.top)
        probs.append(np.stack([dist_from_logits(z) for z in logits]))
    return DistillSet(
        np.asarray(toks, dtype=np.int64),
        LayerTaps(np.stack(lows), np.stack(mids), np.stack(highs), np.stack(tops)),
        np.stack(probs),
    )


def _generate_seq(model: TargetModel, prompt: list[int], total_len: int,
                  temperature: float, rng: Rng) -> list[int]:
    n_new = total_len - len(prompt)
    if n_new < 0:
        raise ValueError("prompt longer than total_len")
    return generate(model, prompt, n_new, temperature, rng)


class PairDraftSession:
    """Decoding-side state for one feature-pair drafter over one sequence.

    Subclasses define how prefix features are derived from taps, and how a
    decoder-layer output turns into (carried state, logits).  Slots 0..C-1
    hold committed pairs built from exact target features; slots >= C are
    drafted pairs built from the drafter's own states and are discarded by
    ``rollback_drafts`` once the verifier has ruled.
    """

    def __init__(self, drafter):
        self.drafter = drafter
        cfg = drafter.target_config
        self.cache = KvCache(1, cfg.max_seq_len, cfg.num_heads, cfg.head_dim)
        self.committed_pairs = 0
        self.states: list[np.ndarray] = []       # per-slot carried state
        self.logits: list[np.ndarray] = []       # per-slot output logits
        self.positions: list[int] = []           # per-slot absolute position
        self.chains: dict[int, tuple[int, ...]] = {}  # drafted slot -> path slots
        self.last_input_feature: np.ndarray | None = None

    # hooks -----------------------------------------------------------------
    def _prefix_features(self, taps: LayerTaps) -> np.ndarray:
        raise NotImplementedError

    def _post_layer(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map a decoder-layer output to (carried state, logits)."""
        raise NotImplementedError

    # mechanics -------------------------------------------------------------
    def reset(self, first_token: int) -> None:
        self.cache.truncate(0)
        self.committed_pairs = 0
        self.states.clear()
        self.logits.clear()
        self.positions.clear()
        self.chains.clear()

    def _forward_pair(self, feature: np.ndarray, token: int, position: int,
                      attends: np.ndarray) -> None:
        d = self.drafter
        x = np.concatenate([feature, d.embed.data[token]]) @ d.w_in.data
        x = x + d.pos.data[position]
        slot = len(self.states)
        out = layer_infer_step(d.layer, x, self.cache, 0, slot, attends,
                               d.target_config.num_heads)
        self.cache.length = slot + 1
        state, logits = self._post_layer(out)
        self.states.append(state)
        self.logits.append(logits)
        self.positions.append(position)
        self.last_input_feature = feature

    def observe(self, taps: LayerTaps, next_tokens: np.ndarray) -> None:
        """Extend the committed prefix: taps row j pairs with next_tokens[j]."""
        if len(self.states) != self.committed_pairs:
            raise RuntimeError("observe with drafted pairs outstanding")
        features = self._prefix_features(taps)
        if features.shape[0] != len(next_tokens):
            raise ValueError("taps/token length mismatch")
        for feat, tok in zip(features, np.asarray(next_tokens, dtype=np.int64)):
            slot = len(self.states)
            self._forward_pair(feat, int(tok), slot, np.arange(slot + 1))
        self.committed_pairs = len(self.states)

    @property
    def root_slot(self) -> int:
        if self.committed_pairs == 0:
            raise RuntimeError("session has no observed pairs")
        return self.committed_pairs - 1

    @property
    def root_logits(self) -> np.ndarray:
        return self.logits[self.root_slot]

    def append_draft(self, parent_slot: int, token: int) -> int:
        """Add a drafted pair whose feature is the parent slot's carried state.

        The new pair attends every committed pair, its drafted ancestors, and
        itself.  Returns the new slot id; its logits propose the next token.
        """
        feature = self.states[parent_slot]
        parent_chain = self.chains.get(parent_slot, ())
        slot = len(self.states)
        chain = parent_chain + (slot,)
        attends = np.concatenate([np.arange(self.committed_pairs), np.asarray(chain)])
        self._forward_pair(feature, token, self.positions[parent_slot] + 1, attends)
        self.chains[slot] = chain
        return slot

    def rollback_drafts(self) -> None:
        del self.states[self.committed_pairs:]
        del self.logits[self.committed_pairs:]
        del self.positions[self.committed_pairs:]
        self.chains.clear()
        self.cache.truncate(self.committed_pairs)

    def draft_chain(self, depth: int, temperature: float, rng: Rng | None
                    ) -> tuple[list[int], list[np.ndarray]]:
        """Draft `depth` tokens, feeding each step's state into the next.

        Returns the tokens and the exact distributions they were drawn from
        (softmax at the given temperature; greedy picks at temperature 0).
        """
        tokens: list[int] = []
        dists: list[np.ndarray] = []
        logits = self.root_logits
        parent = self.root_slot
        for step in range(depth):
            if temperature == 0.0:
                dist = dist_from_logits(logits)
                tok = greedy_token(logits)
            else:
                dist = dist_from_logits(logits, temperature)
                tok = sample(rng, dist)
            tokens.append(tok)
            dists.append(dist)
            if step + 1 < depth:
                parent = self.append_draft(parent, tok)
                logits = self.logits[parent]
        return tokens, dists


