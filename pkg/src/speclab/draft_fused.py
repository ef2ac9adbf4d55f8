"""Draft model with multi-layer feature fusion and direct token prediction.

The drafter taps the target's residual stream at three depths, fuses the
three k-vectors into one through a learned 3k-to-k projection, and pairs the
fused feature with the embedding of the next committed token.  A single
decoder layer maps each pair to an output state whose logits come straight
from the target's own LM head; no feature-regression loss constrains the
state, so it is free to carry whatever helps predict tokens.

Training simulates decoding: after the native teacher-forced round, further
rounds re-feed each position's previous-round output state as the feature
input, with the ground-truth token embedding teacher-forced.  Round r slots
may attend the original data keys up to their own position plus the same
slot in every earlier simulated round, nothing else, mirroring inference
where a drafted position sees the committed prefix and its own draft chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .drafting import DistillSet, PairDraftSession
from .optim import AdamW, clip_global_norm
from .sampling import Rng
from .target import DecoderLayerParams, LayerTaps, TargetModel


def build_feedback_mask(prefix_len: int, rounds: int) -> np.ndarray:
    """Attention mask over (round, slot) coordinates, flattened row-major by
    round.  Round 0 is the native pass and is plain causal; a round-r query
    at slot i may attend native keys at slots <= i and the slot-i key of
    every round up to r (itself included), so simulated keys are diagonal.
    """
    if prefix_len < 1 or rounds < 1:
        raise ValueError("prefix_len and rounds must be >= 1")
    r = np.repeat(np.arange(rounds), prefix_len)
    i = np.tile(np.arange(prefix_len), rounds)
    qr, qi = r[:, None], i[:, None]
    kr, ki = r[None, :], i[None, :]
    return ((kr == 0) & (ki <= qi)) | ((kr >= 1) & (kr <= qr) & (ki == qi))


class FusedDrafter:
    """Fusion projection + input reduction + one decoder layer.

    The embedding table and LM head are the target's own tensors, shared by
    object reference and never copied or trained here.  With
    ``top_layer_only`` the fusion projection is dropped and the raw
    post-final-norm top feature stands in for the fused one.
    """

    kind = "fused"

    def __init__(self, target: TargetModel, rng: Rng, top_layer_only: bool = False):
        cfg = target.config
        k = cfg.hidden_size
        self.target_config = cfg
        self.top_layer_only = bool(top_layer_only)
        self.embed = target.embed
        self.lm_head = target.lm_head
        # component-addressed streams: shared components init identically
        # across drafter variants built from the same seed
        if not top_layer_only:
            self.w_fuse = T.Tensor(rng.split(0).normal((3 * k, k), 0.02),
                                   requires_grad=True)
            self.b_fuse = T.Tensor(np.zeros(k), requires_grad=True)
        self.w_in = T.Tensor(rng.split(1).normal((2 * k, k), 0.02),
                             requires_grad=True)
        self.pos = T.Tensor(rng.split(2).normal((cfg.max_seq_len, k), 0.02),
                            requires_grad=True)
        self.layer = DecoderLayerParams.init(k, cfg.mlp_size, rng.split(3))

    def params(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        if not self.top_layer_only:
            out["w_fuse"] = self.w_fuse
            out["b_fuse"] = self.b_fuse
        out["w_in"] = self.w_in
        out["pos"] = self.pos
        out.update(self.layer.named("layer"))
        return out

    # feature construction ---------------------------------------------------
    def fuse_train(self, taps: LayerTaps, upto: int) -> T.Tensor:
        """Fused features for slots [0, upto) as an autodiff tensor (B, upto, k)."""
        if self.top_layer_only:
            return T.Tensor(taps.top[:, :upto])
        stacked = np.concatenate(
            [taps.low[:, :upto], taps.mid[:, :upto], taps.high[:, :upto]], axis=-1)
        return T.add(T.matmul(T.Tensor(stacked), self.w_fuse), self.b_fuse)

    def fuse_np(self, taps: LayerTaps) -> np.ndarray:
        """Fused features for (n, k) tap rows at inference."""
        if self.top_layer_only:
            return taps.top
        stacked = np.concatenate([taps.low, taps.mid, taps.high], axis=-1)
        return stacked @ self.w_fuse.data + self.b_fuse.data

    def session(self) -> "FusedSession":
        return FusedSession(self)


class FusedSession(PairDraftSession):
    """Decoding session: carried state is the decoder-layer output itself."""

    def _prefix_features(self, taps: LayerTaps) -> np.ndarray:
        return self.drafter.fuse_np(taps)

    def _post_layer(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return out, out @ self.drafter.lm_head.data


# ---------------------------------------------------------------------------
# training


@dataclass
class DraftTrainConfig:
    steps: int = 800
    batch_size: int = 8
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.95)
    clip_norm: float = 0.5
    rounds: int = 3
    soft_labels: bool = True


def feedback_loss(
    drafter: FusedDrafter,
    tokens: np.ndarray,
    taps: LayerTaps,
    probs: np.ndarray,
    rounds: int,
    soft_labels: bool = True,
    collect_attn: list | None = None,
) -> tuple[T.Tensor, list[float]]:
    """Total drafting loss over all rounds for a (B, N) token batch.

    The loss is exactly the sum of one token cross-entropy per round; there
    is no feature-matching term.  Round r at slot i consumes the round r-1
    state (round 1 consumes the fused feature), is teacher-forced with the
    true token at position i+r, and is scored against the target's
    distribution for the token at position i+r+1.  Gradients flow through
    the carried states across rounds.
    """
    b, n = tokens.shape
    m = n - rounds - (0 if soft_labels else 1)
    if m < 1:
        raise ValueError("sequences too short for this round count")
    cfg = drafter.target_config
    num_heads = cfg.num_heads
    k = cfg.hidden_size
    hd = k // num_heads
    mask_full = build_feedback_mask(m, rounds)
    embed_const = T.Tensor(drafter.embed.data)
    head_const = T.Tensor(drafter.lm_head.data)
    layer = drafter.layer

    def split(t: T.Tensor, rows: int) -> T.Tensor:
        return T.transpose(T.reshape(t, (b, rows, num_heads, hd)), (0, 2, 1, 3))

    feature: T.Tensor = drafter.fuse_train(taps, m)
    k_blocks: list[T.Tensor] = []
    v_blocks: list[T.Tensor] = []
    loss_parts: list[T.Tensor] = []
    part_values: list[float] = []
    for r in range(rounds):
        emb = T.embedding(embed_const, tokens[:, r + 1: r + 1 + m])
        x = T.matmul(T.concat([feature, emb], axis=-1), drafter.w_in)
        x = T.add(x, T.embedding(drafter.pos, np.arange(r, r + m)))
        h = T.rms_norm(x, layer.attn_norm)
        k_blocks.append(split(T.matmul(h, layer.wk), m))
        v_blocks.append(split(T.matmul(h, layer.wv), m))
        q = split(T.matmul(h, layer.wq), m)
        keys = k_blocks[0] if r == 0 else T.concat(k_blocks, axis=2)
        vals = v_blocks[0] if r == 0 else T.concat(v_blocks, axis=2)
        scores = T.scale(T.matmul(q, T.transpose(keys, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = T.masked_softmax(scores, mask_full[r * m:(r + 1) * m, :(r + 1) * m])
        if collect_attn is not None:
            collect_attn.append(attn)
        ctx = T.reshape(T.transpose(T.matmul(attn, vals), (0, 2, 1, 3)), (b, m, k))
        x = T.add(x, T.matmul(ctx, layer.wo))
        h2 = T.rms_norm(x, layer.mlp_norm)
        state = T.add(x, T.matmul(T.silu(T.matmul(h2, layer.w_up)), layer.w_down))
        logits = T.matmul(state, head_const)
        if soft_labels:
            targets = probs[:, r + 1: r + 1 + m]
        else:
            ids = tokens[:, r + 2: r + 2 + m]
            targets = np.zeros((b, m, cfg.vocab_size))
            np.put_along_axis(targets, ids[..., None], 1.0, axis=-1)
        part = T.cross_entropy(logits, targets)
        loss_parts.append(part)
        part_values.append(part.item())
        feature = state
    total = loss_parts[0]
    for part in loss_parts[1:]:
        total = T.add(total, part)
    return total, part_values


def train_fused(
    drafter: FusedDrafter,
    data: DistillSet,
    cfg: DraftTrainConfig,
    rng: Rng,
) -> list[float]:
    """Optimize the drafter against a frozen target's distillation set."""
    params = drafter.params()
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas)
    order = list(range(len(data)))
    cursor = 0
    losses: list[float] = []
    for _ in range(cfg.steps):
        picks = []
        for _ in range(cfg.batch_size):
            if cursor == 0:
                rng.shuffle(order)
            picks.append(order[cursor])
            cursor = (cursor + 1) % len(order)
        idx = np.asarray(picks)
        opt.zero_grad()
        loss, _ = feedback_loss(drafter, data.tokens[idx], data.taps.select(idx),
                                data.probs[idx], cfg.rounds, cfg.soft_labels)
        T.backward(loss, params.values())
        clip_global_norm(params, cfg.clip_norm)
        opt.step()
        losses.append(loss.item())
    return losses
