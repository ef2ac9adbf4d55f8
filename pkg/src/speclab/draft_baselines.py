"""Comparison drafters.

Two reference points bracket the fused drafter:

* an independent small language model that shares nothing with the target
  but the vocabulary, drafting from its own token stream;
* a feature-regression drafter that consumes the target's top feature
  paired with the next token embedding and is trained to reproduce the
  following top feature, reading tokens through the target's frozen head.

The regression drafter feeds its own predicted feature forward when
drafting several tokens, so its input distribution drifts with depth; that
drift is the behavior the fused drafter's training rounds exist to absorb.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .drafting import DistillSet, PairDraftSession
from .draft_fused import DraftTrainConfig
from .optim import AdamW, clip_global_norm
from .sampling import Rng, dist_from_logits, greedy_token, sample
from .target import (DecoderLayerParams, KvCache, LayerTaps, TargetModel,
                     TargetTrainConfig, causal_mask, layer_forward_train,
                     layer_infer_step, _one_hot, _rms_np)


# ---------------------------------------------------------------------------
# independent small-LM drafter


@dataclass(frozen=True)
class VanillaConfig:
    """Shape of the standalone drafter; deliberately smaller than any valid
    target configuration, so it gets its own config type with no tap fields."""

    vocab_size: int
    hidden_size: int = 32
    num_layers: int = 1
    num_heads: int = 2
    max_seq_len: int = 512

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must divide evenly into heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def mlp_size(self) -> int:
        return 4 * self.hidden_size


class VanillaDrafter:
    """Small decoder-only LM with its own embeddings and head."""

    kind = "vanilla"

    def __init__(self, config: VanillaConfig, rng: Rng):
        self.config = config
        k, v = config.hidden_size, config.vocab_size
        self.embed = T.Tensor(rng.normal((v, k), 0.02), requires_grad=True)
        self.pos = T.Tensor(rng.normal((config.max_seq_len, k), 0.02), requires_grad=True)
        self.layers = [DecoderLayerParams.init(k, config.mlp_size, rng)
                       for _ in range(config.num_layers)]
        self.final_norm = T.Tensor(np.ones(k), requires_grad=True)
        self.lm_head = T.Tensor(rng.normal((k, v), 0.02), requires_grad=True)

    def params(self) -> dict[str, T.Tensor]:
        out = {"embed": self.embed, "pos": self.pos}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    def session(self) -> "VanillaSession":
        return VanillaSession(self)


def vanilla_forward_train(model: VanillaDrafter, tokens: np.ndarray) -> T.Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    b, n = tokens.shape
    positions = np.broadcast_to(np.arange(n), (b, n))
    x = T.add(T.embedding(model.embed, tokens), T.embedding(model.pos, positions))
    mask = causal_mask(n)
    for layer in model.layers:
        x = layer_forward_train(layer, x, mask, model.config.num_heads)
    return T.matmul(T.rms_norm(x, model.final_norm), model.lm_head)


def evaluate_vanilla(model: VanillaDrafter, sequences: np.ndarray) -> float:
    """Held-out mean next-token cross-entropy."""
    total, count = 0.0, 0
    for seq in np.asarray(sequences):
        with T.no_grad():
            logits = vanilla_forward_train(model, seq[None, :-1]).data[0]
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        nxt = seq[1:]
        total += -logp[np.arange(nxt.size), nxt].sum()
        count += nxt.size
    return total / count


def train_vanilla(
    model: VanillaDrafter,
    train_seqs: np.ndarray,
    heldout_seqs: np.ndarray,
    cfg: TargetTrainConfig,
    rng: Rng,
) -> list[float]:
    """Plain next-token LM training on corpus sequences; returns the
    held-out cross-entropy trace sampled every eval_every steps."""
    params = model.params()
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas)
    order = list(range(len(train_seqs)))
    cursor = 0
    history: list[float] = []
    for step in range(cfg.steps):
        picks = []
        for _ in range(cfg.batch_size):
            if cursor == 0:
                rng.shuffle(order)
            picks.append(order[cursor])
            cursor = (cursor + 1) % len(order)
        batch = train_seqs[np.asarray(picks)]
        opt.zero_grad()
        logits = vanilla_forward_train(model, batch[:, :-1])
        loss = T.cross_entropy(logits, _one_hot(batch[:, 1:], model.config.vocab_size))
        T.backward(loss, params.values())
        clip_global_norm(params, cfg.clip_norm)
        opt.step()
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            history.append(evaluate_vanilla(model, heldout_seqs))
    return history


class VanillaSession:
    """Drafting session over raw tokens.  Mirrors the pair-session surface
    (reset / observe / append_draft / draft_chain / rollback_drafts) so the
    decode loop can drive any drafter; the taps argument is ignored."""

    def __init__(self, drafter: VanillaDrafter):
        self.drafter = drafter
        cfg = drafter.config
        self.cache = KvCache(cfg.num_layers, cfg.max_seq_len, cfg.num_heads,
                             cfg.head_dim)
        self.committed = 0
        self.logits: list[np.ndarray] = []
        self.positions: list[int] = []
        self.chains: dict[int, tuple[int, ...]] = {}

    def _forward_token(self, token: int, position: int, attends: np.ndarray) -> int:
        d = self.drafter
        slot = len(self.logits)
        x = d.embed.data[token] + d.pos.data[position]
        for li, layer in enumerate(d.layers):
            x = layer_infer_step(layer, x, self.cache, li, slot, attends,
                                 d.config.num_heads)
        self.cache.length = slot + 1
        self.logits.append(_rms_np(x, d.final_norm.data) @ d.lm_head.data)
        self.positions.append(position)
        return slot

    def reset(self, first_token: int) -> None:
        self.cache.truncate(0)
        self.committed = 0
        self.logits = []
        self.positions = []
        self.chains = {}
        self._forward_token(first_token, 0, np.arange(1))
        self.committed = 1

    def observe(self, taps, next_tokens) -> None:
        if len(self.logits) != self.committed:
            raise ValueError("drafted tokens still outstanding; roll back first")
        for tok in next_tokens:
            slot = self.committed
            self._forward_token(int(tok), slot, np.arange(slot + 1))
            self.committed += 1

    @property
    def root_slot(self) -> int:
        return self.committed - 1

    @property
    def root_logits(self) -> np.ndarray:
        return self.logits[self.root_slot]

    def append_draft(self, parent_slot: int, token: int) -> int:
        slot = len(self.logits)
        chain = self.chains.get(parent_slot, ()) + (slot,)
        attends = np.concatenate([np.arange(self.committed),
                                  np.asarray(chain, dtype=np.int64)])
        self._forward_token(int(token), self.positions[parent_slot] + 1, attends)
        self.chains[slot] = chain
        return slot

    def rollback_drafts(self) -> None:
        del self.logits[self.committed:]
        del self.positions[self.committed:]
        self.chains = {}
        self.cache.truncate(self.committed)

    def _propose(self, logits: np.ndarray, temperature: float,
                 rng: Rng | None) -> tuple[int, np.ndarray]:
        """Pick one draft token and the distribution it was drawn from.
        Overridable so synthetic test drafters can force proposals."""
        if temperature == 0.0:
            return greedy_token(logits), dist_from_logits(logits, 1.0)
        dist = dist_from_logits(logits, temperature)
        return sample(rng, dist), dist

    def draft_chain(self, depth: int, temperature: float,
                    rng: Rng | None = None) -> tuple[list[int], list[np.ndarray]]:
        tokens: list[int] = []
        dists: list[np.ndarray] = []
        slot = self.root_slot
        logits = self.root_logits
        for step in range(depth):
            tok, dist = self._propose(logits, temperature, rng)
            tokens.append(tok)
            dists.append(dist)
            if step + 1 < depth:
                slot = self.append_draft(slot, tok)
                logits = self.logits[slot]
        return tokens, dists


# ---------------------------------------------------------------------------
# feature-regression drafter


class FeatureRegressionDrafter:
    """Pair drafter whose carried state is a predicted top feature.

    Consumes (top feature, next token embedding) pairs; a projection head on
    the decoder-layer output regresses the following position's top feature,
    and token logits always come from the target's frozen LM head applied to
    that predicted feature.
    """

    kind = "featreg"

    def __init__(self, target: TargetModel, rng: Rng):
        cfg = target.config
        k = cfg.hidden_size
        self.target_config = cfg
        self.embed = target.embed
        self.lm_head = target.lm_head
        # component addresses match the fused drafter so the shared pieces
        # init identically across variants built from the same seed
        self.w_in = T.Tensor(rng.split(1).normal((2 * k, k), 0.02),
                             requires_grad=True)
        self.pos = T.Tensor(rng.split(2).normal((cfg.max_seq_len, k), 0.02),
                            requires_grad=True)
        self.layer = DecoderLayerParams.init(k, cfg.mlp_size, rng.split(3))
        self.w_feat = T.Tensor(rng.split(4).normal((k, k), 0.02),
                               requires_grad=True)
        self.b_feat = T.Tensor(np.zeros(k), requires_grad=True)

    def params(self) -> dict[str, T.Tensor]:
        out = {"w_in": self.w_in, "pos": self.pos,
               "w_feat": self.w_feat, "b_feat": self.b_feat}
        out.update(self.layer.named("layer"))
        return out

    def session(self) -> "FeatureRegSession":
        return FeatureRegSession(self)


class FeatureRegSession(PairDraftSession):
    def _prefix_features(self, taps: LayerTaps) -> np.ndarray:
        return taps.top

    def _post_layer(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.drafter
        f_hat = out @ d.w_feat.data + d.b_feat.data
        return f_hat, f_hat @ d.lm_head.data


def regression_loss(
    drafter: FeatureRegressionDrafter,
    tokens: np.ndarray,
    taps: LayerTaps,
    probs: np.ndarray,
    w_token: float = 0.1,
) -> tuple[T.Tensor, dict[str, float]]:
    """Smooth-L1 feature loss plus w_token times token cross-entropy.

    Slot i pairs the position-i top feature with the embedding of token
    i+1; its output must reproduce the position-i+1 top feature and, through
    the frozen head, the target's distribution after token i+1.  Single
    round, plain causal mask.
    """
    b, n = tokens.shape
    m = n - 1
    cfg = drafter.target_config
    feat = T.Tensor(taps.top[:, :m])
    emb = T.embedding(T.Tensor(drafter.embed.data), tokens[:, 1: 1 + m])
    x = T.matmul(T.concat([feat, emb], axis=-1), drafter.w_in)
    x = T.add(x, T.embedding(drafter.pos, np.arange(m)))
    state = layer_forward_train(drafter.layer, x, causal_mask(m), cfg.num_heads)
    f_hat = T.add(T.matmul(state, drafter.w_feat), drafter.b_feat)
    reg = T.smooth_l1(f_hat, taps.top[:, 1: 1 + m])
    ce = T.cross_entropy(T.matmul(f_hat, T.Tensor(drafter.lm_head.data)),
                         probs[:, 1: 1 + m])
    loss = T.add(reg, T.scale(ce, w_token))
    return loss, {"feature": reg.item(), "token": ce.item()}


def train_featreg(
    drafter: FeatureRegressionDrafter,
    data: DistillSet,
    cfg: DraftTrainConfig,
    rng: Rng,
    w_token: float = 0.1,
) -> list[float]:
    """Optimize the regression drafter; rounds in cfg are ignored (single
    native round by construction)."""
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
        loss, _ = regression_loss(drafter, data.tokens[idx],
                                  data.taps.select(idx), data.probs[idx],
                                  w_token)
        T.backward(loss, params.values())
        clip_global_norm(params, cfg.clip_norm)
        opt.step()
        losses.append(loss.item())
    return losses
