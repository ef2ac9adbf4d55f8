"""The trainable toy target model: a small decoder-only transformer.

Two forward implementations share one set of weights:

* a batched autodiff path used for training (``forward_train``), and
* a position-at-a-time numpy path with a key/value cache used everywhere at
  inference (``forward_infer``).

The inference path computes each position against exactly its attended slot
set, so the arithmetic for a given position does not depend on how the
sequence was chunked into calls.  That makes cache rollback and re-forward
reproduce results bit for bit, which the verifier relies on.

Besides logits, forwards expose per-position feature taps: the residual
stream after three chosen layers (low, mid, high) plus the post-final-norm
top feature that feeds the LM head.  Draft models consume these taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import AdamW, clip_global_norm
from .sampling import Rng, dist_from_logits, greedy_token, sample


def default_tap_layers(num_layers: int) -> tuple[int, int, int]:
    """Quartile spread: ceil(L/4), ceil(L/2), L (1-indexed)."""
    low = max(1, math.ceil(num_layers / 4))
    mid = math.ceil(num_layers / 2)
    high = num_layers
    if not low < mid < high:
        low, mid, high = num_layers - 2, num_layers - 1, num_layers
    return low, mid, high


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int
    num_layers: int
    num_heads: int
    max_seq_len: int = 512
    tap_layers: tuple[int, int, int] = ()

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.hidden_size < 1 or self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be a positive multiple of num_heads")
        if self.num_layers < 3:
            raise ValueError("num_layers must be >= 3 so three distinct taps exist")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if not self.tap_layers:
            object.__setattr__(self, "tap_layers", default_tap_layers(self.num_layers))
        low, mid, high = self.tap_layers
        if not (1 <= low < mid < high <= self.num_layers):
            raise ValueError("tap_layers must satisfy 1 <= low < mid < high <= L")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def mlp_size(self) -> int:
        return 4 * self.hidden_size


def toy_config(vocab_size: int = 64) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, hidden_size=64, num_layers=4,
                       num_heads=4, max_seq_len=512)


@dataclass
class LayerTaps:
    """Per-position features harvested from a target forward.

    low/mid/high are residual-stream states after the tapped layers; top is
    the post-final-norm feature the LM head consumes.  Each is (n, k) for the
    n positions of the forward.  top differs from high unless the final norm
    is an identity.
    """

    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray
    top: np.ndarray

    def select(self, idx) -> "LayerTaps":
        return LayerTaps(self.low[idx], self.mid[idx], self.high[idx], self.top[idx])

    @staticmethod
    def concat(parts: list["LayerTaps"]) -> "LayerTaps":
        return LayerTaps(*(np.concatenate([getattr(p, f) for p in parts])
                           for f in ("low", "mid", "high", "top")))


class KvCache:
    """Per-layer key/value store with exact rollback.

    Entries are only ever appended, truncated, or compacted (``select``);
    stored values are never recomputed, so any surviving slot is bit-identical
    to the forward that produced it.
    """

    def __init__(self, num_layers: int, max_len: int, num_heads: int, head_dim: int):
        shape = (max_len, num_heads, head_dim)
        self.k = [np.zeros(shape) for _ in range(num_layers)]
        self.v = [np.zeros(shape) for _ in range(num_layers)]
        self.length = 0
        self.max_len = max_len

    @classmethod
    def for_model(cls, config: ModelConfig) -> "KvCache":
        return cls(config.num_layers, config.max_seq_len, config.num_heads,
                   config.head_dim)

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ValueError("rollback target outside cached range")
        self.length = length

    def select(self, indices: np.ndarray) -> None:
        """Keep only `indices` (ascending cache slots), compacted to the front."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx[0] < 0 or idx[-1] >= self.length or (np.diff(idx) <= 0).any()):
            raise ValueError("select indices must be ascending cache slots")
        for layer in range(len(self.k)):
            self.k[layer][: idx.size] = self.k[layer][idx]
            self.v[layer][: idx.size] = self.v[layer][idx]
        self.length = idx.size


# ---------------------------------------------------------------------------
# parameters


@dataclass
class DecoderLayerParams:
    attn_norm: T.Tensor
    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    mlp_norm: T.Tensor
    w_up: T.Tensor
    w_down: T.Tensor

    @staticmethod
    def init(k: int, mlp: int, rng: Rng, std: float = 0.02) -> "DecoderLayerParams":
        return DecoderLayerParams(
            attn_norm=T.Tensor(np.ones(k), requires_grad=True),
            wq=T.Tensor(rng.normal((k, k), std), requires_grad=True),
            wk=T.Tensor(rng.normal((k, k), std), requires_grad=True),
            wv=T.Tensor(rng.normal((k, k), std), requires_grad=True),
            wo=T.Tensor(rng.normal((k, k), std), requires_grad=True),
            mlp_norm=T.Tensor(np.ones(k), requires_grad=True),
            w_up=T.Tensor(rng.normal((k, mlp), std), requires_grad=True),
            w_down=T.Tensor(rng.normal((mlp, k), std), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in
                ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down")}


class TargetModel:
    """Decoder-only transformer with learned absolute positions.

    The embedding table and LM head objects are shared by reference with
    every draft model built from this target.
    """

    def __init__(self, config: ModelConfig, rng: Optional[Rng] = None):
        self.config = config
        rng = rng if rng is not None else Rng(0)
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


# ---------------------------------------------------------------------------
# training-path forward (batched autodiff)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def layer_forward_train(layer: DecoderLayerParams, x: T.Tensor, mask: np.ndarray,
                        num_heads: int, attn_probs_out: Optional[list] = None) -> T.Tensor:
    """One pre-norm decoder block on (B, n, k) activations.

    mask is (n, n) or (n, total) boolean; queries are the n rows of x.
    """
    b, n, k = x.shape
    hd = k // num_heads
    h = T.rms_norm(x, layer.attn_norm)
    q = T.matmul(h, layer.wq)
    kk = T.matmul(h, layer.wk)
    vv = T.matmul(h, layer.wv)

    def split(t):  # (B, n, k) -> (B, H, n, hd)
        return T.transpose(T.reshape(t, (b, n, num_heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(kk), split(vv)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    probs = T.masked_softmax(scores, mask)
    if attn_probs_out is not None:
        attn_probs_out.append(probs)
    ctx = T.matmul(probs, vh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, k))
    x = T.add(x, T.matmul(ctx, layer.wo))
    h2 = T.rms_norm(x, layer.mlp_norm)
    x = T.add(x, T.matmul(T.silu(T.matmul(h2, layer.w_up)), layer.w_down))
    return x


def forward_train(model: TargetModel, tokens: np.ndarray) -> T.Tensor:
    """Causal batched forward over (B, T) token ids; returns (B, T, V) logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, n = tokens.shape
    positions = np.broadcast_to(np.arange(n), (b, n))
    x = T.add(T.embedding(model.embed, tokens), T.embedding(model.pos, positions))
    mask = causal_mask(n)
    for layer in model.layers:
        x = layer_forward_train(layer, x, mask, model.config.num_heads)
    top = T.rms_norm(x, model.final_norm)
    return T.matmul(top, model.lm_head)


# ---------------------------------------------------------------------------
# inference-path forward (numpy, cached, position at a time)


def _rms_np(x: np.ndarray, w: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + eps) * w


def _silu_np(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def causal_attends(base: int, n: int) -> list[np.ndarray]:
    """Attended slot sets for n new positions appended after `base` slots."""
    return [np.arange(base + j + 1) for j in range(n)]


def layer_infer_step(layer: DecoderLayerParams, x: np.ndarray, cache: KvCache,
                     layer_idx: int, slot: int, attends: np.ndarray,
                     num_heads: int) -> np.ndarray:
    """One decoder block for one position: write this position's key/value at
    `slot`, attend exactly the `attends` slots (which must include `slot`),
    return the block output.

    Reduction shapes depend only on len(attends), never on how the sequence
    was chunked into forward calls, which is what makes cached decoding
    bit-identical to a from-scratch forward.
    """
    hd = x.size // num_heads
    h = _rms_np(x, layer.attn_norm.data)
    q = (h @ layer.wq.data).reshape(num_heads, hd)
    cache.k[layer_idx][slot] = (h @ layer.wk.data).reshape(num_heads, hd)
    cache.v[layer_idx][slot] = (h @ layer.wv.data).reshape(num_heads, hd)
    k_sel = cache.k[layer_idx][attends]
    v_sel = cache.v[layer_idx][attends]
    scores = np.einsum("hd,nhd->hn", q, k_sel) / math.sqrt(hd)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    x = x + np.einsum("hn,nhd->hd", w, v_sel).reshape(-1) @ layer.wo.data
    h2 = _rms_np(x, layer.mlp_norm.data)
    return x + _silu_np(h2 @ layer.w_up.data) @ layer.w_down.data


def forward_infer(
    model: TargetModel,
    tokens: np.ndarray,
    cache: KvCache,
    positions: Optional[np.ndarray] = None,
    attends: Optional[list[np.ndarray]] = None,
) -> tuple[np.ndarray, LayerTaps]:
    """Append `tokens` to the cache and return their logits and taps.

    positions[j] is the absolute position used for the positional embedding
    (defaults to consecutive).  attends[j] lists the ascending cache slots
    position j may attend, and must include its own slot base+j.  The default
    is plain causal attention over everything cached so far.
    """
    tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
    n = tokens.size
    base = cache.length
    if base + n > cache.max_len:
        raise ValueError("sequence exceeds max_seq_len")
    if positions is None:
        positions = np.arange(base, base + n)
    if attends is None:
        attends = causal_attends(base, n)

    cfg = model.config
    low_l, mid_l, high_l = cfg.tap_layers
    embed = model.embed.data
    pos = model.pos.data
    head = model.lm_head.data
    final_w = model.final_norm.data

    xs = [embed[tokens[j]] + pos[positions[j]] for j in range(n)]
    taps = {"low": [], "mid": [], "high": []}
    for li, layer in enumerate(model.layers):
        for j in range(n):
            xs[j] = layer_infer_step(layer, xs[j], cache, li, base + j,
                                     attends[j], cfg.num_heads)
        if li + 1 == low_l:
            taps["low"] = [x.copy() for x in xs]
        elif li + 1 == mid_l:
            taps["mid"] = [x.copy() for x in xs]
        elif li + 1 == high_l:
            taps["high"] = [x.copy() for x in xs]
    cache.length = base + n
    tops = np.stack([_rms_np(x, final_w) for x in xs])
    # Row-at-a-time head projection: keeps every logit bit-identical no
    # matter how positions are batched across calls.
    logits = np.stack([row @ head for row in tops])
    return logits, LayerTaps(np.stack(taps["low"]), np.stack(taps["mid"]),
                             np.stack(taps["high"]), tops)


def forward_full(model: TargetModel, tokens: np.ndarray) -> tuple[np.ndarray, LayerTaps]:
    """Uncached causal forward over a whole sequence (fresh throwaway cache)."""
    return forward_infer(model, tokens, KvCache.for_model(model.config))


def generate(
    model: TargetModel,
    prompt: list[int],
    num_tokens: int,
    temperature: float = 0.0,
    rng: Optional[Rng] = None,
) -> list[int]:
    """Plain autoregressive decoding.  Temperature 0 is exact greedy argmax
    with the lowest-id tie break; temperature > 0 samples from the softmax."""
    if temperature > 0.0 and rng is None:
        raise ValueError("sampling requires an rng")
    cache = KvCache.for_model(model.config)
    logits, _ = forward_infer(model, np.asarray(prompt), cache)
    out = list(prompt)
    last = logits[-1]
    for _ in range(num_tokens):
        if temperature == 0.0:
            tok = greedy_token(last)
        else:
            tok = sample(rng, dist_from_logits(last, temperature))
        out.append(tok)
        logits, _ = forward_infer(model, np.asarray([tok]), cache)
        last = logits[-1]
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TargetTrainConfig:
    steps: int = 1200
    batch_size: int = 8
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.95)
    clip_norm: float = 0.5
    eval_every: int = 200


@dataclass
class EvalStats:
    step: int
    heldout_ce: float
    greedy_accuracy: float


def _one_hot(ids: np.ndarray, vocab: int) -> np.ndarray:
    out = np.zeros(ids.shape + (vocab,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def lm_loss(model: TargetModel, batch: np.ndarray) -> T.Tensor:
    """Next-token cross-entropy over a (B, T) batch (T-1 predictions each)."""
    logits = forward_train(model, batch[:, :-1])
    targets = _one_hot(batch[:, 1:], model.config.vocab_size)
    return T.cross_entropy(logits, targets)


def evaluate_lm(model: TargetModel, sequences: np.ndarray) -> tuple[float, float]:
    """Held-out mean cross-entropy and greedy next-token accuracy."""
    total_ce = 0.0
    correct = 0
    count = 0
    for seq in sequences:
        logits, _ = forward_full(model, seq[:-1])
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        nxt = seq[1:]
        total_ce += -logp[np.arange(nxt.size), nxt].sum()
        correct += int((logits.argmax(axis=-1) == nxt).sum())
        count += nxt.size
    return total_ce / count, correct / count


def train_target(
    model: TargetModel,
    train_seqs: np.ndarray,
    heldout_seqs: np.ndarray,
    cfg: TargetTrainConfig,
    rng: Rng,
) -> list[EvalStats]:
    """Optimize the target on corpus sequences; returns the eval trace."""
    params = model.params()
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas)
    order = list(range(len(train_seqs)))
    cursor = 0
    history: list[EvalStats] = []
    for step in range(cfg.steps):
        picks = []
        for _ in range(cfg.batch_size):
            if cursor == 0:
                rng.shuffle(order)
            picks.append(order[cursor])
            cursor = (cursor + 1) % len(order)
        batch = train_seqs[np.asarray(picks)]
        opt.zero_grad()
        loss = lm_loss(model, batch)
        T.backward(loss, params.values())
        clip_global_norm(params, cfg.clip_norm)
        opt.step()
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            ce, acc = evaluate_lm(model, heldout_seqs)
            history.append(EvalStats(step + 1, ce, acc))
    return history
