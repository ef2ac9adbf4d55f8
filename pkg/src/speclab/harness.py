"""Measurement harness: corpus, decode driver, metrics, experiments.

The corpus is a seeded mixture of periodic token patterns with uniform
corruption noise, structured enough that a small transformer learns it in
minutes yet noisy enough that next-token distributions stay soft.  The
decode driver runs drafting-verification cycles against any drafter
session and logs one record per cycle, from which the two headline
metrics fall out: mean acceptance length (committed tokens per cycle) and
the accept-rate profile by chain position.  Speedup is a primitive-FLOP
cost model rather than wall clock, which at this scale would measure the
interpreter, not the algorithm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .draft_baselines import (FeatureRegressionDrafter, VanillaDrafter,
                              VanillaSession, train_featreg)
from .draft_fused import DraftTrainConfig, FusedDrafter, train_fused
from .draft_tree import TreeConfig, expand_tree, rerank_prune
from .drafting import DistillSet
from .sampling import Rng, derive_seed, greedy_token
from .target import KvCache, ModelConfig, TargetModel, forward_infer
from .verifier import verify_chain, verify_tree


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusSpec:
    """Deterministic synthetic-language description; equal specs always
    produce bit-identical corpora."""

    seed: int = 0
    vocab_size: int = 64
    period: int = 8
    noise: float = 0.05
    num_patterns: int = 4
    mixture_weights: tuple[float, ...] | None = None
    num_sequences: int = 512
    seq_len: int = 64
    heldout: int = 64

    def __post_init__(self):
        if self.vocab_size < 2 or self.period < 2 or self.num_patterns < 1:
            raise ValueError("degenerate corpus shape")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        if not 0 < self.heldout < self.num_sequences:
            raise ValueError("heldout split must leave training sequences")
        if (self.mixture_weights is not None
                and len(self.mixture_weights) != self.num_patterns):
            raise ValueError("one mixture weight per pattern")


def make_corpus(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Build (train, heldout) token arrays.

    Each sequence cycles one of num_patterns random period-length templates
    from a random phase; every position is then independently replaced by a
    uniform token with probability noise.  Draw order is fixed, so the
    output is a pure function of the spec."""
    rng = Rng(spec.seed)
    patterns = [[rng.randint(spec.vocab_size) for _ in range(spec.period)]
                for _ in range(spec.num_patterns)]
    weights = (np.full(spec.num_patterns, 1.0 / spec.num_patterns)
               if spec.mixture_weights is None
               else np.asarray(spec.mixture_weights, dtype=np.float64))
    weights = weights / weights.sum()
    edges = np.cumsum(weights)
    seqs = np.empty((spec.num_sequences, spec.seq_len), dtype=np.int64)
    for s in range(spec.num_sequences):
        pat = patterns[int(np.searchsorted(edges, rng.uniform(), side="right"))]
        phase = rng.randint(spec.period)
        for t in range(spec.seq_len):
            tok = pat[(phase + t) % spec.period]
            if spec.noise > 0.0 and rng.uniform() < spec.noise:
                tok = rng.randint(spec.vocab_size)
            seqs[s, t] = tok
    return seqs[: -spec.heldout], seqs[-spec.heldout:]


def shifted_spec(spec: CorpusSpec, noise_factor: float = 2.0) -> CorpusSpec:
    """Distribution-shift variant: same grammar, heavier corruption."""
    return replace(spec, noise=min(0.5, spec.noise * noise_factor))


def eval_prompts(seqs: np.ndarray, count: int, prompt_len: int) -> list[list[int]]:
    if count > len(seqs):
        raise ValueError("not enough sequences for the requested prompts")
    return [[int(t) for t in seq[:prompt_len]] for seq in seqs[:count]]


# ---------------------------------------------------------------------------
# decode driver


@dataclass
class CycleRecord:
    drafted: int
    accepted: int
    block: list[int]


@dataclass
class DecodeRun:
    tokens: list[int]
    cycles: list[CycleRecord]


def run_decode(
    target: TargetModel,
    session,
    prompt: list[int],
    num_tokens: int,
    temperature: float = 0.0,
    depth: int = 5,
    tree_cfg: TreeConfig | None = None,
    rng: Rng | None = None,
) -> DecodeRun:
    """Drive drafting-verification cycles until num_tokens are committed.

    The session proposes (chain of `depth`, or a pruned tree when tree_cfg
    is given), the target verifies, and the session re-observes the
    committed block with the taps the verifier harvested.  Stops early only
    if another cycle could overrun the positional range."""
    if len(prompt) < 2:
        raise ValueError("prompts need at least two tokens")
    max_extra = tree_cfg.depth if tree_cfg is not None else depth
    cache = KvCache.for_model(target.config)
    _, taps = forward_infer(target, np.asarray(prompt[:-1], dtype=np.int64), cache)
    session.reset(prompt[0])
    session.observe(taps, list(prompt[1:]))
    last = prompt[-1]
    out: list[int] = []
    cycles: list[CycleRecord] = []
    while len(out) < num_tokens:
        if len(prompt) + len(out) + max_extra + 1 > target.config.max_seq_len:
            break
        if tree_cfg is None:
            drafts, dists = session.draft_chain(depth, temperature, rng)
            res = verify_chain(target, cache, last, drafts, dists,
                               temperature, rng)
            drafted = len(drafts)
        else:
            tree = rerank_prune(expand_tree(session, tree_cfg),
                                tree_cfg.total_tokens)
            res = verify_tree(target, cache, last, tree, temperature, rng)
            drafted = len(tree)
        session.rollback_drafts()
        session.observe(res.taps, res.committed)
        out.extend(res.committed)
        last = res.committed[-1]
        cycles.append(CycleRecord(drafted, res.accepted_count,
                                  list(res.committed)))
    return DecodeRun(out, cycles)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    drafter: str
    task: str
    seed: int
    cycles: int
    tau: float
    est_speedup: float
    alphas: list[float] = field(default_factory=list)
    alpha_counts: list[int] = field(default_factory=list)


def mean_accept_length(runs: list[DecodeRun]) -> tuple[float, int]:
    """Committed tokens per cycle pooled over runs, with the cycle count."""
    cycles = sum(len(r.cycles) for r in runs)
    if cycles == 0:
        raise ValueError("no cycles executed")
    total = sum(len(c.block) for r in runs for c in r.cycles)
    return total / cycles, cycles


def measure_accept_length(
    target: TargetModel,
    drafter,
    prompts: list[list[int]],
    num_tokens: int,
    depth: int = 5,
    temperature: float = 0.0,
    tree_cfg: TreeConfig | None = None,
    seed: int = 0,
) -> tuple[float, int]:
    if not prompts:
        raise ValueError("no prompts")
    runs = []
    for i, prompt in enumerate(prompts):
        rng = Rng(derive_seed(seed, i)) if temperature > 0 else None
        runs.append(run_decode(target, drafter.session(), prompt, num_tokens,
                               temperature, depth, tree_cfg, rng))
    return mean_accept_length(runs)


def accept_rates(runs: list[DecodeRun], n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """alpha_n profile from chain cycle logs.

    Position n of a cycle contributes an event only when all earlier chain
    tokens were accepted, and a success when position n itself was."""
    events = np.zeros(n_max + 1, dtype=np.int64)
    wins = np.zeros(n_max + 1, dtype=np.int64)
    for run in runs:
        for c in run.cycles:
            for n in range(min(n_max + 1, c.drafted)):
                if c.accepted >= n:
                    events[n] += 1
                    if c.accepted > n:
                        wins[n] += 1
    if events[0] == 0:
        raise ValueError("no acceptance events at position 0")
    alphas = np.divide(wins, events, out=np.full(n_max + 1, np.nan),
                       where=events > 0)
    return alphas, events


def measure_accept_rates(
    target: TargetModel,
    drafter,
    prompts: list[list[int]],
    num_tokens: int,
    n_max: int = 3,
    temperature: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    runs = []
    for i, prompt in enumerate(prompts):
        rng = Rng(derive_seed(seed, i)) if temperature > 0 else None
        runs.append(run_decode(target, drafter.session(), prompt, num_tokens,
                               temperature, n_max + 1, None, rng))
    return accept_rates(runs, n_max)


def estimate_speedup(tau: float, depth: int, c_draft: float,
                     c_overhead: float = 0.0) -> float:
    """Cost-model speedup: tokens per cycle over cycle cost in units of one
    target forward, with each draft step costing c_draft target forwards."""
    return tau / (1.0 + depth * c_draft + c_overhead)


def target_flops_per_token(cfg: ModelConfig) -> float:
    """Primitive multiply-add count of the matmuls in one position forward."""
    k, v = cfg.hidden_size, cfg.vocab_size
    return cfg.num_layers * 24.0 * k * k + 2.0 * k * v


def drafter_flops_per_token(drafter) -> float:
    if isinstance(drafter, VanillaDrafter):
        c = drafter.config
        k, v = c.hidden_size, c.vocab_size
        return c.num_layers * 24.0 * k * k + 2.0 * k * v
    cfg = drafter.target_config
    k, v = cfg.hidden_size, cfg.vocab_size
    per = 24.0 * k * k + 4.0 * k * k + 2.0 * k * v  # decoder layer + input FC + head
    if isinstance(drafter, FusedDrafter) and not drafter.top_layer_only:
        per += 6.0 * k * k
    if isinstance(drafter, FeatureRegressionDrafter):
        per += 2.0 * k * k
    return per


def relative_draft_cost(target: TargetModel, drafter) -> float:
    return drafter_flops_per_token(drafter) / target_flops_per_token(target.config)


# ---------------------------------------------------------------------------
# synthetic drafters for metric identities


class IdentityDrafter:
    """The target drafting for itself; at temperature 0 every chain token
    matches the target argmax, so acceptance is total."""

    kind = "identity"

    def __init__(self, target: TargetModel):
        self.target = target

    def session(self) -> VanillaSession:
        return VanillaSession(self.target)


class _AntiGreedySession(VanillaSession):
    def _propose(self, logits, temperature, rng):
        best = greedy_token(logits)
        masked = np.array(logits, dtype=np.float64)
        masked[best] = -np.inf
        tok = greedy_token(masked)
        one_hot = np.zeros(logits.size)
        one_hot[tok] = 1.0
        return tok, one_hot


class AntiGreedyDrafter:
    """Always proposes the target's second choice: at temperature 0 every
    draft token is rejected, pinning the acceptance length at exactly 1."""

    kind = "anti-greedy"

    def __init__(self, target: TargetModel):
        self.target = target

    def session(self) -> _AntiGreedySession:
        return _AntiGreedySession(self.target)


class _UniformSession(VanillaSession):
    def __init__(self, drafter, rng: Rng):
        super().__init__(drafter)
        self._rng = rng

    def _propose(self, logits, temperature, rng):
        vocab = logits.size
        return self._rng.randint(vocab), np.full(vocab, 1.0 / vocab)


class UniformDrafter:
    """Proposes uniform random tokens with an honest uniform proposal dist."""

    kind = "uniform"

    def __init__(self, target: TargetModel, seed: int = 0):
        self.target = target
        self.seed = seed
        self._count = 0

    def session(self) -> _UniformSession:
        self._count += 1
        return _UniformSession(self.target, Rng(derive_seed(self.seed, self._count)))


# ---------------------------------------------------------------------------
# experiment runners


ABLATION_METHODS = ("featreg", "top-only", "fused")


def _train_ablation_drafter(method: str, target: TargetModel, data: DistillSet,
                            cfg: DraftTrainConfig, seed: int):
    """Build one rung of the ablation ladder.

    "featreg" regresses features; "top-only" predicts tokens directly but
    reads the top tap alone; "fused" adds three-tap fusion.  Both direct
    rungs keep the multi-round schedule: a direct drafter consumes its own
    features at inference, and training that never shows it those collapses.
    """
    init_rng = Rng(derive_seed(seed, 1))
    train_rng = Rng(derive_seed(seed, 2))
    if method == "featreg":
        drafter = FeatureRegressionDrafter(target, init_rng)
        train_featreg(drafter, data, cfg, train_rng)
    elif method == "top-only":
        drafter = FusedDrafter(target, init_rng, top_layer_only=True)
        train_fused(drafter, data, cfg, train_rng)
    elif method == "fused":
        drafter = FusedDrafter(target, init_rng)
        train_fused(drafter, data, cfg, train_rng)
    else:
        raise ValueError(f"unknown drafter method: {method}")
    return drafter


def run_ablation(
    target: TargetModel,
    data: DistillSet,
    prompts: list[list[int]],
    seeds: list[int],
    train_cfg: DraftTrainConfig,
    bench_depth: int = 5,
    num_tokens: int = 32,
    n_max: int = 3,
    task: str = "ablation",
) -> list[MetricsRecord]:
    """Train the three drafter variants per seed and bench them on chains.

    The variants walk the ablation ladder: feature regression; direct token
    prediction from the top feature alone; direct prediction over fused
    three-layer features.  Metrics are chain
    acceptance length plus the accept-rate profile, one record per
    (method, seed)."""
    records = []
    for seed in seeds:
        for method in ABLATION_METHODS:
            drafter = _train_ablation_drafter(method, target, data,
                                              train_cfg, seed)
            tau, cycles = measure_accept_length(
                target, drafter, prompts, num_tokens, bench_depth)
            alphas, counts = measure_accept_rates(
                target, drafter, prompts, num_tokens, n_max)
            speed = estimate_speedup(tau, bench_depth,
                                     relative_draft_cost(target, drafter))
            records.append(MetricsRecord(
                drafter=method, task=task, seed=seed, cycles=cycles,
                tau=tau, est_speedup=speed,
                alphas=[float(a) for a in alphas],
                alpha_counts=[int(c) for c in counts]))
    return records


def run_scaling(
    target: TargetModel,
    data: DistillSet,
    prompts: list[list[int]],
    fractions: list[float],
    seeds: list[int],
    train_cfg: DraftTrainConfig,
    methods: tuple[str, ...] = ("fused", "featreg"),
    bench_depth: int = 5,
    num_tokens: int = 32,
    n_max: int = 1,
) -> list[MetricsRecord]:
    """Data-scaling curve: one drafter per (method, fraction, seed), trained
    on a nested prefix subset of the distillation set for a fixed number of
    steps, benched on fixed prompts."""
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError("fractions must lie in (0, 1]")
    records = []
    for seed in seeds:
        for frac in fractions:
            subset = data.subset(max(1, int(round(frac * len(data)))))
            for method in methods:
                drafter = _train_ablation_drafter(
                    method, target, subset, train_cfg,
                    derive_seed(seed, int(round(frac * 1000))))
                tau, cycles = measure_accept_length(
                    target, drafter, prompts, num_tokens, bench_depth)
                alphas, counts = measure_accept_rates(
                    target, drafter, prompts, num_tokens, n_max)
                speed = estimate_speedup(tau, bench_depth,
                                         relative_draft_cost(target, drafter))
                records.append(MetricsRecord(
                    drafter=method, task=f"scaling:{frac}", seed=seed,
                    cycles=cycles, tau=tau, est_speedup=speed,
                    alphas=[float(a) for a in alphas],
                    alpha_counts=[int(c) for c in counts]))
    return records


# ---------------------------------------------------------------------------
# statistics


def sign_test(xs: list[float], ys: list[float]) -> float:
    """One-sided exact binomial p-value for the claim median(x - y) > 0.
    Ties are dropped, the standard sign-test treatment."""
    if len(xs) != len(ys):
        raise ValueError("paired samples required")
    diffs = [x - y for x, y in zip(xs, ys) if x != y]
    n = len(diffs)
    if n == 0:
        return 1.0
    wins = sum(1 for d in diffs if d > 0)
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def _ranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def spearman(xs: list[float], ys: list[float]) -> float:
    """Rank correlation with average ranks on ties."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need paired samples, at least two")
    rx, ry = np.asarray(_ranks(list(xs))), np.asarray(_ranks(list(ys)))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        raise ValueError("constant ranks have no correlation")
    return float((rx * ry).sum()) / denom


# ---------------------------------------------------------------------------
# serialization


_CSV_COLUMNS = ("drafter", "task", "seed", "cycles", "tau", "est_speedup",
                "alphas", "alpha_counts")


def write_metrics_csv(records: list[MetricsRecord], path: str) -> None:
    """Byte-stable CSV: repr floats, semicolon-packed vectors, no clocks."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.drafter, r.task, r.seed, r.cycles, repr(r.tau),
                repr(r.est_speedup),
                ";".join(repr(a) for a in r.alphas),
                ";".join(str(c) for c in r.alpha_counts),
            ])


def read_metrics_csv(path: str) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _CSV_COLUMNS:
            raise ValueError("unrecognized metrics CSV header")
        for row in reader:
            records.append(MetricsRecord(
                drafter=row[0], task=row[1], seed=int(row[2]),
                cycles=int(row[3]), tau=float(row[4]),
                est_speedup=float(row[5]),
                alphas=[float(a) for a in row[6].split(";")] if row[6] else [],
                alpha_counts=[int(c) for c in row[7].split(";")] if row[7] else [],
            ))
    return records


def write_jsonl(rows: list[dict], path: str) -> None:
    """Sorted-key JSON lines; deterministic for deterministic inputs."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def trace_rows(runs: list[DecodeRun]) -> list[dict]:
    rows = []
    for ri, run in enumerate(runs):
        for ci, c in enumerate(run.cycles):
            rows.append({"run": ri, "cycle": ci, "drafted": c.drafted,
                         "accepted": c.accepted, "block": c.block})
    return rows
