"""Command-line entry point.

Subcommands cover the whole workflow: train-target, train-draft, bench,
verify-lossless, ablation, scaling.  Every run takes an optional config
file plus repeatable --set key=value overrides, writes its outputs under
--out, and echoes its effective configuration into meta.json there.  The
CSV payloads contain no clocks or environment state, so identical config
and seed reproduce them byte for byte; the timestamp lives only in
meta.json.

Exit codes: 0 success, 1 usage or configuration error, 2 verification or
invariant failure.

Randomness is budgeted from run.seed with fixed stream indices (target
init 0, target training 1, distillation 2, drafter init 11, drafter
training 12, benching 21), so retraining one stage never perturbs another.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import (file_sha256, load_drafter, load_target, save_drafter,
                         save_target)
from .config import ConfigError, format_config, load_config
from .draft_baselines import (FeatureRegressionDrafter, VanillaConfig,
                              VanillaDrafter, train_featreg, train_vanilla)
from .draft_fused import DraftTrainConfig, FusedDrafter, train_fused
from .draft_tree import TreeConfig
from .drafting import build_distill_set
from .harness import (AntiGreedyDrafter, CorpusSpec, IdentityDrafter,
                      MetricsRecord, UniformDrafter, accept_rates,
                      estimate_speedup, eval_prompts, make_corpus,
                      mean_accept_length, measure_accept_length,
                      relative_draft_cost, run_ablation, run_decode,
                      run_scaling, shifted_spec, sign_test, spearman,
                      trace_rows, write_jsonl, write_metrics_csv)
from .sampling import Rng, derive_seed
from .target import (ModelConfig, TargetModel, TargetTrainConfig, generate,
                     train_target)
from .verifier import (autoregressive_joint, spec_output_distribution,
                       tree_output_distribution)


def _corpus(cfg: dict) -> tuple[CorpusSpec, np.ndarray, np.ndarray]:
    spec = CorpusSpec(
        seed=cfg["corpus.seed"], vocab_size=cfg["corpus.vocab_size"],
        period=cfg["corpus.period"], noise=cfg["corpus.noise"],
        num_patterns=cfg["corpus.num_patterns"],
        num_sequences=cfg["corpus.num_sequences"],
        seq_len=cfg["corpus.seq_len"], heldout=cfg["corpus.heldout"])
    train, heldout = make_corpus(spec)
    return spec, train, heldout


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg["corpus.vocab_size"],
        hidden_size=cfg["target.hidden_size"],
        num_layers=cfg["target.num_layers"],
        num_heads=cfg["target.num_heads"],
        max_seq_len=cfg["target.max_seq_len"])


def _tree_config(cfg: dict) -> TreeConfig:
    return TreeConfig(
        total_tokens=cfg["tree.total_tokens"], depth=cfg["tree.depth"],
        expand_k=cfg["tree.expand_k"], children=cfg["tree.children"])


def _draft_train_config(cfg: dict) -> DraftTrainConfig:
    return DraftTrainConfig(
        steps=cfg["draft.steps"], batch_size=cfg["draft.batch_size"],
        lr=cfg["draft.lr"], rounds=cfg["draft.rounds"],
        soft_labels=cfg["draft.soft_labels"])


def _write_meta(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    meta = {"command": command, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config": format_config(cfg)}
    meta.update(extra or {})
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _distill_data(cfg: dict, target: TargetModel, train_seqs: np.ndarray, seed: int):
    prompts = [list(map(int, s[: cfg["draft.prompt_len"]]))
               for s in train_seqs[: cfg["draft.distill_prompts"]]]
    return build_distill_set(target, prompts, cfg["draft.distill_len"],
                             cfg["draft.distill_temperature"],
                             Rng(derive_seed(seed, 2)))


def _bench_prompts(cfg: dict, heldout: np.ndarray, spec: CorpusSpec) -> list[list[int]]:
    if cfg["bench.task"] == "indist":
        return eval_prompts(heldout, cfg["bench.prompts"], cfg["bench.prompt_len"])
    if cfg["bench.task"] == "shifted":
        _, shifted_held = make_corpus(shifted_spec(spec))
        return eval_prompts(shifted_held, cfg["bench.prompts"],
                            cfg["bench.prompt_len"])
    raise ConfigError(f"bench.task must be indist or shifted, "
                      f"got {cfg['bench.task']!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_target(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec, train_seqs, heldout_seqs = _corpus(cfg)
    seed = cfg["run.seed"]
    model = TargetModel(_model_config(cfg), Rng(derive_seed(seed, 0)))
    tcfg = TargetTrainConfig(
        steps=cfg["target.steps"], batch_size=cfg["target.batch_size"],
        lr=cfg["target.lr"], eval_every=cfg["target.eval_every"])
    history = train_target(model, train_seqs, heldout_seqs, tcfg,
                           Rng(derive_seed(seed, 1)))
    ckpt = out / "target.ckpt"
    save_target(ckpt, model)
    lines = ["step,heldout_ce,greedy_accuracy"]
    lines += [f"{h.step},{h.heldout_ce!r},{h.greedy_accuracy!r}" for h in history]
    (out / "train_metrics.csv").write_text("\n".join(lines) + "\n")
    _write_meta(out, "train-target", cfg, {"checkpoint": ckpt.name,
                                           "sha256": file_sha256(ckpt)})
    last = history[-1]
    print(f"target trained: heldout ce {last.heldout_ce:.4f}, "
          f"greedy accuracy {last.greedy_accuracy:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train_draft(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.rounds is not None:
        if args.method != "fused":
            raise ConfigError("--rounds applies only to the fused drafter")
        cfg["draft.rounds"] = args.rounds
    if args.top_layer_only and args.method != "fused":
        raise ConfigError("--top-layer-only applies only to the fused drafter")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec, train_seqs, heldout_seqs = _corpus(cfg)
    target = load_target(args.target)
    target_sha = file_sha256(args.target)
    seed = cfg["run.seed"]
    init_rng = Rng(derive_seed(seed, 11))
    train_rng = Rng(derive_seed(seed, 12))
    dcfg = _draft_train_config(cfg)
    if args.method == "vanilla":
        vcfg = VanillaConfig(
            vocab_size=target.config.vocab_size,
            hidden_size=cfg["vanilla.hidden_size"],
            num_layers=cfg["vanilla.num_layers"],
            num_heads=cfg["vanilla.num_heads"],
            max_seq_len=target.config.max_seq_len)
        drafter = VanillaDrafter(vcfg, init_rng)
        steps = dcfg.steps
        losses = train_vanilla(
            drafter, train_seqs, heldout_seqs,
            TargetTrainConfig(steps=steps, batch_size=dcfg.batch_size,
                              lr=dcfg.lr, eval_every=max(1, steps // 4)),
            train_rng)
        curve_name, curve = "heldout_ce", losses
    else:
        data = _distill_data(cfg, target, train_seqs, seed)
        if args.method == "fused":
            drafter = FusedDrafter(target, init_rng,
                                   top_layer_only=args.top_layer_only)
            curve = train_fused(drafter, data, dcfg, train_rng)
        elif args.method == "featreg":
            drafter = FeatureRegressionDrafter(target, init_rng)
            curve = train_featreg(drafter, data, dcfg, train_rng,
                                  w_token=cfg["draft.w_token"])
        else:
            raise ConfigError(f"unknown draft method {args.method!r}")
        curve_name = "loss"
    ckpt = out / "draft.ckpt"
    save_drafter(ckpt, drafter, target_sha)
    lines = [f"step,{curve_name}"]
    lines += [f"{i + 1},{v!r}" for i, v in enumerate(curve)]
    (out / "train_metrics.csv").write_text("\n".join(lines) + "\n")
    _write_meta(out, "train-draft", cfg,
                {"checkpoint": ckpt.name, "method": args.method,
                 "target_sha256": target_sha})
    print(f"{args.method} drafter trained ({curve_name} {curve[-1]:.4f})")
    print(f"checkpoint: {ckpt}")
    return 0


def _load_bench_drafter(name: str, target: TargetModel, target_sha: str,
                        bench_seed: int):
    if name == "identity":
        return IdentityDrafter(target), "identity"
    if name == "anti-greedy":
        return AntiGreedyDrafter(target), "anti-greedy"
    if name == "uniform":
        return UniformDrafter(target, seed=bench_seed), "uniform"
    drafter = load_drafter(name, target, target_sha)
    return drafter, drafter.kind


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec, _, heldout_seqs = _corpus(cfg)
    target = load_target(args.target)
    target_sha = file_sha256(args.target)
    prompts = _bench_prompts(cfg, heldout_seqs, spec)
    seed = cfg["run.seed"]
    temperature = cfg["bench.temperature"]
    depth = cfg["bench.depth"]
    tree_cfg = _tree_config(cfg) if cfg["bench.mode"] == "tree" else None
    if cfg["bench.mode"] not in ("chain", "tree"):
        raise ConfigError(f"bench.mode must be chain or tree, "
                          f"got {cfg['bench.mode']!r}")
    records: list[MetricsRecord] = []
    all_runs = []
    for name in args.draft:
        drafter, kind = _load_bench_drafter(name, target, target_sha, seed)
        c_draft = (relative_draft_cost(target, drafter)
                   if not isinstance(drafter, (IdentityDrafter,
                                               AntiGreedyDrafter,
                                               UniformDrafter)) else 1.0)
        for pi, prompt in enumerate(prompts):
            rng = (Rng(derive_seed(seed, 21 + pi)) if temperature > 0 else None)
            run = run_decode(target, drafter.session(), prompt,
                             cfg["bench.num_tokens"], temperature, depth,
                             tree_cfg, rng)
            all_runs.append(run)
            tau, cycles = mean_accept_length([run])
            if tree_cfg is None:
                alphas, counts = accept_rates([run], min(cfg["bench.n_max"],
                                                         depth - 1))
                alpha_list = [float(a) for a in alphas]
                count_list = [int(c) for c in counts]
            else:
                alpha_list, count_list = [], []
            records.append(MetricsRecord(
                drafter=kind, task=f"{cfg['bench.task']}:prompt{pi}",
                seed=seed, cycles=cycles, tau=tau,
                est_speedup=estimate_speedup(
                    tau, tree_cfg.depth if tree_cfg else depth, c_draft),
                alphas=alpha_list, alpha_counts=count_list))
    write_metrics_csv(records, out / "bench.csv")
    if args.trace:
        write_jsonl(trace_rows(all_runs), out / "trace.jsonl")
    _write_meta(out, "bench", cfg, {"target_sha256": target_sha,
                                    "drafters": list(args.draft)})
    overall = sum(r.tau * r.cycles for r in records) / sum(r.cycles for r in records)
    print(f"bench: {len(records)} rows, pooled mean acceptance length {overall:.3f}")
    print(f"results: {out / 'bench.csv'}")
    return 0


def cmd_verify_lossless(args) -> int:
    cfg = load_config(args.config, args.set)
    seed = cfg["run.seed"]
    failures = []
    report = []

    def check(name: str, ok: bool, detail: str) -> None:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        report.append(line)
        print(line)
        if not ok:
            failures.append(name)

    def dist_fn(tag: int, vocab: int):
        def fn(hist):
            s = derive_seed(seed, tag)
            for tok in hist:
                s = derive_seed(s, int(tok) + 1)
            r = Rng(s)
            x = np.abs(r.normal((vocab,))) + 0.05
            return x / x.sum()
        return fn

    worst = 0.0
    for pair in range(10):
        p_fn, q_fn = dist_fn(2 * pair, 4), dist_fn(2 * pair + 1, 4)
        truth = autoregressive_joint(p_fn, 2)
        joint = spec_output_distribution(p_fn, q_fn, depth=3, horizon=2)
        worst = max(worst, 0.5 * float(np.abs(joint - truth).sum()))
    check("chain-enumeration", worst < 1e-9, f"max TV {worst:.3e}")

    worst_tree = 0.0
    tree_cfg = TreeConfig(total_tokens=8, depth=2, expand_k=4, children=2)
    for pair in range(10):
        p_fn, q_fn = dist_fn(100 + 2 * pair, 4), dist_fn(101 + 2 * pair, 4)
        truth = autoregressive_joint(p_fn, 2)
        joint = tree_output_distribution(p_fn, q_fn, tree_cfg, horizon=2)
        worst_tree = max(worst_tree, 0.5 * float(np.abs(joint - truth).sum()))
    check("tree-enumeration", worst_tree < 1e-9, f"max TV {worst_tree:.3e}")

    chain_cfg = TreeConfig(total_tokens=2, depth=2, expand_k=1, children=1)
    worst_eq = 0.0
    for pair in range(5):
        p_fn, q_fn = dist_fn(200 + 2 * pair, 4), dist_fn(201 + 2 * pair, 4)
        tree_joint = tree_output_distribution(p_fn, q_fn, chain_cfg, horizon=2)
        truth = autoregressive_joint(p_fn, 2)
        worst_eq = max(worst_eq, 0.5 * float(np.abs(tree_joint - truth).sum()))
    check("single-branch-tree", worst_eq < 1e-12, f"max TV {worst_eq:.3e}")

    model_cfg = ModelConfig(vocab_size=16, hidden_size=16, num_layers=3,
                            num_heads=2, max_seq_len=96)
    target = TargetModel(model_cfg, Rng(derive_seed(seed, 31)))
    drafter = FusedDrafter(target, Rng(derive_seed(seed, 32)))
    mismatches = 0
    for pi in range(4):
        r = Rng(derive_seed(seed, 40 + pi))
        prompt = [r.randint(16) for _ in range(4)]
        ref = generate(target, prompt, 24)[len(prompt):]
        chain_run = run_decode(target, drafter.session(), prompt, 24, 0.0, 4)
        tree_run = run_decode(target, drafter.session(), prompt, 24, 0.0, 4,
                              TreeConfig(total_tokens=10, depth=3,
                                         expand_k=2, children=2))
        if chain_run.tokens[:24] != ref or tree_run.tokens[:24] != ref:
            mismatches += 1
    check("greedy-equivalence", mismatches == 0, f"{mismatches} mismatched prompts")

    ident_tau, _ = measure_accept_length(
        target, IdentityDrafter(target), [[1, 2, 3, 4]], 12, depth=3)
    check("identity-tau", ident_tau == 4.0, f"tau {ident_tau}")
    anti_tau, _ = measure_accept_length(
        target, AntiGreedyDrafter(target), [[1, 2, 3, 4]], 12, depth=3)
    check("anti-greedy-tau", anti_tau == 1.0, f"tau {anti_tau}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "lossless_report.txt").write_text("\n".join(report) + "\n")
        _write_meta(out, "verify-lossless", cfg,
                    {"failures": failures})
    return 2 if failures else 0


def cmd_ablation(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec, train_seqs, heldout_seqs = _corpus(cfg)
    target = load_target(args.target)
    data = _distill_data(cfg, target, train_seqs, cfg["run.seed"])
    prompts = _bench_prompts(cfg, heldout_seqs, spec)
    records = run_ablation(
        target, data, prompts, list(cfg["ablation.seeds"]),
        _draft_train_config(cfg), bench_depth=cfg["bench.depth"],
        num_tokens=cfg["bench.num_tokens"], n_max=cfg["bench.n_max"])
    write_metrics_csv(records, out / "ablation.csv")
    _write_meta(out, "ablation", cfg, {"target_sha256": file_sha256(args.target)})
    by = {m: [r.tau for r in records if r.drafter == m]
          for m in ("featreg", "top-only", "fused")}
    for m, taus in by.items():
        print(f"{m:9s} mean acceptance length {float(np.mean(taus)):.3f}")
    p_top = sign_test(by["top-only"], by["featreg"])
    p_fused = sign_test(by["fused"], by["top-only"])
    print(f"sign test top-only > featreg: p = {p_top:.4f}")
    print(f"sign test fused > top-only:   p = {p_fused:.4f}")
    print(f"results: {out / 'ablation.csv'}")
    return 0


def cmd_scaling(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec, train_seqs, heldout_seqs = _corpus(cfg)
    target = load_target(args.target)
    data = _distill_data(cfg, target, train_seqs, cfg["run.seed"])
    prompts = _bench_prompts(cfg, heldout_seqs, spec)
    fractions = list(cfg["scaling.fractions"])
    records = run_scaling(
        target, data, prompts, fractions, list(cfg["scaling.seeds"]),
        _draft_train_config(cfg), bench_depth=cfg["bench.depth"],
        num_tokens=cfg["bench.num_tokens"])
    write_metrics_csv(records, out / "scaling.csv")
    _write_meta(out, "scaling", cfg, {"target_sha256": file_sha256(args.target)})
    for method in ("fused", "featreg"):
        means = []
        for frac in fractions:
            taus = [r.tau for r in records
                    if r.drafter == method and r.task == f"scaling:{frac}"]
            means.append(float(np.mean(taus)))
        rho = spearman(fractions, means)
        print(f"{method}: tau by fraction "
              + " ".join(f"{f}:{m:.3f}" for f, m in zip(fractions, means))
              + f"  spearman {rho:.3f}")
    print(f"results: {out / 'scaling.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser, out_required: bool = True) -> None:
    sub.add_argument("--config", default=None, help="key = value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    if out_required:
        sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speclab",
        description="speculative-decoding laboratory on a toy transformer")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("train-target", help="train the target transformer")
    _add_common(sub)
    sub.set_defaults(func=cmd_train_target)

    sub = subs.add_parser("train-draft", help="train a drafter against a target")
    _add_common(sub)
    sub.add_argument("--target", required=True, help="target checkpoint path")
    sub.add_argument("--method", required=True,
                     choices=("fused", "featreg", "vanilla"))
    sub.add_argument("--rounds", type=int, default=None,
                     help="feedback training rounds (fused only; 1 disables "
                          "simulated rounds)")
    sub.add_argument("--top-layer-only", action="store_true",
                     help="drop the fusion projection, consume only the top "
                          "feature (fused only)")
    sub.set_defaults(func=cmd_train_draft)

    sub = subs.add_parser("bench", help="measure acceptance metrics")
    _add_common(sub)
    sub.add_argument("--target", required=True)
    sub.add_argument("--draft", required=True, action="append",
                     help="draft checkpoint path, or identity / anti-greedy "
                          "/ uniform (repeatable)")
    sub.add_argument("--trace", action="store_true",
                     help="also write per-cycle trace.jsonl")
    sub.set_defaults(func=cmd_bench)

    sub = subs.add_parser("verify-lossless",
                          help="run the losslessness oracle suite")
    _add_common(sub, out_required=False)
    sub.add_argument("--out", default=None, help="optional report directory")
    sub.set_defaults(func=cmd_verify_lossless)

    sub = subs.add_parser("ablation", help="drafter-variant comparison")
    _add_common(sub)
    sub.add_argument("--target", required=True)
    sub.set_defaults(func=cmd_ablation)

    sub = subs.add_parser("scaling", help="training-data scaling curve")
    _add_common(sub)
    sub.add_argument("--target", required=True)
    sub.set_defaults(func=cmd_scaling)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
