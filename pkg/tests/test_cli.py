"""End-to-end command-line workflow on a micro-scale configuration."""

import json

import pytest

from speclab.cli import main

MICRO = [
    "corpus.vocab_size=8", "corpus.num_sequences=24", "corpus.heldout=8",
    "corpus.seq_len=24", "corpus.num_patterns=2",
    "target.hidden_size=16", "target.num_layers=3", "target.num_heads=2",
    "target.max_seq_len=64", "target.steps=30", "target.eval_every=10",
    "target.batch_size=4",
    "draft.steps=4", "draft.batch_size=2", "draft.distill_prompts=6",
    "draft.distill_len=14", "draft.rounds=2",
    "bench.prompts=3", "bench.num_tokens=8", "bench.depth=3", "bench.n_max=2",
]


def _sets(extra=()):
    args = []
    for item in list(MICRO) + list(extra):
        args += ["--set", item]
    return args


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One trained target plus one drafter of each method, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["train-target", "--out", str(root / "target")] + _sets()) == 0
    target = str(root / "target" / "target.ckpt")
    for method in ("fused", "featreg", "vanilla"):
        code = main(["train-draft", "--target", target, "--method", method,
                     "--out", str(root / method)] + _sets())
        assert code == 0
    return root


class TestTrainTarget:
    def test_outputs(self, pipeline):
        out = pipeline / "target"
        assert (out / "target.ckpt").exists()
        csv_text = (out / "train_metrics.csv").read_text()
        assert csv_text.startswith("step,heldout_ce,greedy_accuracy\n")
        meta = json.loads((out / "meta.json").read_text())
        assert meta["command"] == "train-target"
        assert "corpus.vocab_size = 8" in meta["config"]
        assert len(meta["sha256"]) == 64


class TestTrainDraft:
    def test_each_method_writes_checkpoint_and_curve(self, pipeline):
        for method in ("fused", "featreg", "vanilla"):
            out = pipeline / method
            assert (out / "draft.ckpt").exists()
            meta = json.loads((out / "meta.json").read_text())
            assert meta["method"] == method
            assert len(meta["target_sha256"]) == 64
            assert (out / "train_metrics.csv").read_text().count("\n") >= 2

    def test_fused_flags_rejected_for_other_methods(self, pipeline, tmp_path,
                                                    capsys):
        target = str(pipeline / "target" / "target.ckpt")
        code = main(["train-draft", "--target", target, "--method", "featreg",
                     "--rounds", "2", "--out", str(tmp_path)] + _sets())
        assert code == 1
        assert "--rounds" in capsys.readouterr().err
        code = main(["train-draft", "--target", target, "--method", "vanilla",
                     "--top-layer-only", "--out", str(tmp_path)] + _sets())
        assert code == 1

    def test_fused_accepts_rounds_override(self, pipeline, tmp_path):
        target = str(pipeline / "target" / "target.ckpt")
        code = main(["train-draft", "--target", target, "--method", "fused",
                     "--rounds", "1", "--top-layer-only",
                     "--out", str(tmp_path)] + _sets())
        assert code == 0

    def test_missing_target_is_a_usage_error(self, tmp_path, capsys):
        code = main(["train-draft", "--target", str(tmp_path / "no.ckpt"),
                     "--method", "fused", "--out", str(tmp_path)] + _sets())
        assert code == 1
        assert "missing file" in capsys.readouterr().err


class TestBench:
    def test_row_count_is_prompts_times_drafters(self, pipeline, tmp_path):
        target = str(pipeline / "target" / "target.ckpt")
        draft = str(pipeline / "fused" / "draft.ckpt")
        out = tmp_path / "bench"
        code = main(["bench", "--target", target, "--draft", "identity",
                     "--draft", draft, "--out", str(out)] + _sets())
        assert code == 0
        rows = (out / "bench.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 3 * 2  # header + prompts x drafters
        assert any(",identity," in r or r.startswith("identity,") for r in rows)

    def test_csv_bytes_reproduce_across_runs(self, pipeline, tmp_path):
        """Same config and seed give byte-identical result files; the
        timestamp is confined to meta.json."""
        target = str(pipeline / "target" / "target.ckpt")
        args = ["bench", "--target", target, "--draft", "uniform",
                "--trace"] + _sets(["bench.temperature=1.0"])
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert (a / "bench.csv").read_bytes() == (b / "bench.csv").read_bytes()
        assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
        assert "timestamp" in json.loads((a / "meta.json").read_text())

    def test_tree_mode_runs(self, pipeline, tmp_path):
        target = str(pipeline / "target" / "target.ckpt")
        draft = str(pipeline / "fused" / "draft.ckpt")
        out = tmp_path / "tree"
        code = main(["bench", "--target", target, "--draft", draft,
                     "--out", str(out)]
                    + _sets(["bench.mode=tree", "tree.total_tokens=6",
                             "tree.depth=3", "tree.expand_k=2",
                             "tree.children=2"]))
        assert code == 0
        assert (out / "bench.csv").exists()

    def test_bad_mode_is_config_error(self, pipeline, tmp_path, capsys):
        target = str(pipeline / "target" / "target.ckpt")
        code = main(["bench", "--target", target, "--draft", "identity",
                     "--out", str(tmp_path)] + _sets(["bench.mode=ring"]))
        assert code == 1
        assert "bench.mode" in capsys.readouterr().err

    def test_shifted_task_changes_prompts(self, pipeline, tmp_path):
        target = str(pipeline / "target" / "target.ckpt")
        a, b = tmp_path / "ind", tmp_path / "shf"
        base = ["bench", "--target", target, "--draft", "identity"]
        assert main(base + ["--out", str(a)] + _sets()) == 0
        assert main(base + ["--out", str(b)]
                    + _sets(["bench.task=shifted"])) == 0
        rows_a = (a / "bench.csv").read_text()
        rows_b = (b / "bench.csv").read_text()
        assert "indist:prompt0" in rows_a and "shifted:prompt0" in rows_b


class TestVerifyLossless:
    def test_suite_passes_and_reports(self, tmp_path, capsys):
        out = tmp_path / "report"
        code = main(["verify-lossless", "--out", str(out)])
        assert code == 0
        printed = capsys.readouterr().out
        assert "chain-enumeration: PASS" in printed
        assert "tree-enumeration: PASS" in printed
        assert "greedy-equivalence: PASS" in printed
        assert "FAIL" not in printed
        report = (out / "lossless_report.txt").read_text()
        assert report.count("PASS") == 6


class TestUsageErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        code = main(["train-target", "--out", str(tmp_path),
                     "--set", "corpus.vocab=8"])
        assert code == 1
        assert "corpus.vocab" in capsys.readouterr().err

    def test_bad_value_type(self, tmp_path, capsys):
        code = main(["train-target", "--out", str(tmp_path),
                     "--set", "target.steps=many"])
        assert code == 1
        assert "target.steps" in capsys.readouterr().err


class TestExperimentCommands:
    def test_ablation_writes_table_and_summary(self, pipeline, tmp_path,
                                               capsys):
        target = str(pipeline / "target" / "target.ckpt")
        out = tmp_path / "abl"
        code = main(["ablation", "--target", target, "--out", str(out)]
                    + _sets(["ablation.seeds=0,1"]))
        assert code == 0
        printed = capsys.readouterr().out
        assert "sign test" in printed
        text = (out / "ablation.csv").read_text()
        for method in ("featreg", "top-only", "fused"):
            assert text.count(f"\n{method},") == 2

    def test_scaling_writes_table_and_summary(self, pipeline, tmp_path,
                                              capsys):
        target = str(pipeline / "target" / "target.ckpt")
        out = tmp_path / "scal"
        code = main(["scaling", "--target", target, "--out", str(out)]
                    + _sets(["scaling.seeds=0", "scaling.fractions=0.5,1.0"]))
        assert code == 0
        assert "spearman" in capsys.readouterr().out
        text = (out / "scaling.csv").read_text()
        assert "scaling:0.5" in text and "scaling:1.0" in text
