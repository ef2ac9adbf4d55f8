"""Checkpoint container format and model round-trips."""

import numpy as np
import pytest

from speclab.checkpoint import (file_sha256, load_checkpoint, load_drafter,
                                load_target, save_checkpoint, save_drafter,
                                save_target)
from speclab.draft_baselines import (FeatureRegressionDrafter, VanillaConfig,
                                     VanillaDrafter)
from speclab.draft_fused import FusedDrafter
from speclab.sampling import Rng
from speclab.target import forward_full


class TestContainer:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "c.ckpt"
        header = {"kind": "test", "note": "alpha beta"}
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
        save_checkpoint(path, header, tensors)
        got_header, got_tensors = load_checkpoint(path)
        assert got_header == header
        assert set(got_tensors) == {"a", "b"}
        np.testing.assert_array_equal(got_tensors["a"], tensors["a"])

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"something else entirely")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_rejects_unrepresentable_header(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "x.ckpt", {"k": "a\nb"}, {})

    def test_save_is_deterministic(self, tmp_path):
        """Same content writes the same bytes, whatever the dict order."""
        t = {"w": np.ones((2, 2)), "b": np.zeros(2)}
        save_checkpoint(tmp_path / "a.ckpt", {"x": "1", "y": "2"}, t)
        save_checkpoint(tmp_path / "b.ckpt", {"y": "2", "x": "1"}, t)
        assert file_sha256(tmp_path / "a.ckpt") == file_sha256(tmp_path / "b.ckpt")


class TestTargetRoundtrip:
    def test_params_bit_identical(self, tmp_path, small_target):
        path = tmp_path / "target.ckpt"
        save_target(path, small_target)
        loaded = load_target(path)
        assert loaded.config == small_target.config
        for name, tensor in small_target.params().items():
            np.testing.assert_array_equal(loaded.params()[name].data, tensor.data)
        toks = np.array([1, 2, 3, 4, 5])
        np.testing.assert_array_equal(forward_full(loaded, toks)[0],
                                      forward_full(small_target, toks)[0])


class TestDrafterRoundtrip:
    def _roundtrip(self, tmp_path, small_target, drafter):
        tpath = tmp_path / "target.ckpt"
        save_target(tpath, small_target)
        sha = file_sha256(tpath)
        dpath = tmp_path / "draft.ckpt"
        save_drafter(dpath, drafter, sha)
        loaded = load_drafter(dpath, small_target, sha)
        assert loaded.kind == drafter.kind
        for name, tensor in drafter.params().items():
            np.testing.assert_array_equal(loaded.params()[name].data, tensor.data)
        return loaded

    def test_fused(self, tmp_path, small_target):
        drafter = FusedDrafter(small_target, Rng(1))
        loaded = self._roundtrip(tmp_path, small_target, drafter)
        assert loaded.embed is small_target.embed
        assert loaded.lm_head is small_target.lm_head
        assert not loaded.top_layer_only

    def test_fused_top_only(self, tmp_path, small_target):
        drafter = FusedDrafter(small_target, Rng(2), top_layer_only=True)
        loaded = self._roundtrip(tmp_path, small_target, drafter)
        assert loaded.top_layer_only

    def test_featreg(self, tmp_path, small_target):
        drafter = FeatureRegressionDrafter(small_target, Rng(3))
        self._roundtrip(tmp_path, small_target, drafter)

    def test_vanilla(self, tmp_path, small_target):
        cfg = VanillaConfig(vocab_size=small_target.config.vocab_size,
                            max_seq_len=64)
        drafter = VanillaDrafter(cfg, Rng(4))
        loaded = self._roundtrip(tmp_path, small_target, drafter)
        assert loaded.config == cfg

    def test_target_binding_enforced(self, tmp_path, small_target):
        """A drafter refuses to load against a different target checkpoint."""
        tpath = tmp_path / "target.ckpt"
        save_target(tpath, small_target)
        drafter = FusedDrafter(small_target, Rng(5))
        dpath = tmp_path / "draft.ckpt"
        save_drafter(dpath, drafter, file_sha256(tpath))
        with pytest.raises(ValueError, match="different target"):
            load_drafter(dpath, small_target, "0" * 64)
