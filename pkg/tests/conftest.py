"""Shared fixtures and numeric oracles for the test suite."""

import numpy as np
import pytest

import speclab.tensor as T
from speclab.sampling import Rng
from speclab.target import ModelConfig, TargetModel


def central_diff_worst(build_loss, tensors, rng, samples=4, eps=1e-5):
    """Worst relative error between backprop and central differences.

    Probes `samples` random coordinates of every tensor in `tensors`.
    `build_loss` must be deterministic and read the tensors' .data in
    place, so the same closure prices both the analytic and the numeric
    side.
    """
    params = list(tensors.values())
    for p in params:
        p.zero_grad()
    T.backward(build_loss(), params)
    worst = 0.0
    for p in tensors.values():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for _ in range(samples):
            i = rng.randint(flat.size)
            keep = flat[i]
            flat[i] = keep + eps
            up = build_loss().item()
            flat[i] = keep - eps
            down = build_loss().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            rel = abs(numeric - gflat[i]) / max(1.0, abs(numeric), abs(gflat[i]))
            worst = max(worst, rel)
    return worst


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


@pytest.fixture(scope="session")
def small_target():
    """An untrained 3-layer model, big enough to exercise every code path."""
    cfg = ModelConfig(vocab_size=16, hidden_size=16, num_layers=3,
                      num_heads=2, max_seq_len=128)
    return TargetModel(cfg, Rng(77))
