"""Desk-scale speculative decoding laboratory.

Trainable transformer target with residual-stream taps, a fused-feature
token drafter plus two baselines, confidence-guided draft trees, lossless
chain and tree verification, and a measurement harness, all on float64
numpy with seeded deterministic randomness.
"""

__version__ = "0.1.0"
