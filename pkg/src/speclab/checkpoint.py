"""Checkpoint files: a flat text header plus named binary tensor blocks.

Layout::

    speclab-checkpoint v1\n
    key = value\n          (sorted, one per line)
    \n                     (blank line ends the header)
    u32 block count
    per block: u16 name length, name bytes (utf-8), tensor bytes
               (u32 rank, u32 dims, little-endian f64 payload)

Draft checkpoints record the SHA-256 of the target checkpoint they were
trained against; loading against a different target is an error.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"speclab-checkpoint v1\n"


def save_checkpoint(path: str | Path, header: dict[str, str],
                    tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for key in sorted(header):
        value = str(header[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise ValueError(f"header entry {key!r} not representable")
        chunks.append(f"{key} = {value}\n".encode())
    chunks.append(b"\n")
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(tensor_to_bytes(np.asarray(arr, dtype=np.float64)))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a speclab checkpoint")
    offset = len(MAGIC)
    header: dict[str, str] = {}
    while True:
        end = buf.index(b"\n", offset)
        line = buf[offset:end].decode()
        offset = end + 1
        if not line:
            break
        key, _, value = line.partition(" = ")
        header[key] = value
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + name_len].decode()
        offset += name_len
        arr, offset = tensor_from_bytes(buf, offset)
        tensors[name] = arr
    return header, tensors


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model-level save/load


def _restore_params(params, tensors) -> None:
    for name, tensor in params.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        stored = tensors[name]
        if stored.shape != tensor.data.shape:
            raise ValueError(f"tensor {name!r} has shape {stored.shape}, "
                             f"expected {tensor.data.shape}")
        tensor.data[...] = stored
    extra = set(tensors) - set(params)
    if extra:
        raise ValueError(f"checkpoint has unknown tensors: {sorted(extra)}")


def save_target(path: str | Path, model) -> None:
    cfg = model.config
    header = {
        "kind": "target", "vocab_size": cfg.vocab_size,
        "hidden_size": cfg.hidden_size, "num_layers": cfg.num_layers,
        "num_heads": cfg.num_heads, "max_seq_len": cfg.max_seq_len,
        "tap_low": cfg.tap_layers[0], "tap_mid": cfg.tap_layers[1],
        "tap_high": cfg.tap_layers[2],
    }
    params = model.params()
    save_checkpoint(path, header, {k: params[k].data for k in sorted(params)})


def load_target(path: str | Path):
    from .target import ModelConfig, TargetModel

    header, tensors = load_checkpoint(path)
    if header.get("kind") != "target":
        raise ValueError(f"{path}: not a target checkpoint")
    cfg = ModelConfig(
        vocab_size=int(header["vocab_size"]),
        hidden_size=int(header["hidden_size"]),
        num_layers=int(header["num_layers"]),
        num_heads=int(header["num_heads"]),
        max_seq_len=int(header["max_seq_len"]),
        tap_layers=(int(header["tap_low"]), int(header["tap_mid"]),
                    int(header["tap_high"])),
    )
    model = TargetModel(cfg)
    _restore_params(model.params(), tensors)
    return model


def save_drafter(path: str | Path, drafter, target_sha: str) -> None:
    from .draft_baselines import VanillaDrafter

    header = {"kind": "draft", "method": drafter.kind,
              "target_sha256": target_sha}
    if isinstance(drafter, VanillaDrafter):
        c = drafter.config
        header.update({"vocab_size": c.vocab_size, "hidden_size": c.hidden_size,
                       "num_layers": c.num_layers, "num_heads": c.num_heads,
                       "max_seq_len": c.max_seq_len})
    else:
        header["top_layer_only"] = getattr(drafter, "top_layer_only", False)
    params = drafter.params()
    save_checkpoint(path, header, {k: params[k].data for k in sorted(params)})


def load_drafter(path: str | Path, target, expected_target_sha: str | None = None):
    from .draft_baselines import (FeatureRegressionDrafter, VanillaConfig,
                                  VanillaDrafter)
    from .draft_fused import FusedDrafter
    from .sampling import Rng

    header, tensors = load_checkpoint(path)
    if header.get("kind") != "draft":
        raise ValueError(f"{path}: not a draft checkpoint")
    if (expected_target_sha is not None
            and header.get("target_sha256") != expected_target_sha):
        raise ValueError("draft checkpoint was trained against a different "
                         "target checkpoint (SHA-256 mismatch)")
    method = header.get("method")
    rng = Rng(0)
    if method == "vanilla":
        cfg = VanillaConfig(
            vocab_size=int(header["vocab_size"]),
            hidden_size=int(header["hidden_size"]),
            num_layers=int(header["num_layers"]),
            num_heads=int(header["num_heads"]),
            max_seq_len=int(header["max_seq_len"]))
        drafter = VanillaDrafter(cfg, rng)
    elif method == "fused":
        drafter = FusedDrafter(target, rng,
                               top_layer_only=header.get("top_layer_only") == "True")
    elif method == "featreg":
        drafter = FeatureRegressionDrafter(target, rng)
    else:
        raise ValueError(f"unknown drafter method in checkpoint: {method!r}")
    _restore_params(drafter.params(), tensors)
    return drafter
