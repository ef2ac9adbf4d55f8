"""Flat key = value run configuration.

One dotted key per line, no sections, comments with '#'.  Every key has a
declared type and default; unknown keys and untypeable values are errors
that name the offending key.  Command-line overrides use the same key =
value syntax.  The effective configuration (defaults + file + overrides)
is echoed into each run's metadata output so results are self-describing.
"""

from __future__ import annotations

from pathlib import Path


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str,
            "ints": _parse_ints, "floats": _parse_floats}

# key -> (type name, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "corpus.seed": ("int", 0),
    "corpus.vocab_size": ("int", 64),
    "corpus.period": ("int", 8),
    "corpus.noise": ("float", 0.05),
    "corpus.num_patterns": ("int", 4),
    "corpus.num_sequences": ("int", 512),
    "corpus.seq_len": ("int", 64),
    "corpus.heldout": ("int", 64),

    "target.hidden_size": ("int", 64),
    "target.num_layers": ("int", 4),
    "target.num_heads": ("int", 4),
    "target.max_seq_len": ("int", 512),
    "target.steps": ("int", 1200),
    "target.batch_size": ("int", 8),
    "target.lr": ("float", 3e-3),
    "target.eval_every": ("int", 200),

    "draft.steps": ("int", 600),
    "draft.batch_size": ("int", 8),
    "draft.lr": ("float", 2e-3),
    "draft.rounds": ("int", 3),
    "draft.soft_labels": ("bool", True),
    "draft.w_token": ("float", 0.1),
    "draft.distill_prompts": ("int", 128),
    "draft.distill_len": ("int", 48),
    "draft.distill_temperature": ("float", 1.0),
    "draft.prompt_len": ("int", 8),

    "vanilla.hidden_size": ("int", 32),
    "vanilla.num_layers": ("int", 1),
    "vanilla.num_heads": ("int", 2),

    "tree.total_tokens": ("int", 16),
    "tree.depth": ("int", 5),
    "tree.expand_k": ("int", 3),
    "tree.children": ("int", 3),

    "bench.mode": ("str", "chain"),
    "bench.depth": ("int", 5),
    "bench.num_tokens": ("int", 32),
    "bench.temperature": ("float", 0.0),
    "bench.prompts": ("int", 16),
    "bench.prompt_len": ("int", 8),
    "bench.n_max": ("int", 3),
    "bench.task": ("str", "indist"),

    "run.seed": ("int", 0),
    "ablation.seeds": ("ints", (0, 1, 2, 3, 4)),
    "scaling.seeds": ("ints", (0, 1, 2)),
    "scaling.fractions": ("floats", (0.125, 0.25, 0.5, 1.0)),
}


class ConfigError(ValueError):
    pass


def default_config() -> dict[str, object]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _set_key(cfg: dict[str, object], key: str, raw: str, where: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown configuration key {key!r}")
    type_name = SCHEMA[key][0]
    try:
        cfg[key] = _PARSERS[type_name](raw.strip())
    except ValueError:
        raise ConfigError(
            f"{where}: key {key!r} expects {type_name}, got {raw.strip()!r}")


def load_config(path: str | None, overrides: list[str] | None = None) -> dict[str, object]:
    """Defaults, then the optional file, then key=value overrides in order."""
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {stripped!r}")
            key, _, value = stripped.partition("=")
            _set_key(cfg, key.strip(), value, f"{path}:{lineno}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        _set_key(cfg, key.strip(), value, f"override {item!r}")
    return cfg


def format_config(cfg: dict[str, object]) -> str:
    """Canonical sorted key = value text, parseable by load_config."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            text = ",".join(repr(v) if isinstance(v, float) else str(v)
                            for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
