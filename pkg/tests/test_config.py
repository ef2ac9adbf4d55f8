"""Flat key = value configuration: schema, parsing, canonical formatting."""

import pytest

from speclab.config import (SCHEMA, ConfigError, default_config, format_config,
                            load_config)


class TestDefaults:
    def test_every_key_has_a_typed_default(self):
        cfg = default_config()
        assert set(cfg) == set(SCHEMA)
        kinds = {"int": int, "float": float, "bool": bool, "str": str,
                 "ints": tuple, "floats": tuple}
        for key, (type_name, _) in SCHEMA.items():
            assert isinstance(cfg[key], kinds[type_name]), key

    def test_bool_default_is_not_surprised_by_int_check(self):
        """Ints and bools are distinct in the schema typing."""
        assert default_config()["draft.soft_labels"] is True
        assert type(default_config()["corpus.seed"]) is int


class TestLoading:
    def test_file_then_overrides_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("corpus.seed = 7\nbench.depth = 4\n")
        cfg = load_config(str(path), ["bench.depth=6"])
        assert cfg["corpus.seed"] == 7
        assert cfg["bench.depth"] == 6
        assert cfg["corpus.period"] == SCHEMA["corpus.period"][1]

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# settings\n\n  corpus.seed = 3  \n#x = y\n")
        assert load_config(str(path))["corpus.seed"] == 3

    def test_unknown_key_error_names_the_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("corpus.vocab_sizee = 8\n")
        with pytest.raises(ConfigError, match="corpus.vocab_sizee"):
            load_config(str(path))
        with pytest.raises(ConfigError, match="bench.dpeth"):
            load_config(None, ["bench.dpeth=3"])

    def test_type_error_names_key_and_location(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("corpus.seed = banana\n")
        with pytest.raises(ConfigError, match=r"run\.cfg:1.*corpus.seed"):
            load_config(str(path))

    def test_malformed_lines(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("corpus.seed\n")
        with pytest.raises(ConfigError, match="key = value"):
            load_config(str(path))
        with pytest.raises(ConfigError, match="key=value"):
            load_config(None, ["bench.depth"])

    def test_tuple_values(self):
        cfg = load_config(None, ["scaling.fractions=0.5,1.0",
                                 "ablation.seeds=3,4"])
        assert cfg["scaling.fractions"] == (0.5, 1.0)
        assert cfg["ablation.seeds"] == (3, 4)

    def test_config_error_is_a_value_error(self):
        assert issubclass(ConfigError, ValueError)


class TestFormatting:
    def test_format_roundtrips_through_load(self, tmp_path):
        cfg = load_config(None, ["corpus.noise=0.1", "draft.soft_labels=false",
                                 "scaling.fractions=0.25,1.0"])
        path = tmp_path / "echo.cfg"
        path.write_text(format_config(cfg))
        assert load_config(str(path)) == cfg

    def test_format_is_sorted_and_newline_terminated(self):
        text = format_config(default_config())
        lines = text.splitlines()
        assert lines == sorted(lines)
        assert text.endswith("\n")
        assert "draft.soft_labels = true" in lines
