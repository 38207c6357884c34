import pytest
from hypothesis import given, strategies as st

from hybridhead.config import (
    ConfigError,
    ModelConfig,
    PRESETS,
    full_attention_layers,
    pair_kv_groups,
    parse_text,
    preset,
)


@given(st.integers(4, 64))
def test_three_global_layers_first_middle_last(blocks):
    assert full_attention_layers(blocks, 3) == (0, blocks // 2, blocks - 1)


@given(st.integers(1, 64), st.integers(0, 8))
def test_placement_count_and_range(blocks, count):
    picks = full_attention_layers(blocks, count)
    assert len(picks) == min(count, blocks) or len(picks) <= count
    assert all(0 <= i < blocks for i in picks)
    assert list(picks) == sorted(set(picks))


def test_pairs_skip_globals():
    kinds = ["global", "sliding_window", "sliding_window", "global", "sliding_window", "sliding_window", "sliding_window"]
    assert pair_kv_groups(kinds) == (0, 1, 1, 2, 3, 3, 4)
    assert pair_kv_groups(["global", "global"], share_global=True) == (0, 0)


def test_table_presets():
    p = preset("1.5B")
    assert (p.blocks, p.hidden, p.attn_heads, p.query_groups, p.num_full_attn, p.window) == (32, 1600, 25, 5, 3, 1024)
    p = preset("125M")
    assert (p.blocks, p.hidden, p.attn_heads, p.query_groups) == (24, 512, 8, 4)
    p = preset("350M")
    assert (p.blocks, p.hidden, p.attn_heads, p.query_groups) == (32, 768, 12, 4)
    assert preset("1.5B").meta_tokens == 128


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_valid(name):
    assert PRESETS[name].problems() == []


def test_validation_lists_every_problem():
    bad = ModelConfig(hidden=30, attn_heads=4, query_groups=3, kv_share="odd", meta_tokens=-1)
    with pytest.raises(ConfigError) as err:
        bad.validate()
    text = " ".join(err.value.problems)
    assert len(err.value.problems) >= 4
    for word in ("meta_tokens", "hidden", "query_groups", "kv_share"):
        assert word in text


def test_share_map_must_not_mix_kinds():
    cfg = ModelConfig(blocks=4, num_full_attn=1, kv_share_map=(0, 0, 1, 1))
    assert any("mixes" in p for p in cfg.problems())


def test_text_round_trip():
    cfg = preset("toy").replace(full_attn_layers=(0, 3), rope_base=5e5, d_inner=96)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_parse_errors():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match="expected"):
        parse_text("just words\n")
    assert parse_text("# header\n a = 1 # trailing\n\n") == {"a": "1"}


def test_unknown_key_and_bad_value():
    with pytest.raises(ConfigError) as err:
        ModelConfig.from_text("blocks = many\ncolour = red\n")
    assert len(err.value.problems) >= 1


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("gigantic")
