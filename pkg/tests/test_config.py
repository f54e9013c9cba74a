import dataclasses

import pytest

from blockattn import AttentionConfig, ConfigError, make_config, parse_config_text, validate_config


def test_valid_config_derives_g_and_b():
    cfg = make_config(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=16, T=2, B_Q=8, W=16)
    assert cfg.g == 2
    assert cfg.b == 4


def test_block_size_must_divide_sequence():
    with pytest.raises(ConfigError, match="N not divisible by B_K"):
        make_config(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=48, T=1)


def test_selected_count_bounded_by_block_count():
    with pytest.raises(ConfigError, match=r"T exceeds b=4"):
        make_config(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=16, T=5)


def test_head_grouping_must_divide():
    with pytest.raises(ConfigError, match="h not divisible by h_K"):
        make_config(N=64, d_K=8, d_V=8, h=4, h_K=3, B_K=16, T=2)


def test_bytes_per_elem_whitelist():
    with pytest.raises(ConfigError, match="bytes_per_elem"):
        make_config(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=16, T=2, bytes_per_elem=3)


def test_validation_idempotent():
    cfg = make_config(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=16, T=2)
    assert validate_config(cfg) == cfg


def test_derived_identities():
    cfg = make_config(N=96, d_K=4, d_V=4, h=8, h_K=2, B_K=8, T=3)
    assert cfg.g * cfg.h_K == cfg.h
    assert cfg.b * cfg.B_K == cfg.N


def test_defaults_clamped_to_sequence_length():
    cfg = make_config(N=8, d_K=4, d_V=4, h=2, h_K=1, B_K=4, T=2)
    assert cfg.B_Q == 8  # min(16, N)
    assert cfg.W == 8  # min(512, N)
    big = make_config(N=1024, d_K=4, d_V=4, h=2, h_K=1, B_K=64, T=2)
    assert big.B_Q == 16
    assert big.W == 512


def test_uniform_dim_property():
    cfg = make_config(N=16, d_K=4, d_V=4, h=2, h_K=1, B_K=4, T=2)
    assert cfg.d == 4
    odd = make_config(N=16, d_K=4, d_V=8, h=2, h_K=1, B_K=4, T=2)
    with pytest.raises(ConfigError, match="non-uniform head dims"):
        _ = odd.d


def test_config_is_frozen():
    cfg = make_config(N=16, d_K=4, d_V=4, h=2, h_K=1, B_K=4, T=2)
    with pytest.raises(dataclasses.FrozenInstanceError):
        cfg.N = 32


def test_parse_config_text_round_trip():
    text = """
    # comment line
    N = 64
    d_K = 8
    d_V = 8
    h = 4
    h_K = 2
    B_K = 16
    T = 2
    B_Q = 8   # trailing comment
    W = 16
    """
    cfg = parse_config_text(text)
    assert cfg == make_config(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=16, T=2, B_Q=8, W=16)


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("N = 64\nbogus = 1\n")


def test_parse_config_requires_core_keys():
    with pytest.raises(ConfigError, match="missing required"):
        parse_config_text("N = 64\n")


def test_all_violations_reported_together():
    try:
        validate_config(AttentionConfig(N=63, d_K=8, d_V=8, h=4, h_K=3, B_K=16, T=1))
    except ConfigError as exc:
        message = str(exc)
        assert "h not divisible by h_K" in message
        assert "N not divisible by B_K" in message
    else:
        pytest.fail("expected ConfigError")
