import json
from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psvit.arch import (
    CHOICES,
    CellChoice,
    Genotype,
    GenotypeError,
    PatchConfig,
    SearchSpaceParams,
    StageSpec,
    attention_compute_share,
    canonical_genotypes,
    count_flops,
    count_params,
    last_layer_shared,
    layer_cost,
    pooled_tokens,
    preset,
    require_valid,
    search_space_size,
    supernet_cardinality,
    validate,
)

B, S, I = CellChoice.BASIC, CellChoice.SHARED_PAIR, CellChoice.IDENTITY


def codes(g):
    return {v.code for v in validate(g)}


def three_stage(dims=(192, 256, 384), tokens=(197, 99, 50), heads=(3, 4, 6), cells=((B,) * 4,) * 3, mode="1D"):
    patch = PatchConfig(224, 16, 3, mode == "1D")
    stages = tuple(StageSpec(t, d, h, c) for t, d, h, c in zip(tokens, dims, heads, cells))
    return Genotype(mode, patch, stages)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def test_baselines_valid():
    assert validate(preset("deit-tiny")) == []
    assert validate(three_stage()) == []


def test_every_preset_valid():
    for name, g in canonical_genotypes().items():
        assert validate(g) == [], name


def test_decreasing_dims_rejected():
    assert "NONDECREASING_DIM" in codes(three_stage(dims=(384, 256, 192), heads=(6, 4, 3)))


def test_dim_heads_divisibility():
    assert "DIM_NOT_DIVISIBLE_BY_HEADS" in codes(three_stage(heads=(5, 4, 6)))


def test_tokens_must_decrease():
    assert "TOKENS_NOT_DECREASING" in codes(three_stage(tokens=(197, 197, 50)))


def test_pool_token_mismatch():
    assert "POOL_TOKEN_MISMATCH" in codes(three_stage(tokens=(197, 98, 50)))


def test_first_stage_must_match_patches():
    assert "STAGE_TOKEN_MISMATCH" in codes(three_stage(tokens=(196, 99, 50)))


def test_2d_rules():
    g = three_stage(tokens=(196, 49, 16), mode="2D")
    assert "ODD_SPATIAL" in codes(g)
    assert validate(preset("toy-2d")) == []
    with_cls = replace(preset("toy-2d"), patch=PatchConfig(32, 4, 3, True))
    assert "CLS_IN_2D" in codes(with_cls)


def test_share_without_source():
    g = Genotype("1D", PatchConfig(224, 16), (StageSpec(197, 192, 3, (), (True, False)),))
    assert "SHARE_WITHOUT_SOURCE" in codes(g)


def test_require_valid_raises_with_codes():
    with pytest.raises(GenotypeError) as info:
        require_valid(three_stage(dims=(384, 256, 192), heads=(6, 4, 3)))
    assert "NONDECREASING_DIM" in {v.code for v in info.value.violations}


def test_manual_sharing3_flags():
    g = preset("sharing3")
    flags = g.stages[0].layer_flags()
    assert flags[:6] == (False, True, True, False, True, True)
    assert validate(g) == []


def test_pooled_tokens():
    assert [pooled_tokens(n, "1D") for n in (197, 99, 785, 393)] == [99, 50, 393, 197]
    assert [pooled_tokens(n, "2D") for n in (784, 196)] == [196, 49]


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(CHOICES), min_size=12, max_size=12))
def test_json_roundtrip(cells):
    g = preset("tiny16").with_cells(cells)
    assert Genotype.from_json(g.to_json()) == g
    assert json.loads(g.to_json())["stages"][1]["cells"] == [c.value for c in cells[4:8]]


def test_json_schema_fields():
    d = preset("toy").to_dict()
    assert set(d) >= {"version", "pooling_mode", "patch", "stages", "num_classes"}
    assert set(d["patch"]) == {"image", "patch", "channels", "cls"}
    assert d["stages"][0] == {"tokens": 65, "dim": 16, "heads": 2, "cells": ["B", "B"]}


def test_json_version_checked():
    d = preset("toy").to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        Genotype.from_dict(d)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def test_hand_example_layer():
    # 4*N*d^2 + 2*N^2*d + 2*N^2*d with N=2, d=4
    e = layer_cost(2, 4, 1, False, mlp_ratio=4, score_macs=2)
    assert e.attention_macs == 192
    assert e.mlp_macs == 256
    # plain MACs: one N^2*d per product
    assert layer_cost(2, 4, 1, False).attention_macs == 128 + 16 + 16


def test_sharing_layer_cost():
    basic = layer_cost(197, 192, 3, False)
    shared = layer_cost(197, 192, 3, True)
    assert basic.attention_macs - shared.attention_macs == 2 * 197 * 192**2 + 197**2 * 192
    assert shared.macs < basic.macs
    assert shared.mlp_macs == basic.mlp_macs


def test_param_shares_bias_free():
    e = layer_cost(10, 4, 1, False, bias=False)
    assert (e.params_attention, e.params_mlp) == (64, 128)
    assert Fraction(e.params_attention, e.params_attention + e.params_mlp) == Fraction(1, 3)
    s = layer_cost(10, 4, 1, True, bias=False)
    assert 2 * s.params_attention == e.params_attention


def test_attention_compute_share_values():
    assert attention_compute_share(197, 384) == Fraction(581, 1349)
    assert attention_compute_share(7, 7) == Fraction(1, 2)
    assert abs(float(attention_compute_share(197, 192)) - 0.5032) < 5e-5


@given(st.integers(1, 10**6), st.integers(1, 10**6))
def test_attention_share_bounds(n, d):
    r = attention_compute_share(n, d)
    assert Fraction(1, 3) < r < 1


def test_attention_share_matches_layer_cost_with_doubled_products():
    n, d = 197, 384
    e = layer_cost(n, d, 6, False, score_macs=2)
    assert Fraction(e.attention_macs, e.attention_macs + e.mlp_macs) == attention_compute_share(n, d)


def test_report_totals_are_entry_sums():
    rep = count_flops(preset("tiny16"))
    assert rep.total_macs == sum(e.macs for e in rep.entries)
    d = rep.to_dict()
    assert d["totals"]["macs"] == rep.total_macs
    assert "total MACs" in rep.render()


def test_deit_tiny_params_match_reference_count():
    # 5,717,416 is the commonly reported DeiT-Tiny parameter count
    assert count_params(preset("deit-tiny"))["total"] == 5_717_416


def test_count_params_components_sum():
    p = count_params(preset("small8"))
    assert p["total"] == sum(v for k, v in p.items() if k != "total")


def test_toy_exact_cost():
    rep = count_flops(preset("toy"))
    assert rep.total_macs == 1_963_480
    assert count_params(preset("toy"))["total"] == 53_498


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(CHOICES), min_size=12, max_size=12), st.integers(0, 11), st.sampled_from([B, S]))
def test_flops_monotone_in_cells(cells, idx, upgrade):
    base = list(cells)
    base[idx] = I
    g0 = preset("tiny16").with_cells(base)
    base[idx] = upgrade
    g1 = preset("tiny16").with_cells(base)
    assert count_flops(g1).total_macs > count_flops(g0).total_macs


def test_count_flops_pure():
    g = preset("dimension2")
    assert count_flops(g).to_dict() == count_flops(g).to_dict()


def test_invalid_genotype_not_costed():
    with pytest.raises(GenotypeError):
        count_flops(three_stage(dims=(384, 256, 192), heads=(6, 4, 3)))


# ---------------------------------------------------------------------------
# search-space arithmetic and presets
# ---------------------------------------------------------------------------


def test_search_space_size():
    assert search_space_size(SearchSpaceParams(4, 4, 4, 36)) == 64**36
    assert search_space_size(SearchSpaceParams(2, 3, 5, 0)) == 1
    with pytest.raises(ValueError):
        SearchSpaceParams(0, 4, 4, 36)


def test_supernet_cardinality():
    assert supernet_cardinality() == 387_420_489


def test_preset_schedules():
    t16 = preset("tiny16")
    assert [s.dim for s in t16.stages] == [192, 288, 384]
    assert [s.heads for s in t16.stages] == [3, 6, 6]
    assert [s.tokens for s in t16.stages] == [197, 99, 50]
    s8 = preset("small8")
    assert [s.dim for s in s8.stages] == [144, 256, 384]
    assert [s.tokens for s in s8.stages] == [785, 393, 197]
    d1 = preset("dimension1")
    assert [s.depth for s in d1.stages] == [4, 8, 20]


def test_depth_and_last_layer():
    g = preset("tiny16").with_cells([S, I, B, I] * 3)
    assert g.depth == 9
    assert not last_layer_shared(g)
    g2 = preset("tiny16").with_cells([B] * 11 + [S])
    assert last_layer_shared(g2)
    with pytest.raises(KeyError):
        preset("nope")
