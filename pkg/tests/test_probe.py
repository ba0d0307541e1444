import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptune.data import gen_synthetic
from aptune.gating import trainable_param_count
from aptune.probe import (
    GateReport,
    NoGatesError,
    VariablePrefixPlan,
    build_pt2star_config,
    collect_gates,
    derive_variable_lengths,
    export_heatmap,
    gray_level,
    read_heatmap,
    render_svg,
)
from aptune.training import PrefixModel
from aptune.transformer import Backbone, ModelConfig

from conftest import small_config


@pytest.fixture(scope="module")
def tagging():
    ds = gen_synthetic("tag_span", 0, 60)
    cfg = small_config(vocab_size=len(ds.vocab), prefix_len=4)
    return ds, cfg


def _model(cfg, mode="apt", seed=0, randomize=True):
    cfg = cfg.with_mode(mode)
    model = PrefixModel.build(cfg, Backbone.init(cfg, 0, np.float64), "tagging", 5, seed, np.float64)
    if randomize and model.gates.layers[0].weight is not None:
        rng = np.random.default_rng(seed)
        for g in model.gates.layers:
            g.weight.data = rng.normal(size=g.weight.shape)
    return model


def _report(alpha, lam=None):
    alpha = np.asarray(alpha, dtype=np.float64)
    lam = np.ones(alpha.shape[0]) if lam is None else np.asarray(lam, dtype=np.float64)
    return GateReport(alpha, lam, 1)


class TestCollect:
    def test_zero_weights_give_half(self, tagging):
        ds, cfg = tagging
        rep = collect_gates(_model(cfg, randomize=False), ds.dev)
        np.testing.assert_array_equal(rep.mean_alpha, 0.5)
        assert rep.mean_alpha.shape == (cfg.num_layers, cfg.prefix_len)
        np.testing.assert_array_equal(rep.lam, 1.0)

    def test_singleton(self, tagging):
        ds, cfg = tagging
        model = _model(cfg)
        rep = collect_gates(model, ds.dev[:1])
        from aptune.data import collate

        alphas = model.encode(collate(ds.dev[:1], "tagging")).alphas
        np.testing.assert_array_equal(rep.mean_alpha, np.stack([a[0] for a in alphas]))

    def test_partition_merge(self, tagging):
        ds, cfg = tagging
        model = _model(cfg)
        ex = ds.train[:23]
        whole = collect_gates(model, ex, batch_size=5)
        merged = collect_gates(model, ex[:7], batch_size=3).merge(collect_gates(model, ex[7:], batch_size=64))
        assert merged.count == 23
        assert np.max(np.abs(whole.mean_alpha - merged.mean_alpha)) <= 1e-12

    def test_deterministic(self, tagging):
        ds, cfg = tagging
        model = _model(cfg)
        a, b = collect_gates(model, ds.dev), collect_gates(model, ds.dev)
        assert a.mean_alpha.tobytes() == b.mean_alpha.tobytes()

    def test_values_in_open_interval(self, tagging):
        ds, cfg = tagging
        rep = collect_gates(_model(cfg), ds.dev)
        assert np.all((rep.mean_alpha > 0) & (rep.mean_alpha < 1))

    @pytest.mark.parametrize("mode", ["pt2", "no_token_gate", "pt2_plus"])
    def test_no_gates(self, tagging, mode):
        ds, cfg = tagging
        with pytest.raises(NoGatesError, match="checkpoint has no gates"):
            collect_gates(_model(cfg, mode), ds.dev)

    def test_lambda_copied(self, tagging):
        ds, cfg = tagging
        model = _model(cfg)
        model.gates.layers[1].lam.data[:] = 0.25
        assert collect_gates(model, ds.dev[:3]).lam.tolist() == [1.0, 0.25]


class TestDerive:
    def test_saturation(self):
        assert derive_variable_lengths(_report([[0.9] * 4] * 3)).lengths == [4, 4, 4]

    def test_floor(self):
        assert derive_variable_lengths(_report([[0.1] * 4] * 2), min_len=2).lengths == [2, 2]

    def test_counting(self):
        assert derive_variable_lengths(_report([[0.9, 0.6, 0.3, 0.1]]), tau=0.5).lengths == [2]

    def test_bad_args(self):
        with pytest.raises(ValueError):
            derive_variable_lengths(_report([[0.5]]), tau=1.0)
        with pytest.raises(ValueError):
            derive_variable_lengths(_report([[0.5]]), min_len=0)

    def test_plan_json_round_trip(self):
        plan = VariablePrefixPlan([1, 3], 0.4, "ck@ds")
        assert VariablePrefixPlan.from_json(plan.to_json()) == plan


_alpha = st.integers(1, 4).flatmap(
    lambda L: st.integers(1, 6).flatmap(
        lambda l: st.lists(st.lists(st.floats(0.001, 0.999), min_size=l, max_size=l), min_size=L, max_size=L)
    )
)


@settings(max_examples=60, deadline=None)
@given(_alpha, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_lengths_monotone_in_tau(alpha, t1, t2):
    t1, t2 = min(t1, t2), max(t1, t2)
    rep = _report(alpha)
    a = derive_variable_lengths(rep, t1).lengths
    b = derive_variable_lengths(rep, t2).lengths
    assert all(x >= y for x, y in zip(a, b))
    assert all(1 <= x <= rep.prefix_len for x in a)


@settings(max_examples=60, deadline=None)
@given(_alpha, st.floats(0.01, 0.99))
def test_plan_shrinks_parameters_when_a_gate_is_below_tau(alpha, tau):
    rep = _report(alpha)
    L, l = rep.mean_alpha.shape
    plan = derive_variable_lengths(rep, tau)
    base = ModelConfig(num_layers=L, num_heads=1, model_dim=4, prefix_len=l, mode="pt2")
    star = build_pt2star_config(plan, base)
    assert all(n <= l for n in star.prefix_lengths)
    # the floor min_len=1 leaves nothing to remove when l == 1
    if np.any(rep.mean_alpha < tau) and l > 1:
        assert sum(plan.lengths) < L * l
        assert trainable_param_count(star) < trainable_param_count(base, "pt2")


def test_single_token_prefix_cannot_shrink():
    plan = derive_variable_lengths(_report([[0.25]]), 0.5)
    assert plan.lengths == [1]


class TestBuildConfig:
    def test_identity_plan(self):
        base = ModelConfig(prefix_len=4)
        star = build_pt2star_config(VariablePrefixPlan([4, 4], 0.5), base)
        assert star.mode == "pt2_star"
        assert trainable_param_count(star) == trainable_param_count(base, "pt2")

    def test_layer_mismatch(self):
        with pytest.raises(ValueError):
            build_pt2star_config(VariablePrefixPlan([1, 2, 3], 0.5), ModelConfig())

    def test_length_above_cap(self):
        with pytest.raises(ValueError):
            build_pt2star_config(VariablePrefixPlan([5, 1], 0.5), ModelConfig(prefix_len=4))


class TestExport:
    def test_rows_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        alpha = rng.uniform(size=(2, 2))
        paths = export_heatmap(_report(alpha, [0.3, 1.7]), tmp_path / "hm.csv")
        lines = (tmp_path / "hm.csv").read_text().splitlines()
        assert lines[0] == "layer,token,mean_alpha" and len(lines) == 5
        assert read_heatmap(tmp_path / "hm.csv").tobytes() == alpha.tobytes()
        lam = (tmp_path / "hm_lambda.csv").read_text().splitlines()
        assert lam == ["layer,lambda", "0,0.29999999999999999", "1,1.7"]
        assert {p.name for p in paths} == {"hm.csv", "hm_lambda.csv", "hm.svg"}

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            export_heatmap(_report([[0.5]]), tmp_path / "missing" / "hm.csv")

    def test_gray_levels(self):
        assert gray_level(1.0) == 0 and gray_level(0.0) == 255

    def test_svg_shading_monotone(self):
        alpha = np.random.default_rng(1).uniform(size=(3, 5))
        svg = render_svg(alpha)
        cells = re.findall(r'fill="rgb\((\d+),\d+,\d+\)" data-layer="(\d+)" data-token="(\d+)"', svg)
        assert len(cells) == 15
        pairs = [(alpha[int(i), int(j)], int(g)) for g, i, j in cells]
        for va, ga in pairs:
            for vb, gb in pairs:
                if va > vb:
                    assert ga <= gb


@settings(max_examples=40, deadline=None)
@given(_alpha)
def test_heatmap_round_trip_property(alpha):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        rep = _report(alpha)
        export_heatmap(rep, Path(d) / "h.csv", svg=False)
        assert read_heatmap(Path(d) / "h.csv").tobytes() == rep.mean_alpha.tobytes()
