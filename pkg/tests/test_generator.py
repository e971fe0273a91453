import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attnseg.attention import AttentionConfig
from attnseg.errors import ConfigurationError, ShapeError
from attnseg.generator import (
    GeneratorConfig,
    build_generator,
    forward,
    one_hot,
    parameter_count,
    stage_targets,
)
from fd import numeric_grad

FIXTURES = Path(__file__).parent / "fixtures"
SPATIAL_KINDS = ("spatial", "serial", "parallel")


def rand_input(cfg, seed=1, batch=None):
    g = torch.Generator().manual_seed(seed)
    shape = (cfg.in_channels, *cfg.input_size)
    return torch.rand(*((batch,) if batch else ()), *shape, generator=g)


class TestShapes:
    def test_single_stage(self):
        cfg = GeneratorConfig(input_size=(32, 32), n_stages=1, base_width=8)
        out = forward(build_generator(cfg), rand_input(cfg))
        assert len(out) == 1 and out[0].prediction.shape == (8, 64, 64)

    def test_two_stages(self):
        cfg = GeneratorConfig(input_size=(32, 32), n_stages=2, base_width=8)
        out = forward(build_generator(cfg), rand_input(cfg))
        assert [tuple(o.prediction.shape[-2:]) for o in out] == [(64, 64), (128, 128)]

    def test_batched(self):
        cfg = GeneratorConfig(base_width=8)
        out = build_generator(cfg)(rand_input(cfg, batch=3))
        assert out[-1].prediction.shape == (3, 8, 64, 64)

    def test_input_size_mismatch(self):
        cfg = GeneratorConfig(base_width=8)
        with pytest.raises(ShapeError):
            build_generator(cfg)(torch.zeros(1, 20, 16))

    @pytest.mark.parametrize(
        "kw", [dict(n_stages=0), dict(n_classes=1), dict(base_width=12, attention=AttentionConfig(kind="channel"))]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigurationError):
            build_generator(GeneratorConfig(**kw))

    @settings(max_examples=15, deadline=None)
    @given(
        s=st.integers(1, 3), h=st.integers(2, 8), w=st.integers(2, 8),
        kind=st.sampled_from(["none", "channel", "spatial", "serial", "parallel"]),
        placement=st.sampled_from(["last_stage", "multi_stage"]),
    )
    def test_stage_and_map_counts(self, s, h, w, kind, placement):
        cfg = GeneratorConfig(
            input_size=(h, w), base_width=8, n_residual=1, n_stages=s,
            attention=AttentionConfig(kind=kind, placement=placement),
        )
        out = build_generator(cfg)(rand_input(cfg))
        assert len(out) == s
        expected_maps = 0 if kind not in SPATIAL_KINDS else (s if placement == "multi_stage" else 1)
        assert len(out[-1].attention_maps) == expected_maps
        for o in out:
            assert o.prediction.shape[-2:] == (h * 2**o.stage, w * 2**o.stage)
            sums = o.prediction.sum(dim=0)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
            assert torch.all(o.prediction >= 0)


class TestAttentionPlacement:
    def test_none_has_no_maps(self):
        cfg = GeneratorConfig(base_width=8)
        assert all(o.attention_maps == [] for o in build_generator(cfg)(rand_input(cfg)))

    def test_spatial_multi_stage_two_maps(self):
        cfg = GeneratorConfig(base_width=8, attention=AttentionConfig(kind="spatial", placement="multi_stage"))
        out = build_generator(cfg)(rand_input(cfg))
        assert [len(o.attention_maps) for o in out] == [1, 2]
        assert [tuple(m.shape) for m in out[-1].attention_maps] == [(1, 32, 32), (1, 64, 64)]

    def test_last_stage_only_before_final_head(self):
        cfg = GeneratorConfig(base_width=8, attention=AttentionConfig(kind="serial", placement="last_stage"))
        gen = build_generator(cfg)
        assert list(gen.attention.keys()) == ["2"]
        out = gen(rand_input(cfg))
        assert [len(o.attention_maps) for o in out] == [0, 1]

    def test_attention_changes_only_attended_stages(self):
        # Stage 1 output must not depend on the last-stage attention parameters.
        cfg = GeneratorConfig(base_width=8, attention=AttentionConfig(kind="spatial", placement="last_stage"))
        gen = build_generator(cfg)
        x = rand_input(cfg)
        before = gen(x)
        with torch.no_grad():
            gen.attention["2"].spatial.weight.add_(1.0)
        after = gen(x)
        assert torch.equal(before[0].prediction, after[0].prediction)
        assert not torch.equal(before[1].prediction, after[1].prediction)


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        cfg = GeneratorConfig(base_width=8, attention=AttentionConfig(kind="parallel"))
        a, b = build_generator(cfg, seed=3), build_generator(cfg, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seed_different_parameters(self):
        cfg = GeneratorConfig(base_width=8)
        a, b = build_generator(cfg, seed=3), build_generator(cfg, seed=4)
        assert not torch.equal(a.stem[0].weight, b.stem[0].weight)

    def test_global_rng_untouched(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        build_generator(GeneratorConfig(base_width=8), seed=9)
        assert torch.equal(torch.rand(3), expected)

    def test_golden_stage0_prediction(self):
        golden = json.loads((FIXTURES / "generator_golden.json").read_text())
        c = golden["config"]
        cfg = GeneratorConfig(
            input_size=tuple(c["input_size"]),
            attention=AttentionConfig(kind=c["attention"], placement=c["placement"]),
        )
        gen = build_generator(cfg, seed=c["seed"])
        with torch.no_grad():
            p = gen(rand_input(cfg, seed=c["input_seed"]))[0].prediction.double()
        assert list(p.shape) == golden["stage0_prediction_shape"]
        w = torch.arange(p.numel(), dtype=torch.float64).reshape(p.shape) / p.numel()
        assert float((p * w).sum()) == pytest.approx(golden["stage0_position_weighted_sum"], rel=1e-6)
        assert float(p[0].sum()) == pytest.approx(golden["stage0_background_sum"], rel=1e-6)


def expected_parameter_count(cfg: GeneratorConfig) -> int:
    """Closed-form count from the documented layer list."""
    w, k, c, mid = cfg.base_width, cfg.n_classes, cfg.in_channels, max(1, cfg.base_width // 2)
    conv = lambda cin, cout, ks: cin * cout * ks * ks + cout
    norm = lambda ch: 2 * ch
    stem = conv(c, w, 3) + norm(w)
    residual = 2 * (conv(w, w, 3) + norm(w))
    bottleneck = conv(w, mid, 1) + norm(mid) + conv(mid, mid, 4) + norm(mid) + conv(mid, w, 1) + norm(w) + conv(w, w, 1)
    head = conv(w, k, 1)
    att = cfg.attention
    per_block = 0
    if att.kind in ("channel", "serial", "parallel"):
        hidden = w // att.reduction
        per_block += (1 if att.shared_mlp else 2) * (hidden * w + hidden + w * hidden + w)
    if att.kind in SPATIAL_KINDS:
        per_block += w + 1
    n_blocks = len(cfg.attended_stages())
    return stem + cfg.n_residual * residual + cfg.n_stages * (bottleneck + head) + n_blocks * per_block


class TestParameterCount:
    @pytest.mark.parametrize("kind", ["none", "channel", "spatial", "serial", "parallel"])
    @pytest.mark.parametrize("placement", ["last_stage", "multi_stage"])
    def test_matches_closed_form(self, kind, placement):
        cfg = GeneratorConfig(attention=AttentionConfig(kind=kind, placement=placement))
        assert parameter_count(build_generator(cfg)) == expected_parameter_count(cfg)

    def test_unshared_mlp(self):
        cfg = GeneratorConfig(attention=AttentionConfig(kind="serial", shared_mlp=False))
        assert parameter_count(build_generator(cfg)) == expected_parameter_count(cfg)

    def test_default_regression(self):
        # desk default: width 32, 4 residual blocks, 2 stages, serial multi-stage attention
        cfg = GeneratorConfig(attention=AttentionConfig(kind="serial", placement="multi_stage"))
        assert parameter_count(build_generator(cfg)) == 88794

    def test_pure_function_of_config(self):
        cfg = GeneratorConfig(base_width=16)
        assert parameter_count(build_generator(cfg, 0)) == parameter_count(build_generator(cfg, 99))


class TestStageTargets:
    def test_full_resolution_is_one_hot(self):
        label = torch.randint(0, 8, (16, 16), generator=torch.Generator().manual_seed(0))
        t = stage_targets(label, 2)
        assert torch.equal(t[-1], one_hot(label, 8))
        assert t[0].shape == (8, 8, 8)

    def test_background_only(self):
        for t in stage_targets(torch.zeros(32, 32, dtype=torch.long), 3):
            assert torch.all(t[0] == 1) and torch.all(t[1:] == 0)

    def test_non_divisible(self):
        with pytest.raises(ShapeError):
            stage_targets(torch.zeros(30, 32, dtype=torch.long), 3)

    def test_layered_label_histograms(self):
        # Horizontal bands, as in a retinal label: nearest-neighbour histograms stay within 2%.
        rng = np.random.default_rng(0)
        bounds = np.sort(rng.choice(np.arange(4, 252), size=7, replace=False))
        rows = np.searchsorted(bounds, np.arange(256), side="right")
        label = torch.from_numpy(np.repeat(rows[:, None], 256, axis=1))
        targets = stage_targets(label, 3)
        full = np.bincount(label.numpy().ravel(), minlength=8) / label.numel()
        for t in targets:
            hist = t.sum(dim=(1, 2)).numpy() / (t.shape[1] * t.shape[2])
            assert np.abs(hist - full).max() <= 0.02

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_label_histograms(self, seed):
        label = torch.randint(0, 8, (128, 128), generator=torch.Generator().manual_seed(seed))
        full = np.bincount(label.numpy().ravel(), minlength=8) / label.numel()
        for t in stage_targets(label, 2):
            hist = t.sum(dim=(1, 2)).numpy() / (t.shape[1] * t.shape[2])
            assert np.abs(hist - full).max() <= 0.02


class TestGradient:
    def test_probe_parameter_matches_finite_differences(self):
        cfg = GeneratorConfig(
            input_size=(4, 4), base_width=3, n_residual=1, n_stages=1,
            attention=AttentionConfig(kind="spatial", placement="multi_stage"),
        )
        gen = build_generator(cfg, seed=5).double()
        x = rand_input(cfg, seed=2).double()
        probe = gen.trunk[0].body[0].weight
        # A plain sum of softmax outputs is constant; weight each output element instead.
        weights = torch.rand(cfg.n_classes, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

        def objective(p):
            with torch.no_grad():
                probe.copy_(p)
            return sum((o.prediction * weights).sum() for o in gen(x))

        base = probe.detach().clone()
        gen.zero_grad()
        objective(base).backward()
        analytic = probe.grad.detach().clone()
        numeric = numeric_grad(lambda p: objective(p), [base.clone()], 0, eps=1e-4)
        with torch.no_grad():
            probe.copy_(base)
        assert analytic.abs().max() > 0
        rel = (analytic - numeric).abs() / torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-6)
        assert rel.max() < 1e-2
