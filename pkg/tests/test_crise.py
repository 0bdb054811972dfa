import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchlab import (ContractError, ContrastiveOracle, DivisibilityError, ImageTensor,
                      LinearProbeClassifier, PatchMask, RiseConfig, SaliencyMap,
                      SeededRandomSource, ShapeError, TransportError, crise_map,
                      estimate_with_masks, exhaustive_cell_masks, generate_rise_masks,
                      inverse_patch_selectivity, make_grid, mask_to_pixel_field,
                      patch_selectivity, sample_patch_mask, softmax_normalize)

from conftest import random_image


def linear_contrastive(rng, h, w, c=3, k=2, scale=None, zero_bias=False):
    scale = scale if scale is not None else 1.0 / (h * w)
    weight = rng.normal(size=(k, h, w, c)) * scale
    bias = np.zeros(k) if zero_bias else rng.normal(size=k) * 0.01
    probe = LinearProbeClassifier(weight, bias)
    return probe, ContrastiveOracle.from_linear_probe(probe)


class TestRiseConfig:
    def test_valid(self):
        cfg = RiseConfig(n_masks=10, cell_stride=7)
        assert cfg.keep_prob == 0.5
        assert cfg.cells_for(28, 28) == (4, 4)

    def test_rejects_bad_params(self):
        with pytest.raises(ContractError):
            RiseConfig(n_masks=0, cell_stride=7)
        with pytest.raises(ContractError):
            RiseConfig(n_masks=1, cell_stride=7, keep_prob=0.0)
        with pytest.raises(ContractError):
            RiseConfig(n_masks=1, cell_stride=7, keep_prob=1.0)

    def test_stride_must_divide_image(self):
        cfg = RiseConfig(n_masks=1, cell_stride=9)
        with pytest.raises(DivisibilityError):
            cfg.cells_for(28, 28)

    def test_needs_two_cells_per_axis(self):
        cfg = RiseConfig(n_masks=1, cell_stride=28)
        with pytest.raises(ContractError):
            cfg.cells_for(28, 28)


class TestGenerateMasks:
    def test_values_in_unit_interval(self):
        cfg = RiseConfig(n_masks=50, cell_stride=7, seed=0)
        masks = generate_rise_masks(cfg, 28, 28)
        assert masks.shape == (50, 28, 28)
        assert masks.min() >= 0.0 and masks.max() <= 1.0

    def test_high_keep_prob_keeps_nearly_everything(self):
        cfg = RiseConfig(n_masks=100, cell_stride=7, keep_prob=0.999, seed=1)
        masks = generate_rise_masks(cfg, 28, 28)
        assert masks.mean() >= 0.99

    def test_per_pixel_mean_near_half_at_p_half(self):
        cfg = RiseConfig(n_masks=10_000, cell_stride=7, keep_prob=0.5, seed=2)
        masks = generate_rise_masks(cfg, 28, 28)
        per_pixel = masks.mean(axis=0)
        assert per_pixel.min() >= 0.47 and per_pixel.max() <= 0.53

    def test_seed_stability(self):
        cfg = RiseConfig(n_masks=20, cell_stride=7, seed=3)
        a = generate_rise_masks(cfg, 28, 28)
        b = generate_rise_masks(cfg, 28, 28)
        assert np.array_equal(a, b)
        other = generate_rise_masks(RiseConfig(n_masks=20, cell_stride=7, seed=4), 28, 28)
        assert not np.array_equal(a, other)

    def test_chunked_generation_matches_full(self):
        cfg = RiseConfig(n_masks=64, cell_stride=7, seed=5)
        full = generate_rise_masks(cfg, 28, 28)
        parts = [generate_rise_masks(cfg, 28, 28, start=s, count=16)
                 for s in range(0, 64, 16)]
        assert np.array_equal(np.concatenate(parts), full)

    def test_range_validation(self):
        cfg = RiseConfig(n_masks=10, cell_stride=7, seed=6)
        with pytest.raises(ContractError):
            generate_rise_masks(cfg, 28, 28, start=8, count=5)


class TestExhaustiveMasks:
    def test_enumerates_all_patterns_once(self):
        masks = exhaustive_cell_masks(14, 14, 7)  # 2x2 cells -> 16 masks
        assert masks.shape == (16, 14, 14)
        seen = {m.tobytes() for m in masks}
        assert len(seen) == 16

    def test_bit_to_cell_mapping(self):
        masks = exhaustive_cell_masks(14, 14, 7)
        # Index 1 sets bit 0 = cell (0, 0) only.
        assert masks[1, :7, :7].min() == 1.0
        assert masks[1, :, 7:].max() == 0.0 and masks[1, 7:, :].max() == 0.0

    def test_too_many_cells_rejected(self):
        with pytest.raises(ContractError):
            exhaustive_cell_masks(35, 35, 7)  # 25 cells


class TestEstimate:
    def test_matches_closed_form_on_exhaustive_masks(self):
        # For a linear probe with negated head and all 2^n equiprobable cell
        # masks at p = 0.5, the estimate collapses to G_cell + sum(G) + 2b.
        rng = np.random.default_rng(42)
        h = w = 24
        stride = 8
        x = random_image(rng, h, w)
        probe, oracle = linear_contrastive(rng, h, w)
        masks = exhaustive_cell_masks(h, w, stride)
        est = estimate_with_masks(x, oracle, 1, masks, 0.5)

        gx = (probe.weight[1] * np.asarray(x.data, dtype=np.float64)).sum(axis=2)
        per_cell = gx.reshape(3, stride, 3, stride).sum(axis=(1, 3))
        exact = per_cell + per_cell.sum() + 2 * probe.bias[1]
        expected = exact.repeat(stride, 0).repeat(stride, 1)
        assert np.abs(est.values - expected).max() < 1e-12

    def test_linearity_in_the_oracle(self):
        # Scaling every contrastive difference by alpha scales the map by alpha.
        rng = np.random.default_rng(7)
        h = w = 20
        x = random_image(rng, h, w)
        probe, oracle = linear_contrastive(rng, h, w, zero_bias=True)
        scaled = LinearProbeClassifier(3.0 * probe.weight, probe.bias)
        oracle_scaled = ContrastiveOracle.from_linear_probe(scaled)
        cfg = RiseConfig(n_masks=64, cell_stride=5, seed=8)
        s1 = crise_map(x, oracle, 0, cfg)
        s2 = crise_map(x, oracle_scaled, 0, cfg)
        assert np.allclose(s2.values, 3.0 * s1.values, rtol=1e-9, atol=1e-12)

    def test_batch_size_does_not_change_result(self):
        rng = np.random.default_rng(9)
        x = random_image(rng, 20, 20)
        _, oracle = linear_contrastive(rng, 20, 20)
        cfg = RiseConfig(n_masks=50, cell_stride=5, seed=10)
        a = crise_map(x, oracle, 0, cfg, batch_size=7)
        b = crise_map(x, oracle, 0, cfg, batch_size=50)
        assert np.allclose(a.values, b.values, rtol=0, atol=1e-12)

    def test_transport_error_reports_progress(self):
        class FlakyOracle:
            k = 2
            kind = "logit"

            def __init__(self):
                self.calls = 0

            def score_both_batch(self, images):
                self.calls += 1
                if self.calls > 1:
                    raise TransportError("connection reset", batch_index=3)
                pair = (np.zeros(2), np.zeros(2))
                from patchlab import OracleScores
                return [(OracleScores(p[0], "logit"), OracleScores(p[1], "logit"))
                        for p in [pair] * len(images)]

        rng = np.random.default_rng(11)
        x = random_image(rng, 20, 20)
        oracle = ContrastiveOracle(base=FlakyOracle(), contrast=None, paired=FlakyOracle())
        # paired oracle used directly; first batch of 8 succeeds, second dies
        oracle.paired.calls = 0
        cfg = RiseConfig(n_masks=24, cell_stride=5, seed=12)
        with pytest.raises(TransportError) as err:
            crise_map(x, oracle, 0, cfg, batch_size=8)
        assert "8 of 24" in str(err.value)
        assert err.value.batch_index == 3

    def test_category_out_of_range(self):
        rng = np.random.default_rng(13)
        x = random_image(rng, 20, 20)
        _, oracle = linear_contrastive(rng, 20, 20)
        with pytest.raises(ContractError):
            crise_map(x, oracle, 5, RiseConfig(n_masks=4, cell_stride=5))


class TestSoftmaxNormalize:
    def test_constant_map_becomes_uniform(self):
        s = softmax_normalize(SaliencyMap(np.full((4, 6), 2.5)))
        assert s.normalized
        assert np.allclose(s.values, 1.0 / 24)

    def test_two_value_example(self):
        s = softmax_normalize(SaliencyMap(np.array([[0.0, np.log(3.0)]])))
        assert s.values[0, 0] == pytest.approx(0.25, abs=1e-12)
        assert s.values[0, 1] == pytest.approx(0.75, abs=1e-12)

    def test_double_normalization_rejected(self):
        s = softmax_normalize(SaliencyMap(np.zeros((3, 3))))
        with pytest.raises(ContractError):
            softmax_normalize(s)

    def test_shift_invariance(self):
        rng = np.random.default_rng(14)
        values = rng.normal(size=(5, 5))
        a = softmax_normalize(SaliencyMap(values))
        b = softmax_normalize(SaliencyMap(values + 100.0))
        assert np.allclose(a.values, b.values, atol=1e-12)

    def test_large_values_do_not_overflow(self):
        s = softmax_normalize(SaliencyMap(np.array([[0.0, 5000.0]])))
        assert np.isfinite(s.values).all()
        assert s.values[0, 1] == pytest.approx(1.0)


class TestSelectivity:
    def grid_mask(self, popcount, rows=7, cols=7, h=28, w=28):
        grid = make_grid(h, w, rows, cols)
        bits = np.zeros(grid.n_patches, dtype=bool)
        bits[:popcount] = True
        return PatchMask(grid, bits)

    def test_full_mask_gives_zero_selectivity(self):
        s = softmax_normalize(SaliencyMap(np.random.default_rng(15).normal(size=(28, 28))))
        mask = self.grid_mask(49)
        assert patch_selectivity(s, mask) == 0.0

    def test_empty_mask_gives_mean_total(self):
        values = np.abs(np.random.default_rng(16).normal(size=(28, 28)))
        s = SaliencyMap(values)
        mask = self.grid_mask(0)
        assert patch_selectivity(s, mask) == pytest.approx(values.sum() / 49, rel=1e-12)

    def test_uniform_map_values(self):
        s = SaliencyMap(np.full((28, 28), 1.0 / 784), normalized=True)
        mask = self.grid_mask(15)
        assert patch_selectivity(s, mask) == pytest.approx((1 / 49) * (34 / 49), rel=1e-12)
        assert inverse_patch_selectivity(s, mask) == pytest.approx(15 / 49, rel=1e-12)

    def test_inverse_requires_normalized_map(self):
        s = SaliencyMap(np.full((28, 28), 1.0))
        with pytest.raises(ContractError):
            inverse_patch_selectivity(s, self.grid_mask(5))

    def test_shape_mismatch_rejected(self):
        s = SaliencyMap(np.full((14, 14), 1.0 / 196), normalized=True)
        with pytest.raises(ShapeError):
            inverse_patch_selectivity(s, self.grid_mask(5))  # mask covers 28x28

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31))
    def test_partition_identity(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.random((28, 28)) + 1e-9
        s = SaliencyMap(raw / raw.sum(), normalized=True)
        src = SeededRandomSource(seed)
        mask = sample_patch_mask(make_grid(28, 28, 7, 7), float(rng.random()), src)
        n = mask.grid.n_patches
        total = n * patch_selectivity(s, mask) + inverse_patch_selectivity(s, mask)
        assert total == pytest.approx(1.0, abs=1e-6)
