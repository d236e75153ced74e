from __future__ import annotations

import numpy as np
import pytest
from scipy.signal import correlate2d

from rgir import generator as G
from rgir import tensor as T
from rgir.rng import Stream

from conftest import WEIGHTS_SEED


class TestConfig:
    def test_defaults_satisfy_invariants(self):
        cfg = G.GeneratorConfig()
        assert cfg.resolution == cfg.base_size * 2 ** (cfg.num_layers // 2)
        assert cfg.num_style_rows == 12
        assert cfg.filters_per_row() == [32] * 8 + [3] * 4

    def test_rejects_odd_layer_count(self):
        with pytest.raises(ValueError, match="even"):
            G.GeneratorConfig(num_layers=7)

    def test_rejects_inconsistent_resolution(self):
        with pytest.raises(ValueError, match="resolution"):
            G.GeneratorConfig(resolution=128, num_layers=8)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            G.GeneratorConfig(latent_dim=48)


class TestWeights:
    def test_same_seed_bit_identical(self):
        cfg = G.GeneratorConfig(resolution=16, num_layers=4)
        a = G.generate_weights(cfg, 123)
        b = G.generate_weights(cfg, 123)
        for (na, va), (nb, vb) in zip(a.named_arrays(), b.named_arrays()):
            assert na == nb
            assert np.array_equal(va, vb), na

    def test_different_seed_differs(self):
        cfg = G.GeneratorConfig(resolution=16, num_layers=4)
        a = G.generate_weights(cfg, 1)
        b = G.generate_weights(cfg, 2)
        assert not np.array_equal(a.const, b.const)

    def test_affine_bias_starts_at_one(self, weights16):
        for b in weights16.conv_affine_b + weights16.rgb_affine_b:
            assert np.all(b == 1.0)

    def test_all_finite(self, weights64):
        for name, arr in weights64.named_arrays():
            assert np.all(np.isfinite(arr)), name


class TestModulatedConv:
    def test_all_ones_styles_is_plain_convolution(self, weights16):
        x = Stream(5).normals(32 * 6 * 6).reshape(32, 6, 6)
        filt = weights16.conv_filters[0]
        out = G.modulated_conv(x, filt, np.ones(32), demodulate=False)
        # independent reference: per-channel scipy correlation with zero fill
        ref = np.zeros_like(out)
        for o in range(filt.shape[0]):
            for c in range(filt.shape[1]):
                ref[o] += correlate2d(x[c], filt[o, c], mode="same", boundary="fill")
        assert np.max(np.abs(out - ref)) < 1e-10

    def test_zero_styles_annihilate(self, weights16):
        x = Stream(6).normals(32 * 4 * 4).reshape(32, 4, 4)
        out = G.modulated_conv(x, weights16.conv_filters[0], np.zeros(32), demodulate=False)
        assert np.all(out == 0.0)

    def test_scaling_one_filter_style_scales_that_channel(self, weights16):
        x = Stream(7).normals(32 * 4 * 4).reshape(32, 4, 4)
        filt = weights16.conv_filters[1]
        styles = np.ones((32, 32))
        base = G.modulated_conv(x, filt, styles, demodulate=False)
        styles2 = styles.copy()
        styles2[3] *= 2.0
        doubled = G.modulated_conv(x, filt, styles2, demodulate=False)
        assert np.allclose(doubled[3], 2.0 * base[3])
        mask = np.ones(32, dtype=bool)
        mask[3] = False
        assert np.array_equal(doubled[mask], base[mask])

    def test_channel_mismatch_rejected(self, weights16):
        with pytest.raises(T.ShapeError):
            G.modulated_conv(np.ones((8, 4, 4)), weights16.conv_filters[0], np.ones(32))

    def test_demodulation_normalizes_filter_energy(self, weights16):
        x = Stream(8).normals(32 * 4 * 4).reshape(32, 4, 4)
        filt = weights16.conv_filters[0]
        a = G.modulated_conv(x, filt, np.full(32, 5.0), demodulate=True)
        b = G.modulated_conv(x, filt, np.full(32, 1.0), demodulate=True)
        # uniform style rescaling is cancelled (up to the eps regulariser)
        assert np.max(np.abs(a - b)) < 1e-6


class TestMapping:
    def test_zero_input_zero_bias_gives_zero(self, weights16):
        w = G.map_latent(np.zeros(weights16.config.latent_dim), weights16)
        assert np.all(w.values == 0.0)

    def test_deterministic(self, weights16):
        z = Stream(9).normals(weights16.config.latent_dim)
        a = G.map_latent(z, weights16)
        b = G.map_latent(z, weights16)
        assert np.array_equal(a.values, b.values)

    def test_rejects_wrong_shape(self, weights16):
        with pytest.raises(ValueError):
            G.map_latent(np.zeros(3), weights16)


class TestMeanLatent:
    def test_single_sample_equals_map_latent(self, weights16):
        d = weights16.config.latent_dim
        z = Stream(31).normals(d)
        assert np.array_equal(
            G.mean_latent(weights16, n_samples=1, seed=31).values,
            G.map_latent(z, weights16).values,
        )

    def test_matches_independent_monte_carlo_within_3_se(self, weights16):
        est = G.mean_latent(weights16, n_samples=10000, seed=0)
        # independent draw with a different seed
        stream = Stream(4242)
        d = weights16.config.latent_dim
        samples = np.stack([
            G.map_latent(stream.normals(d), weights16).values for _ in range(10000)
        ])
        se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
        inside = np.abs(samples.mean(axis=0) - est.values) <= 3 * se
        # ~0.3% of coordinates may fall outside a 3-SE band
        assert inside.sum() >= d - 2

    def test_estimator_spread_shrinks_with_sample_count(self, weights16):
        def spread(n, reps=24):
            means = [
                G.mean_latent(weights16, n_samples=n, seed=1000 + r).values[0]
                for r in range(reps)
            ]
            return np.std(means, ddof=1)

        s_small, s_big = spread(40), spread(160)
        # quadrupling samples should halve the spread, within MC slack
        assert s_small / s_big == pytest.approx(2.0, rel=0.5)

    def test_rejects_zero_samples(self, weights16):
        with pytest.raises(ValueError):
            G.mean_latent(weights16, n_samples=0)


class TestExpansion:
    def test_layerwise_rows_all_equal_source(self, weights16):
        w = G.LatentGlobal(Stream(3).normals(weights16.config.latent_dim))
        wp = G.expand_to_layerwise(w, weights16.config)
        assert wp.values.shape == (weights16.config.num_style_rows, weights16.config.latent_dim)
        for row in wp.values:
            assert np.array_equal(row, w.values)

    def test_filterwise_codes_all_equal_row(self, weights16):
        cfg = weights16.config
        wp = G.LatentLayerwise(Stream(4).normals(cfg.num_style_rows * cfg.latent_dim)
                               .reshape(cfg.num_style_rows, cfg.latent_dim))
        wpp = G.expand_to_filterwise(wp, cfg)
        counts = cfg.filters_per_row()
        assert [c.shape[0] for c in wpp.codes] == counts
        for i, mat in enumerate(wpp.codes):
            for row in mat:
                assert np.array_equal(row, wp.values[i])

    def test_round_trip_projection(self, weights16):
        cfg = weights16.config
        w = G.LatentGlobal(Stream(5).normals(cfg.latent_dim))
        wp = G.expand_to_layerwise(w, cfg)
        assert np.array_equal(wp.values[0], w.values)
        wpp = G.expand_to_filterwise(wp, cfg)
        assert np.array_equal(wpp.codes[0][0], w.values)


class TestSynthesize:
    def test_three_variants_bit_identical(self, weights16):
        cfg = weights16.config
        for seed in range(5):
            w = G.LatentGlobal(Stream(seed).normals(cfg.latent_dim))
            a = G.synthesize(w, weights16)
            b = G.synthesize(G.expand_to_layerwise(w, cfg), weights16)
            c = G.synthesize(G.expand_to_filterwise(G.expand_to_layerwise(w, cfg), cfg),
                             weights16)
            assert np.array_equal(a, b)
            assert np.array_equal(a, c)

    def test_output_bounded_100_seeds(self, weights16):
        cfg = weights16.config
        stream = Stream(777)
        for _ in range(100):
            img = G.synthesize(G.map_latent(stream.normals(cfg.latent_dim), weights16),
                               weights16)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_output_bounded_at_full_scale(self, weights64):
        cfg = weights64.config
        stream = Stream(778)
        for _ in range(5):
            img = G.synthesize(G.map_latent(stream.normals(cfg.latent_dim), weights64),
                               weights64)
            assert img.shape == (64, 64, 3)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_rejects_mismatched_codes(self, weights16):
        cfg = weights16.config
        rows = [T.constant(np.zeros((nf, cfg.latent_dim))) for nf in cfg.filters_per_row()]
        rows[0] = T.constant(np.zeros((5, cfg.latent_dim)))
        with pytest.raises(T.ShapeError):
            G.synthesize_graph(rows, weights16)

    @pytest.mark.parametrize("variant", ["global", "layerwise", "filterwise"])
    def test_gradient_flows_to_latent(self, weights16, variant):
        cfg = weights16.config
        w = G.LatentGlobal(Stream(12).normals(cfg.latent_dim))
        if variant == "global":
            latent = w
        elif variant == "layerwise":
            latent = G.expand_to_layerwise(w, cfg)
        else:
            latent = G.expand_to_filterwise(G.expand_to_layerwise(w, cfg), cfg)
        cot = Stream(13).normals(3 * cfg.resolution ** 2).reshape(3, cfg.resolution,
                                                                  cfg.resolution)

        def forward(lat) -> float:
            _, rows = G.latent_graph_rows(lat, weights16)
            out = G.synthesize_graph(rows, weights16)
            return float(np.sum(out.data * cot))

        leaves, rows = G.latent_graph_rows(latent, weights16)
        out = G.synthesize_graph(rows, weights16)
        T.backward(T.reduce_sum(T.mul(out, T.constant(cot))))

        h = 1e-5
        picks = Stream(14)
        for _ in range(5):
            li = picks.index(len(leaves))
            leaf = leaves[li]
            flat_idx = picks.index(leaf.data.size)
            def perturbed(sign):
                lat2 = _copy_latent(latent)
                _flat_codes(lat2)[li].reshape(-1)[flat_idx] += sign * h
                return forward(lat2)
            fd = (perturbed(+1) - perturbed(-1)) / (2 * h)
            an = leaf.grad.reshape(-1)[flat_idx]
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-7)


def _copy_latent(latent):
    if isinstance(latent, G.LatentGlobal):
        return G.LatentGlobal(latent.values.copy())
    if isinstance(latent, G.LatentLayerwise):
        return G.LatentLayerwise(latent.values.copy())
    return G.LatentFilterwise(tuple(c.copy() for c in latent.codes))


def _flat_codes(latent):
    # views onto the latent's leaves in latent_graph_rows order
    if isinstance(latent, G.LatentGlobal):
        return [latent.values]
    if isinstance(latent, G.LatentLayerwise):
        return list(latent.values)
    return list(latent.codes)


class TestCheckpoint:
    def test_round_trip_preserves_structure(self, weights16, tmp_path):
        path = tmp_path / "w.rgir"
        G.save_weights(path, weights16)
        loaded = G.load_weights(path)
        assert loaded.config == weights16.config
        for (na, va), (nb, vb) in zip(weights16.named_arrays(), loaded.named_arrays()):
            assert na == nb
            assert np.max(np.abs(va - vb)) < 1e-6  # f32 payload

    def test_float64_payload_is_exact(self, weights16, tmp_path):
        path = tmp_path / "w64.rgir"
        G.save_weights(path, weights16, dtype_code=1)
        loaded = G.load_weights(path)
        for (_, va), (_, vb) in zip(weights16.named_arrays(), loaded.named_arrays()):
            assert np.array_equal(va, vb)

    def test_save_load_save_byte_identical(self, weights16, tmp_path):
        p1, p2 = tmp_path / "a.rgir", tmp_path / "b.rgir"
        G.save_weights(p1, weights16)
        G.save_weights(p2, G.load_weights(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_and_version_checked(self, tmp_path, weights16):
        path = tmp_path / "w.rgir"
        G.save_weights(path, weights16)
        raw = path.read_bytes()
        assert raw[:4] == b"RGIR"
        bad = tmp_path / "bad.rgir"
        bad.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ValueError, match="magic"):
            G.load_weights(bad)

    def test_synthesis_from_loaded_weights_deterministic(self, weights16, tmp_path):
        path = tmp_path / "w.rgir"
        G.save_weights(path, weights16)
        loaded = G.load_weights(path)
        z = Stream(77).normals(weights16.config.latent_dim)
        a = G.synthesize(G.map_latent(z, loaded), loaded)
        b = G.synthesize(G.map_latent(z, loaded), loaded)
        assert np.array_equal(a, b)
