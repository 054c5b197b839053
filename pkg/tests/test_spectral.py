"""Spectral analysis: DFT oracle equivalence, binning, band ratios."""

import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from patchseg.errors import ConfigError, DegenerateInputError
from patchseg.spectral import (
    LayerSpectralReport,
    channel_collapse,
    dft2_power,
    freq_ratio,
    layerwise_spectra,
    radial_profile,
    report_to_json,
)

from oracles import power_spectrum_loops, radial_bin_loops, riemann_ratio


class TestDft2Power:
    def test_constant_map_is_dc_only(self):
        c, h, w = 2.5, 6, 4
        spec = dft2_power(np.full((h, w), c))
        center = spec.values[h // 2, w // 2]
        assert abs(center - (c * h * w) ** 2) < 1e-9
        off_dc = spec.values.copy()
        off_dc[h // 2, w // 2] = 0.0
        assert np.all(off_dc < 1e-18)

    def test_impulse_has_flat_spectrum(self):
        f = np.zeros((5, 5))
        f[1, 3] = 1.0
        spec = dft2_power(f)
        np.testing.assert_allclose(spec.values, 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_double_sum(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(8, 8))
        ours = dft2_power(f).values
        expected = np.fft.fftshift(power_spectrum_loops(f))
        np.testing.assert_allclose(ours, expected, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_parseval(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(8, 6))
        spec = dft2_power(f)
        lhs = spec.values.sum()
        rhs = f.size * np.sum(f * f)
        assert abs(lhs - rhs) / rhs < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_power_invariant_to_circular_shift(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(8, 8))
        base = dft2_power(f).values
        shifted = dft2_power(np.roll(f, (3, 5), axis=(0, 1))).values
        np.testing.assert_allclose(shifted, base, rtol=1e-9, atol=1e-9)

    def test_rejects_tiny_maps(self):
        with pytest.raises(ConfigError):
            dft2_power(np.zeros((1, 8)))


class TestChannelCollapse:
    def test_single_channel_matches_direct_path(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(6, 6))
        np.testing.assert_array_equal(
            channel_collapse(f[None]).values, dft2_power(f).values
        )

    def test_identical_channels_average_to_themselves(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(5, 5))
        stacked = np.stack([f, f])
        np.testing.assert_allclose(
            channel_collapse(stacked).values, dft2_power(f).values, atol=1e-12
        )

    @pytest.mark.parametrize("seed", range(3))
    def test_mean_of_per_channel_oracle_spectra(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(3, 4, 4))
        expected = np.mean(
            [np.fft.fftshift(power_spectrum_loops(f[c])) for c in range(3)], axis=0
        )
        np.testing.assert_allclose(channel_collapse(f).values, expected, atol=1e-12)


class TestRadialProfile:
    def test_flat_spectrum_gives_unit_bins(self):
        f = np.zeros((8, 8))
        f[2, 5] = 1.0
        profile = radial_profile(dft2_power(f), 6)
        nonempty = profile.counts > 0
        np.testing.assert_allclose(profile.energy[nonempty], 1.0, atol=1e-12)

    def test_dc_only_energy_lands_in_first_bin(self):
        spec = dft2_power(np.full((8, 8), 3.0))
        profile = radial_profile(spec, 8)
        assert profile.energy[0] > 0
        np.testing.assert_allclose(profile.energy[1:], 0.0, atol=1e-18)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_binning_oracle(self, seed):
        rng = np.random.default_rng(seed)
        spec = dft2_power(rng.normal(size=(8, 8)))
        profile = radial_profile(spec, 8)
        means, counts = radial_bin_loops(spec.values, 8)
        np.testing.assert_allclose(profile.energy, means, atol=1e-12)
        np.testing.assert_array_equal(profile.counts, counts)

    @pytest.mark.parametrize("seed", range(5))
    def test_binning_conserves_energy(self, seed):
        rng = np.random.default_rng(seed)
        spec = dft2_power(rng.normal(size=(10, 6)))
        profile = radial_profile(spec, 7)
        recon = float(np.sum(profile.counts * profile.energy))
        total = spec.values.sum()
        assert abs(recon - total) / total < 1e-9


class TestFreqRatio:
    @staticmethod
    def _constant_profile(n_bins=16, value=2.0):
        spec = dft2_power(np.full((8, 8), 1.0))
        profile = radial_profile(spec, n_bins)
        profile.energy = np.full(n_bins, value)
        return profile

    def test_constant_energy_half_cut_is_zero(self):
        assert abs(freq_ratio(self._constant_profile(), 0.5)) < 1e-12

    def test_constant_energy_quarter_cut_is_log10_3(self):
        ratio = freq_ratio(self._constant_profile(), 0.25)
        assert abs(ratio - math.log10(3.0)) < 1e-12

    def test_piecewise_linear_matches_riemann_oracle(self):
        n_bins = 12
        profile = self._constant_profile(n_bins)
        radii = profile.radii
        energy = 1.0 + 3.0 * radii + np.where(radii > 0.5, 5.0 * (radii - 0.5), 0.0)
        profile.energy = energy
        nodes = np.concatenate(([0.0], radii, [1.0]))
        values = np.concatenate(([energy[0]], energy, [energy[-1]]))

        def interp(r):
            return float(np.interp(r, nodes, values))

        expected = riemann_ratio(interp, 0.3, n_steps=400_000)
        assert abs(freq_ratio(profile, 0.3) - expected) < 1e-6

    @pytest.mark.parametrize("scale", [0.5, 3.0, 1234.5])
    def test_scale_invariance(self, scale):
        rng = np.random.default_rng(4)
        f = rng.normal(size=(8, 8))
        base = freq_ratio(radial_profile(dft2_power(f), 8), 0.25)
        scaled = freq_ratio(radial_profile(dft2_power(scale * f), 8), 0.25)
        assert abs(base - scaled) < 1e-12

    def test_constant_map_raises_degenerate(self):
        profile = radial_profile(dft2_power(np.full((8, 8), 1.0)), 8)
        with pytest.raises(DegenerateInputError):
            freq_ratio(profile, 0.25)

    def test_cut_must_be_interior(self):
        profile = self._constant_profile()
        with pytest.raises(ConfigError):
            freq_ratio(profile, 1.0)


def _blur_pyramid(seed, reverse=False):
    """Layer-indexed maps where deeper layers are progressively blurred."""
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(3, 16, 16))
    layers = [2, 4, 6, 8, 10, 12]
    sigmas = [0.0, 0.4, 0.8, 1.2, 1.6, 2.0]
    if reverse:
        sigmas = sigmas[::-1]
    pyramid = {}
    for layer, sigma in zip(layers, sigmas):
        if sigma == 0.0:
            pyramid[layer] = base.copy()
        else:
            pyramid[layer] = np.stack(
                [gaussian_filter(base[c], sigma, mode="wrap") for c in range(3)]
            )
    return pyramid


class TestLayerwiseSpectra:
    def test_blurred_with_depth_is_monotone(self):
        report = layerwise_spectra(_blur_pyramid(0), n_bins=8, r_c=0.25)
        assert report.monotone
        ratios = [report.profiles[layer].ratio for layer in sorted(report.profiles)]
        assert all(b < a for a, b in zip(ratios, ratios[1:]))

    def test_identical_layers_count_as_monotone(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(2, 8, 8))
        report = layerwise_spectra({2: f, 4: f.copy(), 6: f.copy()}, 8, 0.25)
        assert report.monotone
        ratios = list(report.ratios().values())
        assert max(ratios) - min(ratios) < 1e-12

    def test_reversed_blur_fails_verdict(self):
        report = layerwise_spectra(_blur_pyramid(0, reverse=True), 8, 0.25)
        assert not report.monotone

    def test_degenerate_layer_is_named(self):
        pyramid = {2: np.random.default_rng(0).normal(size=(1, 8, 8)),
                   4: np.full((1, 8, 8), 2.0)}
        with pytest.raises(DegenerateInputError, match="layer 4"):
            layerwise_spectra(pyramid, 8, 0.25)

    def test_json_report_shape(self):
        report = layerwise_spectra(_blur_pyramid(2), 8, 0.25)
        import json

        payload = json.loads(report_to_json(report))
        assert set(payload) == {"layers", "monotone"}
        assert [entry["layer"] for entry in payload["layers"]] == [2, 4, 6, 8, 10, 12]
        assert all(len(entry["radii"]) == 8 for entry in payload["layers"])
