"""Frequency-domain instruments for feature maps.

A feature map's 2D spectrum is taken with the unnormalized forward DFT,
shifted so the zero frequency sits at the array center.  Azimuthal averaging
over normalized radius gives a 1D energy profile, and the log ratio of
high-band to low-band integrals summarizes how much fine detail a layer
retains.  Multi-channel maps are collapsed by averaging per-channel power
spectra; this is a policy choice (exposed as ``channel_collapse``) rather
than anything inherent to the transform.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import IO, Mapping

import numpy as np

from .errors import ConfigError, DegenerateInputError


@dataclass
class PowerSpectrum:
    """Centered power spectrum |F(u,v)|^2 with its source dimensions."""

    values: np.ndarray  # [H, W], zero frequency at (H//2, W//2)
    source_h: int
    source_w: int

    def total_power(self) -> float:
        return float(self.values.sum())


@dataclass
class SpectralProfile:
    """Azimuthally averaged energy per radius bin plus the band log-ratio."""

    radii: np.ndarray    # bin centers in [0, 1]
    energy: np.ndarray   # mean power per bin (0 for empty bins)
    counts: np.ndarray   # samples per bin
    cutoff: float
    ratio: float


@dataclass
class LayerSpectralReport:
    """Per-layer profiles keyed by layer index, with a monotonicity verdict."""

    profiles: dict[int, SpectralProfile]
    monotone: bool

    def ratios(self) -> dict[int, float]:
        return {layer: p.ratio for layer, p in self.profiles.items()}


def dft2_power(feature_map: np.ndarray) -> PowerSpectrum:
    """Power spectrum of a single-channel [H, W] map, center-shifted.

    Uses the unnormalized forward transform, so Parseval reads
    sum(P) == H * W * sum(f^2).
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 2 or min(fmap.shape) < 2:
        raise ConfigError(f"dft2_power expects an [H>=2, W>=2] map, got {fmap.shape}")
    spectrum = np.fft.fft2(fmap)
    power = np.fft.fftshift(np.abs(spectrum) ** 2)
    return PowerSpectrum(values=power, source_h=fmap.shape[0], source_w=fmap.shape[1])


def channel_collapse(feature_map: np.ndarray) -> PowerSpectrum:
    """Mean of per-channel power spectra of a [C, H, W] map.

    The collapse policy lives here so alternatives can be swapped without
    touching the radial machinery.
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[None]
    if fmap.ndim != 3:
        raise ConfigError(f"channel_collapse expects [C, H, W], got {fmap.shape}")
    acc = np.zeros(fmap.shape[1:], dtype=np.float64)
    for c in range(fmap.shape[0]):
        acc += dft2_power(fmap[c]).values
    acc /= fmap.shape[0]
    return PowerSpectrum(values=acc, source_h=fmap.shape[1], source_w=fmap.shape[2])


def _radius_grid(h: int, w: int) -> np.ndarray:
    """Normalized frequency radius per centered spectrum cell, in [0, 1].

    Each axis is normalized by its Nyquist extent and the result by sqrt(2),
    so square and rectangular maps share one radial scale with the spectrum
    corner at exactly 1.
    """
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    ug, vg = np.meshgrid(u / (h / 2.0), v / (w / 2.0), indexing="ij")
    return np.sqrt(ug * ug + vg * vg) / math.sqrt(2.0)


def radial_profile(spectrum: PowerSpectrum, n_bins: int) -> SpectralProfile:
    """Azimuthal average: each spectrum cell lands in exactly one radius bin."""
    if n_bins < 2:
        raise ConfigError(f"n_bins must be >= 2, got {n_bins}")
    radius = _radius_grid(*spectrum.values.shape)
    bins = np.minimum((radius * n_bins).astype(np.intp), n_bins - 1)
    energy = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    np.add.at(energy, bins.ravel(), spectrum.values.ravel())
    np.add.at(counts, bins.ravel(), 1)
    nonempty = counts > 0
    energy[nonempty] /= counts[nonempty]
    radii = (np.arange(n_bins) + 0.5) / n_bins
    return SpectralProfile(
        radii=radii, energy=energy, counts=counts, cutoff=math.nan, ratio=math.nan
    )


def _integrate_bands(radii: np.ndarray, energy: np.ndarray, r_c: float) -> tuple[float, float]:
    """Trapezoidal band integrals of the piecewise-linear profile.

    The profile is extended by half a bin at both ends (constant value) so
    the integration domain is exactly [0, 1]; the split point r_c is
    interpolated onto the profile before integrating.
    """
    nodes = np.concatenate(([0.0], radii, [1.0]))
    values = np.concatenate(([energy[0]], energy, [energy[-1]]))
    e_at_cut = float(np.interp(r_c, nodes, values))
    low_nodes = np.concatenate((nodes[nodes < r_c], [r_c]))
    low_values = np.concatenate((values[nodes < r_c], [e_at_cut]))
    high_nodes = np.concatenate(([r_c], nodes[nodes > r_c]))
    high_values = np.concatenate(([e_at_cut], values[nodes > r_c]))
    low = float(np.trapezoid(low_values, low_nodes))
    high = float(np.trapezoid(high_values, high_nodes))
    return low, high


def freq_ratio(profile: SpectralProfile, r_c: float) -> float:
    """log10 of high-band over low-band energy, split at normalized radius r_c."""
    if not 0.0 < r_c < 1.0:
        raise ConfigError(f"r_c must lie strictly inside (0, 1), got {r_c}")
    low, high = _integrate_bands(profile.radii, profile.energy, r_c)
    if low <= 0.0 or high <= 0.0:
        raise DegenerateInputError(
            f"degenerate spectrum: band integrals low={low:.3e}, high={high:.3e} "
            "(constant feature map?)"
        )
    return math.log10(high / low)


def layerwise_spectra(
    pyramid: Mapping[int, np.ndarray], n_bins: int, r_c: float
) -> LayerSpectralReport:
    """Profile + band ratio for every pyramid layer, plus the depth verdict.

    The verdict is true iff the ratio is non-increasing in layer index,
    i.e. deeper layers hold no more high-frequency energy than shallow ones.
    """
    if not pyramid:
        raise ConfigError("layerwise_spectra needs a non-empty pyramid")
    profiles: dict[int, SpectralProfile] = {}
    for layer in sorted(pyramid):
        spectrum = channel_collapse(pyramid[layer])
        profile = radial_profile(spectrum, n_bins)
        try:
            ratio = freq_ratio(profile, r_c)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"layer {layer}: {exc}") from exc
        profile.cutoff = r_c
        profile.ratio = ratio
        profiles[layer] = profile
    ratios = [profiles[layer].ratio for layer in sorted(profiles)]
    monotone = all(b <= a + 1e-12 for a, b in zip(ratios, ratios[1:]))
    return LayerSpectralReport(profiles=profiles, monotone=monotone)


# -- report serialization ------------------------------------------------------


def report_to_json(report: LayerSpectralReport) -> str:
    payload = {
        "layers": [
            {
                "layer": layer,
                "radii": [float(r) for r in profile.radii],
                "energy": [float(e) for e in profile.energy],
                "ratio": profile.ratio,
            }
            for layer, profile in sorted(report.profiles.items())
        ],
        "monotone": report.monotone,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def report_to_csv(report: LayerSpectralReport, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["layer", "bin", "radius", "energy", "ratio"])
    for layer, profile in sorted(report.profiles.items()):
        for b, (radius, energy) in enumerate(zip(profile.radii, profile.energy)):
            writer.writerow([layer, b, repr(float(radius)), repr(float(energy)),
                             repr(profile.ratio)])
