"""Synthetic gamma-ray spectra: templates, calibration, augmentation, datasets.

The generator renders parametric isotope templates into 1,024-channel
histograms, perturbs them with a random calibration gain shift, mixes in
background, applies Poisson counting noise, and normalizes each histogram
so its channel values sum to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

N_CHANNELS = 1024
NUM_FOLDS = 5

ISOTOPES = (
    "Am-241", "Ba-133", "Co-57", "Co-60",
    "Cs-137", "Eu-152", "Ra-226", "Th-232",
)


class DegenerateInputError(ValueError):
    """Structurally valid input with no usable content (e.g. all-zero counts)."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class GammaPeak:
    energy_kev: float
    intensity: float
    fwhm_kev: float


@dataclass(frozen=True)
class IsotopeTemplate:
    """Parametric emission pattern: gamma lines plus a flat continuum floor.

    ``continuum_level`` is the continuum mass relative to the total peak
    mass (0 = peaks only).
    """

    name: str
    peaks: tuple[GammaPeak, ...]
    continuum_level: float = 0.0

    def __post_init__(self):
        if not self.peaks:
            raise ValueError(f"template {self.name!r} has no peaks")
        for p in self.peaks:
            if p.intensity < 0:
                raise ValueError(f"template {self.name!r}: negative intensity")
            if p.fwhm_kev <= 0:
                raise ValueError(f"template {self.name!r}: non-positive FWHM")
        if sum(p.intensity for p in self.peaks) <= 0:
            raise ValueError(f"template {self.name!r}: no positive intensity")
        if self.continuum_level < 0:
            raise ValueError(f"template {self.name!r}: negative continuum level")


@dataclass(frozen=True)
class Calibration:
    """Quadratic channel-to-energy map: E(c) = a0 + a1*c + a2*c^2 (keV)."""

    a0: float = 0.0
    a1: float = 2.93
    a2: float = 0.0

    def energy(self, channel):
        c = np.asarray(channel, dtype=float)
        return self.a0 + self.a1 * c + self.a2 * c * c

    def edges(self, n_channels: int = N_CHANNELS) -> np.ndarray:
        """Bin edges at integer channel positions 0..n_channels."""
        e = self.energy(np.arange(n_channels + 1))
        if np.any(np.diff(e) <= 0):
            raise ValueError("calibration energy is not strictly increasing")
        return e

    def channel_of(self, energy_kev: float, n_channels: int = N_CHANNELS) -> int:
        """Channel whose bin contains the given energy."""
        edges = self.edges(n_channels)
        if not (edges[0] <= energy_kev <= edges[-1]):
            raise ValueError(f"energy {energy_kev} keV outside calibrated range")
        return min(int(np.searchsorted(edges, energy_kev, side="right")) - 1,
                   n_channels - 1)


@dataclass(frozen=True)
class SampleMeta:
    distance: str = ""
    time_tag: str = ""
    seed: int = 0


@dataclass
class Histogram:
    """Counts per energy channel. Values are non-negative reals."""

    counts: np.ndarray
    label: str = "unlabeled"
    meta: SampleMeta = field(default_factory=SampleMeta)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.ndim != 1:
            raise ValueError("histogram counts must be one-dimensional")
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    def __len__(self):
        return self.counts.size

    def total(self) -> float:
        return float(self.counts.sum())


@dataclass
class NormalizedSpectrum:
    """Histogram scaled so all channel values sum to 1."""

    probs: np.ndarray
    label: str = "unlabeled"
    meta: SampleMeta = field(default_factory=SampleMeta)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)

    def __len__(self):
        return self.probs.size


@dataclass
class Dataset:
    """Labeled spectra with a k-fold split assignment."""

    samples: list
    folds: list[int]
    classes: tuple[str, ...] = ISOTOPES

    def __post_init__(self):
        if len(self.samples) != len(self.folds):
            raise ValueError("samples and folds length mismatch")
        for s in self.samples:
            if s.label not in self.classes:
                raise ValueError(f"label {s.label!r} not in class set")
        for f in self.folds:
            if not 0 <= f < NUM_FOLDS:
                raise ValueError(f"fold index {f} outside 0..{NUM_FOLDS - 1}")

    def __len__(self):
        return len(self.samples)

    def matrix(self) -> np.ndarray:
        """Samples as one (N, channels) float array."""
        return np.stack([_values(s) for s in self.samples])

    def label_indices(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.classes)}
        return np.array([index[s.label] for s in self.samples], dtype=np.int64)

    def subset(self, include=None, exclude=()) -> "Dataset":
        """New dataset restricted by fold index."""
        keep = [
            i for i, f in enumerate(self.folds)
            if (include is None or f in _as_set(include)) and f not in _as_set(exclude)
        ]
        return Dataset([self.samples[i] for i in keep],
                       [self.folds[i] for i in keep], self.classes)


def _as_set(value):
    if isinstance(value, int):
        return {value}
    return set(value)


def _values(sample) -> np.ndarray:
    return sample.probs if isinstance(sample, NormalizedSpectrum) else sample.counts


# ---------------------------------------------------------------------------
# operations


def render_template(template: IsotopeTemplate, cal: Calibration,
                    n_channels: int = N_CHANNELS) -> Histogram:
    """Render a template to a histogram with unit total counts.

    Each line contributes its Gaussian mass integrated over the channel
    bins; the continuum adds a flat floor weighted by ``continuum_level``.
    """
    edges = cal.edges(n_channels)
    counts = np.zeros(n_channels)
    for peak in template.peaks:
        if not (edges[0] <= peak.energy_kev <= edges[-1]):
            raise ValueError(
                f"peak at {peak.energy_kev} keV outside calibrated range "
                f"[{edges[0]}, {edges[-1]}]")
        sigma = peak.fwhm_kev / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        z = (edges - peak.energy_kev) / (sigma * math.sqrt(2.0))
        cdf = np.array([math.erf(v) for v in z])
        counts += peak.intensity * 0.5 * np.diff(cdf)
    total_intensity = sum(p.intensity for p in template.peaks)
    counts += template.continuum_level * total_intensity / n_channels
    return Histogram(counts / counts.sum(), label=template.name)


def rebin_counts(counts: np.ndarray, src_edges: np.ndarray,
                 dst_edges: np.ndarray) -> np.ndarray:
    """Redistribute counts by fractional bin overlap.

    Works through the cumulative count function, which is piecewise linear
    in energy; content outside the destination range is clipped.
    """
    counts = np.asarray(counts, dtype=float)
    src_edges = np.asarray(src_edges, dtype=float)
    dst_edges = np.asarray(dst_edges, dtype=float)
    if np.any(np.diff(src_edges) <= 0) or np.any(np.diff(dst_edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    if counts.size != src_edges.size - 1:
        raise ValueError("counts length must be len(src_edges) - 1")
    cum = np.concatenate(([0.0], np.cumsum(counts)))
    return np.diff(np.interp(dst_edges, src_edges, cum))


def rebin(hist: Histogram, src_edges, dst_edges) -> Histogram:
    return Histogram(rebin_counts(hist.counts, src_edges, dst_edges),
                     label=hist.label, meta=hist.meta)


def apply_gain_shift(hist: Histogram, cal: Calibration, linear_term: float,
                     max_shift: float = 0.05) -> Histogram:
    """Simulate calibration drift: E'(c) = E(c) * (1 + linear_term).

    The counts are treated as living on the perturbed energy edges and are
    rebinned back onto the nominal edges, so a peak at channel c lands near
    channel c * (1 + linear_term) under a linear calibration.
    """
    if abs(linear_term) > max_shift:
        raise ValueError(f"|linear_term| = {abs(linear_term)} exceeds bound {max_shift}")
    if linear_term == 0.0:
        return Histogram(hist.counts.copy(), label=hist.label, meta=hist.meta)
    edges = cal.edges(len(hist))
    shifted = edges * (1.0 + linear_term)
    if np.any(np.diff(shifted) <= 0):
        raise ValueError("gain shift makes edges non-monotone")
    return Histogram(rebin_counts(hist.counts, shifted, edges),
                     label=hist.label, meta=hist.meta)


def add_background(hist: Histogram, background: Histogram, signal_fraction: float,
                   target_total: float | None = None, rng=None) -> Histogram:
    """Mix signal with background and optionally apply Poisson counting noise.

    Both inputs are normalized to unit total before mixing, so
    ``signal_fraction`` is the fraction of counts that come from the signal.
    With ``target_total`` and ``rng`` given, the mix is scaled to that total
    and each channel is resampled as a Poisson count.
    """
    if not 0.0 < signal_fraction <= 1.0:
        raise ValueError(f"signal_fraction {signal_fraction} outside (0, 1]")
    if len(hist) != len(background):
        raise ValueError("signal and background have different channel counts")
    if hist.total() <= 0 or background.total() <= 0:
        raise DegenerateInputError("cannot mix an all-zero histogram")
    mix = (signal_fraction * hist.counts / hist.total()
           + (1.0 - signal_fraction) * background.counts / background.total())
    if target_total is not None and rng is not None:
        if target_total <= 0:
            raise ValueError("target_total must be positive")
        mix = rng.poisson(mix * target_total).astype(float)
    return Histogram(mix, label=hist.label, meta=hist.meta)


def normalize(hist: Histogram) -> NormalizedSpectrum:
    """Divide by the total count so all channel values sum to 1."""
    total = hist.total()
    if total <= 0:
        raise DegenerateInputError("cannot normalize an all-zero histogram")
    return NormalizedSpectrum(hist.counts / total, label=hist.label, meta=hist.meta)


def flat_plus_low_energy_background(cal: Calibration,
                                    n_channels: int = N_CHANNELS,
                                    rise_amplitude: float = 8.0,
                                    rise_scale_kev: float = 100.0) -> Histogram:
    """Background shape: flat continuum plus an exponential low-energy rise."""
    energy = cal.energy(np.arange(n_channels) + 0.5)
    counts = 1.0 + rise_amplitude * np.exp(-energy / rise_scale_kev)
    return Histogram(counts / counts.sum(), label="unlabeled")


# ---------------------------------------------------------------------------
# template configuration file


def load_templates(path=None):
    """Parse a template configuration file.

    Returns (templates dict keyed by isotope name, Calibration). With no
    path, the packaged default set is used.
    """
    if path is None:
        text = resources.files("spikeid.data").joinpath("templates.cfg").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    cal = Calibration()
    templates: dict[str, IsotopeTemplate] = {}
    section = None
    peaks: list[GammaPeak] = []
    continuum = 0.0

    def close_section():
        nonlocal section, peaks, continuum
        if section is not None:
            templates[section] = IsotopeTemplate(section, tuple(peaks), continuum)
        section, peaks, continuum = None, [], 0.0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            close_section()
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "format":
            if value != "isotope-templates-v1":
                raise ValueError(f"unsupported template format {value!r}")
        elif key == "calibration":
            a0, a1, a2 = (float(v) for v in value.split())
            cal = Calibration(a0, a1, a2)
        elif key == "continuum":
            continuum = float(value)
        elif key == "peak":
            e, i, w = (float(v) for v in value.split())
            peaks.append(GammaPeak(e, i, w))
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    close_section()
    if not templates:
        raise ValueError("template file defines no isotopes")
    return templates, cal


# ---------------------------------------------------------------------------
# dataset synthesis


@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for synthesize_dataset."""

    isotopes: tuple[str, ...] = ISOTOPES
    variants_per_isotope: int = 500
    # (tag, solid-angle scale): counts fall off with the square of distance
    distances: tuple = (("25cm", 1.0), ("50cm", 0.25), ("1m", 0.0625), ("1.5m", 0.0278))
    # (tag, target total counts at unit distance scale)
    integration_times: tuple = (("120s", 120_000.0),)
    signal_fraction: tuple[float, float] = (0.15, 0.6)
    max_gain_shift: float = 0.03
    templates_path: str | None = None

    def __post_init__(self):
        if not self.isotopes:
            raise ValueError("config names no isotopes")
        if not self.distances:
            raise ValueError("config needs at least one distance tag")
        if not self.integration_times:
            raise ValueError("config needs at least one integration-time tag")
        lo, hi = self.signal_fraction
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("signal_fraction interval must lie in (0, 1]")


def synthesize_dataset(config: GeneratorConfig, seed: int) -> Dataset:
    """Generate a labeled, fold-tagged dataset of normalized spectra.

    Deterministic in (config, seed): every sample draws from its own RNG
    keyed by (seed, class index, variant index), and folds are assigned
    round-robin within each class.
    """
    templates, cal = load_templates(config.templates_path)
    missing = [n for n in config.isotopes if n not in templates]
    if missing:
        raise ValueError(f"isotopes without templates: {missing}")
    background = flat_plus_low_energy_background(cal)
    base = {name: render_template(templates[name], cal) for name in config.isotopes}

    samples = []
    folds = []
    for ci, name in enumerate(config.isotopes):
        for vi in range(config.variants_per_isotope):
            rng = np.random.default_rng([seed, ci, vi])
            shift = rng.uniform(-config.max_gain_shift, config.max_gain_shift)
            hist = apply_gain_shift(base[name], cal, shift, config.max_gain_shift)
            dist_tag, dist_scale = config.distances[rng.integers(len(config.distances))]
            time_tag, time_total = config.integration_times[
                rng.integers(len(config.integration_times))]
            sf = rng.uniform(*config.signal_fraction)
            hist = add_background(hist, background, sf,
                                  target_total=time_total * dist_scale, rng=rng)
            meta = SampleMeta(distance=dist_tag, time_tag=time_tag,
                              seed=int(np.random.SeedSequence([seed, ci, vi])
                                       .generate_state(1)[0]))
            spectrum = normalize(hist)
            spectrum.meta = meta
            samples.append(spectrum)
            folds.append(vi % NUM_FOLDS)
    return Dataset(samples, folds, classes=tuple(config.isotopes))


# ---------------------------------------------------------------------------
# dataset file format
#
# line 1: spectra-v1,<n_channels>,<class;list>
# then one record per sample:
#   label,fold,distance,time_tag,seed,v0,...,v{n-1}

DATASET_FORMAT = "spectra-v1"


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DATASET_FORMAT},{N_CHANNELS},{';'.join(dataset.classes)}\n")
        for sample, fold in zip(dataset.samples, dataset.folds):
            values = _values(sample)
            if values.size != N_CHANNELS:
                raise ValueError("dataset file format requires 1024-channel samples")
            meta = sample.meta
            prefix = f"{sample.label},{fold},{meta.distance},{meta.time_tag},{meta.seed}"
            fh.write(prefix + "," + ",".join(repr(float(v)) for v in values) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(",")
        if len(fields) != 3 or fields[0] != DATASET_FORMAT:
            raise ValueError(f"not a {DATASET_FORMAT} dataset file: {header!r}")
        n_channels = int(fields[1])
        classes = tuple(fields[2].split(";"))
        samples = []
        folds = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 5 + n_channels:
                raise ValueError(f"line {lineno}: expected {5 + n_channels} fields")
            label, fold, distance, time_tag, seed = parts[:5]
            values = np.array([float(v) for v in parts[5:]])
            meta = SampleMeta(distance=distance, time_tag=time_tag, seed=int(seed))
            samples.append(NormalizedSpectrum(values, label=label, meta=meta))
            folds.append(int(fold))
    return Dataset(samples, folds, classes=classes)
