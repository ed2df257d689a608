import numpy as np
import pytest

from spikeid import events, spectra
from spikeid.events import (
    EventStream, duration_for_seconds, load_events, sample_events, save_events,
    stream_channel_counts,
)


def point_mass_spectrum(channel=226):
    probs = np.zeros(1024)
    probs[channel] = 1.0
    return spectra.NormalizedSpectrum(probs)


class TestStreamInvariants:
    def test_non_increasing_timesteps_rejected(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            EventStream(np.array([3, 3]), np.array([1, 2]), duration=10, rate=0.5)

    def test_timestep_beyond_duration_rejected(self):
        with pytest.raises(ValueError, match="duration"):
            EventStream(np.array([5]), np.array([1]), duration=5, rate=0.5)

    def test_channel_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            EventStream(np.array([0]), np.array([1024]), duration=5, rate=0.5)

    def test_rate_bounds(self):
        with pytest.raises(ValueError, match="rate"):
            EventStream(np.array([], dtype=int), np.array([], dtype=int),
                        duration=5, rate=0.0)

    def test_iteration_yields_photon_events(self):
        stream = EventStream(np.array([1, 4]), np.array([7, 9]), duration=10, rate=0.2)
        items = list(stream)
        assert [(e.timestep, e.channel) for e in items] == [(1, 7), (4, 9)]


class TestSampleEvents:
    def test_empty_stream_allowed(self):
        stream = sample_events(point_mass_spectrum(), rate=1e-6, duration=10, seed=0)
        assert len(stream) == 0
        assert stream_channel_counts(stream).sum() == 0

    def test_event_count_within_3_sigma(self):
        # binomial oracle: n=1e6 trials at p=0.1
        stream = sample_events(point_mass_spectrum(), rate=0.1,
                               duration=1_000_000, seed=123)
        n, p = 1_000_000, 0.1
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(len(stream) - n * p) <= 3 * sigma

    def test_point_mass_channels(self):
        stream = sample_events(point_mass_spectrum(226), rate=0.5,
                               duration=1000, seed=3)
        assert len(stream) > 0
        assert np.all(stream.channels == 226)

    def test_at_most_one_event_per_timestep(self):
        stream = sample_events(point_mass_spectrum(), rate=1.0, duration=500, seed=9)
        assert len(stream) == 500  # rate 1: every timestep, exactly once
        assert np.all(np.diff(stream.timesteps) >= 1)

    def test_deterministic(self):
        spec = point_mass_spectrum()
        a = sample_events(spec, 0.3, 10_000, seed=77)
        b = sample_events(spec, 0.3, 10_000, seed=77)
        assert np.array_equal(a.timesteps, b.timesteps)
        assert np.array_equal(a.channels, b.channels)

    def test_unnormalized_spectrum_rejected(self):
        bad = spectra.NormalizedSpectrum(np.full(1024, 0.5))
        with pytest.raises(ValueError, match="not normalized"):
            sample_events(bad, 0.5, 100, seed=0)

    def test_rate_and_duration_validated(self):
        with pytest.raises(ValueError):
            sample_events(point_mass_spectrum(), 1.5, 100, seed=0)
        with pytest.raises(ValueError):
            sample_events(point_mass_spectrum(), 0.5, 0, seed=0)


class TestChannelCounts:
    def test_empty_stream(self):
        stream = EventStream(np.array([], dtype=int), np.array([], dtype=int),
                             duration=5, rate=0.5)
        counts = stream_channel_counts(stream)
        assert counts.shape == (1024,) and counts.sum() == 0

    def test_repeated_channel(self):
        stream = EventStream(np.array([0, 3, 9]), np.array([7, 7, 7]),
                             duration=10, rate=0.5)
        counts = stream_channel_counts(stream)
        assert counts[7] == 3 and counts.sum() == 3

    def test_empirical_distribution_converges(self, templates_cal):
        # multinomial concentration oracle: total variation against the
        # source spectrum at 1e5 events; expected TV for this peaked
        # spectrum is ~0.008, diffuse spectra would need more events
        _, cal = templates_cal
        template = spectra.IsotopeTemplate(
            "Cs-137", (spectra.GammaPeak(661.66, 1.0, 23.16),), 0.0)
        spectrum = spectra.normalize(spectra.render_template(template, cal))
        stream = sample_events(spectrum, rate=0.5, duration=200_000, seed=21)
        assert len(stream) > 90_000
        empirical = stream_channel_counts(stream) / len(stream)
        tv = 0.5 * np.abs(empirical - spectrum.probs).sum()
        assert tv <= 0.02


class TestEventFile:
    def test_round_trip(self, tmp_path):
        stream = sample_events(point_mass_spectrum(), 0.4, 2000, seed=5)
        path = tmp_path / "events.csv"
        save_events(stream, path)
        loaded = load_events(path)
        assert loaded.duration == stream.duration
        assert loaded.rate == stream.rate
        assert loaded.seed == stream.seed
        assert np.array_equal(loaded.timesteps, stream.timesteps)
        assert np.array_equal(loaded.channels, stream.channels)

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("not,an,event,file\n")
        with pytest.raises(ValueError):
            load_events(path)


def test_duration_for_seconds_default_scale():
    assert duration_for_seconds(3) == 30_000
    assert duration_for_seconds(60) == 600_000
    assert duration_for_seconds(1.5, timesteps_per_second=100) == 150
