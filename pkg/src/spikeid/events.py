"""Event-based view of a spectrum: timed photon detection events.

Detection is modeled on a discrete clock. Each timestep independently
carries at most one photon event (Bernoulli thinning of a Poisson
process), and the event's energy channel is drawn from the source
spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectra import N_CHANNELS, NormalizedSpectrum

# wall-clock seconds -> timesteps conversion used by the experiment CLI
DEFAULT_TIMESTEPS_PER_SECOND = 10_000


@dataclass(frozen=True)
class PhotonEvent:
    timestep: int
    channel: int


@dataclass
class EventStream:
    """Time-ordered photon events over a fixed number of timesteps."""

    timesteps: np.ndarray
    channels: np.ndarray
    duration: int
    rate: float
    seed: int = -1
    n_channels: int = N_CHANNELS

    def __post_init__(self):
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.channels = np.asarray(self.channels, dtype=np.int64)
        if self.timesteps.shape != self.channels.shape or self.timesteps.ndim != 1:
            raise ValueError("timesteps and channels must be matching 1-D arrays")
        if self.timesteps.size:
            if np.any(np.diff(self.timesteps) <= 0):
                raise ValueError("event timesteps must be strictly increasing")
            if self.timesteps[0] < 0 or self.timesteps[-1] >= self.duration:
                raise ValueError("event timesteps must lie in [0, duration)")
            if self.channels.min() < 0 or self.channels.max() >= self.n_channels:
                raise ValueError(f"channels must lie in [0, {self.n_channels})")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"rate {self.rate} outside (0, 1]")

    def __len__(self):
        return self.timesteps.size

    def __iter__(self):
        for t, c in zip(self.timesteps, self.channels):
            yield PhotonEvent(int(t), int(c))


def duration_for_seconds(seconds: float,
                         timesteps_per_second: int = DEFAULT_TIMESTEPS_PER_SECOND) -> int:
    return int(round(seconds * timesteps_per_second))


def _spectrum_probs(spectrum) -> np.ndarray:
    probs = spectrum.probs if isinstance(spectrum, NormalizedSpectrum) else np.asarray(spectrum)
    if probs.ndim != 1:
        raise ValueError("spectrum must be one-dimensional")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("spectrum is not normalized to unit total")
    return probs


def sample_events(spectrum, rate: float, duration: int, seed: int) -> EventStream:
    """Draw a photon event stream from a normalized spectrum.

    Each timestep holds an event with probability ``rate``; event channels
    are i.i.d. draws from the spectrum. Deterministic for a fixed seed.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate {rate} outside (0, 1]")
    if duration <= 0:
        raise ValueError("duration must be positive")
    probs = _spectrum_probs(spectrum)
    rng = np.random.default_rng(seed)
    timesteps = np.flatnonzero(rng.random(duration) < rate).astype(np.int64)
    channels = rng.choice(probs.size, size=timesteps.size, p=probs / probs.sum())
    return EventStream(timesteps, channels.astype(np.int64), duration=duration,
                       rate=rate, seed=seed, n_channels=probs.size)


def stream_channel_counts(stream: EventStream) -> np.ndarray:
    """Empirical histogram of a stream: events per channel."""
    return np.bincount(stream.channels, minlength=stream.n_channels).astype(np.int64)


# ---------------------------------------------------------------------------
# event file format
#
# line 1: events-v1,<duration>,<rate>,<seed>,<n_channels>
# then one line per event: timestep,channel

EVENTS_FORMAT = "events-v1"


def save_events(stream: EventStream, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{EVENTS_FORMAT},{stream.duration},{repr(stream.rate)},"
                 f"{stream.seed},{stream.n_channels}\n")
        for t, c in zip(stream.timesteps, stream.channels):
            fh.write(f"{t},{c}\n")


def load_events(path) -> EventStream:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if len(header) != 5 or header[0] != EVENTS_FORMAT:
            raise ValueError(f"not an {EVENTS_FORMAT} file")
        duration, rate, seed, n_channels = (int(header[1]), float(header[2]),
                                            int(header[3]), int(header[4]))
        pairs = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    timesteps = np.array([int(p[0]) for p in pairs], dtype=np.int64)
    channels = np.array([int(p[1]) for p in pairs], dtype=np.int64)
    return EventStream(timesteps, channels, duration=duration, rate=rate,
                       seed=seed, n_channels=n_channels)
