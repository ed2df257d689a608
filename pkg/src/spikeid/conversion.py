"""Convert a quantized network into an integer spiking model.

The conversion is rate-based: a neuron's analog activation is approximated
by its firing rate, so each layer keeps the int8 weights verbatim and gets
an integer firing threshold. Quantization scales are folded into the
thresholds (classification by spike count is invariant to a positive
per-layer rescaling), which keeps the weight memory image identical to the
int8 training artifact.

Average pooling becomes a spiking layer with uniform weight 1 and
threshold equal to the pool size: with reset-by-subtraction its cumulative
output is exactly floor(received spikes / pool size).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .network import ArchConfig, QuantizedModel, _forward_batch
from .spectra import Dataset


class EncodingError(ValueError):
    """A model value cannot be represented in the memory image."""


@dataclass(frozen=True)
class LayerValues:
    """One integer per layer, in processing order."""

    conv: int
    pool: int
    fc: int

    def as_tuple(self):
        return (self.conv, self.pool, self.fc)


@dataclass
class SpikingModel:
    conv_w: np.ndarray   # (num_filters, kernel_size) integers
    fc_w: np.ndarray     # (feature_len, num_classes) integers
    pool_w: int
    v_thr: LayerValues
    v_min: LayerValues
    arch: ArchConfig

    def __post_init__(self):
        self.conv_w = np.asarray(self.conv_w, dtype=np.int64)
        self.fc_w = np.asarray(self.fc_w, dtype=np.int64)
        if self.pool_w < 1:
            raise ValueError("pool weight must be a positive integer")
        if self.v_thr.pool != self.arch.pool_size * self.pool_w:
            raise ValueError("pool threshold must equal pool_size * pool_w")
        for layer in ("conv", "pool", "fc"):
            thr = getattr(self.v_thr, layer)
            floor = getattr(self.v_min, layer)
            if thr <= 0:
                raise ValueError(f"{layer} threshold must be positive")
            if floor > 0:
                raise ValueError(f"{layer} membrane floor must be <= 0")


# ---------------------------------------------------------------------------
# threshold calibration


def integer_pooled_activations(qmodel: QuantizedModel, X: np.ndarray) -> np.ndarray:
    """Pooled ReLU activations computed with the raw integer weights."""
    arch = qmodel.arch
    pooled = _forward_batch(X, qmodel.conv_q.astype(np.float64),
                            qmodel.fc_q.astype(np.float64), arch)[2]
    return pooled.reshape(X.shape[0], arch.feature_len)


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, percentile: float) -> float:
    """Smallest value v with cumulative weight(x <= v) >= percentile/100."""
    order = np.argsort(values, kind="stable")
    values, weights = values[order], weights[order]
    cum = np.cumsum(weights)
    cutoff = (percentile / 100.0) * cum[-1]
    return float(values[np.searchsorted(cum, cutoff, side="left")])


def compute_thresholds(qmodel: QuantizedModel, calibration_set: Dataset,
                       percentile: float = 99.9) -> dict[str, int]:
    """Data-based firing thresholds for the two weighted layers.

    A neuron's drive in one update is a single synaptic weight, so each
    layer's threshold is taken from the distribution of weight magnitudes
    weighted by how often the calibration set exercises them: channel
    occupancy for the convolution taps, pooled integer activation (the
    expected pool firing rate, up to a common factor) for the dense
    weights. The percentile value is rounded up, with a minimum of 1.

    The pooling layer needs no calibration: its threshold is structural
    (pool_size * pool_w) and is set by convert().
    """
    if len(calibration_set) == 0:
        raise ValueError("empty calibration set")
    if not 0.0 < percentile <= 100.0:
        raise ValueError("percentile must lie in (0, 100]")
    arch = qmodel.arch
    X = calibration_set.matrix()
    if X.shape[1] != arch.input_len:
        raise ValueError("calibration samples do not match the model input length")

    # Tap k is exercised by every event on channels k .. conv_len-1+k.
    channel_mass = X.sum(axis=0)
    cum = np.concatenate(([0.0], np.cumsum(channel_mass)))
    tap_mass = cum[arch.conv_len + np.arange(arch.kernel_size)] - cum[:arch.kernel_size]
    conv_values = np.abs(qmodel.conv_q.astype(np.int64)).reshape(-1)
    conv_weights = np.tile(tap_mass, arch.num_filters)

    # Every spike of pooled neuron i exercises all of its dense weights.
    neuron_mass = integer_pooled_activations(qmodel, X).sum(axis=0)
    fc_values = np.abs(qmodel.fc_q.astype(np.int64)).reshape(-1)
    fc_weights = np.repeat(neuron_mass, arch.num_classes)

    thresholds = {}
    for name, values, weights in (("conv", conv_values, conv_weights),
                                  ("fc", fc_values, fc_weights)):
        if weights.sum() <= 0:
            weights = np.ones_like(weights)  # nothing exercised: plain percentile
        q = _weighted_quantile(values.astype(np.float64), weights, percentile)
        thresholds[name] = max(1, math.ceil(q))
    return thresholds


def convert(qmodel: QuantizedModel, thresholds: dict[str, int],
            v_min: dict[str, int] | None = None, pool_w: int = 1) -> SpikingModel:
    """Build the spiking model from int8 weights and per-layer thresholds.

    Thresholds are floored at each layer's maximum weight magnitude so that
    a single update can never jump a membrane past threshold twice; the
    engine rejects models violating this bound.
    """
    arch = qmodel.arch
    for name in ("conv", "fc"):
        if name not in thresholds or thresholds[name] <= 0:
            raise ValueError(f"missing or non-positive {name} threshold")
    conv_w = qmodel.conv_q.astype(np.int64)
    fc_w = qmodel.fc_q.astype(np.int64)
    thr = LayerValues(
        conv=max(int(thresholds["conv"]), int(np.max(np.abs(conv_w)) if conv_w.size else 1), 1),
        pool=arch.pool_size * pool_w,
        fc=max(int(thresholds["fc"]), int(np.max(np.abs(fc_w)) if fc_w.size else 1), 1),
    )
    if v_min is None:
        floor = LayerValues(conv=-thr.conv, pool=-thr.pool, fc=-thr.fc)
    else:
        floor = LayerValues(conv=int(v_min["conv"]), pool=int(v_min["pool"]),
                            fc=int(v_min["fc"]))
    return SpikingModel(conv_w, fc_w, pool_w, thr, floor, arch)


# ---------------------------------------------------------------------------
# weight memory image
#
# Fixed little-endian layout (golden-file tested):
#   offset 0   magic "SNNI"
#   offset 4   u8  version (1)
#   offset 5   u8  num_filters
#   offset 6   u8  kernel_size
#   offset 7   u8  pool_size
#   offset 8   u8  num_classes
#   offset 9   u16 input_len
#   offset 11  u8  leak (reserved, must be 0)
#   offset 12  u32 trailer offset (= 16 + weight payload length)
#   offset 16  weight payload, one signed byte per weight: conv weights
#              filter-major then tap-major (the order the engine fetches
#              them in), then dense weights pooled-neuron-major then
#              class-major
#   trailer    3 x i32 thresholds (conv, pool, fc),
#              3 x i32 membrane floors (conv, pool, fc), u8 pool_w

MEMORY_IMAGE_MAGIC = b"SNNI"
MEMORY_IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sBBBBBHBI")
_TRAILER = struct.Struct("<iiiiiiB")


@dataclass
class MemoryImage:
    data: bytes

    @property
    def payload(self) -> bytes:
        """The weight bytes alone, without header and trailer."""
        trailer_offset = _HEADER.unpack_from(self.data)[8]
        return self.data[_HEADER.size:trailer_offset]


def export_memory_image(model: SpikingModel) -> MemoryImage:
    arch = model.arch
    for name, w in (("conv", model.conv_w), ("fc", model.fc_w)):
        if w.size and (w.min() < -128 or w.max() > 127):
            raise EncodingError(f"{name} weight outside [-128, 127]")
    for dim, bound in ((arch.num_filters, 255), (arch.kernel_size, 255),
                       (arch.pool_size, 255), (arch.num_classes, 255),
                       (arch.input_len, 65535)):
        if dim > bound:
            raise EncodingError("architecture dimension too large for the image header")
    payload = (model.conv_w.reshape(-1).astype(np.int8).tobytes()
               + model.fc_w.reshape(-1).astype(np.int8).tobytes())
    header = _HEADER.pack(MEMORY_IMAGE_MAGIC, MEMORY_IMAGE_VERSION,
                          arch.num_filters, arch.kernel_size, arch.pool_size,
                          arch.num_classes, arch.input_len, 0,
                          _HEADER.size + len(payload))
    trailer = _TRAILER.pack(*model.v_thr.as_tuple(), *model.v_min.as_tuple(),
                            model.pool_w)
    return MemoryImage(header + payload + trailer)


def import_memory_image(image) -> SpikingModel:
    data = image.data if isinstance(image, MemoryImage) else bytes(image)
    if len(data) < _HEADER.size + _TRAILER.size:
        raise EncodingError("image shorter than header plus trailer")
    (magic, version, num_filters, kernel_size, pool_size, num_classes,
     input_len, leak, trailer_offset) = _HEADER.unpack_from(data)
    if magic != MEMORY_IMAGE_MAGIC:
        raise EncodingError("bad magic")
    if version != MEMORY_IMAGE_VERSION:
        raise EncodingError(f"unsupported image version {version}")
    if leak != 0:
        raise EncodingError("leak parameter must be 0")
    arch = ArchConfig(input_len, num_filters, kernel_size, pool_size, num_classes)
    n_weights = arch.weight_count
    if trailer_offset != _HEADER.size + n_weights:
        raise EncodingError("trailer offset does not match the architecture")
    if len(data) != trailer_offset + _TRAILER.size:
        raise EncodingError("image length does not match the architecture")
    weights = np.frombuffer(data, dtype=np.int8, count=n_weights,
                            offset=_HEADER.size).astype(np.int64)
    n_conv = num_filters * kernel_size
    values = _TRAILER.unpack_from(data, trailer_offset)
    return SpikingModel(
        weights[:n_conv].reshape(num_filters, kernel_size),
        weights[n_conv:].reshape(arch.feature_len, num_classes),
        pool_w=values[6],
        v_thr=LayerValues(*values[0:3]),
        v_min=LayerValues(*values[3:6]),
        arch=arch,
    )


def save_memory_image(image: MemoryImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(image.data)


def load_memory_image(path) -> MemoryImage:
    with open(path, "rb") as fh:
        return MemoryImage(fh.read())
