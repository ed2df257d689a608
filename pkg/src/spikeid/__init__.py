"""Event-driven spiking-network toolchain for gamma-ray radioisotope ID.

Pipeline: synthesize spectra -> train and quantize a small 1-D conv
classifier -> convert it to an integer spiking network -> run event-driven
inference behind a bit-exact serial test protocol.
"""

from .spectra import (
    Calibration, Dataset, GeneratorConfig, Histogram, IsotopeTemplate,
    NormalizedSpectrum, load_dataset, normalize, save_dataset,
    synthesize_dataset,
)
from .events import EventStream, PhotonEvent, sample_events
from .network import (
    ArchConfig, FloatModel, QuantizedModel, TrainConfig, evaluate, forward,
    knn_baseline, quantize, train, train_qat,
)
from .conversion import (
    MemoryImage, SpikingModel, compute_thresholds, convert,
    export_memory_image, import_memory_image,
)
from .engine import Engine, InferenceResult, PythonEngine, neuron_update, run_inference
from .harness import BatchReport, ProtocolError, run_batch, run_sample

__version__ = "0.1.0"
