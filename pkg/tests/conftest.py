import numpy as np
import pytest

from spikeid import conversion, events, network, spectra


@pytest.fixture(scope="session")
def templates_cal():
    return spectra.load_templates()


@pytest.fixture(scope="session")
def small_dataset():
    """320-sample dataset shared by the slower training-dependent tests."""
    cfg = spectra.GeneratorConfig(variants_per_isotope=40)
    return spectra.synthesize_dataset(cfg, seed=7)


@pytest.fixture(scope="session")
def small_train_cfg():
    return network.TrainConfig(epochs=15, qat_epochs=5, seed=1, exclude_folds=(4,))


@pytest.fixture(scope="session")
def qat_model(small_dataset, small_train_cfg):
    return network.train_qat(small_dataset, network.ArchConfig(), small_train_cfg)


@pytest.fixture(scope="session")
def snn_model(qat_model, small_dataset):
    thresholds = conversion.compute_thresholds(qat_model,
                                               small_dataset.subset(exclude=(4,)))
    return conversion.convert(qat_model, thresholds)


TOY_ARCH = dict(input_len=16, num_filters=2, kernel_size=3, pool_size=2,
                num_classes=4)


def toy_arch(**overrides):
    kwargs = dict(TOY_ARCH)
    kwargs.update(overrides)
    return network.ArchConfig(**kwargs)


def random_toy_snn(rng, conv_lo=-40, conv_hi=41, fc_lo=-60, fc_hi=61, **arch_kw):
    """Random integer spiking model with thresholds at or above max |w|."""
    arch = toy_arch(**arch_kw)
    conv = rng.integers(conv_lo, conv_hi, (arch.num_filters, arch.kernel_size))
    fc = rng.integers(fc_lo, fc_hi, (arch.feature_len, arch.num_classes))
    thr_conv = int(max(np.abs(conv).max(), 1)) + int(rng.integers(0, 40))
    thr_fc = int(max(np.abs(fc).max(), 1)) + int(rng.integers(0, 40))
    return conversion.SpikingModel(
        conv, fc, 1,
        v_thr=conversion.LayerValues(thr_conv, arch.pool_size, thr_fc),
        v_min=conversion.LayerValues(-thr_conv, -arch.pool_size, -thr_fc),
        arch=arch)


def random_stream(rng, input_len, n_events):
    """Uniform random channels, one event per timestep."""
    channels = rng.integers(0, input_len, n_events)
    return events.EventStream(np.arange(n_events), channels,
                              duration=max(n_events, 1), rate=1.0,
                              n_channels=input_len)


def toy_spectrum(rng, input_len=16):
    probs = rng.dirichlet(np.full(input_len, 0.7))
    return spectra.NormalizedSpectrum(probs, label="unlabeled")
