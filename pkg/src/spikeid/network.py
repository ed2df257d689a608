"""Frame-based 1-D convolutional classifier: training, quantization, evaluation.

Architecture: valid cross-correlation (stride 1, no bias) -> ReLU ->
non-overlapping average pooling (floor-truncated) -> dense output layer.
With the default configuration (1,024 inputs, 4 filters of size 5, pool
16, 8 classes) the network has exactly 2,036 trainable weights.

Training is plain mini-batch gradient descent with momentum, implemented
directly in numpy so gradients can be checked against finite differences
and runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectra import Dataset, NormalizedSpectrum

INT8_MAX = 127


@dataclass(frozen=True)
class ArchConfig:
    input_len: int = 1024
    num_filters: int = 4
    kernel_size: int = 5
    pool_size: int = 16
    num_classes: int = 8

    def __post_init__(self):
        if min(self.input_len, self.num_filters, self.kernel_size,
               self.pool_size, self.num_classes) < 1:
            raise ValueError("all architecture dimensions must be positive")
        if self.conv_len <= 0:
            raise ValueError("kernel longer than input")
        if self.pooled_per_map < 1:
            raise ValueError("pool size leaves no pooled outputs")

    @property
    def conv_len(self) -> int:
        return self.input_len - self.kernel_size + 1

    @property
    def pooled_per_map(self) -> int:
        return self.conv_len // self.pool_size

    @property
    def feature_len(self) -> int:
        return self.num_filters * self.pooled_per_map

    @property
    def weight_count(self) -> int:
        return (self.num_filters * self.kernel_size
                + self.feature_len * self.num_classes)


@dataclass
class FloatModel:
    conv_weights: np.ndarray  # (num_filters, kernel_size)
    fc_weights: np.ndarray    # (feature_len, num_classes)
    arch: ArchConfig

    def __post_init__(self):
        self.conv_weights = np.asarray(self.conv_weights, dtype=np.float64)
        self.fc_weights = np.asarray(self.fc_weights, dtype=np.float64)
        _check_shapes(self.conv_weights, self.fc_weights, self.arch)


@dataclass
class QuantizedModel:
    """Per-tensor symmetric int8 weights: value = integer * scale."""

    conv_q: np.ndarray
    fc_q: np.ndarray
    conv_scale: float
    fc_scale: float
    arch: ArchConfig

    def __post_init__(self):
        self.conv_q = np.asarray(self.conv_q, dtype=np.int8)
        self.fc_q = np.asarray(self.fc_q, dtype=np.int8)
        _check_shapes(self.conv_q, self.fc_q, self.arch)
        if self.conv_scale <= 0 or self.fc_scale <= 0:
            raise ValueError("quantization scales must be positive")

    def dequantized(self) -> FloatModel:
        return FloatModel(self.conv_q * self.conv_scale,
                          self.fc_q * self.fc_scale, self.arch)


def _check_shapes(conv_w, fc_w, arch):
    if conv_w.shape != (arch.num_filters, arch.kernel_size):
        raise ValueError(f"conv weights shape {conv_w.shape} does not match arch")
    if fc_w.shape != (arch.feature_len, arch.num_classes):
        raise ValueError(f"fc weights shape {fc_w.shape} does not match arch")


@dataclass
class TrainConfig:
    learning_rate: float = 3.0
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    qat_enabled: bool = True
    momentum: float = 0.9
    qat_epochs: int = 15
    qat_learning_rate: float | None = None  # defaults to learning_rate / 5
    val_fold: int | None = None
    exclude_folds: tuple = ()

    def __post_init__(self):
        if min(self.learning_rate, self.epochs, self.batch_size) <= 0:
            raise ValueError("hyperparameters must be positive")
        if self.qat_epochs < 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("invalid momentum or qat_epochs")


@dataclass
class ForwardPass:
    conv_act: np.ndarray  # (num_filters, conv_len), post-ReLU
    pool_act: np.ndarray  # (num_filters, pooled_per_map)
    logits: np.ndarray    # (num_classes,)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true label, columns = prediction


# ---------------------------------------------------------------------------
# forward / backward


def _windows(X: np.ndarray, kernel_size: int) -> np.ndarray:
    """(N, input_len) -> (N, conv_len, kernel_size) sliding read-only view."""
    return np.lib.stride_tricks.sliding_window_view(X, kernel_size, axis=1)


def _forward_batch(X, conv_w, fc_w, arch: ArchConfig):
    """Returns (pre-activation, conv ReLU, pooled, flat features, logits)."""
    win = _windows(X, arch.kernel_size)
    pre = np.einsum("npk,fk->nfp", win, conv_w)
    act = np.maximum(pre, 0.0)
    used = arch.pooled_per_map * arch.pool_size
    pooled = act[:, :, :used].reshape(
        X.shape[0], arch.num_filters, arch.pooled_per_map, arch.pool_size
    ).mean(axis=3)
    flat = pooled.reshape(X.shape[0], arch.feature_len)
    logits = flat @ fc_w
    return pre, act, pooled, flat, logits


def forward(model, spectrum) -> ForwardPass:
    """Run one spectrum through the network.

    Accepts a float or quantized model (the latter runs on dequantized
    weights) and a NormalizedSpectrum or raw value array.
    """
    if isinstance(model, QuantizedModel):
        model = model.dequantized()
    x = spectrum.probs if isinstance(spectrum, NormalizedSpectrum) else np.asarray(spectrum)
    if x.shape != (model.arch.input_len,):
        raise ValueError(f"spectrum length {x.shape} does not match "
                         f"input_len {model.arch.input_len}")
    _, act, pooled, _, logits = _forward_batch(
        x[None, :], model.conv_weights, model.fc_weights, model.arch)
    return ForwardPass(act[0], pooled[0], logits[0])


def _softmax_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def loss_and_gradients(X, labels, conv_w, fc_w, arch: ArchConfig):
    """Mean cross-entropy loss and its analytic weight gradients."""
    pre, act, _, flat, logits = _forward_batch(X, conv_w, fc_w, arch)
    loss, dlogits = _softmax_cross_entropy(logits, labels)
    dfc = flat.T @ dlogits
    dflat = dlogits @ fc_w.T
    dpool = dflat.reshape(X.shape[0], arch.num_filters, arch.pooled_per_map)
    dact = np.zeros_like(act)
    used = arch.pooled_per_map * arch.pool_size
    dact[:, :, :used] = np.repeat(dpool, arch.pool_size, axis=2) / arch.pool_size
    dpre = dact * (pre > 0.0)
    dconv = np.einsum("nfp,npk->fk", dpre, _windows(X, arch.kernel_size))
    return loss, dconv, dfc


# ---------------------------------------------------------------------------
# quantization


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize_tensor(w: np.ndarray):
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    if max_abs == 0.0:
        return np.zeros(w.shape, dtype=np.int8), 1.0
    scale = max_abs / INT8_MAX
    q = np.clip(round_half_away(w / scale), -INT8_MAX, INT8_MAX)
    return q.astype(np.int8), scale


def quantize(model: FloatModel) -> QuantizedModel:
    """Per-tensor symmetric int8 quantization; zero maps to zero."""
    if not (np.all(np.isfinite(model.conv_weights))
            and np.all(np.isfinite(model.fc_weights))):
        raise ValueError("cannot quantize non-finite weights")
    conv_q, conv_scale = _quantize_tensor(model.conv_weights)
    fc_q, fc_scale = _quantize_tensor(model.fc_weights)
    return QuantizedModel(conv_q, fc_q, conv_scale, fc_scale, model.arch)


def _fake_quantize(w: np.ndarray) -> np.ndarray:
    q, scale = _quantize_tensor(w)
    return q.astype(np.float64) * scale


# ---------------------------------------------------------------------------
# training


def _dataset_arrays(dataset: Dataset):
    return dataset.matrix(), dataset.label_indices()


def _accuracy(X, labels, conv_w, fc_w, arch) -> float:
    logits = _forward_batch(X, conv_w, fc_w, arch)[4]
    return float((np.argmax(logits, axis=1) == labels).mean())


def _init_weights(arch: ArchConfig, rng):
    conv = rng.uniform(-1.0, 1.0, (arch.num_filters, arch.kernel_size))
    bound = np.sqrt(6.0 / arch.feature_len)
    fc = rng.uniform(-bound, bound, (arch.feature_len, arch.num_classes))
    return conv, fc


def _sgd_epochs(X, y, conv_w, fc_w, arch, cfg, epochs, base_lr, rng,
                fake_quant, X_val, y_val):
    """Momentum SGD over the given arrays; returns best-validation snapshot.

    With fake_quant=True the forward/backward pass sees quantize->dequantize
    weights while updates are applied to the latent float weights
    (straight-through estimator).
    """
    conv_w, fc_w = conv_w.copy(), fc_w.copy()
    vel_conv = np.zeros_like(conv_w)
    vel_fc = np.zeros_like(fc_w)
    n = X.shape[0]

    def eval_weights(cw, fw):
        if fake_quant:
            cw, fw = _fake_quantize(cw), _fake_quantize(fw)
        return _accuracy(X_val, y_val, cw, fw, arch)

    best_acc = eval_weights(conv_w, fc_w)
    best = (conv_w.copy(), fc_w.copy())
    for epoch in range(epochs):
        # fixed step schedule: drop the rate twice over the run
        lr = base_lr
        if epoch >= int(0.85 * epochs):
            lr = base_lr * 0.09
        elif epoch >= int(0.6 * epochs):
            lr = base_lr * 0.3
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cw = _fake_quantize(conv_w) if fake_quant else conv_w
            fw = _fake_quantize(fc_w) if fake_quant else fc_w
            _, dconv, dfc = loss_and_gradients(X[idx], y[idx], cw, fw, arch)
            vel_conv = cfg.momentum * vel_conv - lr * dconv
            vel_fc = cfg.momentum * vel_fc - lr * dfc
            conv_w = conv_w + vel_conv
            fc_w = fc_w + vel_fc
        acc = eval_weights(conv_w, fc_w)
        if acc > best_acc:
            best_acc = acc
            best = (conv_w.copy(), fc_w.copy())
    return best


def _split_train_val(dataset: Dataset, cfg: TrainConfig):
    train = dataset.subset(exclude=cfg.exclude_folds)
    if cfg.val_fold is not None:
        val = train.subset(include=cfg.val_fold)
        train = train.subset(exclude=cfg.val_fold)
        if len(val) == 0:
            raise ValueError(f"validation fold {cfg.val_fold} is empty")
    else:
        val = train
    if len(train) == 0:
        raise ValueError("training set is empty")
    return train, val


def train(dataset: Dataset, arch: ArchConfig, cfg: TrainConfig) -> FloatModel:
    """Train a float model; returns the epoch snapshot with the best
    validation accuracy (the training set doubles as validation when no
    val_fold is configured)."""
    train_set, val_set = _split_train_val(dataset, cfg)
    X, y = _dataset_arrays(train_set)
    X_val, y_val = _dataset_arrays(val_set)
    rng = np.random.default_rng(cfg.seed)
    conv_w, fc_w = _init_weights(arch, rng)
    conv_w, fc_w = _sgd_epochs(X, y, conv_w, fc_w, arch, cfg, cfg.epochs,
                               cfg.learning_rate, rng, False, X_val, y_val)
    return FloatModel(conv_w, fc_w, arch)


def train_qat(dataset: Dataset, arch: ArchConfig, cfg: TrainConfig) -> QuantizedModel:
    """Float training followed by quantization-aware fine-tuning.

    The fine-tune phase runs the forward pass on fake-quantized weights and
    passes gradients straight through the rounding. With qat_enabled=False
    the fine-tune phase is skipped and the result is the post-training
    quantization of exactly the model train() would return.
    """
    train_set, val_set = _split_train_val(dataset, cfg)
    X, y = _dataset_arrays(train_set)
    X_val, y_val = _dataset_arrays(val_set)
    rng = np.random.default_rng(cfg.seed)
    conv_w, fc_w = _init_weights(arch, rng)
    conv_w, fc_w = _sgd_epochs(X, y, conv_w, fc_w, arch, cfg, cfg.epochs,
                               cfg.learning_rate, rng, False, X_val, y_val)
    if cfg.qat_enabled and cfg.qat_epochs > 0:
        qat_lr = cfg.qat_learning_rate
        if qat_lr is None:
            qat_lr = cfg.learning_rate / 5.0
        conv_w, fc_w = _sgd_epochs(X, y, conv_w, fc_w, arch, cfg, cfg.qat_epochs,
                                   qat_lr, rng, True, X_val, y_val)
    return quantize(FloatModel(conv_w, fc_w, arch))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, dataset: Dataset) -> EvalResult:
    """Accuracy and confusion matrix; argmax ties go to the lowest class."""
    if isinstance(model, QuantizedModel):
        model = model.dequantized()
    X, y = _dataset_arrays(dataset)
    logits = _forward_batch(X, model.conv_weights, model.fc_weights, model.arch)[4]
    pred = np.argmax(logits, axis=1)
    n_classes = model.arch.num_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return EvalResult(float((pred == y).mean()), confusion)


def knn_baseline(train_set: Dataset, test_set: Dataset, k: int = 1) -> float:
    """k-nearest-neighbour accuracy over Euclidean distance.

    Neighbour ranking is stable in sample order; vote ties resolve to the
    lowest class index.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if k < 1:
        raise ValueError("k must be >= 1")
    Xtr, ytr = _dataset_arrays(train_set)
    Xte, yte = _dataset_arrays(test_set)
    n_classes = len(train_set.classes)
    d2 = ((Xte ** 2).sum(axis=1)[:, None] + (Xtr ** 2).sum(axis=1)[None, :]
          - 2.0 * Xte @ Xtr.T)
    correct = 0
    for i in range(Xte.shape[0]):
        order = np.argsort(d2[i], kind="stable")[:k]
        votes = np.bincount(ytr[order], minlength=n_classes)
        if int(np.argmax(votes)) == yte[i]:
            correct += 1
    return correct / max(len(test_set), 1)


# ---------------------------------------------------------------------------
# model file format
#
# header: cann-model-v1,<kind>,<input_len>,<filters>,<kernel>,<pool>,<classes>
#         [,<conv_scale>,<fc_scale>]           (int8 models only)
# then one weight per line: conv weights filter-major, then dense weights
# with the pooled-neuron index major and the class index minor.

MODEL_FORMAT = "cann-model-v1"


def save_model(model, path) -> None:
    arch = model.arch
    is_q = isinstance(model, QuantizedModel)
    with open(path, "w", encoding="utf-8") as fh:
        head = (f"{MODEL_FORMAT},{'int8' if is_q else 'float'},{arch.input_len},"
                f"{arch.num_filters},{arch.kernel_size},{arch.pool_size},"
                f"{arch.num_classes}")
        if is_q:
            head += f",{repr(model.conv_scale)},{repr(model.fc_scale)}"
        fh.write(head + "\n")
        conv = model.conv_q if is_q else model.conv_weights
        fc = model.fc_q if is_q else model.fc_weights
        for v in conv.reshape(-1):
            fh.write(f"{int(v) if is_q else repr(float(v))}\n")
        for v in fc.reshape(-1):
            fh.write(f"{int(v) if is_q else repr(float(v))}\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        fields = fh.readline().rstrip("\n").split(",")
        if fields[0] != MODEL_FORMAT or fields[1] not in ("float", "int8"):
            raise ValueError(f"not a {MODEL_FORMAT} file")
        kind = fields[1]
        arch = ArchConfig(*(int(v) for v in fields[2:7]))
        values = [line.strip() for line in fh if line.strip()]
    if len(values) != arch.weight_count:
        raise ValueError(f"expected {arch.weight_count} weights, found {len(values)}")
    n_conv = arch.num_filters * arch.kernel_size
    if kind == "float":
        w = np.array([float(v) for v in values])
        return FloatModel(w[:n_conv].reshape(arch.num_filters, arch.kernel_size),
                          w[n_conv:].reshape(arch.feature_len, arch.num_classes),
                          arch)
    conv_scale, fc_scale = float(fields[7]), float(fields[8])
    w = np.array([int(v) for v in values])
    return QuantizedModel(w[:n_conv].reshape(arch.num_filters, arch.kernel_size),
                          w[n_conv:].reshape(arch.feature_len, arch.num_classes),
                          conv_scale, fc_scale, arch)
