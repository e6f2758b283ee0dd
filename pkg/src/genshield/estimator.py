"""Multi-task ConvNet (MTCNN): shared trunk, softmax activity head,
sigmoid gender head.  Quantifies both inferences on raw or transformed
windows and provides frozen inference for the guardian training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import nncore
from .dataio import N_ACTIVITIES, NormalizationStats
from .errors import ArgumentError, ShapeError, TrainingError
from .nncore import (
    Adam,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    MaxPool1D,
    NeuralNet,
    PositionwiseDense,
    ReLU,
    Sigmoid,
    Softmax,
    binary_cross_entropy,
    categorical_cross_entropy,
)

MIN_WINDOW_LENGTH = 32  # smallest d that survives the conv/pool stack


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    activity_weight: float = 1.0
    gender_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be positive")
        if self.activity_weight <= 0 or self.gender_weight <= 0:
            raise ArgumentError("task loss weights must be positive")


@dataclass
class EstimatorModel:
    trunk: NeuralNet
    activity_head: NeuralNet
    gender_head: NeuralNet
    input_shape: tuple  # (m, d)
    normalization: NormalizationStats | None = None

    def nets(self):
        return [self.trunk, self.activity_head, self.gender_head]

    @property
    def frozen(self):
        return all(net.frozen for net in self.nets())

    def param_count(self):
        return sum(net.param_count() for net in self.nets())


@dataclass
class EvalReport:
    activity_accuracy: float  # percent
    gender_accuracy: float  # percent
    confusion: list  # 4x4, rows = true activity, cols = predicted
    n_windows: int

    def to_dict(self):
        return {
            "activity_accuracy": self.activity_accuracy,
            "gender_accuracy": self.gender_accuracy,
            "confusion": self.confusion,
            "n_windows": self.n_windows,
        }


def trunk_time_lengths(d):
    """Time-axis length after each length-changing trunk stage."""
    lengths = []
    t = d - 4  # Conv(50: 1x5)
    lengths.append(t)
    t = t - 2  # Conv(50: 1x3)
    lengths.append(t)
    t = t // 2  # MaxPool(1x2)
    lengths.append(t)
    t = t - 4  # Conv(40: 1x5)
    lengths.append(t)
    t = t // 3  # MaxPool(1x3)
    lengths.append(t)
    t = t - 2  # Conv(20: 1x3)
    lengths.append(t)
    return lengths


def build_mtcnn(m, d, seed=0, dtype=None):
    """Conv(50:5) Conv(50:3) Dense(50) MP(2) DO(.2) Conv(40:5) Dense(40)
    MP(3) DO(.2) Conv(20:3) DO(.2) Flatten Dense(400) DO(.4), then
    Softmax(4) and Sigmoid heads."""
    dtype = dtype or nncore.default_dtype()
    lengths = trunk_time_lengths(d)
    if lengths[-1] < 1 or any(t < 1 for t in lengths):
        raise ShapeError(
            f"window length d={d} too small for the conv/pool stack; "
            f"minimum d is {MIN_WINDOW_LENGTH}"
        )
    flat = 20 * lengths[-1]
    rng = np.random.default_rng(seed)
    trunk = NeuralNet(
        [
            Conv1D(m, 50, 5, dtype=dtype, rng=rng),
            ReLU(),
            Conv1D(50, 50, 3, dtype=dtype, rng=rng),
            ReLU(),
            PositionwiseDense(50, 50, dtype=dtype, rng=rng),
            ReLU(),
            MaxPool1D(2),
            Dropout(0.2),
            Conv1D(50, 40, 5, dtype=dtype, rng=rng),
            ReLU(),
            PositionwiseDense(40, 40, dtype=dtype, rng=rng),
            ReLU(),
            MaxPool1D(3),
            Dropout(0.2),
            Conv1D(40, 20, 3, dtype=dtype, rng=rng),
            ReLU(),
            Dropout(0.2),
            Flatten(),
            Dense(flat, 400, dtype=dtype, rng=rng),
            ReLU(),
            Dropout(0.4),
        ],
        seed=seed,
    )
    activity_head = NeuralNet(
        [Dense(400, N_ACTIVITIES, dtype=dtype, rng=rng), Softmax()], seed=seed + 1
    )
    gender_head = NeuralNet(
        [Dense(400, 1, dtype=dtype, rng=rng), Sigmoid()], seed=seed + 2
    )
    return EstimatorModel(
        trunk=trunk,
        activity_head=activity_head,
        gender_head=gender_head,
        input_shape=(m, d),
    )


def stack_windows(windows, dtype=None):
    """-> X (n, m, d), activity one-hot (n, 4), gender (n,)."""
    if not windows:
        raise ArgumentError("empty window set")
    dtype = dtype or nncore.default_dtype()
    x = np.stack([w.data for w in windows]).astype(dtype)
    ya = np.stack([w.activity_onehot for w in windows]).astype(dtype)
    yg = np.array([w.gender_label for w in windows], dtype=dtype)
    return x, ya, yg


def forward_estimator(model, x, train=False):
    """-> (activity posterior (n, 4), gender posterior (n,))."""
    m, d = model.input_shape
    if x.ndim != 3 or x.shape[1:] != (m, d):
        raise ShapeError(f"expected input (n, {m}, {d}), got {x.shape}")
    h = model.trunk.forward(x, train=train)
    ya = model.activity_head.forward(h, train=train)
    yg = model.gender_head.forward(h, train=train)[:, 0]
    return ya, yg


def backward_estimator(model, g_activity, g_gender):
    """Backprop through both heads and the trunk; returns the input gradient.

    Works on frozen models too: frozen layers skip their parameter
    gradients but still propagate the input gradient.
    """
    gh = model.activity_head.backward(g_activity)
    gh = gh + model.gender_head.backward(g_gender[:, None])
    return model.trunk.backward(gh)


def train_estimator(model, windows, config=None, eval_windows=None):
    """Minimize weighted activity CCE + gender BCE; returns a history dict.

    History keys: loss, activity_accuracy, gender_accuracy (per epoch) and,
    when eval_windows is given, val_activity_accuracy / val_gender_accuracy.
    """
    config = config or TrainConfig()
    x, ya, yg = stack_windows(windows)
    if len(np.unique(yg)) < 2:
        raise TrainingError("training windows contain a single gender class")
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.learning_rate)
    history = {
        "loss": [],
        "activity_accuracy": [],
        "gender_accuracy": [],
        "val_activity_accuracy": [],
        "val_gender_accuracy": [],
    }
    n = x.shape[0]
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        correct_a = 0
        correct_g = 0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            xb, yab, ygb = x[idx], ya[idx], yg[idx]
            pa, pg = forward_estimator(model, xb, train=True)
            loss_a, ga = categorical_cross_entropy(pa, yab)
            loss_g, gg = binary_cross_entropy(pg, ygb)
            loss = config.activity_weight * loss_a + config.gender_weight * loss_g
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at batch {b0}")
            backward_estimator(
                model,
                (config.activity_weight * ga).astype(pa.dtype),
                (config.gender_weight * gg).astype(pg.dtype),
            )
            opt.step(model.nets(), batch_id=b0)
            epoch_loss += loss * len(idx)
            correct_a += int((pa.argmax(axis=1) == yab.argmax(axis=1)).sum())
            correct_g += int(((pg >= 0.5).astype(int) == ygb.astype(int)).sum())
        history["loss"].append(epoch_loss / n)
        history["activity_accuracy"].append(100.0 * correct_a / n)
        history["gender_accuracy"].append(100.0 * correct_g / n)
        if eval_windows:
            report = evaluate(model, eval_windows)
            history["val_activity_accuracy"].append(report.activity_accuracy)
            history["val_gender_accuracy"].append(report.gender_accuracy)
    return history


def evaluate(model, windows, batch_size=256):
    """Window-level accuracies; gender ties (posterior exactly 0.5) -> Male."""
    x, ya, yg = stack_windows(windows)
    n = x.shape[0]
    confusion = np.zeros((N_ACTIVITIES, N_ACTIVITIES), dtype=int)
    correct_g = 0
    for b0 in range(0, n, batch_size):
        xb = x[b0 : b0 + batch_size]
        pa, pg = forward_estimator(model, xb, train=False)
        true_a = ya[b0 : b0 + batch_size].argmax(axis=1)
        pred_a = pa.argmax(axis=1)
        for t, p in zip(true_a, pred_a):
            confusion[t, p] += 1
        pred_g = (pg >= 0.5).astype(int)
        correct_g += int((pred_g == yg[b0 : b0 + batch_size].astype(int)).sum())
    correct_a = int(np.trace(confusion))
    return EvalReport(
        activity_accuracy=100.0 * correct_a / n,
        gender_accuracy=100.0 * correct_g / n,
        confusion=confusion.tolist(),
        n_windows=n,
    )


def freeze(model):
    """Mark every parameter non-trainable; forward/backward still work."""
    for net in model.nets():
        net.set_trainable(False)
    return model


def snapshot_params(model):
    """Copies of all parameter arrays, for bit-compare before/after."""
    return [arr.copy() for net in model.nets() for _, _, arr in net.parameters()]


# ---------------------------------------------------------------------------
# sklearn-style wrapper
# ---------------------------------------------------------------------------


class MultiTaskActivityGenderClassifier(BaseEstimator):
    """sklearn-compatible front for the MTCNN.

    X is an (n, m, d) array of normalized windows; y is an (n, 2) integer
    array with columns [activity_index, gender].
    """

    def __init__(
        self,
        epochs=30,
        batch_size=64,
        learning_rate=1e-3,
        seed=0,
        activity_weight=1.0,
        gender_weight=1.0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.activity_weight = activity_weight
        self.gender_weight = gender_weight

    def _validate(self, X):
        X = np.asarray(X)
        if X.ndim != 3:
            raise ArgumentError(f"X must be (n, m, d), got shape {X.shape}")
        return X

    def _as_windows(self, X, y):
        from .dataio import Window

        y = np.asarray(y)
        if y.ndim != 2 or y.shape[1] != 2:
            raise ArgumentError("y must be (n, 2): activity index, gender")
        windows = []
        for i in range(X.shape[0]):
            onehot = np.zeros(N_ACTIVITIES)
            onehot[int(y[i, 0])] = 1.0
            windows.append(
                Window(
                    data=X[i],
                    activity_onehot=onehot,
                    gender_label=int(y[i, 1]),
                    subject_id=0,
                    trial_id=0,
                    start_index=0,
                )
            )
        return windows

    def fit(self, X, y):
        X = self._validate(X)
        m, d = X.shape[1], X.shape[2]
        self.model_ = build_mtcnn(m, d, seed=self.seed)
        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            activity_weight=self.activity_weight,
            gender_weight=self.gender_weight,
        )
        self.history_ = train_estimator(self.model_, self._as_windows(X, y), config)
        return self

    def predict_proba(self, X):
        X = self._validate(X).astype(nncore.default_dtype())
        ya, yg = forward_estimator(self.model_, X, train=False)
        return ya, yg

    def predict(self, X):
        ya, yg = self.predict_proba(X)
        return np.column_stack([ya.argmax(axis=1), (yg >= 0.5).astype(int)])

    def score(self, X, y):
        pred = self.predict(X)
        y = np.asarray(y)
        return float((pred == y).all(axis=1).mean())
