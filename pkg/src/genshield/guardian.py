"""Autoencoder guardian and its training loop.

The guardian learns a transformation of normalized sensor windows that
pushes a frozen gender classifier's confidence toward 0.5 while keeping
activity classification intact, by backpropagating through the frozen
multi-task estimator into the autoencoder only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nncore
from .dataio import Window
from .errors import ArgumentError, PreconditionError, TrainingError
from .estimator import backward_estimator, forward_estimator, stack_windows
from .nncore import LOG_EPS, Adam, Dense, NeuralNet, ReLU


@dataclass
class GuardianModel:
    autoencoder: NeuralNet  # dense stack |x| -> .. -> |x|/8 -> .. -> |x|, all ReLU
    input_shape: tuple  # (m, d)
    normalization: object = None  # NormalizationStats shared with the estimator

    @property
    def flat_size(self):
        m, d = self.input_shape
        return m * d

    def param_count(self):
        return self.autoencoder.param_count()


@dataclass
class NeutralizerConfig:
    target_confidence: float = 0.5
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    pretrain_epochs: int = 10  # reconstruction warm-up before the neutralizer loop
    printed_sign: bool = False  # subtract the CCE term instead of adding it

    def __post_init__(self):
        if not 0.0 < self.target_confidence < 1.0:
            raise ArgumentError("target_confidence must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ArgumentError("bad training hyperparameters")
        if self.pretrain_epochs < 0:
            raise ArgumentError("pretrain_epochs must be >= 0")


def autoencoder_sizes(flat):
    """|x| -> |x|/2 -> |x|/4 -> |x|/8 -> |x|/4 -> |x|/2 -> |x| (floor division)."""
    if flat // 8 < 1:
        raise ArgumentError(f"input size {flat} too small: bottleneck would be empty")
    return [flat, flat // 2, flat // 4, flat // 8, flat // 4, flat // 2, flat]


def build_guardian(m, d, seed=0, dtype=None):
    dtype = dtype or nncore.default_dtype()
    sizes = autoencoder_sizes(m * d)
    rng = np.random.default_rng(seed)
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append(Dense(a, b, dtype=dtype, rng=rng))
        layers.append(ReLU())
    return GuardianModel(autoencoder=NeuralNet(layers, seed=seed), input_shape=(m, d))


def neutralizer_loss(
    gender_posterior,
    activity_posterior,
    activity_true,
    target_confidence=0.5,
    printed_sign=False,
):
    """Mean of |target - Yg| + CCE(true activity, activity posterior on the
    transformed window), plus gradients w.r.t. both posteriors.

    The absolute-value kink at Yg == target gets subgradient 0.  With
    printed_sign=True the cross-entropy term is subtracted instead
    (kept only for auditing the published formula).
    """
    yg = np.atleast_1d(np.asarray(gender_posterior, dtype=float))
    pa = np.atleast_2d(np.asarray(activity_posterior, dtype=float))
    ta = np.atleast_2d(np.asarray(activity_true, dtype=float))
    if pa.shape != ta.shape or pa.shape[0] != yg.shape[0]:
        raise ArgumentError("posterior/label shapes disagree")
    nncore._check_one_hot(ta)
    n = yg.shape[0]
    sign = -1.0 if printed_sign else 1.0

    gap = target_confidence - yg
    p = np.clip(pa, LOG_EPS, 1.0 - LOG_EPS)
    cce = -(ta * np.log(p)).sum(axis=1)
    loss = float((np.abs(gap) + sign * cce).mean())

    g_yg = -np.sign(gap) / n  # sign(0) == 0 handles the kink
    g_pa = sign * np.where(ta > 0, -ta / p, 0.0) / n
    return loss, g_yg, g_pa


def train_gen(guardian, estimator_model, windows, config=None):
    """Train the autoencoder against the frozen estimator; returns history.

    Per batch: window -> flatten -> autoencoder -> reshape -> frozen
    estimator heads -> neutralizer loss; only autoencoder weights update.
    """
    config = config or NeutralizerConfig()
    if not estimator_model.frozen:
        raise PreconditionError(
            "estimator must be frozen before guardian training (call freeze())"
        )
    m, d = guardian.input_shape
    if estimator_model.input_shape != (m, d):
        raise ArgumentError("guardian and estimator input shapes disagree")
    x, ya, _yg = stack_windows(windows)
    n = x.shape[0]
    rng = np.random.default_rng(config.seed)
    history = {"loss": [], "pretrain_loss": []}

    # reconstruction warm-up: starts the autoencoder near identity so the
    # all-ReLU stack is alive before the neutralizer objective takes over
    pre_opt = Adam(lr=config.learning_rate)
    for _epoch in range(config.pretrain_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            flat = x[idx].reshape(len(idx), m * d)
            out = guardian.autoencoder.forward(flat, train=True)
            diff = out - flat
            loss = float((diff * diff).mean())
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite reconstruction loss at batch {b0}")
            guardian.autoencoder.backward(2.0 * diff / diff.size)
            pre_opt.step(guardian.autoencoder, batch_id=b0)
            epoch_loss += loss * len(idx)
        history["pretrain_loss"].append(epoch_loss / n)

    opt = Adam(lr=config.learning_rate)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            xb, yab = x[idx], ya[idx]
            flat = xb.reshape(len(idx), m * d)
            out = guardian.autoencoder.forward(flat, train=True)
            transformed = out.reshape(len(idx), m, d)
            pa, pg = forward_estimator(estimator_model, transformed, train=False)
            loss, g_yg, g_pa = neutralizer_loss(
                pg,
                pa,
                yab,
                target_confidence=config.target_confidence,
                printed_sign=config.printed_sign,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite neutralizer loss at batch {b0}")
            g_input = backward_estimator(
                estimator_model, g_pa.astype(pa.dtype), g_yg.astype(pg.dtype)
            )
            guardian.autoencoder.backward(g_input.reshape(len(idx), m * d))
            opt.step(guardian.autoencoder, batch_id=b0)
            epoch_loss += loss * len(idx)
        history["loss"].append(epoch_loss / n)
    return history


def transform_array(guardian, x, batch_size=256):
    """Apply the autoencoder (Eval mode) to an (n, m, d) array."""
    m, d = guardian.input_shape
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != (m, d):
        raise ArgumentError(f"expected (n, {m}, {d}) windows, got {x.shape}")
    outs = []
    for b0 in range(0, x.shape[0], batch_size):
        xb = x[b0 : b0 + batch_size].reshape(-1, m * d)
        outs.append(guardian.autoencoder.forward(xb, train=False))
    return np.concatenate(outs).reshape(-1, m, d)


def transform(guardian, windows):
    """Transformed copies of the windows; labels and metadata preserved."""
    x, _, _ = stack_windows(windows, dtype=nncore.default_dtype())
    out = transform_array(guardian, x)
    return [
        Window(
            data=out[i],
            activity_onehot=w.activity_onehot.copy(),
            gender_label=w.gender_label,
            subject_id=w.subject_id,
            trial_id=w.trial_id,
            start_index=w.start_index,
        )
        for i, w in enumerate(windows)
    ]


def reconstruct_series(windows, stride):
    """Stitch windows from one recording back into a continuous series.

    Overlapping regions are averaged.  Windows must share subject/trial
    metadata and be spaced by the given stride.
    """
    if not windows:
        raise ArgumentError("no windows to reconstruct")
    meta = {(w.subject_id, w.trial_id, w.activity_index) for w in windows}
    if len(meta) != 1:
        raise ArgumentError("windows come from more than one recording")
    ordered = sorted(windows, key=lambda w: w.start_index)
    m, d = ordered[0].data.shape
    start0 = ordered[0].start_index
    length = ordered[-1].start_index + d - start0
    total = np.zeros((m, length))
    count = np.zeros(length)
    for w in ordered:
        if w.data.shape != (m, d):
            raise ArgumentError("windows have inconsistent shapes")
        s = w.start_index - start0
        total[:, s : s + d] += w.data
        count[s : s + d] += 1
    if np.any(count == 0):
        raise ArgumentError("windows do not cover a contiguous region")
    return total / count


# ---------------------------------------------------------------------------
# sklearn-style wrapper
# ---------------------------------------------------------------------------


class GenderNeutralizingTransformer(BaseEstimator, TransformerMixin):
    """sklearn-compatible front for the guardian.

    fit(X, y, estimator_model=...) trains the autoencoder against a frozen
    estimator; transform(X) rewrites (n, m, d) windows.
    """

    def __init__(
        self,
        target_confidence=0.5,
        epochs=30,
        batch_size=64,
        learning_rate=1e-3,
        seed=0,
    ):
        self.target_confidence = target_confidence
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y, estimator_model=None):
        X = np.asarray(X)
        if X.ndim != 3:
            raise ArgumentError(f"X must be (n, m, d), got shape {X.shape}")
        if estimator_model is None:
            raise ArgumentError("fit requires estimator_model (a frozen MTCNN)")
        y = np.asarray(y)
        from .dataio import N_ACTIVITIES

        windows = []
        for i in range(X.shape[0]):
            onehot = np.zeros(N_ACTIVITIES)
            onehot[int(y[i, 0]) if y.ndim == 2 else int(y[i])] = 1.0
            windows.append(
                Window(
                    data=X[i],
                    activity_onehot=onehot,
                    gender_label=int(y[i, 1]) if y.ndim == 2 else 0,
                    subject_id=0,
                    trial_id=0,
                    start_index=0,
                )
            )
        m, d = X.shape[1], X.shape[2]
        self.model_ = build_guardian(m, d, seed=self.seed)
        config = NeutralizerConfig(
            target_confidence=self.target_confidence,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        self.history_ = train_gen(self.model_, estimator_model, windows, config)
        return self

    def transform(self, X):
        return transform_array(self.model_, np.asarray(X, dtype=nncore.default_dtype()))
