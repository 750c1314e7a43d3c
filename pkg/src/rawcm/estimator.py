"""Scikit-learn compatible wrapper around the spoofing countermeasure.

``SpoofDetector`` exposes the usual estimator surface (``fit`` /
``decision_function`` / ``predict`` / ``predict_proba``, ``get_params``) over
fixed-length raw waveforms so the network composes with sklearn pipelines and
model selection utilities.  Class 0 is genuine speech, class 1 is spoofed.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import WaveRecord
from .metrics import GENUINE, SPOOF
from .model import Model, ModelConfig
from .training import TrainConfig, score_records, train

__all__ = ["SpoofDetector"]


class SpoofDetector(BaseEstimator, ClassifierMixin):
    """End-to-end raw-waveform anti-spoofing classifier.

    Parameters mirror the training recipe: AdamW with exponential
    learning-rate decay and focal loss, class weight set from the label
    ratio.  ``X`` is (n_samples, n_timesteps) raw audio in [-1, 1]; rows are
    head-truncated or tiled to ``fixed_length``.
    """

    def __init__(self, epochs=50, batch_size=32, lr=0.001, weight_decay=0.01,
                 lr_decay=0.97, focal_gamma=2.0, fixed_length=16000,
                 use_meca=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.focal_gamma = focal_gamma
        self.fixed_length = fixed_length
        self.use_meca = use_meca
        self.seed = seed

    def _records(self, X, y=None):
        labels = y if y is not None else [None] * len(X)
        return [WaveRecord(utt_id=str(i), samples=row, sample_rate=16000,
                           label=None if lab is None else int(lab),
                           attack_id=None if lab is None
                           else ("-" if lab == GENUINE else "A00"))
                for i, (row, lab) in enumerate(zip(X, labels))]

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        classes = np.unique(y)
        if not np.array_equal(classes, [GENUINE, SPOOF]):
            raise ValueError(f"labels must contain both classes 0 and 1, got {classes}")
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          lr0=self.lr, weight_decay=self.weight_decay,
                          lr_decay=self.lr_decay, focal_gamma=self.focal_gamma,
                          seed=self.seed, fixed_length=self.fixed_length,
                          use_meca=self.use_meca)
        model = Model(ModelConfig(use_meca=self.use_meca), seed=self.seed)
        records = self._records(X, y)
        # the training data doubles as the selection set; the CLI pipeline is
        # the place for a real dev protocol
        best, history = train(model, records, records, cfg)
        self.model_ = model.eval()
        self.history_ = history
        self.classes_ = classes
        return self

    def decision_function(self, X):
        """Countermeasure scores; higher = more genuine (class 0)."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        scored = score_records(self.model_, self._records(X),
                               batch_size=self.batch_size,
                               target_len=self.fixed_length)
        return np.array([s for _, s in scored])

    def predict_proba(self, X):
        p_genuine = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([p_genuine, 1.0 - p_genuine])

    def predict(self, X):
        return (self.decision_function(X) < 0.0).astype(int)
