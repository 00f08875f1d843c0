"""scikit-learn style classifier wrapping the trainer."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .arch import get_preset, instantiate, with_classes
from .data import Dataset, resize, standardize, to_float
from .schedule import Regularization, StageSchedule, plans_for_mode
from .trainer import TrainConfig, Trainer
from .validation import check_images, check_images_labels


class EfficientNetV2Classifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with the package's training loop.

    ``X`` is an (n, c, h, w) array of uint8 or [0, 1] real pixels. With a progressive
    ``schedule_mode`` the image size grows from ``size_min`` to ``image_size`` over
    ``num_stages`` stages while the regularization goes from ``reg_min`` to ``reg_max``.
    """

    def __init__(self, arch: str = "nano", image_size: Optional[int] = None, epochs: float = 5.0,
                 batch_size: int = 32, schedule_mode: str = "fixed", num_stages: int = 4,
                 size_min: Optional[int] = None, reg_min=(0.0, 0.0, 0.0), reg_max=(0.0, 0.0, 0.0),
                 lr_peak: Optional[float] = None, warmup_epochs: float = 1.0, ema_decay: float = 0.9999,
                 use_ema: bool = False, random_state: int = 0):
        self.arch = arch
        self.image_size = image_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.schedule_mode = schedule_mode
        self.num_stages = num_stages
        self.size_min = size_min
        self.reg_min = reg_min
        self.reg_max = reg_max
        self.lr_peak = lr_peak
        self.warmup_epochs = warmup_epochs
        self.ema_decay = ema_decay
        self.use_ema = use_ema
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        labels = self._encoder.transform(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        size = self.image_size or X.shape[-1]
        batch = min(self.batch_size, len(X))
        spe = len(X) // batch
        total = max(1, int(round(self.epochs * spe)))
        cfg = TrainConfig(epochs=self.epochs, batch_size=batch, lr_peak=self.lr_peak,
                          warmup_epochs=self.warmup_epochs, ema_decay=self.ema_decay,
                          schedule_mode=self.schedule_mode, seed=self.random_state)
        sched = StageSchedule(total, min(self.num_stages, total), self.size_min or size, size,
                              Regularization(*self.reg_min), Regularization(*self.reg_max))
        plans = plans_for_mode(self.schedule_mode, sched, spe, self.random_state)
        arch = with_classes(get_preset(self.arch), len(self.classes_))
        if X.shape[1] != arch.in_channels:
            arch = replace(arch, in_channels=X.shape[1])
        self.model_ = instantiate(arch, self.random_state)
        ds = Dataset(X, labels, len(self.classes_))
        trainer = Trainer(self.model_, ds, plans, cfg)
        self.metrics_ = trainer.run()
        self.ema_ = trainer.ema
        self.mean_, self.std_ = trainer.mean, trainer.std
        self.image_size_ = size
        self.n_channels_in_ = X.shape[1]
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.n_channels_in_)
        out = []
        with self.model_.swapped_params(self.ema_ if self.use_ema else {}):
            for lo in range(0, len(X), 256):
                x = to_float(X[lo:lo + 256], T.get_dtype())
                if x.shape[-1] != self.image_size_:
                    x = resize(x, self.image_size_)
                out.append(self.model_(standardize(x, self.mean_, self.std_)).data)
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)))

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self._logits(X), axis=1)]
