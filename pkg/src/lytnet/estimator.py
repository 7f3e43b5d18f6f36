"""scikit-learn style wrapper: ``fit`` trains, ``transform``/``predict`` enhance."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ImagePair
from .losses import LossWeights
from .metrics import psnr
from .model import ModelConfig, model_forward
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .validation import check_image, check_pairs

MIN_SIZE = 16


class LYTNetEnhancer(TransformerMixin, BaseEstimator):
    """Low-light enhancer with the usual estimator interface.

    ``X`` holds low-light images and ``y`` their references, each as an
    ``(N, H, W, 3)`` array or a list of ``(H, W, 3)`` arrays with values in
    [0, 1]. ``transform`` returns enhanced images clamped to [0, 1] in the same
    container type it was given.
    """

    def __init__(self, y_cwd: bool = False, uv_cwd: bool = True, msef: bool = True,
                 epochs: int = 1000, max_steps: int | None = None, batch_size: int = 1,
                 lr_init: float = 2e-4, lr_final: float = 1e-6, crop: int = 256,
                 augment: bool = True, seed: int = 0):
        self.y_cwd = y_cwd
        self.uv_cwd = uv_cwd
        self.msef = msef
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.crop = crop
        self.augment = augment
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig().with_variant(self.y_cwd, self.uv_cwd, self.msef)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, max_steps=self.max_steps, batch_size=self.batch_size,
                           lr_init=self.lr_init, lr_final=self.lr_final, crop=self.crop,
                           augment=self.augment, seed=self.seed)

    def fit(self, X, y):
        lows, highs = check_pairs(X, y, min_size=MIN_SIZE)
        pairs = [ImagePair(a, b, str(i)) for i, (a, b) in enumerate(zip(lows, highs))]
        result = train(self._model_config(), self._train_config(), pairs)
        self.params_ = result.params
        self.state_ = result.state
        self.history_ = result.history
        self.n_features_in_ = 3
        return self

    def _enhance_one(self, img: np.ndarray) -> np.ndarray:
        batch = check_image(img, min_size=MIN_SIZE)
        with no_grad():
            out = model_forward(Tensor(batch), self.params_)
        return np.clip(out.data, 0.0, 1.0)

    def transform(self, X):
        check_is_fitted(self, "params_")
        if isinstance(X, np.ndarray) and X.ndim == 4:
            return np.concatenate([self._enhance_one(x) for x in X])
        if isinstance(X, np.ndarray) and X.ndim == 3:
            return self._enhance_one(X)[0]
        return [self._enhance_one(x)[0] for x in X]

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the enhanced ``X`` against ``y``."""
        lows, highs = check_pairs(X, y, min_size=MIN_SIZE)
        preds = self.transform(lows)
        return float(np.mean([psnr(p, h) for p, h in zip(preds, highs)]))

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, getattr(self, "state_", None),
                        self._train_config(), LossWeights())

    @classmethod
    def from_checkpoint(cls, path) -> "LYTNetEnhancer":
        ck = load_checkpoint(path)
        cfg = ck.params.config
        kwargs = {"y_cwd": cfg.use_y_cwd, "uv_cwd": cfg.use_uv_cwd, "msef": cfg.use_msef}
        if ck.train_config is not None:
            tc = ck.train_config
            kwargs.update(epochs=tc.epochs, max_steps=tc.max_steps, batch_size=tc.batch_size,
                          lr_init=tc.lr_init, lr_final=tc.lr_final, crop=tc.crop,
                          augment=tc.augment, seed=tc.seed)
        est = cls(**kwargs)
        est.params_ = ck.params
        est.state_ = ck.state
        est.history_ = []
        est.n_features_in_ = 3
        return est
