"""Scikit-learn style wrapper around training, prediction and evaluation."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_samples
from .config import LossWeights, ModelConfig, RunConfig
from .pipeline import Prediction, evaluate_predictions, predict_samples
from .training import CHECKPOINT_VERSION, Trainer, load_checkpoint, model_from_checkpoint


class GazeObjectPredictor(BaseEstimator):
    """Joint detector and gaze-heatmap model.

    ``X`` is a sequence of :class:`~gazeobj.data.Sample`; labels live on the
    samples, so ``y`` is accepted only for API compatibility and ignored.

    Attributes set by :meth:`fit`: ``model_``, ``config_``, ``history_``.
    """

    def __init__(self, model_config: Optional[dict] = None, lr: float = 1e-3,
                 batch_size: int = 4, max_steps: Optional[int] = 2000, epochs: int = 20,
                 sigma: float = 3.0, weight_det: float = 1.0, weight_gaze: float = 1.0,
                 weight_eng: float = 1.0, augment: bool = False, seed: int = 0,
                 conf_threshold: float = 0.05, nms_threshold: float = 0.3, top_k: int = 100):
        self.model_config = model_config
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.epochs = epochs
        self.sigma = sigma
        self.weight_det = weight_det
        self.weight_gaze = weight_gaze
        self.weight_eng = weight_eng
        self.augment = augment
        self.seed = seed
        self.conf_threshold = conf_threshold
        self.nms_threshold = nms_threshold
        self.top_k = top_k

    def _run_config(self) -> RunConfig:
        return RunConfig(model=ModelConfig(**(self.model_config or {})),
                         weights=LossWeights(self.weight_det, self.weight_gaze, self.weight_eng),
                         lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                         max_steps=self.max_steps, sigma=self.sigma, seed=self.seed,
                         augment=self.augment, conf_threshold=self.conf_threshold,
                         nms_threshold=self.nms_threshold, top_k=self.top_k)

    def fit(self, X, y=None, log_fn=None) -> "GazeObjectPredictor":
        cfg = self._run_config()
        samples = check_samples(X, cfg.model.image_size)
        trainer = Trainer(cfg, samples, log_fn).fit()
        self.config_ = cfg
        self.model_ = trainer.model.eval()
        self.history_ = trainer.history
        return self

    def _predict(self, X) -> list[Prediction]:
        check_is_fitted(self, "model_")
        samples = check_samples(X, self.config_.model.image_size, require_labels=False)
        return predict_samples(self.model_, samples, conf_threshold=self.conf_threshold,
                               nms_threshold=self.nms_threshold, top_k=self.top_k)

    def predict(self, X) -> list:
        """Selected gaze object per sample (``None`` when nothing was detected)."""
        return [p.gaze_object for p in self._predict(X)]

    def predict_heatmap(self, X) -> np.ndarray:
        return np.stack([p.heatmap for p in self._predict(X)])

    def predict_full(self, X) -> list[Prediction]:
        return self._predict(X)

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        samples = check_samples(X, self.config_.model.image_size)
        return evaluate_predictions(samples, self._predict(samples), self.sigma)

    def score(self, X, y=None) -> float:
        """Mean wUoC between selected and annotated gaze objects."""
        return self.evaluate(X).wuoc_mean

    def save(self, path) -> Path:
        import torch

        check_is_fitted(self, "model_")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format_version": CHECKPOINT_VERSION, "config": self.config_.to_dict(),
                    "params": self.model_.state_dict(), "optimizer": None,
                    "step": len(self.history_), "epoch": None, "history": self.history_}, path)
        return path

    @classmethod
    def load(cls, path) -> "GazeObjectPredictor":
        ckpt = load_checkpoint(path)
        model, cfg = model_from_checkpoint(ckpt)
        est = cls(model_config=asdict(cfg.model), lr=cfg.lr, batch_size=cfg.batch_size,
                  max_steps=cfg.max_steps, epochs=cfg.epochs, sigma=cfg.sigma,
                  weight_det=cfg.weights.det, weight_gaze=cfg.weights.gaze,
                  weight_eng=cfg.weights.eng, augment=cfg.augment, seed=cfg.seed,
                  conf_threshold=cfg.conf_threshold, nms_threshold=cfg.nms_threshold,
                  top_k=cfg.top_k)
        est.config_, est.model_, est.history_ = cfg, model, list(ckpt["history"])
        return est
