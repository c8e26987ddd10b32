"""Scikit-learn style wrapper around the functional model API."""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .context import CATEGORIES, stage_rng, stack_examples
from .model import (
    ModelConfig, ShapeError, init_params, load_checkpoint, loss_and_grad, predict, save_checkpoint,
    train,
)
from .pose import FEATURES_PER_FRAME
from .validation import check_batch

_SCHEDULES = ("cosine", "constant")


class StylePosePredictor(BaseEstimator):
    """Predict a canonical future window from history, game context and style refs.

    ``X`` is a batch dict (see :func:`beatpose.context.stack_examples`) or a
    list of ``TrainingExample``. ``y`` optionally overrides ``X["future"]``.
    """

    def __init__(self, d_z=32, width=64, lr=1e-2, momentum=0.9, lambda_match=0.1,
                 batch_size=16, n_steps=1000, lr_schedule="cosine", random_state=0):
        self.d_z = d_z
        self.width = width
        self.lr = lr
        self.momentum = momentum
        self.lambda_match = lambda_match
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def _validate_hyperparams(self):
        for name in ("d_z", "width", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if int(self.n_steps) < 0:
            raise ValueError("n_steps must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.lambda_match >= 0:
            raise ValueError("lambda_match must be >= 0")
        if self.lr_schedule not in _SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {_SCHEDULES}")

    @staticmethod
    def _as_batch(X, y=None, require_future=True):
        if isinstance(X, (list, tuple)):
            X = stack_examples(X)
        batch = dict(X)
        if y is not None:
            batch["future"] = y
        return check_batch(batch, require_future=require_future)

    def _config_for(self, batch):
        return ModelConfig(
            d_z=int(self.d_z), width=int(self.width),
            h=batch["history"].shape[1] - 1,
            T=batch["refs"].shape[2],
            n=batch["notes"].shape[1],
            n_ref=batch["refs"].shape[1],
        )

    def fit(self, X, y=None, callback=None):
        self._validate_hyperparams()
        batch = self._as_batch(X, y)
        cfg = self._config_for(batch)
        if batch["future"].shape[1] != cfg.T:
            raise ShapeError("future and style reference windows must have the same length")
        seed = int(self.random_state)
        params = init_params(cfg, stage_rng(seed, "init"))
        self.initial_params_ = {k: v.copy() for k, v in params.items()}
        params, _, history = train(
            params, batch, int(self.n_steps), float(self.lr), stage_rng(seed, "train"),
            batch_size=int(self.batch_size), lambda_match=float(self.lambda_match),
            momentum=float(self.momentum), schedule=self.lr_schedule, callback=callback,
        )
        self.params_ = params
        self.config_ = cfg
        self.loss_history_ = history
        self.n_steps_ = len(history)
        return self

    def predict(self, X):
        """Canonical future features, shape (batch, T, 27)."""
        check_is_fitted(self, "params_")
        batch = self._as_batch(X, require_future=False)
        self._check_compatible(batch)
        return predict(self.params_, batch)

    def score(self, X, y=None):
        """Negative mean reconstruction loss (higher is better)."""
        check_is_fitted(self, "params_")
        batch = self._as_batch(X, y)
        self._check_compatible(batch)
        breakdown, _ = loss_and_grad(self.params_, batch, float(self.lambda_match), need_grad=False)
        return -breakdown.recon

    def _check_compatible(self, batch):
        cfg = self.config_
        want = {"history": (cfg.h + 1, FEATURES_PER_FRAME), "refs": (cfg.n_ref, cfg.T, FEATURES_PER_FRAME)}
        for cat in CATEGORIES:
            want[cat] = (cfg.n, batch[cat].shape[2])
        for key, shape in want.items():
            if batch[key].shape[1:] != shape:
                raise ShapeError(f"{key}: fitted for {shape}, got {batch[key].shape[1:]}")

    def save(self, path) -> bytes:
        check_is_fitted(self, "params_")
        return save_checkpoint(path, self.params_, self.config_)

    @classmethod
    def from_checkpoint(cls, path, **kwargs):
        cfg, params = load_checkpoint(path)
        est = cls(d_z=cfg.d_z, width=cfg.width, **kwargs)
        est.params_ = params
        est.config_ = cfg
        est.loss_history_ = []
        est.n_steps_ = 0
        return est
