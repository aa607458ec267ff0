"""Estimator-style facade over the training pipeline.

:class:`DualAgreementCoTrainer` exposes the whole co-training regimen through
the familiar get_params/fit/predict surface: flat constructor hyperparameters,
``fit(dataset_root)`` returning ``self`` with trailing-underscore attributes,
and f1-only ``predict``. It is a thin wrapper; the full API lives in the
trainer/config modules.
"""

from __future__ import annotations

import tempfile
from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from . import data as data_mod
from .data import AugmentPolicy
from .metrics import MetricAccumulator, MetricsReport
from .models import BackboneSpec
from .trainer import TrainConfig, Trainer


class DualAgreementCoTrainer(BaseEstimator):
    """Semi-supervised dual-network co-trainer with an estimator interface.

    Parameters mirror the flat config keys; see the config module for the
    authoritative schema and defaults.
    """

    def __init__(self, epochs: int = 300, lr_backbone_f1: float = 1e-4,
                 lr_heads_f1: float = 1e-3, wd_f1: float = 0.01,
                 lr_f2: float = 1e-3, wd_f2: float = 1e-4,
                 ema_decay: float = 0.99, seed: int = 0,
                 batch_labeled: int = 1, batch_unlabeled: int = 4,
                 lambda_cps: float = 5.0, tau_ict: float = 1.0,
                 beta_dac: float = 5.0, mixup_sigma: float = 0.5,
                 select_by: str = "score", nsd_tolerance_px: float = 1.0,
                 c_seg: int = 15, k_cls: int = 7,
                 f1_kind: str = "patch_attention", f1_width: int = 24,
                 f1_depth: int = 3, f1_patch: int = 8, f1_dropout: float = 0.1,
                 f2_kind: str = "conv_unet", f2_width: int = 16,
                 f2_depth: int = 3, f2_dropout: float = 0.0,
                 target_size: int = 256, hflip_prob: float = 0.5,
                 max_rotate_deg: float = 20.0, run_dir: Optional[str] = None):
        self.epochs = epochs
        self.lr_backbone_f1 = lr_backbone_f1
        self.lr_heads_f1 = lr_heads_f1
        self.wd_f1 = wd_f1
        self.lr_f2 = lr_f2
        self.wd_f2 = wd_f2
        self.ema_decay = ema_decay
        self.seed = seed
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.lambda_cps = lambda_cps
        self.tau_ict = tau_ict
        self.beta_dac = beta_dac
        self.mixup_sigma = mixup_sigma
        self.select_by = select_by
        self.nsd_tolerance_px = nsd_tolerance_px
        self.c_seg = c_seg
        self.k_cls = k_cls
        self.f1_kind = f1_kind
        self.f1_width = f1_width
        self.f1_depth = f1_depth
        self.f1_patch = f1_patch
        self.f1_dropout = f1_dropout
        self.f2_kind = f2_kind
        self.f2_width = f2_width
        self.f2_depth = f2_depth
        self.f2_dropout = f2_dropout
        self.target_size = target_size
        self.hflip_prob = hflip_prob
        self.max_rotate_deg = max_rotate_deg
        self.run_dir = run_dir

    # ------------------------------------------------------------------

    def _build(self) -> Trainer:
        config = TrainConfig(
            epochs=self.epochs, lr_backbone_f1=self.lr_backbone_f1,
            lr_heads_f1=self.lr_heads_f1, wd_f1=self.wd_f1, lr_f2=self.lr_f2,
            wd_f2=self.wd_f2, ema_decay=self.ema_decay, seed=self.seed,
            batch_labeled=self.batch_labeled, batch_unlabeled=self.batch_unlabeled,
            lambda_cps=self.lambda_cps, tau_ict=self.tau_ict,
            beta_dac=self.beta_dac, mixup_sigma=self.mixup_sigma,
            select_by=self.select_by, nsd_tolerance_px=self.nsd_tolerance_px)
        f1 = BackboneSpec(self.f1_kind, self.f1_width, self.f1_depth,
                          self.c_seg, self.k_cls, self.f1_patch, self.f1_dropout)
        f2 = BackboneSpec(self.f2_kind, self.f2_width, self.f2_depth,
                          self.c_seg, self.k_cls, dropout=self.f2_dropout)
        policy = AugmentPolicy(self.hflip_prob, self.max_rotate_deg,
                               (self.target_size, self.target_size))
        return Trainer(config, f1, f2, policy)

    def fit(self, X, y=None) -> "DualAgreementCoTrainer":
        """Train on the dataset rooted at path ``X``; returns self.

        Sets ``trainer_``, ``run_dir_``, ``best_checkpoint_``, ``best_score_``,
        and ``history_``.
        """
        run_dir = self.run_dir or tempfile.mkdtemp(prefix="run_")
        trainer = self._build()
        result = trainer.fit(X, run_dir)
        self.trainer_ = trainer
        self.run_dir_ = run_dir
        self.best_checkpoint_ = result["best_path"]
        self.best_score_ = result["best"]["score"]
        self.history_ = result["history"]
        return self

    def _fitted(self) -> Trainer:
        if not hasattr(self, "trainer_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
        return self.trainer_

    def predict(self, X) -> Tuple[np.ndarray, np.ndarray]:
        """Index masks and binary label vectors for a sequence of 2-D images."""
        return self._fitted().predict(X)

    def evaluate(self, dataset_root, split: str = "test",
                 s_time: float = 0.0) -> MetricsReport:
        """Score the fitted model on one split of a dataset on disk."""
        trainer = self._fitted()
        records = [r for r in data_mod.load_manifest(dataset_root)
                   if r.split == split]
        if not records:
            raise ValueError(f"no records with split '{split}' under {dataset_root}")
        acc = MetricAccumulator(trainer.f1_spec.c_seg,
                                tolerance_px=self.nsd_tolerance_px)
        size = trainer.policy.target_size
        for rec in records:
            img = data_mod.resize_image(data_mod.read_image(rec.image_path), size)
            gt = data_mod.resize_mask(data_mod.read_mask(rec.mask_path), size)
            masks, bits = trainer.predict([img])
            acc.update(masks[0], gt, bits[0], rec.labels, rec.id)
        return acc.report(s_time)

    def score(self, X, y=None) -> float:
        """Overall challenge score (percent) on the test split of dataset ``X``."""
        return self.evaluate(X, split="test").score
