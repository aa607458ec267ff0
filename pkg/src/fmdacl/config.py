"""Flat, typed run-configuration documents.

Format: one ``section.key=value`` assignment per line; ``#`` starts a comment;
blank lines are ignored. Unknown keys are rejected by key path, every value is
schema-checked, and the fully resolved document (defaults applied) can be
echoed back as text. The ``FMDACL_SEED`` environment variable, when set,
overrides ``train.seed``.
"""

from __future__ import annotations

import os
from typing import Dict, Optional

from .data import AugmentPolicy
from .models import BackboneSpec
from .trainer import TrainConfig

SEED_ENV_VAR = "FMDACL_SEED"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# key path -> (coercion, default)
SCHEMA: Dict[str, tuple] = {
    "data.root": (str, ""),
    "run.out": (str, ""),
    "train.epochs": (int, 300),
    "train.lr_backbone_f1": (float, 1e-4),
    "train.lr_heads_f1": (float, 1e-3),
    "train.wd_f1": (float, 0.01),
    "train.lr_f2": (float, 1e-3),
    "train.wd_f2": (float, 1e-4),
    "train.ema_decay": (float, 0.99),
    "train.seed": (int, 0),
    "train.batch_labeled": (int, 1),
    "train.batch_unlabeled": (int, 4),
    "train.mixup_sigma": (float, 0.5),
    "train.sample_sigma": (_bool, False),
    "train.sigma_alpha": (float, 1.0),
    "train.cosine_lr": (_bool, False),
    "train.rampup_epochs": (int, 0),
    "train.clip_norm": (float, 0.0),
    "train.select_by": (str, "score"),
    "train.flip_conf_sign": (_bool, False),
    "loss.lambda_cps": (float, 5.0),
    "loss.tau_ict": (float, 1.0),
    "loss.beta_dac": (float, 5.0),
    "eval.nsd_tolerance_px": (float, 1.0),
    "aug.hflip_prob": (float, 0.5),
    "aug.max_rotate_deg": (float, 20.0),
    "aug.target_size": (int, 256),
    "model.c_seg": (int, 15),
    "model.k_cls": (int, 7),
    "model.f1.kind": (str, "patch_attention"),
    "model.f1.width": (int, 24),
    "model.f1.depth": (int, 3),
    "model.f1.patch": (int, 8),
    "model.f1.dropout": (float, 0.1),
    "model.f2.kind": (str, "conv_unet"),
    "model.f2.width": (int, 16),
    "model.f2.depth": (int, 3),
    "model.f2.patch": (int, 8),
    "model.f2.dropout": (float, 0.0),
}


def parse_assignments(lines, source: str = "<config>") -> Dict[str, str]:
    """``key=value`` lines -> raw string dict; unknown keys rejected by path."""
    raw: Dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{source}:{n}: expected key=value, got {line.strip()!r}")
        key, value = text.split("=", 1)
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ValueError(f"{source}:{n}: unknown config key '{key}'")
        if key in raw:
            raise ValueError(f"{source}:{n}: duplicate config key '{key}'")
        raw[key] = value
    return raw


def resolve_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None,
                   env: Optional[dict] = None) -> dict:
    """Load + validate a config file, apply overrides, fill every default.

    ``overrides`` maps key paths to raw string values (e.g. from repeated
    ``--set`` flags) and passes through the same schema. ``FMDACL_SEED`` in the
    environment wins over both.
    """
    raw: Dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw.update(parse_assignments(fh, source=str(path)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ValueError(f"unknown config key '{key}'")
        raw[key] = value

    env = os.environ if env is None else env
    if env.get(SEED_ENV_VAR):
        raw["train.seed"] = env[SEED_ENV_VAR]

    resolved = {}
    for key, (coerce, default) in SCHEMA.items():
        if key in raw:
            try:
                resolved[key] = coerce(raw[key])
            except ValueError as e:
                raise ValueError(f"config key '{key}': {e}") from e
        else:
            resolved[key] = default
    return resolved


def format_config(cfg: dict) -> str:
    """Render a resolved config as a canonical, diff-friendly document."""
    lines = [f"{key}={cfg[key]}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def to_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        lr_backbone_f1=cfg["train.lr_backbone_f1"],
        lr_heads_f1=cfg["train.lr_heads_f1"],
        wd_f1=cfg["train.wd_f1"],
        lr_f2=cfg["train.lr_f2"],
        wd_f2=cfg["train.wd_f2"],
        ema_decay=cfg["train.ema_decay"],
        seed=cfg["train.seed"],
        batch_labeled=cfg["train.batch_labeled"],
        batch_unlabeled=cfg["train.batch_unlabeled"],
        lambda_cps=cfg["loss.lambda_cps"],
        tau_ict=cfg["loss.tau_ict"],
        beta_dac=cfg["loss.beta_dac"],
        mixup_sigma=cfg["train.mixup_sigma"],
        sample_sigma=cfg["train.sample_sigma"],
        sigma_alpha=cfg["train.sigma_alpha"],
        cosine_lr=cfg["train.cosine_lr"],
        rampup_epochs=cfg["train.rampup_epochs"],
        clip_norm=cfg["train.clip_norm"],
        select_by=cfg["train.select_by"],
        nsd_tolerance_px=cfg["eval.nsd_tolerance_px"],
        flip_conf_sign=cfg["train.flip_conf_sign"],
    )


def to_backbone_spec(cfg: dict, role: str) -> BackboneSpec:
    if role not in ("f1", "f2"):
        raise ValueError(f"role must be 'f1' or 'f2', got {role!r}")
    return BackboneSpec(
        kind=cfg[f"model.{role}.kind"],
        width=cfg[f"model.{role}.width"],
        depth=cfg[f"model.{role}.depth"],
        c_seg=cfg["model.c_seg"],
        k_cls=cfg["model.k_cls"],
        patch=cfg[f"model.{role}.patch"],
        dropout=cfg[f"model.{role}.dropout"],
    )


def to_policy(cfg: dict) -> AugmentPolicy:
    size = cfg["aug.target_size"]
    return AugmentPolicy(hflip_prob=cfg["aug.hflip_prob"],
                         max_rotate_deg=cfg["aug.max_rotate_deg"],
                         target_size=(size, size))
