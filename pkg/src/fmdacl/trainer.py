"""Training orchestration for the dual-agreement co-training objective.

One :class:`Trainer` owns both networks (f1: used for inference, f2: its
co-training partner), the EMA teacher over f2, one decoupled-weight-decay Adam
optimizer per network, and the epoch loop with per-epoch validation and
best-checkpoint selection. Inference (:meth:`Trainer.predict`) touches f1
only.

Checkpoints are single zip archives holding a plain-text ``header.json``
(format version, config snapshot, epoch, metrics, best-so-far) plus one
``.npy`` entry per named parameter/buffer array, optimizer moment, and the
torch RNG state — enough to resume bitwise at any epoch boundary.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import zipfile
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import data as data_mod
from .core import argmax_classes, binarize_cls, mix, softmax_seg
from .losses import LossReport, LossWeights, NonFiniteLossError, cps_loss, dac_loss, \
    ict_loss, scalar, sup_loss, total_loss
from .metrics import MetricAccumulator, MetricsReport
from .models import BackboneSpec, build_network, forward, param_groups
from .teacher import EmaTeacher

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
METRICS_HEADER = ["epoch", "sup1", "sup2", "cps", "ict", "dac_align", "dac_conf",
                  "total", "val_dsc", "val_nsd", "val_f1", "val_score"]
_SIGMA_SLOT = 1 << 20  # RNG slot for the per-step mixing-ratio draw
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed entry timestamp -> byte-stable archives


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_backbone_f1: float = 1e-4
    lr_heads_f1: float = 1e-3
    wd_f1: float = 0.01
    lr_f2: float = 1e-3
    wd_f2: float = 1e-4
    ema_decay: float = 0.99
    seed: int = 0
    batch_labeled: int = 1
    batch_unlabeled: int = 4
    lambda_cps: float = 5.0
    tau_ict: float = 1.0
    beta_dac: float = 5.0
    mixup_sigma: float = 0.5
    sample_sigma: bool = False
    sigma_alpha: float = 1.0
    cosine_lr: bool = False
    rampup_epochs: int = 0
    clip_norm: float = 0.0
    select_by: str = "score"
    nsd_tolerance_px: float = 1.0
    flip_conf_sign: bool = False
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("lr_backbone_f1", "lr_heads_f1", "lr_f2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.select_by not in ("score", "dsc"):
            raise ValueError(f"select_by must be 'score' or 'dsc', got {self.select_by!r}")
        if not 0.0 <= self.mixup_sigma <= 1.0:
            raise ValueError(f"mixup_sigma must lie in [0, 1], got {self.mixup_sigma}")
        for name in ("wd_f1", "wd_f2", "lambda_cps", "tau_ict", "beta_dac",
                     "clip_norm", "nsd_tolerance_px", "sigma_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        self.betas = tuple(self.betas)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cps, self.tau_ict, self.beta_dac)


class Trainer:
    """Owns the two networks, their optimizers, the EMA teacher, and the loop."""

    def __init__(self, config: TrainConfig, f1_spec: BackboneSpec,
                 f2_spec: BackboneSpec, policy: Optional[data_mod.AugmentPolicy] = None):
        if f1_spec.k_cls != f2_spec.k_cls or f1_spec.c_seg != f2_spec.c_seg:
            raise ValueError("f1 and f2 must share c_seg and k_cls")
        self.config = config
        self.f1_spec = f1_spec
        self.f2_spec = f2_spec
        self.policy = policy or data_mod.AugmentPolicy()
        self.f1 = build_network(f1_spec, config.seed)
        self.f2 = build_network(f2_spec, config.seed + 1)
        self.teacher = EmaTeacher(self.f2, config.ema_decay)
        g1 = param_groups(self.f1)
        self.opt1 = torch.optim.AdamW(
            [{"params": g1["backbone"], "lr": config.lr_backbone_f1},
             {"params": g1["heads"], "lr": config.lr_heads_f1}],
            betas=config.betas, eps=config.eps, weight_decay=config.wd_f1)
        self.opt2 = torch.optim.AdamW(
            self.f2.parameters(), lr=config.lr_f2, betas=config.betas,
            eps=config.eps, weight_decay=config.wd_f2)
        for opt in (self.opt1, self.opt2):
            for group in opt.param_groups:
                group["initial_lr"] = group["lr"]
        self.epoch = 0          # completed epochs
        self.best: Optional[dict] = None
        self.history: List[dict] = []

    # ------------------------------------------------------------------
    # Single optimization step

    def _effective_weights(self, epoch: int) -> LossWeights:
        w = self.config.weights()
        if self.config.rampup_epochs > 0:
            s = min(1.0, epoch / self.config.rampup_epochs)
            w = LossWeights(w.lambda_cps * s, w.tau_ict * s, w.beta_dac * s)
        return w

    def _apply_lr_schedule(self, epoch: int) -> None:
        if not self.config.cosine_lr:
            return
        scale = 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.config.epochs))
        for opt in (self.opt1, self.opt2):
            for group in opt.param_groups:
                group["lr"] = group["initial_lr"] * scale

    def train_step(self, x_l: torch.Tensor, y_l: torch.Tensor, c_l: torch.Tensor,
                   x_u: torch.Tensor, sigma: Optional[float] = None,
                   weights: Optional[LossWeights] = None) -> LossReport:
        """One optimization step over a (labeled, unlabeled) batch pair.

        A non-finite loss aborts the step atomically: parameters, optimizer
        moments, normalization buffers, and the torch RNG state are all left
        as they were, and the error identifies the offending term or layer.
        """
        rng_state = torch.random.get_rng_state()
        buffers = [(b, b.detach().clone())
                   for net in (self.f1, self.f2) for b in net.buffers()]
        try:
            return self._train_step_inner(x_l, y_l, c_l, x_u, sigma, weights)
        except (NonFiniteLossError, RuntimeError):
            for b, saved in buffers:
                b.copy_(saved)
            torch.random.set_rng_state(rng_state)
            raise

    def _train_step_inner(self, x_l, y_l, c_l, x_u, sigma, weights) -> LossReport:
        w = weights if weights is not None else self.config.weights()
        sigma = self.config.mixup_sigma if sigma is None else float(sigma)

        out1_l = forward(self.f1, x_l, train_mode=True)
        sup1 = sup_loss(out1_l, y_l, c_l)
        out2_l = forward(self.f2, x_l, train_mode=True)
        sup2 = sup_loss(out2_l, y_l, c_l)

        cps = ict = align = conf = 0.0
        if w.lambda_cps > 0 or w.beta_dac > 0:
            out1_u = forward(self.f1, x_u, train_mode=True)
            out2_u = forward(self.f2, x_u, train_mode=True)
            if w.lambda_cps > 0:
                cps = cps_loss(out1_u, out2_u)
            if w.beta_dac > 0:
                align, conf = dac_loss(softmax_seg(out1_u.seg), softmax_seg(out2_u.seg))
                if self.config.flip_conf_sign:
                    conf = -conf
        if w.tau_ict > 0:
            m = x_u.shape[0] // 2
            if m >= 1:
                xi, xj = x_u[:m], x_u[m:2 * m]
                x_mix = mix(xi, xj, sigma)
                stu = forward(self.f2, x_mix, train_mode=True).seg
                t_i = self.teacher.predict(xi)[0]
                t_j = self.teacher.predict(xj)[0]
                ict = ict_loss(stu, t_i, t_j, sigma)

        total = total_loss(sup1, sup2, cps, ict, align, conf, w)
        report = LossReport(scalar(sup1), scalar(sup2), scalar(cps), scalar(ict),
                            scalar(align), scalar(conf), scalar(total))

        self.opt1.zero_grad(set_to_none=True)
        self.opt2.zero_grad(set_to_none=True)
        total.backward()
        if self.config.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.f1.parameters(), self.config.clip_norm)
            torch.nn.utils.clip_grad_norm_(self.f2.parameters(), self.config.clip_norm)
        self.opt1.step()
        self.opt2.step()
        self.teacher.update(self.f2)
        return report

    # ------------------------------------------------------------------
    # Batch assembly

    def _load_train_batch(self, lab: Sequence[data_mod.SampleRecord],
                          unl: Sequence[data_mod.SampleRecord],
                          epoch: int, step: int):
        cfg = self.config
        imgs, masks, bits = [], [], []
        for slot, rec in enumerate(lab):
            rng = data_mod.sample_rng(cfg.seed, epoch, step, slot)
            img = data_mod.read_image(rec.image_path)
            msk = data_mod.read_mask(rec.mask_path)
            img, msk = data_mod.augment(img, msk, self.policy, rng)
            imgs.append(img)
            masks.append(msk)
            bits.append(rec.labels)
        u_imgs = []
        for slot, rec in enumerate(unl):
            rng = data_mod.sample_rng(cfg.seed, epoch, step, len(lab) + slot)
            img = data_mod.read_image(rec.image_path)
            img, _ = data_mod.augment(img, None, self.policy, rng)
            u_imgs.append(img)
        x_l = torch.from_numpy(np.stack(imgs)[:, None]).float()
        y_l = torch.from_numpy(np.stack(masks)).long()
        c_l = torch.from_numpy(np.stack(bits)).float()
        x_u = torch.from_numpy(np.stack(u_imgs)[:, None]).float()
        return x_l, y_l, c_l, x_u

    def _step_sigma(self, epoch: int, step: int) -> float:
        cfg = self.config
        if not cfg.sample_sigma:
            return cfg.mixup_sigma
        rng = data_mod.sample_rng(cfg.seed, epoch, step, _SIGMA_SLOT)
        return float(rng.beta(cfg.sigma_alpha, cfg.sigma_alpha))

    # ------------------------------------------------------------------
    # Validation & inference (f1 only)

    def _predict_batch(self, x: torch.Tensor):
        with torch.no_grad():
            out = forward(self.f1, x, train_mode=False)
            pred_mask = argmax_classes(softmax_seg(out.seg))
            pred_bits = binarize_cls(out.cls)
        return pred_mask.cpu().numpy(), pred_bits.cpu().numpy().astype(np.int64)

    def validate(self, val_records: Sequence[data_mod.SampleRecord],
                 s_time: float = 0.0) -> MetricsReport:
        """Evaluation-mode f1 predictions scored record-by-record."""
        if not val_records:
            raise ValueError("validation split is empty")
        acc = MetricAccumulator(self.f1_spec.c_seg,
                                tolerance_px=self.config.nsd_tolerance_px)
        size = self.policy.target_size
        for rec in val_records:
            img = data_mod.resize_image(data_mod.read_image(rec.image_path), size)
            gt_mask = data_mod.resize_mask(data_mod.read_mask(rec.mask_path), size)
            x = torch.from_numpy(img[None, None]).float()
            pred_mask, pred_bits = self._predict_batch(x)
            acc.update(pred_mask[0], gt_mask, pred_bits[0], rec.labels, rec.id)
        return acc.report(s_time)

    def predict(self, images) -> Tuple[np.ndarray, np.ndarray]:
        """f1-only inference over a sequence of 2-D grayscale arrays in [0, 1].

        Images whose size differs from the configured target are resized to it
        (with a logged notice); outputs are index masks and binary label rows
        at the target size.
        """
        size = self.policy.target_size
        masks, bits = [], []
        for i, img in enumerate(images):
            arr = np.asarray(img, dtype=np.float32)
            if arr.ndim != 2:
                raise ValueError(f"image {i} must be 2-D, got shape {arr.shape}")
            if arr.shape != tuple(size):
                log.info("image %d has size %s; resizing to configured target %s",
                         i, arr.shape, tuple(size))
                arr = data_mod.resize_image(arr, size)
            m, b = self._predict_batch(torch.from_numpy(arr[None, None]).float())
            masks.append(m[0])
            bits.append(b[0])
        return np.stack(masks), np.stack(bits)

    # ------------------------------------------------------------------
    # Epoch loop

    def fit(self, dataset_root, out_dir, resume_from=None,
            stop_after: Optional[int] = None, progress=None) -> dict:
        """Run the full regimen; returns best-checkpoint info.

        ``resume_from`` restores a checkpoint and continues after its epoch,
        appending to the existing metrics log in ``out_dir``. ``stop_after``
        checkpoints and returns once that many epochs have completed (staged
        runs). ``progress`` is an optional per-epoch callback(row_dict).
        """
        cfg = self.config
        records = data_mod.load_manifest(dataset_root)
        val_records = [r for r in records if r.split == "val"]
        if not val_records:
            raise ValueError("dataset has no validation split")
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")

        if resume_from is not None:
            self.load_checkpoint_state(resume_from)
            if not os.path.isfile(csv_path):
                raise FileNotFoundError(f"resume expects an existing metrics log "
                                        f"at {csv_path}")
        else:
            torch.random.manual_seed(cfg.seed)
            with open(csv_path, "w", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

        last_epoch = min(cfg.epochs, stop_after) if stop_after else cfg.epochs
        for epoch in range(self.epoch + 1, last_epoch + 1):
            self._apply_lr_schedule(epoch)
            w = self._effective_weights(epoch)
            sums = {k: 0.0 for k in LossReport.FIELDS}
            n_ok = 0
            for step, (lab, unl) in enumerate(data_mod.make_batches(
                    records, cfg.batch_labeled, cfg.batch_unlabeled, cfg.seed, epoch)):
                x_l, y_l, c_l, x_u = self._load_train_batch(lab, unl, epoch, step)
                sigma = self._step_sigma(epoch, step)
                try:
                    report = self.train_step(x_l, y_l, c_l, x_u, sigma, w)
                except (NonFiniteLossError, RuntimeError) as e:
                    log.warning("epoch %d step %d skipped: %s", epoch, step, e)
                    continue
                n_ok += 1
                for k in LossReport.FIELDS:
                    sums[k] += getattr(report, k)
            means = {k: (sums[k] / n_ok if n_ok else math.nan)
                     for k in LossReport.FIELDS}
            rep = self.validate(val_records)
            self.epoch = epoch
            row = {"epoch": epoch, **means, "val_dsc": rep.dsc, "val_nsd": rep.nsd,
                   "val_f1": rep.f1, "val_score": rep.score, "steps_run": n_ok}
            self.history.append(row)
            with open(csv_path, "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [epoch] + [repr(means[k]) for k in LossReport.FIELDS]
                    + [repr(rep.dsc), repr(rep.nsd), repr(rep.f1), repr(rep.score)])
            selection = rep.score if cfg.select_by == "score" else rep.dsc
            if self.best is None or selection > self.best["selection"]:
                self.best = {"epoch": epoch, "selection": selection,
                             "score": rep.score, "dsc": rep.dsc, "nsd": rep.nsd,
                             "f1": rep.f1, "s_time": rep.s_time}
                self.save_checkpoint(os.path.join(out_dir, "best.ckpt"), rep)
            self.save_checkpoint(os.path.join(out_dir, "last.ckpt"), rep)
            if progress is not None:
                progress(row)
        return {"best": dict(self.best) if self.best else None,
                "best_path": os.path.join(out_dir, "best.ckpt"),
                "last_path": os.path.join(out_dir, "last.ckpt"),
                "epochs_run": self.epoch, "history": list(self.history)}

    # ------------------------------------------------------------------
    # Checkpoint archive

    def _config_snapshot(self) -> dict:
        return {"format_version": CHECKPOINT_FORMAT_VERSION,
                "train_config": _jsonable(asdict(self.config)),
                "f1_spec": asdict(self.f1_spec),
                "f2_spec": asdict(self.f2_spec),
                "policy": _jsonable(asdict(self.policy))}

    def save_checkpoint(self, path, val_metrics: Optional[MetricsReport] = None) -> None:
        header = self._config_snapshot()
        header["epoch"] = self.epoch
        header["ema_step"] = self.teacher.step
        header["best"] = dict(self.best) if self.best else None
        if val_metrics is not None:
            header["val_metrics"] = {
                "dsc": val_metrics.dsc, "nsd": val_metrics.nsd,
                "f1": val_metrics.f1, "s_time": val_metrics.s_time,
                "score": val_metrics.score}
        arrays = {}
        for prefix, state in (("f1", self.f1.state_dict()),
                              ("f2", self.f2.state_dict()),
                              ("ema", self.teacher.state_dict())):
            for name, t in state.items():
                arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
        for prefix, opt, net in (("opt_f1", self.opt1, self.f1),
                                 ("opt_f2", self.opt2, self.f2)):
            for name, arr in _optimizer_arrays(opt, net).items():
                arrays[f"{prefix}/{name}"] = arr
        arrays["rng/torch_state"] = torch.random.get_rng_state().numpy()
        _write_archive(path, header, arrays)

    def load_checkpoint_state(self, path) -> dict:
        """Restore parameters, moments, EMA, RNG, epoch, and best-so-far."""
        header, arrays = read_checkpoint(path)
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version "
                             f"{header.get('format_version')!r}")
        for prefix, target in (("f1", self.f1), ("f2", self.f2),
                               ("ema", self.teacher.model)):
            state = {}
            for key, arr in arrays.items():
                if key.startswith(prefix + "/"):
                    name = key[len(prefix) + 1:]
                    ref = target.state_dict()[name]
                    state[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
            target.load_state_dict(state)
        _load_optimizer_arrays(self.opt1, self.f1, arrays, "opt_f1")
        _load_optimizer_arrays(self.opt2, self.f2, arrays, "opt_f2")
        torch.random.set_rng_state(torch.from_numpy(
            np.array(arrays["rng/torch_state"])).to(torch.uint8))
        self.epoch = int(header["epoch"])
        self.teacher.step = int(header.get("ema_step", 0))
        self.best = header.get("best")
        return header

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        """Reconstruct a trainer (networks, optimizers, EMA, RNG) from an archive."""
        header, _ = read_checkpoint(path)
        tc = dict(header["train_config"])
        tc["betas"] = tuple(tc["betas"])
        config = TrainConfig(**tc)
        f1_spec = BackboneSpec(**header["f1_spec"])
        f2_spec = BackboneSpec(**header["f2_spec"])
        pol = dict(header["policy"])
        pol["target_size"] = tuple(pol["target_size"])
        trainer = cls(config, f1_spec, f2_spec, data_mod.AugmentPolicy(**pol))
        trainer.load_checkpoint_state(path)
        return trainer


# ---------------------------------------------------------------------------
# Archive helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _write_archive(path, header: dict, arrays: dict) -> None:
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED, compresslevel=6) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_ZIP_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(header, indent=1, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            entry = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_ZIP_EPOCH)
            entry.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(entry, buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> Tuple[dict, dict]:
    """Read a checkpoint archive -> (header dict, {array name: ndarray})."""
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        with zf.open("header.json") as fh:
            header = json.load(fh)
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(fh.read()))
    return header, arrays


def _optimizer_arrays(opt: torch.optim.Optimizer, net: torch.nn.Module) -> dict:
    name_of = {id(p): n for n, p in net.named_parameters()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if not state:
                continue
            name = name_of[id(p)]
            step = state["step"]
            out[f"{name}.step"] = (step.detach().cpu().numpy()
                                   if torch.is_tensor(step)
                                   else np.asarray(float(step), dtype=np.float32))
            out[f"{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            out[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
    return out


def _load_optimizer_arrays(opt, net, arrays: dict, prefix: str) -> None:
    by_name = dict(net.named_parameters())
    entries = {}
    for key, arr in arrays.items():
        if not key.startswith(prefix + "/"):
            continue
        name, kind = key[len(prefix) + 1:].rsplit(".", 1)
        entries.setdefault(name, {})[kind] = arr
    for name, parts in entries.items():
        if name not in by_name:
            raise KeyError(f"checkpoint optimizer state for unknown parameter '{name}'")
        p = by_name[name]
        opt.state[p] = {
            "step": torch.from_numpy(np.array(parts["step"])),
            "exp_avg": torch.from_numpy(np.array(parts["exp_avg"])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(parts["exp_avg_sq"])).to(p.dtype),
        }


def fit(config: TrainConfig, f1_spec: BackboneSpec, f2_spec: BackboneSpec,
        dataset_root, out_dir, policy=None, **kwargs) -> dict:
    """Convenience wrapper: build a Trainer and run the full regimen."""
    return Trainer(config, f1_spec, f2_spec, policy).fit(dataset_root, out_dir, **kwargs)
