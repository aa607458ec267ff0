"""Shared array vocabulary and elementary transforms.

Tensor conventions used throughout the package:

* seg logits / prob maps: float ``[B, C_seg, H, W]``
* index masks: integer ``[B, H, W]`` with values in ``{0..C_seg-1}`` (0 = background)
* cls logits / label vectors: ``[B, K]`` (K = 7 by default)
* image batches: float ``[B, 1, H, W]`` with intensities in ``[0, 1]``
"""

from __future__ import annotations

import math

import torch

PROB_SUM_TOL = 1e-5
PROB_FLOOR = 1e-8


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Convert array-likes to a torch tensor without copying tensors."""
    t = torch.as_tensor(x)
    if dtype is not None and t.dtype != dtype:
        t = t.to(dtype)
    return t


def _first_nonfinite_batch(t: torch.Tensor) -> int:
    finite = torch.isfinite(t).reshape(t.shape[0], -1).all(dim=1)
    return int((~finite).nonzero()[0, 0])


def check_seg_logits(logits: torch.Tensor, name: str = "seg logits") -> torch.Tensor:
    logits = as_tensor(logits)
    if logits.ndim != 4:
        raise ValueError(f"{name} must be [B, C, H, W], got shape {tuple(logits.shape)}")
    if min(logits.shape) <= 0:
        raise ValueError(f"{name} has an empty dimension: {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        b = _first_nonfinite_batch(logits)
        raise ValueError(f"non-finite values in {name}, first offending batch index {b}")
    return logits


def check_prob_map(p: torch.Tensor, name: str = "prob map") -> torch.Tensor:
    p = check_seg_logits(p, name)
    with torch.no_grad():
        if float(p.min()) < 0.0 or float(p.max()) > 1.0 + PROB_SUM_TOL:
            raise ValueError(f"{name} entries must lie in [0, 1]")
        err = float((p.sum(dim=1) - 1.0).abs().max())
    if err > PROB_SUM_TOL:
        raise ValueError(f"{name} pixel distributions must sum to 1 (max error {err:.3g})")
    return p


def check_index_mask(y: torch.Tensor, c_seg: int, name: str = "index mask") -> torch.Tensor:
    y = as_tensor(y)
    if y.ndim != 3:
        raise ValueError(f"{name} must be [B, H, W], got shape {tuple(y.shape)}")
    if not (y.dtype in (torch.int64, torch.int32, torch.uint8, torch.int16)):
        raise ValueError(f"{name} must be an integer tensor, got {y.dtype}")
    y = y.long()
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= c_seg):
        raise ValueError(f"{name} values must lie in [0, {c_seg - 1}], got range "
                         f"[{int(y.min())}, {int(y.max())}]")
    return y


def check_cls_logits(z: torch.Tensor, name: str = "cls logits") -> torch.Tensor:
    z = as_tensor(z)
    if z.ndim != 2:
        raise ValueError(f"{name} must be [B, K], got shape {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        b = _first_nonfinite_batch(z)
        raise ValueError(f"non-finite values in {name}, first offending batch index {b}")
    return z


def check_label_vector(c: torch.Tensor, name: str = "label vector") -> torch.Tensor:
    c = as_tensor(c)
    if c.ndim != 2:
        raise ValueError(f"{name} must be [B, K], got shape {tuple(c.shape)}")
    vals = torch.unique(c.float())
    if not bool(((vals == 0) | (vals == 1)).all()):
        raise ValueError(f"{name} entries must be binary")
    return c


def check_image_batch(x: torch.Tensor, name: str = "image batch") -> torch.Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"{name} must be [B, 1, H, W], got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        b = _first_nonfinite_batch(x)
        raise ValueError(f"non-finite values in {name}, first offending batch index {b}")
    with torch.no_grad():
        lo, hi = float(x.min()), float(x.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return x


def softmax_seg(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class axis, stabilized by max subtraction."""
    logits = check_seg_logits(logits)
    shifted = logits - logits.max(dim=1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=1, keepdim=True)


def argmax_classes(p: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax with lowest-index tie-break, detached from gradients."""
    p = p.detach()
    c = p.shape[1]
    top = p.max(dim=1, keepdim=True).values
    idx = torch.arange(c, device=p.device).view(1, c, 1, 1)
    # min over the indices attaining the max -> lowest index wins on ties
    candidates = torch.where(p == top, idx, torch.full_like(idx, c).expand_as(p))
    return candidates.min(dim=1).values.long()


def one_hot_argmax(p: torch.Tensor) -> torch.Tensor:
    p = check_prob_map(p)
    idx = argmax_classes(p)
    out = torch.zeros_like(p, memory_format=torch.contiguous_format)
    out.scatter_(1, idx.unsqueeze(1), 1.0)
    return out.detach()


def binarize_cls(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Threshold sigmoid activations into a binary label vector.

    Compared in logit space (z >= log(t/(1-t))), which is exactly
    sigmoid(z) >= t without the float rounding that bites at inputs sitting
    precisely on the threshold.
    """
    logits = check_cls_logits(logits)
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    cut = math.log(threshold / (1.0 - threshold))
    return (logits.detach() >= cut).to(logits.dtype)


def mix(xi: torch.Tensor, xj: torch.Tensor, sigma: float) -> torch.Tensor:
    """Convex combination sigma*xi + (1-sigma)*xj (mixup with fixed ratio)."""
    xi = as_tensor(xi)
    xj = as_tensor(xj)
    if xi.shape != xj.shape:
        raise ValueError(f"mix operands must share a shape, got {tuple(xi.shape)} "
                         f"vs {tuple(xj.shape)}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    if sigma == 1.0:
        return xi.clone()
    if sigma == 0.0:
        return xj.clone()
    return sigma * xi + (1.0 - sigma) * xj
