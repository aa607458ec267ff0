"""Loss terms of the dual-agreement co-training objective.

All pixel/batch reductions are means, so loss magnitudes do not scale with
image resolution. Every function accepts torch tensors and is differentiable
wherever the math is; pseudo-label construction is explicitly detached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import (
    PROB_FLOOR,
    binarize_cls,
    argmax_classes,
    check_cls_logits,
    check_index_mask,
    check_label_vector,
    check_prob_map,
    softmax_seg,
)

DICE_EPS = 1e-5


def scalar(value) -> float:
    """Plain-float view of a loss value, grad-safe for tensors."""
    return float(value.detach()) if torch.is_tensor(value) else float(value)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term evaluates to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is non-finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    lambda_cps: float = 5.0
    tau_ict: float = 1.0
    beta_dac: float = 5.0

    def __post_init__(self):
        for name in ("lambda_cps", "tau_ict", "beta_dac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    sup1: float
    sup2: float
    cps: float
    ict: float
    dac_align: float
    dac_conf: float
    total: float

    FIELDS = ("sup1", "sup2", "cps", "ict", "dac_align", "dac_conf", "total")

    @classmethod
    def compute(cls, sup1, sup2, cps, ict, dac_align, dac_conf,
                weights: LossWeights) -> "LossReport":
        total = total_loss(sup1, sup2, cps, ict, dac_align, dac_conf, weights)
        vals = [scalar(v) for v in (sup1, sup2, cps, ict, dac_align, dac_conf, total)]
        return cls(*vals)


def ce_seg(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pixel-wise cross-entropy of a probability map against an index mask."""
    p = check_prob_map(p)
    y = check_index_mask(y, p.shape[1])
    if y.shape != (p.shape[0], p.shape[2], p.shape[3]):
        raise ValueError(f"mask shape {tuple(y.shape)} does not match prob map "
                         f"{tuple(p.shape)}")
    p_true = p.gather(1, y.unsqueeze(1)).squeeze(1)
    return -p_true.clamp(PROB_FLOOR, 1.0).log().mean()


def dice_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss over foreground classes, sums pooled across batch and pixels."""
    p = check_prob_map(p)
    c_seg = p.shape[1]
    if c_seg < 2:
        raise ValueError("dice_loss needs at least one foreground class (C_seg >= 2)")
    y = check_index_mask(y, c_seg)
    if y.shape != (p.shape[0], p.shape[2], p.shape[3]):
        raise ValueError(f"mask shape {tuple(y.shape)} does not match prob map "
                         f"{tuple(p.shape)}")
    y_oh = torch.nn.functional.one_hot(y, c_seg).permute(0, 3, 1, 2).to(p.dtype)
    # background (class 0) excluded from the mean, matching the evaluation metric
    p_fg = p[:, 1:]
    y_fg = y_oh[:, 1:]
    inter = (p_fg * y_fg).sum(dim=(0, 2, 3))
    denom = p_fg.sum(dim=(0, 2, 3)) + y_fg.sum(dim=(0, 2, 3))
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - dice.mean()


def bce_cls(z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Numerically stable binary cross-entropy with logits, mean over batch x labels."""
    z = check_cls_logits(z)
    c = check_label_vector(c).to(z.dtype)
    if z.shape != c.shape:
        raise ValueError(f"logit shape {tuple(z.shape)} does not match labels "
                         f"{tuple(c.shape)}")
    loss = z.clamp_min(0.0) - z * c + torch.log1p(torch.exp(-z.abs()))
    return loss.mean()


CE_CAP = -math.log(PROB_FLOOR)


def _ce_from_logits(seg_logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy with ce_seg's clamp-floor value semantics, from logits.

    The log-softmax path avoids materializing probabilities, so pixels whose
    true-class probability underflows the 1e-8 floor still receive the
    textbook softmax-CE gradient; the reported value stays capped at
    -ln(1e-8), matching ce_seg on the softmax map.
    """
    y = check_index_mask(y, seg_logits.shape[1])
    log_p = torch.log_softmax(seg_logits, dim=1)
    raw = -log_p.gather(1, y.unsqueeze(1)).squeeze(1)
    capped = raw.clamp_max(CE_CAP)
    return (capped.detach() + raw - raw.detach()).mean()


def sup_loss(net_out, y: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Supervised objective: CE + Dice on the mask plus BCE on the labels."""
    seg_logits, cls_logits = net_out
    p = softmax_seg(seg_logits)
    return _ce_from_logits(seg_logits, y) + dice_loss(p, y) + bce_cls(cls_logits, c)


def cps_term(sup_out, src_out, threshold: float = 0.5) -> torch.Tensor:
    """One direction of cross-pseudo supervision.

    ``src_out`` provides hard pseudo-labels (argmax mask, thresholded label
    vector), both gradient-detached; ``sup_out`` is trained against them.
    """
    sup_seg, sup_cls = sup_out
    src_seg, src_cls = src_out
    if sup_seg.shape[0] != src_seg.shape[0]:
        raise ValueError(f"batch size mismatch between networks: "
                         f"{sup_seg.shape[0]} vs {src_seg.shape[0]}")
    pseudo_mask = argmax_classes(softmax_seg(src_seg).detach())
    pseudo_labels = binarize_cls(src_cls.detach(), threshold)
    p = softmax_seg(sup_seg)
    return _ce_from_logits(sup_seg, pseudo_mask) + dice_loss(p, pseudo_mask) \
        + bce_cls(sup_cls, pseudo_labels)


def cps_loss(out1, out2, threshold: float = 0.5) -> torch.Tensor:
    """Cross-pseudo supervision: each network learns from the other's pseudo-labels."""
    return cps_term(out1, out2, threshold) + cps_term(out2, out1, threshold)


def ict_loss(student_on_mixed: torch.Tensor, teacher_i: torch.Tensor,
             teacher_j: torch.Tensor, sigma: float) -> torch.Tensor:
    """Interpolation consistency: student on mixed input vs. mixed teacher maps."""
    if teacher_i.shape != teacher_j.shape or student_on_mixed.shape != teacher_i.shape:
        raise ValueError("student and teacher logit shapes must agree, got "
                         f"{tuple(student_on_mixed.shape)}, {tuple(teacher_i.shape)}, "
                         f"{tuple(teacher_j.shape)}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    student = softmax_seg(student_on_mixed)
    with torch.no_grad():
        target = sigma * softmax_seg(teacher_i.detach()) \
            + (1.0 - sigma) * softmax_seg(teacher_j.detach())
    return ((student - target) ** 2).mean()


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * p.clamp_min(PROB_FLOOR).log()).sum(dim=1)


def dac_loss(p: torch.Tensor, q: torch.Tensor):
    """Dual-agreement consistency: (alignment KL, entropy agreement) pair.

    Returns ``(L_align, L_conf)`` where ``L_align`` is the mean pixel-wise
    KL(p || q) and ``L_conf = H(p) + H(q) - H((p+q)/2)``, natural log
    throughout. Gradients flow into both arguments.
    """
    p = check_prob_map(p, "p")
    q = check_prob_map(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"prob maps must share a shape, got {tuple(p.shape)} vs "
                         f"{tuple(q.shape)}")
    log_p = p.clamp_min(PROB_FLOOR).log()
    log_q = q.clamp_min(PROB_FLOOR).log()
    align = (p * (log_p - log_q)).sum(dim=1).mean()
    conf = (_entropy(p) + _entropy(q) - _entropy((p + q) / 2.0)).mean()
    return align, conf


def total_loss(sup1, sup2, cps, ict, dac_align, dac_conf,
               weights: LossWeights):
    """Weighted total objective; rejects non-finite parts naming the term."""
    parts = {"sup1": sup1, "sup2": sup2, "cps": cps, "ict": ict,
             "dac_align": dac_align, "dac_conf": dac_conf}
    for name, value in parts.items():
        v = scalar(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return (sup1 + sup2) + weights.lambda_cps * cps + weights.tau_ict * ict \
        + weights.beta_dac * (dac_align + dac_conf)
