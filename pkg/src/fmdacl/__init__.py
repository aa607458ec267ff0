"""FM-DACL: semi-supervised dual-agreement co-training for joint pixel-wise
segmentation and multi-label classification of single grayscale images.

Two heterogeneous networks (a patch-attention encoder f1 used at inference,
and a convolutional U-Net f2) train each other through cross-pseudo
supervision, interpolation consistency against an EMA teacher, and a
dual-agreement consistency regularizer, on top of a small labeled set.
"""

from .core import (argmax_classes, binarize_cls, mix, one_hot_argmax, softmax_seg)
from .data import (AugmentPolicy, SampleRecord, augment, gen_synthetic,
                   label_bits_from_mask, load_manifest, make_batches, plan_epoch)
from .estimator import DualAgreementCoTrainer
from .losses import (LossReport, LossWeights, NonFiniteLossError, bce_cls,
                     ce_seg, cps_loss, cps_term, dac_loss, dice_loss, ict_loss,
                     sup_loss, total_loss)
from .metrics import (MetricAccumulator, MetricsReport, dice_metric, f1_metric,
                      nsd_metric, overall_score)
from .models import (BackboneSpec, ConvUNet, DualHeadOutput, PatchAttentionNet,
                     build_network, forward, load_weight_archive, param_groups,
                     save_weight_archive)
from .teacher import EmaTeacher
from .trainer import TrainConfig, Trainer, fit, read_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "BackboneSpec", "ConvUNet", "DualAgreementCoTrainer",
    "DualHeadOutput", "EmaTeacher", "LossReport", "LossWeights",
    "MetricAccumulator", "MetricsReport", "NonFiniteLossError",
    "PatchAttentionNet", "SampleRecord", "TrainConfig", "Trainer",
    "argmax_classes", "augment", "bce_cls", "binarize_cls", "build_network",
    "ce_seg", "cps_loss", "cps_term", "dac_loss", "dice_loss", "dice_metric",
    "f1_metric", "fit", "forward", "gen_synthetic", "ict_loss",
    "label_bits_from_mask", "load_manifest", "load_weight_archive",
    "make_batches", "mix", "nsd_metric", "one_hot_argmax", "overall_score",
    "param_groups", "plan_epoch", "read_checkpoint", "save_weight_archive",
    "softmax_seg", "sup_loss", "total_loss",
]
