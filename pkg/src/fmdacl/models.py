"""Two-headed desk-scale backbones: a convolutional U-Net and a patch-attention
encoder with a lightweight upsampling decoder.

Both expose the same forward contract: ``net(x) -> DualHeadOutput(seg, cls)``
with ``seg`` at full input resolution and ``cls`` one score per label. The
pairing is deliberately heterogeneous (local convolutional bias vs. global
attention) so the co-training partners disagree in useful ways.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import check_image_batch

KINDS = ("conv_unet", "patch_attention")


class DualHeadOutput(NamedTuple):
    seg: torch.Tensor
    cls: torch.Tensor


@dataclass
class BackboneSpec:
    kind: str
    width: int = 16
    depth: int = 3
    c_seg: int = 15
    k_cls: int = 7
    patch: int = 8          # patch_attention only
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone kind '{self.kind}', expected one of {KINDS}")
        if self.width < 8:
            raise ValueError(f"width must be >= 8, got {self.width}")
        if not 2 <= self.depth <= 5:
            raise ValueError(f"depth must lie in [2, 5], got {self.depth}")
        if self.c_seg < 2:
            raise ValueError(f"c_seg must be >= 2, got {self.c_seg}")
        if self.k_cls < 1:
            raise ValueError(f"k_cls must be >= 1, got {self.k_cls}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kind == "patch_attention":
            if self.patch < 2 or self.patch & (self.patch - 1):
                raise ValueError(f"patch must be a power of two >= 2, got {self.patch}")
            stages = int(math.log2(self.patch))
            if (4 * self.width) % (2 ** stages):
                raise ValueError(f"embed dim {4 * self.width} must be divisible by "
                                 f"2**{stages} for a patch size of {self.patch}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.depth if self.kind == "conv_unet" else self.patch


def _zero_head_biases(net: nn.Module) -> None:
    # Zero-bias heads make the initial per-pixel argmax follow the features
    # rather than a constant per-class offset, so early pseudo-labels are
    # input-driven instead of an input-independent tiling.
    nn.init.zeros_(net.seg_head.bias)
    nn.init.zeros_(net.cls_head.bias)


class DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class ConvUNet(nn.Module):
    """Encoder-decoder with skip connections and two task heads."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        w, d = spec.width, spec.depth
        self.spec = spec
        self.downsample_factor = spec.downsample_factor
        self.enc = nn.ModuleList([DoubleConv(1, w)])
        for i in range(1, d + 1):
            self.enc.append(DoubleConv(w * 2 ** (i - 1), w * 2 ** i))
        self.dec = nn.ModuleList(
            [DoubleConv(w * 2 ** i + w * 2 ** (i - 1), w * 2 ** (i - 1))
             for i in range(d, 0, -1)])
        self.drop = nn.Dropout2d(spec.dropout)
        self.seg_head = nn.Conv2d(w, spec.c_seg, 1)
        self.cls_head = nn.Linear(w * 2 ** d, spec.k_cls)
        _zero_head_biases(self)

    def forward(self, x) -> DualHeadOutput:
        feats = []
        h = x
        for i, block in enumerate(self.enc):
            if i:
                h = F.max_pool2d(h, 2)
            h = block(h)
            feats.append(h)
        bottom = feats[-1]
        h = self.drop(bottom)
        for i, block in enumerate(self.dec):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(torch.cat([h, feats[len(self.enc) - 2 - i]], dim=1))
        seg = self.seg_head(h)
        cls = self.cls_head(bottom.mean(dim=(2, 3)))
        return DualHeadOutput(seg, cls)


def position_encoding_2d(h: int, w: int, dim: int, dtype, device) -> torch.Tensor:
    """Fixed sinusoidal 2-D positions, shape [h*w, dim]; dim must be divisible by 4."""
    q = dim // 4
    freq = torch.exp(-math.log(10000.0) * torch.arange(q, dtype=torch.float64) / q)
    rows = torch.arange(h, dtype=torch.float64)[:, None] * freq[None, :]
    cols = torch.arange(w, dtype=torch.float64)[:, None] * freq[None, :]
    row_part = torch.cat([rows.sin(), rows.cos()], dim=1)       # [h, 2q]
    col_part = torch.cat([cols.sin(), cols.cos()], dim=1)       # [w, 2q]
    pe = torch.cat([row_part[:, None, :].expand(h, w, 2 * q),
                    col_part[None, :, :].expand(h, w, 2 * q)], dim=2)
    return pe.reshape(h * w, dim).to(dtype=dtype, device=device)


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, t):
        b, n, e = t.shape
        hd = e // self.heads
        h = self.ln1(t)
        qkv = self.qkv(h).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = self.attn_drop(att.softmax(dim=-1))
        h = (att @ v).transpose(1, 2).reshape(b, n, e)
        t = t + self.drop(self.proj(h))
        h = self.fc2(self.drop(F.gelu(self.fc1(self.ln2(t)))))
        return t + self.drop(h)


class PatchAttentionNet(nn.Module):
    """Patch-embedding self-attention encoder with a light upsampling decoder."""

    # The attention encoder is the slow-moving feature extractor; everything
    # downstream of it (decoder, stem, output heads) is freshly initialized
    # task machinery and trains at the higher task-specific learning rate.
    task_prefixes = ("dec_convs.", "dec_bns.", "stem_conv.", "stem_bn.",
                     "seg_head.", "cls_head.")

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.downsample_factor = spec.downsample_factor
        e = 4 * spec.width
        self.embed_dim = e
        self.patch_embed = nn.Conv2d(1, e, spec.patch, stride=spec.patch)
        self.blocks = nn.ModuleList(
            [AttentionBlock(e, 4, spec.dropout) for _ in range(spec.depth)])
        self.norm = nn.LayerNorm(e)
        stages = int(math.log2(spec.patch))
        convs, bns = [], []
        for s in range(stages):
            convs.append(nn.Conv2d(e // 2 ** s, e // 2 ** (s + 1), 3, padding=1, bias=False))
            bns.append(nn.BatchNorm2d(e // 2 ** (s + 1)))
        self.dec_convs = nn.ModuleList(convs)
        self.dec_bns = nn.ModuleList(bns)
        d_out = e // 2 ** stages
        # Full-resolution stem: patch tokens alone carry no per-pixel intensity
        # detail, so the segmentation head also sees features computed at the
        # input resolution.
        self.stem_conv = nn.Conv2d(1, d_out, 5, padding=2, bias=False)
        self.stem_bn = nn.BatchNorm2d(d_out)
        self.seg_head = nn.Conv2d(2 * d_out, spec.c_seg, 1)
        self.cls_head = nn.Linear(e, spec.k_cls)
        _zero_head_biases(self)

    def forward(self, x) -> DualHeadOutput:
        b, _, hh, ww = x.shape
        z = self.patch_embed(x)
        gh, gw = z.shape[2], z.shape[3]
        t = z.flatten(2).transpose(1, 2)
        t = t + position_encoding_2d(gh, gw, self.embed_dim, t.dtype, t.device)
        for blk in self.blocks:
            t = blk(t)
        t = self.norm(t)
        cls = self.cls_head(t.mean(dim=1))
        z = t.transpose(1, 2).reshape(b, self.embed_dim, gh, gw)
        for conv, bn in zip(self.dec_convs, self.dec_bns):
            z = F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=False)
            z = F.relu(bn(conv(z)))
        s = F.relu(self.stem_bn(self.stem_conv(x)))
        seg = self.seg_head(torch.cat([z, s], dim=1))
        return DualHeadOutput(seg, cls)


def build_network(spec: BackboneSpec, seed: int) -> nn.Module:
    """Construct a backbone with a deterministic, seed-controlled initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if spec.kind == "conv_unet":
            return ConvUNet(spec)
        return PatchAttentionNet(spec)


def forward(net: nn.Module, x: torch.Tensor, train_mode: bool = False) -> DualHeadOutput:
    """Run a two-head forward pass after validating the input contract."""
    x = check_image_batch(x)
    d = net.downsample_factor
    if x.shape[2] % d or x.shape[3] % d:
        raise ValueError(f"input spatial size {tuple(x.shape[2:])} must be divisible "
                         f"by {d} for this backbone")
    net.train(train_mode)
    out = net(x)
    if not (torch.isfinite(out.seg).all() and torch.isfinite(out.cls).all()):
        raise RuntimeError(_locate_nonfinite(net, x))
    return out


def _locate_nonfinite(net: nn.Module, x: torch.Tensor) -> str:
    first_bad = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            tensors = out if isinstance(out, tuple) else (out,)
            for t in tensors:
                if torch.is_tensor(t) and not torch.isfinite(t).all() and not first_bad:
                    first_bad.append(name)
        return hook

    handles = [m.register_forward_hook(make_hook(name))
               for name, m in net.named_modules() if name]
    try:
        with torch.no_grad():
            net(x)
    finally:
        for h in handles:
            h.remove()
    layer = first_bad[0] if first_bad else "<output>"
    return f"non-finite activations in layer '{layer}'"


HEAD_PREFIXES = ("seg_head.", "cls_head.")


def _task_prefixes(net: nn.Module) -> tuple:
    """Name prefixes of the task-specific (higher learning rate) parameters.

    Defaults to the two output heads; a network may widen the set via a
    ``task_prefixes`` class attribute when more of it is task machinery.
    """
    return getattr(net, "task_prefixes", HEAD_PREFIXES)


def param_groups(net: nn.Module) -> dict:
    """Disjoint, exhaustive split of parameters: backbone vs. task-specific."""
    prefixes = _task_prefixes(net)
    groups = {"backbone": [], "heads": []}
    for name, p in net.named_parameters():
        key = "heads" if name.startswith(prefixes) else "backbone"
        groups[key].append(p)
    return groups


def param_group_names(net: nn.Module) -> dict:
    prefixes = _task_prefixes(net)
    names = {"backbone": [], "heads": []}
    for name, _ in net.named_parameters():
        key = "heads" if name.startswith(prefixes) else "backbone"
        names[key].append(name)
    return names


def save_weight_archive(net: nn.Module, archive_path, manifest_path=None) -> None:
    """Dump all parameters/buffers to a flat .npz keyed by state-dict path.

    When ``manifest_path`` is given, an identity name-mapping manifest is
    written alongside as a template for importing externally trained weights.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    np.savez(archive_path, **arrays)
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# external_key internal_parameter_path\n")
            for k in arrays:
                fh.write(f"{k} {k}\n")


def load_weight_archive(net: nn.Module, archive_path, manifest_path) -> list:
    """Load external weights into ``net`` through a name-mapping manifest.

    Manifest lines are ``<external_key> <internal_parameter_path>``; blank
    lines and ``#`` comments are skipped. Returns the internal paths loaded.
    """
    with np.load(archive_path) as arch:
        mapping = []
        with open(manifest_path, "r", encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"manifest line {ln} must be "
                                     f"'<external> <internal>': {raw.rstrip()}")
                mapping.append(parts)
        state = net.state_dict()
        for ext, internal in mapping:
            if ext not in arch:
                raise KeyError(f"archive has no entry '{ext}'")
            if internal not in state:
                raise KeyError(f"network has no parameter '{internal}'")
            arr = arch[ext]
            if tuple(arr.shape) != tuple(state[internal].shape):
                raise ValueError(f"shape mismatch for '{internal}': archive "
                                 f"{tuple(arr.shape)} vs network "
                                 f"{tuple(state[internal].shape)}")
            state[internal] = torch.from_numpy(np.array(arr)).to(state[internal].dtype)
    net.load_state_dict(state)
    return [internal for _, internal in mapping]
