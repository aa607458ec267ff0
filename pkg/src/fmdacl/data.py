"""Dataset layout, augmentation, deterministic batch planning, and a synthetic
dataset generator for desk-scale verification.

On-disk layout under a dataset root::

    images/<id>.png    8-bit grayscale intensities
    masks/<id>.png     8-bit class-index map (pixel value = class id)
    labels.csv         header ``id,c0,c1,c2,c3,c4,c5,c6``, binary values
    manifest.csv       header ``id,split`` with split in
                       {labeled, unlabeled, val, test}

All CSVs are UTF-8 with LF newlines. Unlabeled records carry no mask path and
no label vector even when files exist on disk.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

SPLITS = ("labeled", "unlabeled", "val", "test")
K_CLS = 7
C_SEG = 15  # background + 14 shape classes


@dataclass
class SampleRecord:
    id: str
    image_path: str
    mask_path: Optional[str] = None
    labels: Optional[np.ndarray] = None
    split: str = "unlabeled"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"record '{self.id}': unknown split tag '{self.split}'")
        needs_truth = self.split in ("labeled", "val", "test")
        if needs_truth and (self.mask_path is None or self.labels is None):
            raise ValueError(f"record '{self.id}': split '{self.split}' requires "
                             f"both a mask and a label vector")
        if not needs_truth and (self.mask_path is not None or self.labels is not None):
            raise ValueError(f"record '{self.id}': unlabeled records must not "
                             f"carry a mask or labels")


@dataclass
class AugmentPolicy:
    hflip_prob: float = 0.5
    max_rotate_deg: float = 20.0
    target_size: Tuple[int, int] = (256, 256)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.max_rotate_deg < 0:
            raise ValueError(f"max_rotate_deg must be >= 0, got {self.max_rotate_deg}")
        h, w = self.target_size
        if h < 8 or w < 8:
            raise ValueError(f"target_size must be at least 8x8, got {self.target_size}")


# ---------------------------------------------------------------------------
# PNG / CSV io


def read_image(path) -> np.ndarray:
    """8-bit grayscale PNG -> float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def read_mask(path) -> np.ndarray:
    """8-bit class-index PNG -> int64 array of class ids."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), "L").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.min() < 0 or m.max() > 255:
        raise ValueError("mask class ids must fit in 8 bits")
    Image.fromarray(m.astype(np.uint8), "L").save(path)


def _write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def load_manifest(root) -> List[SampleRecord]:
    """Read manifest.csv (+ labels.csv) under ``root`` into validated records.

    Rejects duplicate ids, unknown split tags, records whose split requires a
    mask/labels that are missing, and records whose image file is absent.
    """
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.csv under {root}")
    labels = {}
    labels_path = os.path.join(root, "labels.csv")
    if os.path.isfile(labels_path):
        with open(labels_path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            expect = ["id"] + [f"c{k}" for k in range(K_CLS)]
            if header != expect:
                raise ValueError(f"labels.csv header must be {','.join(expect)}")
            for row in reader:
                if not row:
                    continue
                if len(row) != 1 + K_CLS:
                    raise ValueError(f"labels.csv row for '{row[0]}' must have "
                                     f"{1 + K_CLS} fields")
                bits = [int(v) for v in row[1:]]
                if any(b not in (0, 1) for b in bits):
                    raise ValueError(f"labels.csv row for '{row[0]}' must be binary")
                labels[row[0]] = np.array(bits, dtype=np.int64)

    records: List[SampleRecord] = []
    seen = set()
    with open(manifest, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "split"]:
            raise ValueError("manifest.csv header must be id,split")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"manifest.csv row must be id,split: {row}")
            rid, split = row
            if rid in seen:
                raise ValueError(f"duplicate id '{rid}' in manifest")
            seen.add(rid)
            if split not in SPLITS:
                raise ValueError(f"record '{rid}': unknown split tag '{split}'")
            image_path = os.path.join(root, "images", f"{rid}.png")
            if not os.path.isfile(image_path):
                raise FileNotFoundError(f"record '{rid}': image file missing: {image_path}")
            if split == "unlabeled":
                records.append(SampleRecord(rid, image_path, split=split))
                continue
            mask_path = os.path.join(root, "masks", f"{rid}.png")
            if not os.path.isfile(mask_path):
                raise ValueError(f"record '{rid}': split '{split}' requires a mask, "
                                 f"none at {mask_path}")
            if rid not in labels:
                raise ValueError(f"record '{rid}': split '{split}' requires a row "
                                 f"in labels.csv")
            records.append(SampleRecord(rid, image_path, mask_path, labels[rid], split))
    return records


# ---------------------------------------------------------------------------
# Geometric augmentation


def resize_image(img: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    if img.shape == (h, w):
        return img.astype(np.float32, copy=True)
    pil = Image.fromarray(np.asarray(img, dtype=np.float32), "F")
    return np.array(pil.resize((w, h), Image.BILINEAR), dtype=np.float32)


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    if mask.shape == (h, w):
        return mask.astype(np.int64, copy=True)
    pil = Image.fromarray(np.asarray(mask).astype(np.uint8), "L")
    return np.array(pil.resize((w, h), Image.NEAREST), dtype=np.int64)


def augment(image: np.ndarray, mask: Optional[np.ndarray], policy: AugmentPolicy,
            rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Resize to the target, then apply one shared flip/rotation draw.

    The flip and angle variates are always drawn (in that order) so the RNG
    stream advances identically whether or not either transform fires. Images
    interpolate bilinearly, masks nearest-neighbor; rotation fills with 0.
    """
    img = resize_image(image, policy.target_size)
    msk = resize_mask(mask, policy.target_size) if mask is not None else None

    do_flip = rng.random() < policy.hflip_prob
    angle = float(rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg))

    if do_flip:
        img = img[:, ::-1].copy()
        if msk is not None:
            msk = msk[:, ::-1].copy()
    if angle != 0.0:
        pil_img = Image.fromarray(img, "F").rotate(
            angle, resample=Image.BILINEAR, fillcolor=0.0)
        img = np.asarray(pil_img, dtype=np.float32)
        if msk is not None:
            pil_msk = Image.fromarray(msk.astype(np.uint8), "L").rotate(
                angle, resample=Image.NEAREST, fillcolor=0)
            msk = np.asarray(pil_msk, dtype=np.int64)
    return np.clip(img, 0.0, 1.0), msk


# ---------------------------------------------------------------------------
# Deterministic batch planning


def _check_batch_args(labeled, unlabeled, batch_labeled, batch_unlabeled):
    if batch_labeled < 1:
        raise ValueError(f"batch_labeled must be >= 1, got {batch_labeled}")
    if batch_unlabeled < 2:
        raise ValueError(f"batch_unlabeled must be >= 2, got {batch_unlabeled}")
    if batch_unlabeled % 2:
        raise ValueError(f"batch_unlabeled must be even for mixed-pair "
                         f"consistency, got {batch_unlabeled}")
    if not labeled:
        raise ValueError("no labeled records in dataset")
    if len(unlabeled) < 2:
        raise ValueError(f"need at least 2 unlabeled records, got {len(unlabeled)}")


def plan_epoch(records: Sequence[SampleRecord], batch_labeled: int,
               batch_unlabeled: int, seed: int, epoch: int) -> List[Tuple[List[str], List[str]]]:
    """Pure function of (records, seed, epoch) -> ordered step plan of id lists.

    Every unlabeled id appears exactly once per epoch; the final step may be
    short when the unlabeled count is not a multiple of the batch size. The
    labeled stream restarts each epoch and cycles through fresh permutations.
    """
    labeled = [r.id for r in records if r.split == "labeled"]
    unlabeled = [r.id for r in records if r.split == "unlabeled"]
    _check_batch_args(labeled, unlabeled, batch_labeled, batch_unlabeled)
    if seed < 0 or epoch < 0:
        raise ValueError("seed and epoch must be non-negative")

    rng_u = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0]))
    u_order = [unlabeled[i] for i in rng_u.permutation(len(unlabeled))]
    steps = math.ceil(len(unlabeled) / batch_unlabeled)

    l_order: List[str] = []
    refill = 0
    while len(l_order) < steps * batch_labeled:
        rng_l = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1, refill]))
        l_order.extend(labeled[i] for i in rng_l.permutation(len(labeled)))
        refill += 1

    plan = []
    for s in range(steps):
        lab = l_order[s * batch_labeled:(s + 1) * batch_labeled]
        unl = u_order[s * batch_unlabeled:(s + 1) * batch_unlabeled]
        plan.append((lab, unl))
    return plan


def make_batches(records: Sequence[SampleRecord], batch_labeled: int,
                 batch_unlabeled: int, seed: int, epoch: int = 0,
                 ) -> Iterator[Tuple[List[SampleRecord], List[SampleRecord]]]:
    """One epoch's stream of (labeled_batch, unlabeled_batch) record lists."""
    by_id = {r.id: r for r in records}
    for lab_ids, unl_ids in plan_epoch(records, batch_labeled, batch_unlabeled,
                                       seed, epoch):
        yield [by_id[i] for i in lab_ids], [by_id[i] for i in unl_ids]


def sample_rng(seed: int, epoch: int, step: int, slot: int) -> np.random.Generator:
    """Per-sample augmentation RNG; independent of prefetch or consumption order."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, step, slot]))


# ---------------------------------------------------------------------------
# Synthetic dataset generator

N_SHAPES = 14
AREA_SMALL_THRESHOLD = 0.09    # bit 1: class-5 area fraction below this
AREA_PAIR_THRESHOLD = 0.05    # bit 6: class-11 + class-12 area fraction above this
MIN_DISTINCT_CLASSES = 5       # bit 4: at least this many foreground classes


def label_bits_from_mask(mask: np.ndarray) -> np.ndarray:
    """The 7 geometric label predicates, computed from a class-index mask.

    bit 0: class 3 absent
    bit 1: class-5 area fraction < AREA_SMALL_THRESHOLD (absent counts as 0)
    bit 2: class 7 present
    bit 3: class-1 area strictly greater than class-2 area
    bit 4: at least MIN_DISTINCT_CLASSES distinct foreground classes present
    bit 5: class 9 present with row-centroid in the bottom half of the image
    bit 6: class-11 + class-12 area fraction > AREA_PAIR_THRESHOLD
    """
    m = np.asarray(mask)
    total = m.size
    area = np.bincount(m.ravel(), minlength=C_SEG)[:C_SEG]
    frac = area / total
    bits = np.zeros(K_CLS, dtype=np.int64)
    bits[0] = int(area[3] == 0)
    bits[1] = int(frac[5] < AREA_SMALL_THRESHOLD)
    bits[2] = int(area[7] > 0)
    bits[3] = int(area[1] > area[2])
    bits[4] = int((area[1:] > 0).sum() >= MIN_DISTINCT_CLASSES)
    if area[9] > 0:
        rows = np.nonzero(m == 9)[0]
        bits[5] = int(rows.mean() >= m.shape[0] / 2.0)
    bits[6] = int(frac[11] + frac[12] > AREA_PAIR_THRESHOLD)
    return bits


def _draw_structure(mask: np.ndarray, img: np.ndarray, cls: int,
                    rng: np.random.Generator) -> None:
    """Rasterize one structure of class ``cls`` into mask and image in place."""
    h, w = mask.shape
    scale = min(h, w)
    # canonical grid cell per class keeps identity inferable from position
    cell = cls - 1
    cy = (cell // 4 + 0.5) / 4.0 + rng.uniform(-0.08, 0.08)
    cx = (cell % 4 + 0.5) / 4.0 + rng.uniform(-0.08, 0.08)
    cy, cx = cy * h, cx * w
    r = scale * rng.uniform(0.16, 0.24)
    aspect = rng.uniform(1.0, 2.0)
    theta = rng.uniform(0.0, math.pi)
    # class-banded intensity keeps the class readable from local brightness
    intensity = 0.22 + 0.05 * cls + rng.uniform(-0.005, 0.005)

    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    a, b = r * math.sqrt(aspect), r / math.sqrt(aspect)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    if 7 <= cls <= 10:       # annulus
        inner = rng.uniform(0.45, 0.7)
        hole = (u / (a * inner)) ** 2 + (v / (b * inner)) ** 2 <= 1.0
        inside &= ~hole
    elif cls >= 11:          # crescent: subtract an offset disc
        off = r * rng.uniform(0.35, 0.6)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        oy, ox = cy + off * math.sin(phi), cx + off * math.cos(phi)
        d2 = (yy - oy) ** 2 + (xx - ox) ** 2
        inside &= d2 > (0.8 * r) ** 2

    mask[inside] = cls
    img[inside] = intensity


def gen_image(i: int, h: int, w: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministically synthesize image i: (float image in [0,1], index mask)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
    mask = np.zeros((h, w), dtype=np.int64)
    img = np.full((h, w), 0.15, dtype=np.float64)
    k = int(rng.integers(3, 7))
    classes = np.sort(rng.choice(N_SHAPES, size=k, replace=False) + 1)
    for cls in classes:
        _draw_structure(mask, img, int(cls), rng)
    speckle = rng.gamma(shape=4000.0, scale=1.0 / 4000.0, size=(h, w))
    img = np.clip(img * speckle, 0.0, 1.0)
    return img, mask


def gen_synthetic(root, n: int, h: int, w: int, seed: int,
                  labeled_frac: float = 0.2, val_frac: float = 0.1,
                  test_frac: float = 0.1) -> dict:
    """Write a complete synthetic dataset under ``root``; returns split counts.

    Images hold 3-6 structures from a 14-class shape vocabulary (ellipses,
    annuli, crescents) over multiplicative speckle; the stored label bits are
    exactly ``label_bits_from_mask`` of the stored mask. Mask PNGs are written
    for every id, but only labeled/val/test ids get labels.csv rows, and
    unlabeled records never reference their mask.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    n_lab = int(round(n * labeled_frac))
    n_val = int(round(n * val_frac))
    n_test = int(round(n * test_frac))
    if n_lab < 1 or n_val < 1 or n_test < 1 or n_lab + n_val + n_test >= n - 1:
        raise ValueError(f"split fractions leave no usable splits for n={n}")

    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)

    ids = [f"img_{i:04d}" for i in range(n)]
    split_rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    order = split_rng.permutation(n)
    split_of = {}
    for pos, idx in enumerate(order):
        if pos < n_lab:
            split_of[ids[idx]] = "labeled"
        elif pos < n_lab + n_val:
            split_of[ids[idx]] = "val"
        elif pos < n_lab + n_val + n_test:
            split_of[ids[idx]] = "test"
        else:
            split_of[ids[idx]] = "unlabeled"

    label_rows = []
    for i, rid in enumerate(ids):
        img, mask = gen_image(i, h, w, seed)
        write_image(os.path.join(root, "images", f"{rid}.png"), img)
        write_mask(os.path.join(root, "masks", f"{rid}.png"), mask)
        if split_of[rid] != "unlabeled":
            bits = label_bits_from_mask(mask)
            label_rows.append([rid] + [str(int(b)) for b in bits])

    _write_csv(os.path.join(root, "labels.csv"),
               ["id"] + [f"c{k}" for k in range(K_CLS)], label_rows)
    _write_csv(os.path.join(root, "manifest.csv"), ["id", "split"],
               [[rid, split_of[rid]] for rid in ids])

    counts = {s: 0 for s in SPLITS}
    for s in split_of.values():
        counts[s] += 1
    return counts
