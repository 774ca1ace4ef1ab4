"""Tri-modal dataset plumbing: sample type, synthetic rendering, disk format,
stratified splitting, augmentation, and missing-modality sampling.

A sample bundles three co-registered image modalities (fundus photo, OCT
scan, visual-field map) with an ordinal stage label 0..3. Images live in
memory as normalized float32 arrays of shape (3, H, W); an absent modality
is an all-zero array with its presence flag cleared.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image

from .errors import DataError

logger = logging.getLogger(__name__)

MODALITIES = ("fundus", "oct", "vf")
STAGE_NAMES = ("NG", "EaG", "InG", "AdG")
N_CLASSES = 4
CANONICAL_SIZE = 224

# Per-channel normalization applied at load time, before augmentation.
NORM_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
NORM_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# Stream tags for stateless per-(seed, epoch, sample) RNG derivation, so a
# resumed run replays the exact randomness of the original run.
STREAM_SPLIT = 1
STREAM_AUG = 2
STREAM_MISSING = 3
STREAM_MISSING_EVAL = 4
STREAM_MASK = 5
STREAM_SHUFFLE = 6
STREAM_INIT = 7


def rng_for(*key: int) -> np.random.Generator:
    """Derive an independent generator from an integer key tuple."""
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class MultimodalSample:
    id: str
    fundus: np.ndarray
    oct: np.ndarray
    vf: np.ndarray
    label: int
    present: tuple[bool, bool, bool] = (True, True, True)

    def images(self) -> dict[str, np.ndarray]:
        return {"fundus": self.fundus, "oct": self.oct, "vf": self.vf}

    def with_images(self, images: dict[str, np.ndarray]) -> "MultimodalSample":
        return replace(self, fundus=images["fundus"], oct=images["oct"], vf=images["vf"])


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float]
    per_class_counts: dict[int, tuple[int, int, int]]

    def splits(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass(frozen=True)
class AugmentationPolicy:
    """Per-modality augmentation recipe.

    Fundus gets resized crop + color jitter + vertical flip, OCT jitter only,
    VF vertical flip only; one shared horizontal-flip coin covers all three
    modalities of a sample so left/right anatomy stays consistent.
    """

    ops: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: {
            "fundus": ("crop", "jitter", "vflip"),
            "oct": ("jitter",),
            "vf": ("vflip",),
        }
    )
    flip_prob: float = 0.5
    jitter_range: tuple[float, float] = (0.9, 1.1)
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    shared_hflip: bool = True

    @staticmethod
    def identity() -> "AugmentationPolicy":
        return AugmentationPolicy(
            flip_prob=0.0,
            jitter_range=(1.0, 1.0),
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
        )


@dataclass(frozen=True)
class MissingnessConfig:
    p_full: float = 0.5
    p_drop_one: float = 0.25
    p_drop_two: float = 0.25

    def validate(self) -> None:
        probs = (self.p_full, self.p_drop_one, self.p_drop_two)
        if any(p < 0 for p in probs):
            raise DataError(f"missingness probabilities must be non-negative, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise DataError(f"missingness probabilities must sum to 1, got {probs}")


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> per-channel standardized float32."""
    return ((raw - NORM_MEAN[:, None, None]) / NORM_STD[:, None, None]).astype(np.float32)


def denormalize_image(img: np.ndarray) -> np.ndarray:
    return img * NORM_STD[:, None, None] + NORM_MEAN[:, None, None]


# ---------------------------------------------------------------------------
# Synthetic data generation
# ---------------------------------------------------------------------------

# Stage-neutral parameter targets used when a modality is rendered degraded.
_NEUTRAL_STAGE = 1.5
_DEGRADE_BLEND = 0.85
_DEGRADE_NOISE = 3.0


@dataclass
class RawRecord:
    """A rendered sample before normalization: uint8 (H, W, 3) per modality."""

    id: str
    label: int
    images: dict[str, np.ndarray]
    present: tuple[bool, bool, bool] = (True, True, True)


def _disc_mask(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _finish(img: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    img = img + rng.normal(0.0, noise, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def _blend(value: float, neutral: float, degraded: bool) -> float:
    if not degraded:
        return value
    return _DEGRADE_BLEND * neutral + (1.0 - _DEGRADE_BLEND) * value


def _render_fundus(stage: int, size: int, rng: np.random.Generator, degraded: bool) -> np.ndarray:
    # Two concentric discs; the cup-to-disc ratio grows with stage.
    img = np.empty((size, size, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.45, 0.18, 0.12
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    disc_r = size * (0.17 + rng.uniform(-0.01, 0.01))
    cdr = 0.28 + 0.16 * stage + rng.uniform(-0.03, 0.03)
    cdr = _blend(cdr, 0.28 + 0.16 * _NEUTRAL_STAGE, degraded)
    disc = _disc_mask(size, cy, cx, disc_r)
    cup = _disc_mask(size, cy, cx, np.clip(cdr, 0.05, 0.95) * disc_r)
    img[disc] = (0.85, 0.62, 0.35)
    img[cup] = (0.98, 0.92, 0.75)
    return _finish(img, rng, 0.03 * (_DEGRADE_NOISE if degraded else 1.0))


def _render_oct(stage: int, size: int, rng: np.random.Generator, degraded: bool) -> np.ndarray:
    # One bright horizontal band; its thickness shrinks with stage.
    img = np.empty((size, size, 3))
    img[..., 0], img[..., 1], img[..., 2] = 0.06, 0.06, 0.08
    center = size * (0.5 + rng.uniform(-0.05, 0.05))
    half = size * (0.085 - 0.018 * stage + rng.uniform(-0.006, 0.006))
    half = _blend(half, size * (0.085 - 0.018 * _NEUTRAL_STAGE), degraded)
    half = max(half, 1.0)
    rows = np.arange(size)
    band = np.abs(rows - center) <= half
    img[band] = (0.80, 0.78, 0.72)
    return _finish(img, rng, 0.03 * (_DEGRADE_NOISE if degraded else 1.0))


def _render_vf(stage: int, size: int, rng: np.random.Generator, degraded: bool) -> np.ndarray:
    # Light field with dark patches; count and extent grow with stage.
    img = np.full((size, size, 3), 0.88)
    count = 2 * stage
    radius = size * (0.05 + 0.03 * stage)
    if degraded:
        count = int(round(_blend(count, 2 * _NEUTRAL_STAGE, True)))
        radius = _blend(radius, size * (0.05 + 0.03 * _NEUTRAL_STAGE), True)
    for _ in range(count):
        cy = rng.uniform(0.15, 0.85) * size
        cx = rng.uniform(0.15, 0.85) * size
        r = radius * rng.uniform(0.8, 1.2)
        img[_disc_mask(size, cy, cx, r)] = 0.25
    return _finish(img, rng, 0.02 * (_DEGRADE_NOISE if degraded else 1.0))


_RENDERERS = {"fundus": _render_fundus, "oct": _render_oct, "vf": _render_vf}


def render_synthetic(
    n_per_class: int,
    image_size: int = CANONICAL_SIZE,
    seed: int = 0,
    degrade_prob: float = 0.25,
) -> list[RawRecord]:
    """Render a balanced synthetic dataset as uint8 images.

    Per-modality degradation (probability ``degrade_prob``, independent per
    modality) pulls the stage-dependent parameters toward their class-neutral
    values and triples the pixel noise, so each modality is informative but
    imperfect and fusion has genuine headroom.
    """
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < 32:
        raise DataError(f"image_size must be >= 32, got {image_size}")
    rng = np.random.default_rng(seed)
    records = []
    for label in range(N_CLASSES):
        for i in range(n_per_class):
            images = {}
            for mod in MODALITIES:
                degraded = bool(rng.random() < degrade_prob)
                images[mod] = _RENDERERS[mod](label, image_size, rng, degraded)
            records.append(
                RawRecord(id=f"{STAGE_NAMES[label].lower()}-{i:04d}", label=label, images=images)
            )
    return records


def record_to_sample(record: RawRecord) -> MultimodalSample:
    images = {}
    for mod, bit in zip(MODALITIES, record.present):
        if bit:
            raw = record.images[mod].astype(np.float32).transpose(2, 0, 1) / 255.0
            images[mod] = normalize_image(raw)
        else:
            size = next(iter(record.images.values())).shape[0]
            images[mod] = np.zeros((3, size, size), dtype=np.float32)
    return MultimodalSample(
        id=record.id,
        fundus=images["fundus"],
        oct=images["oct"],
        vf=images["vf"],
        label=record.label,
        present=record.present,
    )


def generate_synthetic(
    n_per_class: int,
    image_size: int = CANONICAL_SIZE,
    seed: int = 0,
    degrade_prob: float = 0.25,
) -> list[MultimodalSample]:
    """Balanced synthetic samples, normalized and ready for the model."""
    return [record_to_sample(r) for r in render_synthetic(n_per_class, image_size, seed, degrade_prob)]


# ---------------------------------------------------------------------------
# On-disk dataset format
# ---------------------------------------------------------------------------
#
# A dataset directory holds images/<id>_<modality>.png plus manifest.txt with
# one tab-separated record per line:
#
#   id <TAB> fundus_path <TAB> oct_path <TAB> vf_path <TAB> label <TAB> presence
#
# Paths are relative to the manifest's directory; presence is three 0/1 bits
# in fundus/oct/vf order; an absent modality has path "-".

MANIFEST_NAME = "manifest.txt"


def save_dataset(records: list[RawRecord], root: str) -> str:
    images_dir = os.path.join(root, "images")
    os.makedirs(images_dir, exist_ok=True)
    lines = []
    for rec in records:
        paths = []
        for mod, bit in zip(MODALITIES, rec.present):
            if not bit:
                paths.append("-")
                continue
            rel = os.path.join("images", f"{rec.id}_{mod}.png")
            Image.fromarray(rec.images[mod]).save(os.path.join(root, rel))
            paths.append(rel)
        bits = "".join(str(int(b)) for b in rec.present)
        lines.append("\t".join([rec.id, *paths, str(rec.label), bits]))
    manifest = os.path.join(root, MANIFEST_NAME)
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


@dataclass
class ManifestEntry:
    id: str
    paths: dict[str, str]
    label: int
    present: tuple[bool, bool, bool]


def read_manifest(manifest_path: str) -> list[ManifestEntry]:
    if not os.path.isfile(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    entries = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataError(f"{manifest_path}:{lineno}: expected 6 fields, got {len(parts)}")
            sid, fpath, opath, vpath, label_s, bits = parts
            if not (label_s.isdigit() and int(label_s) < N_CLASSES):
                raise DataError(f"{manifest_path}:{lineno}: bad label {label_s!r}")
            if len(bits) != 3 or set(bits) - {"0", "1"}:
                raise DataError(f"{manifest_path}:{lineno}: bad presence bits {bits!r}")
            entries.append(
                ManifestEntry(
                    id=sid,
                    paths={"fundus": fpath, "oct": opath, "vf": vpath},
                    label=int(label_s),
                    present=tuple(b == "1" for b in bits),
                )
            )
    return entries


def write_manifest(entries: list[ManifestEntry], manifest_path: str) -> None:
    os.makedirs(os.path.dirname(manifest_path), exist_ok=True)
    with open(manifest_path, "w") as fh:
        for e in entries:
            bits = "".join(str(int(b)) for b in e.present)
            fh.write(
                "\t".join([e.id, e.paths["fundus"], e.paths["oct"], e.paths["vf"], str(e.label), bits])
                + "\n"
            )


def load_samples(manifest_path: str) -> list[MultimodalSample]:
    """Decode a manifest's images into normalized in-memory samples."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    size = None
    for e in read_manifest(manifest_path):
        images = {}
        for mod, bit in zip(MODALITIES, e.present):
            if bit:
                path = os.path.join(base, e.paths[mod])
                if not os.path.isfile(path):
                    raise DataError(f"image not found: {path}")
                raw = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
                images[mod] = normalize_image(raw.transpose(2, 0, 1) / 255.0)
                size = images[mod].shape[-1]
            else:
                images[mod] = None
        if size is None:
            raise DataError(f"sample {e.id} has no present modality")
        for mod in MODALITIES:
            if images[mod] is None:
                images[mod] = np.zeros((3, size, size), dtype=np.float32)
        samples.append(
            MultimodalSample(
                id=e.id,
                fundus=images["fundus"],
                oct=images["oct"],
                vf=images["vf"],
                label=e.label,
                present=e.present,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------


def largest_remainder(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Integer allocation of n by ratios; preserves the total exactly."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    by_remainder = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[by_remainder[i]] += 1
    return counts


def stratified_split(
    samples: list[MultimodalSample],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitManifest:
    """Class-stratified train/val/test partition, deterministic under seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    if not samples:
        raise DataError("cannot split an empty sample list")
    by_class: dict[int, list[str]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s.id)
    for label, ids in sorted(by_class.items()):
        if len(ids) < 5:
            raise DataError(
                f"class {label} ({STAGE_NAMES[label]}) has only {len(ids)} samples; need >= 5"
            )
    rng = rng_for(seed, STREAM_SPLIT)
    parts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    per_class_counts = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        rng.shuffle(ids)
        n_train, n_val, n_test = largest_remainder(len(ids), ratios)
        parts["train"].extend(ids[:n_train])
        parts["val"].extend(ids[n_train : n_train + n_val])
        parts["test"].extend(ids[n_train + n_val :])
        per_class_counts[label] = (n_train, n_val, n_test)
    return SplitManifest(
        train=parts["train"],
        val=parts["val"],
        test=parts["test"],
        ratios=tuple(ratios),
        per_class_counts=per_class_counts,
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img))[None]
    out = torch.nn.functional.interpolate(
        t, size=(size, size), mode="bilinear", align_corners=False
    )
    return out[0].numpy()


def _random_resized_crop(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[1:]
    scale = rng.uniform(*policy.crop_scale)
    ratio = rng.uniform(*policy.crop_ratio)
    area = h * w * scale
    cw = min(w, max(1, int(round(np.sqrt(area * ratio)))))
    ch = min(h, max(1, int(round(np.sqrt(area / ratio)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    if (ch, cw) == (h, w):
        return img
    return _resize_bilinear(img[:, top : top + ch, left : left + cw], h)


def _color_jitter(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    lo, hi = policy.jitter_range
    b, c, s = rng.uniform(lo, hi, size=3)
    out = img * np.float32(b)
    mean = out.mean(dtype=np.float32)
    out = mean + (out - mean) * np.float32(c)
    gray = out.mean(axis=0, keepdims=True)
    out = gray + (out - gray) * np.float32(s)
    return out.astype(np.float32)


def augment(
    sample: MultimodalSample, policy: AugmentationPolicy, rng: np.random.Generator
) -> MultimodalSample:
    """Pure per-sample augmentation; the horizontal flip coin is shared."""
    hflip = policy.shared_hflip and rng.random() < policy.flip_prob
    out = {}
    for mod in MODALITIES:
        img = sample.images()[mod]
        for op in policy.ops.get(mod, ()):
            if op == "crop":
                img = _random_resized_crop(img, policy, rng)
            elif op == "jitter":
                img = _color_jitter(img, policy, rng)
            elif op == "vflip":
                if rng.random() < policy.flip_prob:
                    img = np.flip(img, axis=1)
            else:
                raise DataError(f"unknown augmentation op {op!r} for modality {mod}")
        if hflip:
            img = np.flip(img, axis=2)
        out[mod] = np.ascontiguousarray(img, dtype=np.float32)
    return sample.with_images(out)


# ---------------------------------------------------------------------------
# Missing-modality sampling
# ---------------------------------------------------------------------------


def _drop_modalities(sample: MultimodalSample, dropped: tuple[int, ...], new_id: str | None = None) -> MultimodalSample:
    images = {}
    present = list(sample.present)
    for k, mod in enumerate(MODALITIES):
        img = sample.images()[mod]
        if k in dropped:
            images[mod] = np.zeros_like(img)
            present[k] = False
        else:
            images[mod] = img
    out = sample.with_images(images)
    return replace(out, present=tuple(present), id=new_id or sample.id)


def sample_missingness(
    sample: MultimodalSample, config: MissingnessConfig, rng: np.random.Generator
) -> MultimodalSample:
    """Randomly zero out zero, one, or two modalities of a full sample."""
    config.validate()
    if not all(sample.present):
        raise DataError(f"sample {sample.id} is not fully present")
    u = rng.random()
    if u < config.p_full:
        return replace(sample)
    if u < config.p_full + config.p_drop_one:
        dropped = (int(rng.integers(3)),)
    else:
        kept = int(rng.integers(3))
        dropped = tuple(k for k in range(3) if k != kept)
    return _drop_modalities(sample, dropped)


_PAIR_SUFFIX = {0: "ov", 1: "fv", 2: "fo"}  # kept modality -> dropped initials


def build_missing_eval_set(
    split: list[MultimodalSample], config: MissingnessConfig, seed: int = 0
) -> list[MultimodalSample]:
    """Originals plus exactly balanced modality-dropped copies.

    With the default 0.5/0.25/0.25 config a split of S full samples grows to
    2S: S originals, S/2 one-missing copies (equal counts per dropped
    modality), S/2 two-missing copies (equal counts per kept modality).
    """
    config.validate()
    if config.p_full <= 0:
        raise DataError("eval-set construction requires p_full > 0")
    for s in split:
        if not all(s.present):
            raise DataError(f"eval-set input must be fully present; {s.id} is not")
    n = len(split)
    n_one = int(round(n * config.p_drop_one / config.p_full))
    n_two = int(round(n * config.p_drop_two / config.p_full))
    if n_one % 3 or n_two % 3:
        logger.warning(
            "missing-eval counts not divisible by 3 (one=%d, two=%d); "
            "remainders assigned in fundus/oct/vf order",
            n_one,
            n_two,
        )
    order = rng_for(seed, STREAM_MISSING_EVAL).permutation(n)
    out = list(split)
    for j in range(n_one):
        src = split[order[j % n]]
        k = j % 3
        out.append(_drop_modalities(src, (k,), new_id=f"{src.id}:drop-{MODALITIES[k][0]}"))
    for j in range(n_two):
        src = split[order[(n_one + j) % n]]
        kept = j % 3
        dropped = tuple(k for k in range(3) if k != kept)
        out.append(_drop_modalities(src, dropped, new_id=f"{src.id}:drop-{_PAIR_SUFFIX[kept]}"))
    return out
