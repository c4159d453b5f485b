"""Synthetic multi-domain image data, augmentation and CutMix.

Each class is a geometric shape; each domain is a rendering style (palette
hue, background stripe frequency and orientation, pixel noise).  Shape
placement is drawn per sample and is independent of the domain, so the
class signal is shared across domains while the style shifts.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 4
    num_domains: int = 3
    samples_per_cell: int = 40
    resolution: int = 16
    style_variance: float = 1.0
    noise_level: float = 0.05

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}]")
        if self.num_domains < 2:
            raise ValueError("num_domains must be at least 2")
        if self.samples_per_cell < 1 or self.resolution < 4:
            raise ValueError("samples_per_cell must be >= 1 and resolution >= 4")
        if self.style_variance < 0 or self.noise_level < 0:
            raise ValueError("style_variance and noise_level must be nonnegative")


@dataclass(frozen=True)
class DomainStyle:
    hue: float
    texture_freq: float
    texture_angle: float
    noise: float


@dataclass
class SyntheticDomainDataset:
    config: DatasetConfig
    seed: int
    styles: list[DomainStyle]
    labels: np.ndarray
    domains: np.ndarray
    # per-sample geometry: center x, center y, size, foreground jitter, texture phase
    geometry: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def num_domains(self) -> int:
        return self.config.num_domains

    def images(self, resolution: int | None = None) -> np.ndarray:
        """All images as float32 (N, 3, R, R), rendered once per resolution."""
        res = self.config.resolution if resolution is None else int(resolution)
        if res not in self._cache:
            self._cache[res] = np.stack([self._render(i, res) for i in range(len(self))])
        return self._cache[res]

    def _render(self, i: int, res: int) -> np.ndarray:
        st = self.styles[self.domains[i]]
        cx, cy, size, jitter, phase = self.geometry[i]
        coords = (np.arange(res) + 0.5) / res * 2.0 - 1.0
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        mask = _shape_mask(SHAPES[self.labels[i]], (xx - cx) / size, (yy - cy) / size)

        bg = np.array(colorsys.hsv_to_rgb(st.hue % 1.0, 0.5, 0.45))
        fg = np.array(colorsys.hsv_to_rgb((st.hue + 0.5 + jitter) % 1.0, 0.8, 0.95))
        wave = np.sin(2 * np.pi * st.texture_freq * (xx * np.cos(st.texture_angle) + yy * np.sin(st.texture_angle))
                      / 2.0 + phase)
        img = bg[:, None, None] * (1.0 + 0.35 * wave)[None]
        img = np.where(mask[None], fg[:, None, None], img)
        noise_rng = np.random.default_rng([self.seed, i, res])
        img = img + st.noise * noise_rng.standard_normal(img.shape)
        return img.astype(np.float32)


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    if kind == "circle":
        return r <= 1.0
    if kind == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == "triangle":
        return (v <= 0.8) & (v >= -0.9 + 2.0 * np.abs(u))
    if kind == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if kind == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "hbar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)
    if kind == "vbar":
        return (np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)
    raise ValueError(kind)


def generate_synthetic_domains(config: DatasetConfig = DatasetConfig(), seed: int = 0) -> SyntheticDomainDataset:
    """Pure function of (config, seed)."""
    style_rng = np.random.default_rng([seed, 1])
    v = config.style_variance
    styles = []
    for _ in range(config.num_domains):
        u = style_rng.uniform(size=4)
        styles.append(DomainStyle(
            hue=0.1 + v * (u[0] - 0.5) * 0.8,
            texture_freq=1.5 + v * 3.0 * u[1],
            texture_angle=0.3 + v * np.pi * u[2],
            noise=config.noise_level * (1.0 + v * 2.0 * u[3]),
        ))

    rng = np.random.default_rng([seed, 2])
    labels, domains = [], []
    for d in range(config.num_domains):
        for c in range(config.num_classes):
            labels += [c] * config.samples_per_cell
            domains += [d] * config.samples_per_cell
    n = len(labels)
    geometry = np.column_stack([
        rng.uniform(-0.2, 0.2, n),
        rng.uniform(-0.2, 0.2, n),
        rng.uniform(0.45, 0.65, n),
        rng.uniform(-0.06, 0.06, n),
        rng.uniform(0, 2 * np.pi, n),
    ])
    return SyntheticDomainDataset(config, seed, styles, np.asarray(labels, dtype=np.int64),
                                  np.asarray(domains, dtype=np.int64), geometry)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    held_out_domain: int | None


def domain_split(ds: SyntheticDomainDataset, held_out_domain: int | None, val_fraction: float = 0.1,
                 seed: int = 0) -> Split:
    """Held-out domain -> test; remaining samples shuffled into train/val."""
    if held_out_domain is not None:
        if not 0 <= held_out_domain < ds.num_domains:
            raise ValueError(f"held-out domain {held_out_domain} outside [0, {ds.num_domains})")
        if not np.any(ds.domains == held_out_domain):
            raise ValueError(f"domain {held_out_domain} has no samples")
    test = np.flatnonzero(ds.domains == held_out_domain) if held_out_domain is not None else np.array([], int)
    source = np.flatnonzero(ds.domains != held_out_domain) if held_out_domain is not None else np.arange(len(ds))
    perm = np.random.default_rng([seed, 3, -1 if held_out_domain is None else held_out_domain]).permutation(source)
    n_val = int(round(val_fraction * len(perm)))
    return Split(np.sort(perm[n_val:]), np.sort(perm[:n_val]), test, held_out_domain)


def split_labels(ds: SyntheticDomainDataset, split: Split) -> np.ndarray:
    out = np.empty(len(ds), dtype=object)
    out[split.train] = "train"
    out[split.val] = "val"
    out[split.test] = "test"
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    brightness: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    crop_padding: int = 2


def _affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a 2x2 spatial map about the image center to every channel."""
    c = (np.array(img.shape[1:]) - 1) / 2.0
    offset = c - matrix @ c
    return np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest") for ch in img])


def _rotate(img, deg):
    a = np.deg2rad(deg)
    return _affine(img, np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))


def _shear_x(img, s):
    return _affine(img, np.array([[1.0, 0.0], [s, 1.0]]))


def _shear_y(img, s):
    return _affine(img, np.array([[1.0, s], [0.0, 1.0]]))


def _translate(img, dx, dy):
    return np.stack([ndimage.shift(ch, (dy, dx), order=0, mode="nearest") for ch in img])


def _gray(img):
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


def _blend(a, b, factor):
    return b + factor * (a - b)


def _autocontrast(img):
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    return (img - lo) / np.maximum(hi - lo, 1e-6)


def _posterize(img, bits):
    levels = 2 ** bits
    return np.floor(np.clip(img, 0, 1) * (levels - 1) + 0.5) / (levels - 1)


def _solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


# Fixed stand-in for a searched policy: (op, probability, magnitude) pairs.
AUTO_AUGMENT_POLICY = (
    (("invert", 0.1, None), ("contrast", 0.2, 1.6)),
    (("rotate", 0.7, 10.0), ("translate_x", 0.3, 0.15)),
    (("shear_y", 0.5, 0.2), ("translate_y", 0.7, 0.15)),
    (("autocontrast", 0.5, None), ("brightness", 0.3, 1.3)),
    (("color", 0.4, 1.5), ("brightness", 0.6, 0.8)),
    (("solarize", 0.3, 0.7), ("posterize", 0.5, 4)),
    (("shear_x", 0.5, 0.2), ("rotate", 0.3, -10.0)),
    (("contrast", 0.6, 0.7), ("color", 0.5, 0.6)),
)


def _apply_op(img, op, mag, rng):
    h = img.shape[1]
    if op == "invert":
        return 1.0 - img
    if op == "contrast":
        return _blend(img, img.mean(), mag)
    if op == "brightness":
        return img * mag
    if op == "color":
        return _blend(img, _gray(img), mag)
    if op == "rotate":
        return _rotate(img, mag)
    if op == "shear_x":
        return _shear_x(img, mag * rng.choice((-1, 1)))
    if op == "shear_y":
        return _shear_y(img, mag * rng.choice((-1, 1)))
    if op == "translate_x":
        return _translate(img, round(mag * h) * rng.choice((-1, 1)), 0)
    if op == "translate_y":
        return _translate(img, 0, round(mag * h) * rng.choice((-1, 1)))
    if op == "autocontrast":
        return _autocontrast(img)
    if op == "solarize":
        return _solarize(img, mag)
    if op == "posterize":
        return _posterize(img, mag)
    raise ValueError(f"unknown augmentation op {op!r}")


def auto_augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sub = AUTO_AUGMENT_POLICY[rng.integers(len(AUTO_AUGMENT_POLICY))]
    for op, prob, mag in sub:
        if rng.random() < prob:
            img = _apply_op(img, op, mag, rng)
    return img


def color_jitter(img: np.ndarray, rng: np.random.Generator, brightness: float = 0.2, saturation: float = 0.2,
                 hue: float = 0.05) -> np.ndarray:
    """Random brightness, saturation and hue perturbation; zero ranges are skipped."""
    if brightness:
        img = img * rng.uniform(1 - brightness, 1 + brightness)
    if saturation:
        img = _blend(img, _gray(img), rng.uniform(1 - saturation, 1 + saturation))
    if hue:
        # rotate chroma in YIQ space
        a = 2 * np.pi * rng.uniform(-hue, hue)
        to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
        rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
        m = np.linalg.inv(to_yiq) @ rot @ to_yiq
        img = np.einsum("ij,jhw->ihw", m, img)
    return img


def random_crop(img: np.ndarray, padding: int, rng: np.random.Generator, offset: tuple[int, int] | None = None):
    """Zero-pad by ``padding`` and crop back to the original size.

    ``offset`` (row, col) into the padded image overrides the random draw;
    ``(padding, padding)`` is the identity crop.
    """
    if padding == 0:
        return img
    _, h, w = img.shape
    if offset is None:
        offset = (int(rng.integers(0, 2 * padding + 1)), int(rng.integers(0, 2 * padding + 1)))
    if offset == (padding, padding):
        return img
    padded = np.pad(img, ((0, 0), (padding, padding), (padding, padding)))
    i, j = offset
    return padded[:, i:i + h, j:j + w]


AUGMENTATIONS = ("autoaugment", "colorjitter", "randomcrop")


def augment(image: np.ndarray, ops, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Apply the named augmentations in canonical order to one (C, H, W) image."""
    ops = set(ops)
    unknown = ops - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentation(s) {sorted(unknown)}; expected {AUGMENTATIONS}")
    img = image
    if "autoaugment" in ops:
        img = auto_augment(img, rng)
    if "colorjitter" in ops:
        img = color_jitter(img, rng, cfg.brightness, cfg.saturation, cfg.hue)
    if "randomcrop" in ops:
        img = random_crop(img, cfg.crop_padding, rng)
    return img.astype(image.dtype, copy=False)


def augment_batch(images: np.ndarray, ops, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    if not ops:
        return images
    return np.stack([augment(img, ops, rng, cfg) for img in images])


def cutmix(images: np.ndarray, labels: np.ndarray, mix_prob: float, beta_param: float, rng: np.random.Generator,
           lam: float | None = None):
    """Paste a box from a permuted partner into each image.

    Returns ``(mixed, labels_a, labels_b, lam)`` where ``lam`` is the
    fraction of pixels kept from the original image; the loss is
    ``lam * CE(labels_a) + (1 - lam) * CE(labels_b)``.  Passing ``lam``
    forces the mixing ratio (the mix then always happens).
    """
    n, _, h, w = images.shape
    if n < 2:
        raise ValueError("cutmix needs a batch of at least 2")
    if lam is None:
        if rng.random() >= mix_prob:
            return images, labels, labels, 1.0
        lam = float(rng.beta(beta_param, beta_param))
    perm = rng.permutation(n)
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    mixed = images.copy()
    mixed[:, :, y0:y0 + ch, x0:x0 + cw] = images[perm, :, y0:y0 + ch, x0:x0 + cw]
    lam_eff = 1.0 - (ch * cw) / (h * w)
    return mixed, labels, labels[perm], lam_eff


def mixed_targets(labels_a, labels_b, lam: float, num_classes: int) -> np.ndarray:
    eye = np.eye(num_classes)
    return lam * eye[labels_a] + (1.0 - lam) * eye[labels_b]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_dataset(ds: SyntheticDomainDataset, directory, split: Split | None = None,
                   resolution: int | None = None) -> Path:
    """Write one raw interleaved-RGB uint8 file per image plus ``manifest.jsonl``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    imgs = ds.images(resolution)
    names = split_labels(ds, split) if split is not None else np.full(len(ds), "train", dtype=object)
    with (out / "manifest.jsonl").open("w", encoding="utf-8") as fh:
        for i, img in enumerate(imgs):
            fname = f"{i:05d}.rgb"
            raw = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
            (out / fname).write_bytes(raw.tobytes())
            rec = {"file": fname, "class": int(ds.labels[i]), "domain": int(ds.domains[i]),
                   "split": str(names[i]), "height": int(img.shape[1]), "width": int(img.shape[2])}
            fh.write(json.dumps(rec) + "\n")
    (out / "dataset.json").write_text(json.dumps({"config": asdict(ds.config), "seed": ds.seed}, indent=2))
    return out


def read_exported_image(directory, record: dict) -> np.ndarray:
    raw = np.frombuffer((Path(directory) / record["file"]).read_bytes(), dtype=np.uint8)
    return raw.reshape(record["height"], record["width"], 3)
