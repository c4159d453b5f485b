"""Loss-landscape slices along random, filter-normalized directions.

Works with any object exposing ``named_parameters()`` (name -> Parameter)
plus, optionally, ``eval()``/``train()`` and a ``training`` flag.  The loss
is supplied as ``loss_fn(model, data) -> float``; the default is eval-mode
cross-entropy on ``data = (images, labels)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

NORMALIZATIONS = ("filter", "global", "none")


@dataclass
class Direction:
    tensors: dict[str, np.ndarray]
    mode: str

    def scaled(self, t: float) -> dict[str, np.ndarray]:
        return {k: t * v for k, v in self.tensors.items()}


@dataclass
class LandscapeSlice:
    axes: list[np.ndarray]
    values: np.ndarray
    base_loss: float
    r: float
    steps: int
    mode: str = "filter"
    seed: int | None = None
    split: str = "train"

    @property
    def ndim(self) -> int:
        return len(self.axes)

    def origin_index(self) -> tuple[int, ...]:
        return (self.steps // 2,) * self.ndim


def _perturbable(name: str) -> bool:
    # BatchNorm affine parameters and biases stay fixed
    leaf = name.rsplit(".", 1)
    owner = leaf[0].rsplit(".", 1)[-1] if len(leaf) == 2 else ""
    return not (name.endswith(".bias") or owner.startswith("bn"))


def sample_direction(model, mode: str = "filter", rng: np.random.Generator | None = None) -> Direction:
    """Standard-normal direction, normalized per output filter, globally, or not at all."""
    if mode not in NORMALIZATIONS:
        raise ValueError(f"mode must be one of {NORMALIZATIONS}, got {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    params = model.named_parameters()
    if not params:
        raise ValueError("model has no parameters")
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        theta = p.data.astype(np.float64)
        if not _perturbable(name):
            out[name] = np.zeros_like(theta)
            continue
        d = rng.standard_normal(theta.shape)
        if mode == "filter":
            if theta.ndim <= 1:
                d *= np.linalg.norm(theta) / max(np.linalg.norm(d), 1e-300)
            else:
                t2 = theta.reshape(theta.shape[0], -1)
                d2 = d.reshape(d.shape[0], -1)
                d2 *= (np.linalg.norm(t2, axis=1) / np.maximum(np.linalg.norm(d2, axis=1), 1e-300))[:, None]
        out[name] = d
    if mode == "global":
        keys = [k for k in out if _perturbable(k)]
        tn = math.sqrt(sum(float(np.sum(params[k].data.astype(np.float64) ** 2)) for k in keys))
        dn = math.sqrt(sum(float(np.sum(out[k] ** 2)) for k in keys))
        for k in keys:
            out[k] *= tn / max(dn, 1e-300)
    return Direction(out, mode)


def zero_direction(model) -> Direction:
    return Direction({k: np.zeros(p.shape) for k, p in model.named_parameters().items()}, "none")


def default_loss(model, data) -> float:
    from .pipeline import mean_loss
    images, labels = data
    return mean_loss(model, images, labels)


def _grid(r: float, steps: int) -> np.ndarray:
    if steps < 1 or steps % 2 == 0:
        raise ValueError(f"steps must be a positive odd integer so the origin is on the grid, got {steps}")
    if steps == 1:
        return np.zeros(1)
    g = np.linspace(-r, r, steps)
    g[steps // 2] = 0.0
    return g


class _Perturber:
    """Applies offsets to a model's parameters and restores them bit-exactly."""

    def __init__(self, model):
        self.model = model
        self.params = model.named_parameters()
        self.original = {k: p.data.copy() for k, p in self.params.items()}
        self.was_training = getattr(model, "training", False)

    def __enter__(self):
        if hasattr(self.model, "eval"):
            self.model.eval()
        return self

    def set(self, offset: dict[str, np.ndarray] | None) -> None:
        for k, p in self.params.items():
            base = self.original[k]
            if offset is None:
                p.data[...] = base
            else:
                p.data[...] = (base.astype(np.float64) + offset[k]).astype(base.dtype)

    def __exit__(self, *exc):
        self.set(None)
        if self.was_training and hasattr(self.model, "train"):
            self.model.train()
        return False


def _safe(loss: float) -> float:
    loss = float(loss)
    return loss if math.isfinite(loss) else math.inf


def loss_slice_1d(model, data, direction: Direction, r: float = 1.0, steps: int = 41,
                  loss_fn: Callable = default_loss, seed: int | None = None, split: str = "train") -> LandscapeSlice:
    ts = _grid(r, steps)
    vals = np.empty(steps)
    with _Perturber(model) as pert:
        for i, t in enumerate(ts):
            pert.set(None if t == 0 else direction.scaled(t))
            vals[i] = _safe(loss_fn(model, data))
    base = vals[steps // 2]
    return LandscapeSlice([ts], vals, base, r, steps, direction.mode, seed, split)


def loss_slice_2d(model, data, dir1: Direction, dir2: Direction, r: float = 1.0, steps: int = 21,
                  loss_fn: Callable = default_loss, seed: int | None = None, split: str = "train") -> LandscapeSlice:
    """``values[i, j] = loss(theta + u_i*dir1 + v_j*dir2)``."""
    us = _grid(r, steps)
    vals = np.empty((steps, steps))
    with _Perturber(model) as pert:
        for i, u in enumerate(us):
            for j, v in enumerate(us):
                if u == 0 and v == 0:
                    pert.set(None)
                else:
                    # u*d1 + v*d2 is symmetric under swapping (u, d1) with (v, d2)
                    pert.set({k: u * dir1.tensors[k] + v * dir2.tensors[k] for k in dir1.tensors})
                vals[i, j] = _safe(loss_fn(model, data))
    base = vals[steps // 2, steps // 2]
    return LandscapeSlice([us, us.copy()], vals, base, r, steps, dir1.mode, seed, split)


def sharpness(sl: LandscapeSlice, radius_fraction: float = 1.0) -> float:
    """Largest loss increase over grid points within ``radius_fraction * r`` of the origin.

    The origin itself is excluded from the neighbourhood; lower is flatter.
    """
    if not radius_fraction >= 0:
        raise ValueError("radius_fraction must be nonnegative")
    mesh = np.meshgrid(*sl.axes, indexing="ij")
    dist = np.sqrt(sum(m ** 2 for m in mesh))
    limit = radius_fraction * sl.r * (1 + 1e-12)
    mask = (dist <= limit) & (dist > 0)
    if not mask.any():
        raise ValueError(f"no grid points within radius fraction {radius_fraction} besides the origin")
    return float(np.max(sl.values[mask] - sl.base_loss))


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def write_slice_csv(path, sl: LandscapeSlice) -> None:
    """One row per grid point; slice metadata repeats in trailing columns."""
    meta = [repr(float(sl.base_loss)), repr(float(sl.r)), sl.steps, sl.mode, "" if sl.seed is None else sl.seed, sl.split]
    meta_cols = ["base_loss", "r", "steps", "normalization", "seed", "split"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if sl.ndim == 1:
            w.writerow(["t", "loss"] + meta_cols)
            for t, v in zip(sl.axes[0], sl.values):
                w.writerow([repr(float(t)), repr(float(v))] + meta)
        else:
            w.writerow(["u", "v", "loss"] + meta_cols)
            for i, u in enumerate(sl.axes[0]):
                for j, v in enumerate(sl.axes[1]):
                    w.writerow([repr(float(u)), repr(float(v)), repr(float(sl.values[i, j]))] + meta)


def read_slice_csv(path) -> LandscapeSlice:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    first = rows[0]
    seed = int(first["seed"]) if first["seed"] else None
    steps = int(first["steps"])
    if "t" in first:
        axes = [np.array([float(r["t"]) for r in rows])]
        vals = np.array([float(r["loss"]) for r in rows])
    else:
        us = np.array([float(r["u"]) for r in rows[::steps]])
        axes = [us, us.copy()]
        vals = np.array([float(r["loss"]) for r in rows]).reshape(steps, steps)
    return LandscapeSlice(axes, vals, float(first["base_loss"]), float(first["r"]), steps,
                          first["normalization"], seed, first["split"])


def _color(x: float) -> str:
    # dark blue (low) -> yellow (high)
    x = min(max(x, 0.0), 1.0)
    r, g, b = int(30 + 225 * x), int(40 + 200 * x), int(120 - 90 * x)
    return f"#{r:02x}{g:02x}{b:02x}"


def write_slice_svg(path, sl: LandscapeSlice, size: int = 400) -> None:
    """Curve for 1-d slices, heatmap for 2-d slices."""
    finite = sl.values[np.isfinite(sl.values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    pad = 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" height="{size + 2 * pad}">',
             '<rect width="100%" height="100%" fill="white"/>']
    if sl.ndim == 1:
        pts = []
        for t, v in zip(sl.axes[0], sl.values):
            x = pad + (t + sl.r) / (2 * sl.r or 1) * size
            y = pad + size - ((min(v, hi) - lo) / span) * size
            pts.append(f"{x:.2f},{y:.2f}")
        parts.append(f'<polyline fill="none" stroke="black" stroke-width="2" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">loss in [{lo:.4g}, {hi:.4g}], r={sl.r}</text>')
    else:
        n = sl.steps
        cell = size / n
        for i in range(n):
            for j in range(n):
                v = sl.values[i, j]
                c = _color((v - lo) / span) if math.isfinite(v) else "#ff0000"
                parts.append(f'<rect x="{pad + j * cell:.2f}" y="{pad + (n - 1 - i) * cell:.2f}" '
                             f'width="{cell + 0.5:.2f}" height="{cell + 0.5:.2f}" fill="{c}"/>')
        parts.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">loss in [{lo:.4g}, {hi:.4g}], r={sl.r}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts), encoding="utf-8")
