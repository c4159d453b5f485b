"""ShakeDrop at residual joins.

Training forward:  ``x_res + (beta + alpha - beta*alpha) * x_block``
Training backward: block gradient scaled by ``beta + gamma - beta*gamma``,
                   with ``gamma`` drawn when the backward pass reaches the join.
Inference:         ``x_res + E[beta + alpha - beta*alpha] * x_block``.

``beta ~ Bernoulli(gate_prob)`` is shared by forward and backward.  With
``literal_eq3`` the backward factor is ``gamma + alpha - gamma*alpha``
instead, i.e. the forward uniform draw plays the gate's role.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, scaled_join, ShapeError


@dataclass(frozen=True)
class ShakeDropConfig:
    gate_prob: float = 0.5
    alpha_range: tuple[float, float] = (0.0, 1.0)
    gamma_range: tuple[float, float] = (0.0, 1.0)
    literal_eq3: bool = False
    per_example: bool = False
    # gate_prob applies to the last join; earlier joins keep more often
    linear_decay: bool = False
    # test hook: backward reuses the forward coefficient exactly
    tie_gamma_to_alpha: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gate_prob <= 1.0:
            raise ValueError(f"gate_prob must lie in [0, 1], got {self.gate_prob}")
        for name in ("alpha_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    def layer_gate_prob(self, layer: int, n_layers: int) -> float:
        """Keep probability for the join at 1-based position ``layer``."""
        if not self.linear_decay:
            return self.gate_prob
        return 1.0 - (layer / n_layers) * (1.0 - self.gate_prob)

    def expected_coefficient(self, gate_prob: float | None = None) -> float:
        p = self.gate_prob if gate_prob is None else gate_prob
        return p + 0.5 * (self.alpha_range[0] + self.alpha_range[1]) * (1.0 - p)


def layer_rng(seed: int, layer: int, step: int) -> np.random.Generator:
    """Independent stream keyed by (seed, layer, step)."""
    return np.random.default_rng([seed, layer, step])


class ShakeDropSample:
    """Coefficients for one application of ShakeDrop.

    ``gamma`` stays ``None`` until the backward pass asks for it.
    """

    def __init__(self, beta, alpha, cfg: ShakeDropConfig, rng: np.random.Generator):
        self.beta = beta
        self.alpha = alpha
        self.gamma = None
        self.cfg = cfg
        self._rng = rng

    @property
    def forward_coefficient(self):
        # beta + alpha - beta*alpha, written so beta in {0, 1} gives alpha or 1 exactly
        return self.beta + self.alpha * (1.0 - self.beta)

    def backward_coefficient(self):
        if self.cfg.tie_gamma_to_alpha:
            self.gamma = self.alpha
            return self.forward_coefficient
        if self.gamma is None:
            self.gamma = _uniform(self._rng, self.cfg.gamma_range, np.shape(self.beta))
        if self.cfg.literal_eq3:
            return self.gamma + self.alpha * (1.0 - self.gamma)
        return self.beta + self.gamma * (1.0 - self.beta)

    def __repr__(self) -> str:
        return f"ShakeDropSample(beta={self.beta!r}, alpha={self.alpha!r}, gamma={self.gamma!r})"


def _uniform(rng, bounds, shape):
    lo, hi = bounds
    v = rng.uniform(lo, hi, size=shape) if shape else rng.uniform(lo, hi)
    return v if shape else float(v)


def draw_sample(cfg: ShakeDropConfig, rng: np.random.Generator, batch: int = 1,
                gate_prob: float | None = None) -> ShakeDropSample:
    p = cfg.gate_prob if gate_prob is None else gate_prob
    shape = (batch, 1, 1, 1) if cfg.per_example else ()
    if shape:
        beta = (rng.random(shape) < p).astype(np.float64)
    else:
        beta = float(rng.random() < p)
    alpha = _uniform(rng, cfg.alpha_range, shape)
    return ShakeDropSample(beta, alpha, cfg, rng)


def shakedrop_forward(x_residual: Tensor, x_block: Tensor, cfg: ShakeDropConfig, rng: np.random.Generator,
                      gate_prob: float | None = None) -> tuple[Tensor, ShakeDropSample]:
    if x_residual.shape != x_block.shape:
        raise ShapeError(f"shakedrop: residual {x_residual.shape} != block {x_block.shape}")
    sample = draw_sample(cfg, rng, x_block.shape[0] if x_block.ndim else 1, gate_prob)
    out = scaled_join(x_residual, x_block, sample.forward_coefficient, override=sample)
    return out, sample


def shakedrop_backward(grad_in: np.ndarray, sample: ShakeDropSample) -> np.ndarray:
    """Gradient reaching the block branch, given the gradient at the join output."""
    return np.asarray(grad_in) * sample.backward_coefficient()


def shakedrop_inference(x_residual: Tensor, x_block: Tensor, cfg: ShakeDropConfig,
                        gate_prob: float | None = None) -> Tensor:
    return scaled_join(x_residual, x_block, cfg.expected_coefficient(gate_prob))
