"""Focal segmentation loss, SSIM feature similarity and the co-training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PRED_EPS = 1e-7


@dataclass
class LossConfig:
    alpha_t: float = 0.25
    gamma_focus: float = 2.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    # explicit stabilizers override the data-range rule when set
    c1: float | None = None
    c2: float | None = None
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.05

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights alpha, beta, gamma must be non-negative")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim window must be odd, got {self.ssim_window}")
        if not 0.0 <= self.alpha_t <= 1.0:
            raise ConfigError("alpha_t must lie in [0, 1]")
        if self.gamma_focus < 0:
            raise ConfigError("gamma_focus must be non-negative")

    def stabilizers(self, data_range: float) -> tuple[float, float]:
        L = data_range if data_range > 0 else 1.0
        # a range so small that the squared constants underflow behaves like a flat input
        if (self.k1 * L) ** 2 == 0.0 and self.k1 > 0 or (self.k2 * L) ** 2 == 0.0 and self.k2 > 0:
            L = 1.0
        c1 = self.c1 if self.c1 is not None else (self.k1 * L) ** 2
        c2 = self.c2 if self.c2 is not None else (self.k2 * L) ** 2
        return c1, c2


def _target_array(target, shape) -> np.ndarray:
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if y.shape != tuple(shape):
        raise ShapeError(f"prediction shape {tuple(shape)} and target shape {y.shape} differ")
    return y.astype(np.float64)


def focal_loss(pred: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """Voxel-mean of ``-a_t (1 - p_t)^gamma log(p_t)``.

    ``a_t`` is ``alpha_t`` on positives and ``1 - alpha_t`` on negatives.
    """
    cfg = cfg or LossConfig()
    y = _target_array(target, pred.shape)
    p = T.clip(pred, PRED_EPS, 1.0 - PRED_EPS)
    # p_t = p where y == 1, 1 - p where y == 0
    p_t = T.add(T.mul(Tensor(2.0 * y - 1.0), p), Tensor(1.0 - y))
    weight = Tensor(y * cfg.alpha_t + (1.0 - y) * (1.0 - cfg.alpha_t))
    modulator = T.power(T.add_scalar(T.neg(p_t), 1.0), cfg.gamma_focus)
    per_voxel = T.mul(weight, T.mul(modulator, T.neg(T.log(p_t))))
    return T.mean_all(per_voxel)


def feature_range(*features: Tensor) -> float:
    """Dynamic range (max - min) over the given detached feature maps."""
    hi = max(float(f.data.max()) for f in features)
    lo = min(float(f.data.min()) for f in features)
    return hi - lo


def ssim(f: Tensor, g: Tensor, cfg: LossConfig | None = None, data_range: float | None = None) -> Tensor:
    """Mean SSIM over channels and Gaussian windows.

    Without an explicit ``data_range`` the joint range of both inputs is used,
    which keeps the value symmetric in its arguments.
    """
    cfg = cfg or LossConfig()
    if f.shape != g.shape:
        raise ShapeError(f"ssim: shapes {f.shape} and {g.shape} differ")
    if f.data.ndim != 4:
        raise ShapeError(f"ssim expects [N,C,H,W] inputs, got {f.shape}")
    win = cfg.ssim_window
    if win % 2 == 0 or win > f.shape[2] or win > f.shape[3]:
        raise ConfigError(f"ssim window {win} invalid for spatial size {f.shape[2:]}")
    if data_range is None:
        data_range = feature_range(f, g)
    c1, c2 = cfg.stabilizers(data_range)

    def smooth(t):
        return T.gaussian_window_filter(t, win, cfg.ssim_sigma)

    mu_f, mu_g = smooth(f), smooth(g)
    mu_ff, mu_gg, mu_fg = T.square(mu_f), T.square(mu_g), T.mul(mu_f, mu_g)
    var_f = T.sub(smooth(T.square(f)), mu_ff)
    var_g = T.sub(smooth(T.square(g)), mu_gg)
    cov = T.sub(smooth(T.mul(f, g)), mu_fg)

    num = T.mul(T.add_scalar(T.scale(mu_fg, 2.0), c1), T.add_scalar(T.scale(cov, 2.0), c2))
    den = T.mul(T.add_scalar(T.add(mu_ff, mu_gg), c1), T.add_scalar(T.add(var_f, var_g), c2))
    return T.mean_all(T.div(num, den))


def moddrop_objective(pred_missing: Tensor, y, cfg: LossConfig | None = None) -> Tensor:
    return focal_loss(pred_missing, y, cfg)


def combined_objective(pred_full: Tensor, pred_missing: Tensor, y, f: Tensor, f_i: Tensor,
                       cfg: LossConfig | None = None, parts: dict | None = None) -> Tensor:
    """``alpha*focal(full) + beta*focal(missing) + gamma*(1 - SSIM(f, f_i))``.

    SSIM stabilizers follow the range of the full-modality features ``f``.
    If ``parts`` is given it receives the individual term values.
    """
    cfg = cfg or LossConfig()
    if f.shape != f_i.shape:
        raise ShapeError(f"feature maps differ in shape: {f.shape} vs {f_i.shape}")
    l_full = focal_loss(pred_full, y, cfg)
    l_missing = focal_loss(pred_missing, y, cfg)
    sim = ssim(f, f_i, cfg, data_range=feature_range(f))
    total = T.add(
        T.add(T.scale(l_full, cfg.alpha), T.scale(l_missing, cfg.beta)),
        T.scale(T.add_scalar(T.neg(sim), 1.0), cfg.gamma),
    )
    if parts is not None:
        parts.update(focal_full=l_full.item(), focal_missing=l_missing.item(), ssim=sim.item())
    return total
