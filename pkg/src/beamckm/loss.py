"""Composite training loss: pixel L2, Laplacian pyramid L1, Sobel edge L1.

All reductions are means over every element, so loss magnitudes do not grow
with resolution and the fixed component weights stay meaningful across map
sizes. Everything here is differentiable through the tensor module.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class CompositeLossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.02
    lambda3: float = 0.01
    pyramid_levels: int = 4
    level_weights: tuple = (1.0, 0.5, 0.25, 0.125)
    edge_eps: float = 1e-6

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if len(self.level_weights) != self.pyramid_levels:
            raise ValueError("need one level weight per pyramid level")


def _check_same_shape(pred, true):
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")


def l2_loss(pred, true):
    """Mean squared difference over all pixels and channels."""
    _check_same_shape(pred, true)
    d = T.sub(pred, true)
    return T.mul(d, d).mean()


def laplacian_pyramid(x, levels=4):
    """Band-pass residuals plus a low-pass base; reconstructs perfectly.

    Level l residual is x_l - upsample(pool(x_l)); the final level is the
    remaining low-pass image itself.
    """
    h, w = x.shape[-2], x.shape[-1]
    divisor = 2 ** (levels - 1)
    if h % divisor or w % divisor:
        raise ValueError(
            f"spatial dims {h}x{w} must be divisible by {divisor} for {levels} levels"
        )
    residuals = []
    current = x
    for _ in range(levels - 1):
        down = T.avg_pool2(current)
        residuals.append(T.sub(current, T.bilinear_upsample2(down)))
        current = down
    residuals.append(current)
    return residuals


def lap_loss(pred, true, config=CompositeLossConfig()):
    """Weighted L1 distance between pyramid residuals of pred and true."""
    _check_same_shape(pred, true)
    pyr_p = laplacian_pyramid(pred, config.pyramid_levels)
    pyr_t = laplacian_pyramid(true, config.pyramid_levels)
    total = None
    for w, rp, rt in zip(config.level_weights, pyr_p, pyr_t):
        term = T.scale(T.absolute(T.sub(rp, rt)).mean(), w)
        total = term if total is None else T.add(total, term)
    return total


def sobel_edge_map(x, eps=1e-6):
    """Per-channel edge strength sqrt(Gx^2 + Gy^2 + eps), replicate-padded."""
    b, c, h, w = x.shape
    kernel = T.Tensor(np.stack([SOBEL_X[None], SOBEL_Y[None]]).astype(x.dtype))  # (2,1,3,3)
    flat = x.reshape((b * c, 1, h, w))
    grads = T.conv2d(T.pad_replicate(flat, 1), kernel)  # (b*c, 2, h, w)
    gsq = T.mul(grads, grads).sum(axis=1)
    strength = T.sqrt(T.add(gsq, T.Tensor(np.asarray(eps, dtype=x.dtype))))
    return strength.reshape((b, c, h, w))


def edge_loss(pred, true, eps=1e-6):
    """Mean L1 distance between Sobel edge maps across all channels."""
    _check_same_shape(pred, true)
    return T.absolute(T.sub(sobel_edge_map(pred, eps), sobel_edge_map(true, eps))).mean()


def composite_loss_terms(pred, true, config=CompositeLossConfig()):
    """The three raw components as scalar tensors: (l2, lap, edge)."""
    return (
        l2_loss(pred, true),
        lap_loss(pred, true, config),
        edge_loss(pred, true, config.edge_eps),
    )


def total_loss(pred, true, config=CompositeLossConfig()):
    """lambda1 * L2 + lambda2 * Lap + lambda3 * Edge, differentiable end to end."""
    l2, lap, edge = composite_loss_terms(pred, true, config)
    return T.add(
        T.add(T.scale(l2, config.lambda1), T.scale(lap, config.lambda2)),
        T.scale(edge, config.lambda3),
    )
