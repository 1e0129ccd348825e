"""Gradient validation: composed-op checks plus a full tiny-model sweep.

Everything runs in double precision. The end-to-end check perturbs every
parameter (a deterministic spread of coordinates for large ones) against
central finite differences of the total training loss.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TokenizerConfig
from .losses import LossWeights, multiscale_loss
from .model import init_model
from .pyramid import build_schedule, downsample_interp, image_pyramid
from .tensor import Tensor, make_rng

TINY_CONFIG = TokenizerConfig(
    image_size=8, patch=4, enc_layers=1, dec_layers=1, enc_width=8, dec_width=8,
    heads=2, latent_dim=4, scales=(1, 2), downsample_mode="conv", regime="scalecausal",
    kl_weight=1e-2, seed=0,
)


def op_library_checks(eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error for a library of composed operations."""
    rng = make_rng(11)
    results: dict[str, float] = {}

    x = Tensor(rng.standard_normal((4, 4)))
    results["sum_of_squares"] = T.grad_check(lambda t: T.tsum(T.square(t)), x, eps)

    mask = np.where(rng.random((4, 4)) < 0.4, T.MASK_VALUE, 0.0)
    mask[:, 1] = 0.0
    results["masked_softmax_square_sum"] = T.grad_check(
        lambda t: T.tsum(T.square(T.softmax(t, axis=-1, additive_mask=mask))), x, eps
    )

    kernel = Tensor(rng.standard_normal((3, 2, 2, 2)), dtype=np.float64)
    gain = Tensor(rng.standard_normal(3), dtype=np.float64)
    bias = Tensor(rng.standard_normal(3), dtype=np.float64)

    def conv_ln_mean(t):
        y = T.conv2d(t, kernel, stride=2)
        y = T.transpose(y, (0, 2, 3, 1))
        y = T.layer_norm(y, gain, bias)
        return T.tmean(y)

    results["conv_layernorm_mean"] = T.grad_check(conv_ln_mean, Tensor(rng.standard_normal((1, 2, 4, 4))), eps)

    sched = build_schedule(4, [1, 2, 4])
    coeffs = [Tensor(rng.standard_normal((g, g, 3)), dtype=np.float64) for g in sched.grids]

    def pyramid_weighted_sum(t):
        pyr = downsample_interp(t, sched)
        total = None
        for m, c in zip(pyr.maps, coeffs):
            term = T.tsum(T.mul(m, c))
            total = term if total is None else T.add(total, term)
        return total

    results["pyramid_interp"] = T.grad_check(pyramid_weighted_sum, Tensor(rng.standard_normal((4, 4, 3))), eps)

    w = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
    results["gelu_mlp"] = T.grad_check(
        lambda t: T.tmean(T.gelu(T.matmul(t, w))), Tensor(rng.standard_normal((3, 4))), eps
    )

    results["area_pool_fractional"] = T.grad_check(
        lambda t: T.tsum(T.square(T.area_pool(t, 3, 3))), Tensor(rng.standard_normal((1, 2, 4, 4))), eps
    )
    return results


def _coordinate_subset(size: int, max_coords: int) -> np.ndarray:
    if size <= max_coords:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, max_coords).round().astype(int))


def model_end_to_end_check(eps: float = 1e-4, max_coords_per_param: int = 8) -> float:
    """Max relative gradient error of the total loss over every parameter of a
    tiny double-precision model."""
    cfg = TINY_CONFIG
    model = init_model(cfg, dtype=np.float64)
    rng = make_rng(12)
    x = Tensor(rng.uniform(-1, 1, (2, 3, cfg.image_size, cfg.image_size)))
    g = cfg.image_size // cfg.patch
    noise = rng.standard_normal((2, g, g, cfg.latent_dim))
    weights = LossWeights(kl=cfg.kl_weight)

    def loss_fn() -> Tensor:
        code = model.encode(x)
        std = T.texp(code.logvar * 0.5)
        z = T.add(code.mu, T.mul(std, Tensor(noise)))
        outputs = model.decode_pyramid(z)
        targets = image_pyramid(x, model.schedule, cfg.patch)
        total, _ = multiscale_loss(outputs, targets, weights, code)
        return total

    params = model.named_parameters()
    model.zero_grad()
    loss_fn().backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in _coordinate_subset(flat.size, max_coords_per_param):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            denom = max(abs(ana[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[i] - numeric) / denom)
    return worst


def run_all() -> tuple[dict[str, float], float]:
    return op_library_checks(), model_end_to_end_check()
