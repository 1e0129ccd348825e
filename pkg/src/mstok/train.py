"""Training loop: seeded end-to-end runs with JSON-lines logging, periodic
checkpoints, and a final eval sweep (losses, PSNR/SSIM, commutation
residuals, latent uniformity)."""

from __future__ import annotations

import json
import math
import os

import numpy as np

from .config import RunConfig
from .data import STREAM_NOISE, Dataset, load_dataset
from .imageio import quantize_roundtrip
from .latent_stats import analyze_latents
from .losses import LossWeights, kl_loss, multiscale_loss
from .metrics import psnr, ssim
from .model import TokenizerModel, init_model, save_checkpoint
from .optim import AdamW, clip_grad_norm, cosine_lr
from .pyramid import image_pyramid
from .tensor import NumericError, Tensor, area_pool, make_rng

ADAMW_BETAS = (0.9, 0.95)
ADAMW_WEIGHT_DECAY = 0.05


def loss_weights_for(config: RunConfig) -> LossWeights:
    return LossWeights(
        l1=config.l1_weight,
        mse=config.mse_weight,
        lpips=config.lpips_weight,
        gan=config.gan_weight,
        kl=config.tokenizer.kl_weight,
        scale_weights=config.scale_weights,
    ).validate(len(config.tokenizer.scales))


def log_path_for(checkpoint: str) -> str:
    stem, _ = os.path.splitext(checkpoint)
    return stem + ".log.jsonl"


def _residuals_per_level(outputs: list[np.ndarray]) -> list[float]:
    """Mean relative gap between each level and the pooled top decode."""
    top = outputs[-1]
    out = []
    for level in outputs[:-1]:
        side = level.shape[-1]
        pooled = area_pool(Tensor(top), side, side).data
        num = np.linalg.norm((level - pooled).reshape(level.shape[0], -1), axis=1)
        den = np.linalg.norm(pooled.reshape(level.shape[0], -1), axis=1)
        out.append(float((num / (den + 1e-8)).mean()))
    out.append(0.0)
    return out


def evaluate(model: TokenizerModel, dataset: Dataset, indices: np.ndarray,
             weights: LossWeights, batch_size: int = 32) -> dict:
    """Deterministic eval pass. PSNR/SSIM go through the uint8 quantization a
    saved PPM would apply, so they match the reconstruct-then-score path."""
    schedule = model.schedule
    n = len(indices)
    if n == 0:
        return {"n_images": 0}
    per_scale = np.zeros(schedule.num_scales)
    residual_acc = np.zeros(schedule.num_scales)
    l1_total = rec_total = kl_total = psnr_total = ssim_total = 0.0
    latents = []

    for start in range(0, n, batch_size):
        batch_idx = indices[start : start + batch_size]
        x = Tensor(dataset.images[batch_idx])
        outputs, code = model.reconstruct(x, deterministic=True)
        targets = image_pyramid(x, schedule, model.config.patch)
        b = len(batch_idx)

        _, breakdown = multiscale_loss(outputs, targets, weights, code)
        per_scale += np.array(breakdown["per_scale"]) * b
        kl_total += breakdown["kl"] * b

        top = outputs[-1].data
        l1_total += float(np.abs(top - x.data).mean()) * b
        rec_total += breakdown["per_scale"][-1] * b
        out_np = [o.data for o in outputs]
        residual_acc += np.array(_residuals_per_level(out_np)) * b
        for j in range(b):
            quant = quantize_roundtrip(top[j])
            psnr_total += psnr(quant, x.data[j])
            ssim_total += ssim(quant, x.data[j])
        latents.append(code.mu.data.reshape(b, -1))

    metrics = {
        "n_images": int(n),
        "l1": l1_total / n,
        "rec_loss": rec_total / n,
        "kl": kl_total / n,
        "psnr": psnr_total / n,
        "ssim": ssim_total / n,
        "per_scale": (per_scale / n).tolist(),
        "commutation": (residual_acc / n).tolist(),
    }
    vectors = np.concatenate(latents, axis=0)
    if vectors.shape[0] >= 3:
        metrics["uniformity"] = analyze_latents(vectors).to_dict()
    else:
        metrics["uniformity"] = None
    return metrics


def train(config: RunConfig, echo: bool = False) -> dict:
    """Run training to completion; returns a JSON-friendly summary."""
    config.validate()
    tok = config.tokenizer
    dataset = load_dataset(config.data_dir, tok.image_size, tok.seed)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    train_idx, eval_idx = dataset.split(config.eval_fraction)

    steps = config.steps
    if config.epochs > 0:
        steps = config.epochs * math.ceil(len(train_idx) / config.batch_size)

    model = init_model(tok)
    params = model.named_parameters()
    optimizer = AdamW(params, betas=ADAMW_BETAS, weight_decay=ADAMW_WEIGHT_DECAY)
    weights = loss_weights_for(config)
    noise_rng = make_rng(tok.seed, stream=STREAM_NOISE)

    checkpoint_dir = os.path.dirname(config.checkpoint)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    log_path = log_path_for(config.checkpoint)
    save_checkpoint(model, config.checkpoint)  # step-0 state is always on disk

    epoch = 0
    order = dataset.epoch_order(tok.seed, epoch, train_idx)
    cursor = 0
    last_entry = None

    with open(log_path, "w", encoding="utf-8") as log:

        def emit(entry: dict) -> None:
            line = json.dumps(entry)
            log.write(line + "\n")
            if echo:
                print(line)

        try:
            for step in range(1, steps + 1):
                if cursor >= len(order):
                    epoch += 1
                    order = dataset.epoch_order(tok.seed, epoch, train_idx)
                    cursor = 0
                batch_idx = order[cursor : cursor + config.batch_size]
                cursor += config.batch_size

                x = Tensor(dataset.images[batch_idx])
                outputs, code = model.reconstruct(
                    x, deterministic=False, rng=noise_rng, training=True
                )
                targets = image_pyramid(x, model.schedule, tok.patch)
                loss, breakdown = multiscale_loss(outputs, targets, weights, code)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at step {step}")

                model.zero_grad()
                loss.backward()
                clip_grad_norm(params, config.grad_clip)
                lr = cosine_lr(step, steps, config.warmup_ratio, config.lr_start, config.lr_end)
                optimizer.step(lr)

                if step == 1 or step == steps or (config.log_interval and step % config.log_interval == 0):
                    last_entry = {
                        "step": step,
                        "lr": lr,
                        "total": breakdown["total"],
                        "per_scale": breakdown["per_scale"],
                        "kl": breakdown["kl"],
                    }
                    emit(last_entry)
                if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                    save_checkpoint(model, config.checkpoint)
        except NumericError as err:
            # Abort: the last interval checkpoint stays on disk untouched.
            emit({"event": "abort", "error": str(err)})
            raise

        save_checkpoint(model, config.checkpoint)
        eval_metrics = evaluate(model, dataset, eval_idx, weights, batch_size=config.batch_size)
        emit({"event": "eval", **eval_metrics})

    return {
        "checkpoint": config.checkpoint,
        "log": log_path,
        "steps": steps,
        "train": last_entry,
        "eval": eval_metrics,
    }
