"""Dataclass configs and the line-oriented ``key=value`` config format.

Config files hold one ``key=value`` pair per line; ``#`` starts a comment.
Unknown keys are rejected so typos fail loudly. Grid lists are comma-separated
integers (``scales=1,2,4,8``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .attention import AttentionRegime
from .pyramid import ScaleSchedule, build_schedule, conv_chain_lengths
from .tensor import ConfigError


@dataclass(frozen=True)
class TokenizerConfig:
    image_size: int = 32
    patch: int = 4
    enc_layers: int = 2
    dec_layers: int = 4
    enc_width: int = 64
    dec_width: int = 64
    heads: int = 4
    latent_dim: int = 16
    scales: tuple[int, ...] = (1, 2, 4, 8)
    downsample_mode: str = "interp"
    regime: str = "scalecausal"
    kl_weight: float = 1e-6
    drop_path: float = 0.0
    seed: int = 0

    def validate(self) -> "TokenizerConfig":
        if self.image_size <= 0 or self.patch <= 0 or self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} must be a positive multiple of patch {self.patch}")
        if self.enc_width % self.heads or self.dec_width % self.heads:
            raise ConfigError(f"widths {self.enc_width}/{self.dec_width} must be divisible by heads {self.heads}")
        if self.downsample_mode not in ("interp", "conv"):
            raise ConfigError(f"downsample_mode must be 'interp' or 'conv', got {self.downsample_mode!r}")
        AttentionRegime.parse(self.regime)
        schedule = self.schedule()
        if self.downsample_mode == "conv":
            conv_chain_lengths(schedule)  # raises for non-dyadic grids
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.kl_weight < 0:
            raise ConfigError(f"kl_weight must be nonnegative, got {self.kl_weight}")
        return self

    def schedule(self) -> ScaleSchedule:
        return build_schedule(self.image_size // self.patch, self.scales)

    def attention_regime(self) -> AttentionRegime:
        return AttentionRegime.parse(self.regime)


@dataclass(frozen=True)
class RunConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    data_dir: str = "synthetic:512"
    steps: int = 2000
    epochs: int = 0                  # when > 0 and steps unset, derives steps
    batch_size: int = 64
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    warmup_ratio: float = 0.03
    log_interval: int = 100
    checkpoint: str = "tokenizer.htok"
    checkpoint_interval: int = 0     # 0: final checkpoint only
    eval_fraction: float = 0.125
    l1_weight: float = 1.0
    mse_weight: float = 0.4
    lpips_weight: float = 0.0
    gan_weight: float = 0.0
    scale_weights: tuple[float, ...] = ()
    grad_clip: float = 1.0

    def validate(self) -> "RunConfig":
        self.tokenizer.validate()
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must be in [0, 1), got {self.eval_fraction}")
        if self.lpips_weight != 0.0 or self.gan_weight != 0.0:
            raise ConfigError("lpips_weight and gan_weight are config slots only; enabling them is unsupported")
        if self.scale_weights and len(self.scale_weights) != len(self.tokenizer.scales):
            raise ConfigError(
                f"scale_weights has {len(self.scale_weights)} entries for {len(self.tokenizer.scales)} scales"
            )
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}")
        return self


_TOKENIZER_KEYS = {f.name for f in fields(TokenizerConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"tokenizer"}


def _parse_scalar(value: str, kind):
    value = value.strip()
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def _parse_int_tuple(value: str) -> tuple[int, ...]:
    parts = [p for p in value.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _parse_float_tuple(value: str) -> tuple[float, ...]:
    parts = [p for p in value.split(",") if p.strip()]
    return tuple(float(p) for p in parts)


def parse_kv_lines(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines, dropping blanks and ``#`` comments."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def tokenizer_config_from_kv(kv: dict[str, str], base: TokenizerConfig | None = None) -> TokenizerConfig:
    cfg = base or TokenizerConfig()
    updates = {}
    for key, value in kv.items():
        if key not in _TOKENIZER_KEYS:
            raise ConfigError(f"unknown tokenizer config key {key!r}")
        if key == "scales":
            updates[key] = _parse_int_tuple(value)
        elif key in ("downsample_mode", "regime"):
            updates[key] = value
        elif key in ("kl_weight", "drop_path"):
            updates[key] = float(value)
        else:
            updates[key] = int(value)
    return replace(cfg, **updates).validate()


def run_config_from_kv(kv: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    tok_kv = {k: v for k, v in kv.items() if k in _TOKENIZER_KEYS}
    rest = {k: v for k, v in kv.items() if k not in _TOKENIZER_KEYS}
    unknown = set(rest) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    tokenizer = tokenizer_config_from_kv(tok_kv, cfg.tokenizer) if tok_kv else cfg.tokenizer
    updates: dict = {"tokenizer": tokenizer}
    for key, value in rest.items():
        if key == "scale_weights":
            updates[key] = _parse_float_tuple(value)
        elif key in ("data_dir", "checkpoint"):
            updates[key] = value
        elif key in ("lr_start", "lr_end", "warmup_ratio", "eval_fraction", "l1_weight",
                     "mse_weight", "lpips_weight", "gan_weight", "grad_clip"):
            updates[key] = float(value)
        else:
            updates[key] = int(value)
    return replace(cfg, **updates).validate()


def tokenizer_config_to_kv(cfg: TokenizerConfig) -> str:
    lines = []
    for f in fields(TokenizerConfig):
        value = getattr(cfg, f.name)
        if f.name == "scales":
            value = ",".join(str(g) for g in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus ``key=value`` overrides."""
    kv: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            kv.update(parse_kv_lines(fh.read()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        kv[key.strip()] = value.strip()
    return run_config_from_kv(kv)
