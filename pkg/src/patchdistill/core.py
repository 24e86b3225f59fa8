"""Shared domain types, run configuration, and the deterministic random-stream
discipline that makes teacher-side and student-side generation bit-identical.

All randomness in the toolkit flows through keyed substreams derived from a
single 64-bit master seed.  Derivation is stateless (a SHA-256 mix of the
master seed and a purpose tuple feeding a counter-based Philox generator), so
streams can be created and consumed concurrently in any order without
affecting reproducibility.

CRITICAL: never use Python's built-in ``hash()`` for seed derivation - it is
salted per process.  Everything here goes through SHA-256.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

_HASH_DOMAIN = b"patchdistill.v1"
_U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class GenerationError(RuntimeError):
    """Variant generation produced a non-finite or otherwise unusable result."""


class ReproducibilityError(RuntimeError):
    """A reproducibility contract was violated (fingerprint or mode mismatch)."""


# ---------------------------------------------------------------------------
# Seed streams
# ---------------------------------------------------------------------------

class Purpose(str, Enum):
    """The six sanctioned uses of derived randomness."""

    CROP = "crop"
    NOISE_EPS = "noise_eps"
    ANCESTRAL_EPS = "ancestral_eps"
    MIXUP_PARTNER = "mixup_partner"
    MIXUP_GAMMA = "mixup_gamma"
    BATCH_ORDER = "batch_order"


def stable_key(*parts: object) -> int:
    """Collision-resistant 128-bit key from arbitrary parts, stable across
    runs and platforms."""
    data = _HASH_DOMAIN + b"|" + b"|".join(str(p).encode("utf-8") for p in parts)
    return int.from_bytes(hashlib.sha256(data).digest()[:16], "little")


def stable_generator(*parts: object) -> np.random.Generator:
    """Counter-based generator keyed by `parts`; independent per distinct tuple."""
    return np.random.Generator(np.random.Philox(key=stable_key(*parts)))


def stable_seed(*parts: object) -> int:
    """Stable u64 derived from `parts` (for APIs that want a plain seed)."""
    data = _HASH_DOMAIN + b"|seed|" + b"|".join(str(p).encode("utf-8") for p in parts)
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def _check_master_seed(master_seed: int) -> int:
    if not isinstance(master_seed, (int, np.integer)):
        raise ConfigError(f"master seed must be an integer, got {type(master_seed).__name__}")
    if not 0 <= int(master_seed) <= _U64_MAX:
        raise ConfigError(f"master seed must fit in u64, got {master_seed}")
    return int(master_seed)


def derive_substream(
    master_seed: int,
    patch_id: int,
    variant_index: int,
    purpose: Union[Purpose, str],
) -> np.random.Generator:
    """Derive the independent substream for (patch_id, variant_index, purpose).

    Repeated calls with identical arguments produce identical draw sequences;
    distinct tuples produce streams with no shared prefix.
    """
    _check_master_seed(master_seed)
    try:
        purpose = Purpose(purpose)
    except ValueError:
        valid = ", ".join(p.value for p in Purpose)
        raise ConfigError(f"unknown purpose_tag {purpose!r}; expected one of: {valid}") from None
    return stable_generator("substream", master_seed, int(patch_id), int(variant_index), purpose.value)


@dataclass(frozen=True)
class SeedStream:
    """Handle for all randomness of one run, rooted at a single master seed."""

    master_seed: int

    def __post_init__(self) -> None:
        _check_master_seed(self.master_seed)

    def substream(self, patch_id: int, variant_index: int, purpose: Union[Purpose, str]) -> np.random.Generator:
        return derive_substream(self.master_seed, patch_id, variant_index, purpose)

    def model_seed(self, role: str) -> int:
        """Plain u64 training seed for one model role ("teacher", "student", ...)."""
        return stable_seed("model", self.master_seed, role)


# ---------------------------------------------------------------------------
# Images and datasets
# ---------------------------------------------------------------------------

#: An image is a float32 array of shape (H, W, 3) with values in [0, 1].
ImageTensor = np.ndarray


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be an (H, W, 3) array")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must have H >= 1 and W >= 1, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} has values outside [0, 1]")
    return img


def quantize_to_u8(img: np.ndarray) -> np.ndarray:
    """Float [0,1] pixels to the u8 interchange form (round to nearest level)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize_from_u8(block: np.ndarray) -> np.ndarray:
    """The one true dequantization both sides of the transfer use."""
    return (block.astype(np.float32) / np.float32(255.0)).astype(np.float32)


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable image/label collection.

    images: (N, H, W, 3) float32 in [0, 1]; labels: (N,) integer class ids.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"images ({len(self.images)}) and labels ({len(self.labels)}) differ in length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_height(self) -> int:
        return self.images.shape[1]

    @property
    def image_width(self) -> int:
        return self.images.shape[2]

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.labels == class_id)[0]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSettings:
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 128


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a distillation run.

    `variants_per_patch` left as None means "one variant per student epoch",
    the default coupling between payload size and training length.
    """

    # budget
    ipc: int = 1
    compression_ratio: int = 2          # patch side divisor; r**2 patches per IPC
    crops_per_image: int = 16           # candidates mined per source image
    variants_per_patch: Optional[int] = None

    # expansion
    noise_ratio: float = 0.8            # fraction of the forward process applied
    timesteps: int = 1000
    inference_steps: int = 5
    sigma_mode: str = "posterior"       # "posterior" | "zero"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    upsample_filter: str = "bicubic"    # "nearest" | "bilinear" | "bicubic"
    generation_mode: str = "anchored"   # "anchored" | "patches_only" | "noise_only"

    # mixup
    mixup_enabled: bool = True
    mixup_gamma_lo: float = 0.5
    mixup_gamma_hi: float = 1.0

    # mining
    crop_scale_lo: float = 0.3
    crop_scale_hi: float = 1.0
    crop_filter: str = "bilinear"

    # training
    arch: str = "conv_small"
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 128
    temperature: float = 1.0
    teacher_epochs: int = 12
    autoencoder_epochs: int = 16
    denoiser_epochs: int = 30
    latent_channels: int = 4

    master_seed: int = 0

    @property
    def resolved_variants_per_patch(self) -> int:
        return self.epochs if self.variants_per_patch is None else self.variants_per_patch

    @property
    def patch_budget(self) -> int:
        """Patches stored per class: IPC * r^2."""
        return self.ipc * self.compression_ratio**2

    def student_opt(self) -> OptimizerSettings:
        return OptimizerSettings(self.learning_rate, self.weight_decay, self.epochs, self.batch_size)

    def teacher_opt(self) -> OptimizerSettings:
        return OptimizerSettings(self.learning_rate, self.weight_decay, self.teacher_epochs, self.batch_size)

    def autoencoder_opt(self) -> OptimizerSettings:
        return OptimizerSettings(self.learning_rate, self.weight_decay, self.autoencoder_epochs, self.batch_size)

    def denoiser_opt(self) -> OptimizerSettings:
        return OptimizerSettings(self.learning_rate, self.weight_decay, self.denoiser_epochs, self.batch_size)


def rho_to_step(rho: float, timesteps: int) -> int:
    """Map the noise ratio to a timestep: t' = round(rho * T), clamped to [0, T].

    t' = 0 means "no corruption" and bypasses the diffusion entirely.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"noise_ratio out of [0, 1]: {rho}")
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    return min(max(int(math.floor(rho * timesteps + 0.5)), 0), timesteps)


def config_violations(cfg: RunConfig) -> list[str]:
    """All violated invariants, each naming the offending field."""
    v: list[str] = []
    if cfg.ipc < 1:
        v.append("ipc >= 1 required")
    if cfg.compression_ratio < 1:
        v.append("compression_ratio >= 1 required")
    if cfg.crops_per_image < 1:
        v.append("crops_per_image >= 1 required")
    if cfg.variants_per_patch is not None and cfg.variants_per_patch < 1:
        v.append("variants_per_patch >= 1 required (or leave unset)")
    if not 0.0 <= cfg.noise_ratio <= 1.0:
        v.append("noise_ratio out of [0, 1]")
    if cfg.timesteps < 1:
        v.append("timesteps >= 1 required")
    if cfg.inference_steps < 1:
        v.append("inference_steps >= 1 required")
    elif 0.0 <= cfg.noise_ratio <= 1.0 and cfg.timesteps >= 1:
        t_prime = rho_to_step(cfg.noise_ratio, cfg.timesteps)
        if t_prime > 0 and cfg.inference_steps > t_prime:
            v.append(f"inference_steps <= round(noise_ratio * timesteps) = {t_prime} required")
    if cfg.sigma_mode not in ("posterior", "zero"):
        v.append("sigma_mode must be 'posterior' or 'zero'")
    if not 0.0 < cfg.beta_start <= cfg.beta_end < 1.0:
        v.append("beta_start/beta_end must satisfy 0 < beta_start <= beta_end < 1")
    if cfg.upsample_filter not in ("nearest", "bilinear", "bicubic"):
        v.append("upsample_filter must be one of nearest, bilinear, bicubic")
    if cfg.generation_mode not in ("anchored", "patches_only", "noise_only"):
        v.append("generation_mode must be one of anchored, patches_only, noise_only")
    if not 0.0 <= cfg.mixup_gamma_lo <= cfg.mixup_gamma_hi <= 1.0:
        v.append("mixup_gamma_lo/mixup_gamma_hi must satisfy 0 <= lo <= hi <= 1")
    if not 0.0 < cfg.crop_scale_lo <= cfg.crop_scale_hi <= 1.0:
        v.append("crop_scale_lo/crop_scale_hi must satisfy 0 < lo <= hi <= 1")
    if cfg.crop_filter not in ("nearest", "bilinear", "bicubic"):
        v.append("crop_filter must be one of nearest, bilinear, bicubic")
    if cfg.learning_rate <= 0:
        v.append("learning_rate > 0 required")
    if cfg.weight_decay < 0:
        v.append("weight_decay >= 0 required")
    if cfg.epochs < 0:
        v.append("epochs >= 0 required")
    if cfg.batch_size < 1:
        v.append("batch_size >= 1 required")
    if cfg.temperature <= 0:
        v.append("temperature > 0 required")
    for f in ("teacher_epochs", "autoencoder_epochs", "denoiser_epochs"):
        if getattr(cfg, f) < 0:
            v.append(f"{f} >= 0 required")
    if cfg.latent_channels < 1:
        v.append("latent_channels >= 1 required")
    if not 0 <= cfg.master_seed <= _U64_MAX:
        v.append("master_seed must fit in u64")
    return v


def validate_config(cfg: RunConfig) -> RunConfig:
    """Return `cfg` unchanged if all invariants hold, else raise ConfigError
    listing every violated constraint."""
    violations = config_violations(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    return cfg


# ---------------------------------------------------------------------------
# Config file format: flat "key = value" lines, '#' comments
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(field_name: str, raw: str):
    field = _CONFIG_FIELDS[field_name]
    text = raw.strip()
    if field.type in ("Optional[int]", Optional[int]):
        if text.lower() in ("none", ""):
            return None
        return int(text)
    base = field.type if isinstance(field.type, type) else None
    type_name = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    if type_name == "bool" or base is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{field_name}: cannot parse {text!r} as bool")
    if type_name == "int" or base is int:
        return int(text)
    if type_name == "float" or base is float:
        return float(text)
    return text


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return validate_config(RunConfig(**values))


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: RunConfig) -> str:
    """Canonical key = value rendering (round-trips through parse_config_text)."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        rendered = "none" if value is None else (str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value))
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"
