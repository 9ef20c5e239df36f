"""Run configuration: presets, config files and per-key overrides.

Precedence is preset < config file < explicit overrides (CLI flags).
Unknown keys are rejected everywhere.
"""

import dataclasses
import json
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0

    # codec
    codec_levels: int = 4
    codec_vocab: int = 256
    feature_dim: int = 16
    frame_rate: float = 50.0
    codec_kmeans_iters: int = 30

    # latent encoder
    encoder_dim: int = 64
    encoder_blocks: int = 2
    encoder_heads: int = 2
    encoder_filter: int = 128
    encoder_kernel: int = 3
    encoder_dropout: float = 0.0
    bottleneck_dim: int = 8
    vq_codebook_size: int = 64
    vq_commit_beta: float = 0.25
    vq_decay: float = 0.99
    vq_straight_through: bool = True
    use_bottleneck: bool = True

    # prompt encoder
    prompt_encoder_blocks: int = 2
    prompt_positions: str = "absolute"
    umadain_eps: float = 1e-5
    umadain_omega_mean: float = 0.0
    umadain_omega_std: float = 1.0
    umadain_momentum: float = 0.1
    use_umadain: bool = True

    # variance adaptor
    va_layers: int = 2
    va_kernel: int = 3
    va_dropout: float = 0.0
    pitch_bins: int = 256
    pitch_fmin: float = 50.0
    pitch_fmax: float = 600.0
    lambda_grl: float = 0.5
    grl_reverse_scale: float = 1.0
    use_adversarial: bool = True

    # acoustic decoder
    decoder_layers: int = 6
    decoder_hidden: int = 64
    decoder_filter: int = 128
    decoder_kernel: int = 3
    decoder_dilation: int = 2
    decoder_dilation_cycle: int = 3
    decoder_dropout: float = 0.0
    film_every: int = 2
    attention_heads: int = 2
    decode_steps: int = 8
    sampling_temperature: float = 0.0

    # training
    learning_rate: float = 5e-4
    warmup_steps: int = 200
    adam_betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.01
    batch_frames: int = 2000
    train_steps: int = 2000
    save_every: int = 500
    lambda_vq: float = 1.0
    grad_clip: float = 1.0

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        return out

    def replace(self, **overrides):
        return apply_overrides(self, overrides)


PRESETS = {
    "desk": {},
    # Architecture sizes reported for the full-scale system; never trained here.
    "full": {
        "encoder_dim": 512,
        "encoder_blocks": 6,
        "encoder_heads": 8,
        "encoder_filter": 2048,
        "encoder_kernel": 9,
        "encoder_dropout": 0.1,
        "prompt_encoder_blocks": 6,
        "bottleneck_dim": 64,
        "vq_codebook_size": 8192,
        "va_kernel": 9,
        "va_dropout": 0.1,
        "decoder_layers": 30,
        "decoder_hidden": 512,
        "decoder_filter": 1024,
        "decoder_kernel": 3,
        "decoder_dilation": 2,
        "decoder_dropout": 0.2,
        "film_every": 3,
        "attention_heads": 8,
        "decode_steps": 150,
        "learning_rate": 5e-4,
        "warmup_steps": 32000,
        "batch_frames": 6000,
        "train_steps": 300000,
    },
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
CHOICES = {"prompt_positions": ("absolute", "relative", "none")}


def _coerce(name, value):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: cannot parse boolean from {value!r}")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [float(v) for v in value.split(",")]
        return tuple(float(v) for v in value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if name in CHOICES and value not in CHOICES[name]:
        raise ConfigError(f"{name}: expected one of {CHOICES[name]}, got {value!r}")
    return value


def apply_overrides(cfg, overrides):
    unknown = sorted(set(overrides) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    clean = {k: _coerce(k, v) for k, v in overrides.items()}
    return dataclasses.replace(cfg, **clean)


def preset_config(name="desk"):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_overrides(RunConfig(preset=name), PRESETS[name])


def load_config(preset="desk", path=None, overrides=None):
    """Build a config from a preset, an optional JSON file and overrides.

    A file may itself name a preset; an explicit ``preset`` argument that is
    not the default wins over it.
    """
    file_values = {}
    if path is not None:
        with open(path) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: top level must be an object")
    chosen = preset
    if preset == "desk" and "preset" in file_values:
        chosen = file_values["preset"]
    cfg = preset_config(chosen)
    file_values = {k: v for k, v in file_values.items() if k != "preset"}
    cfg = apply_overrides(cfg, file_values)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def config_from_dict(values):
    values = dict(values)
    cfg = RunConfig()
    return apply_overrides(cfg, values)
