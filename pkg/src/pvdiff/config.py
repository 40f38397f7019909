"""Run configuration: flat key=value files with '#' comments.

Every tunable has a typed default below; unknown keys are rejected and all
values are range-checked before any work starts. snapshot() serializes the
fully resolved configuration, and a run restarted from its snapshot
reproduces the original bit for bit.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or out-of-range values."""


def _boolean(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (type, default). Desk-scale values; the full-scale settings from
# the source setup (4096 points, 256 groups of 32, batch 256) stay reachable
# through the same keys.
DEFAULTS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "data.dir": (str, "data"),
    "data.episodes": (int, 50),
    "data.variants": (str, "color_reach,depth_reach,plain_reach"),
    "env.variant": (str, "plain_reach"),
    "env.views": (int, 1),
    "env.image_size": (int, 32),
    "env.cluster_points": (int, 80),
    "points.m": (int, 32),
    "points.k": (int, 8),
    "points.hidden": (int, 64),
    "vision.granularity": (int, 8),
    "vision.feat_dim": (int, 64),
    "vision.lang_dim": (int, 32),
    "vision.cond_layers": (int, 2),
    "vision.lang_seed": (int, 0),
    "fusion.strategy": (str, "cond_on_rgb"),
    "fusion.cond_mode": (str, "cls_transformer"),
    "modality.use_image": (bool, True),
    "modality.use_points": (bool, True),
    "model.dim": (int, 128),
    "model.blocks": (int, 4),
    "model.heads": (int, 4),
    "model.ffn_dim": (int, 512),
    "model.horizon": (int, 8),
    "model.action_dim": (int, 3),
    "model.noise_freq_dim": (int, 32),
    "edm.sigma_min": (float, 0.002),
    "edm.sigma_max": (float, 80.0),
    "edm.sigma_data": (float, 0.0),  # 0 = estimate from the normalized actions
    "edm.rho": (float, 7.0),
    "edm.steps": (int, 4),
    "edm.p_mean": (float, -1.2),
    "edm.p_std": (float, 1.2),
    "optim.lr": (float, 1e-4),
    "optim.weight_decay": (float, 5e-2),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.999),
    "optim.eps": (float, 1e-8),
    "train.epochs": (int, 60),
    "train.batch": (int, 64),
    "eval.episodes": (int, 50),
    "eval.step_cap": (int, 60),
    "eval.expert": (bool, False),
}

_CHOICES = {
    "env.variant": {"color_reach", "depth_reach", "plain_reach"},
    "fusion.strategy": {"concat", "cond_on_pc", "cond_on_rgb"},
    "fusion.cond_mode": {"cls_transformer", "max_pool"},
}

_POSITIVE = {
    "data.episodes": 0, "env.views": 1, "env.image_size": 4,
    "env.cluster_points": 4, "points.m": 1, "points.k": 1, "points.hidden": 1,
    "vision.feat_dim": 1, "vision.lang_dim": 1, "vision.cond_layers": 1,
    "model.dim": 1, "model.blocks": 1, "model.heads": 1, "model.ffn_dim": 1,
    "model.horizon": 1, "model.action_dim": 1, "model.noise_freq_dim": 2,
    "edm.steps": 1, "train.epochs": 0, "train.batch": 1,
    "eval.episodes": 1, "eval.step_cap": 1,
}


class RunConfig:
    def __init__(self, values: dict[str, object] | None = None):
        self._values = {k: d for k, (_, d) in DEFAULTS.items()}
        if values:
            for key, value in values.items():
                self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        typ, _ = DEFAULTS[key]
        if isinstance(value, str) and typ is not str:
            try:
                value = _boolean(value) if typ is bool else typ(value)
            except (ValueError, ConfigError) as err:
                raise ConfigError(f"bad value for {key}: {err}") from None
        if not isinstance(value, typ) or (typ is not bool and isinstance(value, bool)):
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            else:
                raise ConfigError(f"{key} expects {typ.__name__}, got {value!r}")
        self._values[key] = value

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def variants(self) -> list[str]:
        return [v.strip() for v in str(self["data.variants"]).split(",") if v.strip()]

    def validate(self) -> None:
        for key, low in _POSITIVE.items():
            if self[key] < low:
                raise ConfigError(f"{key} must be >= {low}, got {self[key]}")
        for key, allowed in _CHOICES.items():
            if self[key] not in allowed:
                raise ConfigError(
                    f"{key} must be one of {sorted(allowed)}, got {self[key]!r}"
                )
        for variant in self.variants():
            if variant not in _CHOICES["env.variant"]:
                raise ConfigError(f"unknown variant {variant!r} in data.variants")
        if self["model.dim"] % self["model.heads"] != 0:
            raise ConfigError("model.dim must be divisible by model.heads")
        if self["env.image_size"] % self["vision.granularity"] != 0:
            raise ConfigError("env.image_size must be divisible by vision.granularity")
        if self["vision.granularity"] not in (1, 4, 8):
            raise ConfigError("vision.granularity must be 1, 4, or 8")
        if self["model.noise_freq_dim"] % 2 != 0:
            raise ConfigError("model.noise_freq_dim must be even")
        if not self["modality.use_image"] and not self["modality.use_points"]:
            raise ConfigError("at least one of image/point modalities must be enabled")
        if self["fusion.strategy"] != "concat" and not (
            self["modality.use_image"] and self["modality.use_points"]
        ):
            raise ConfigError("AdaLN fusion strategies need both modalities enabled")
        for key in ("edm.sigma_min", "edm.sigma_max", "edm.rho", "edm.p_std",
                    "optim.lr", "optim.eps"):
            if self[key] <= 0:
                raise ConfigError(f"{key} must be positive")
        if self["edm.sigma_min"] >= self["edm.sigma_max"]:
            raise ConfigError("edm.sigma_min must be below edm.sigma_max")
        if self["edm.sigma_data"] < 0:
            raise ConfigError("edm.sigma_data must be >= 0 (0 = estimated)")

    def snapshot(self) -> str:
        lines = [f"{key}={self._format(self._values[key])}" for key in sorted(DEFAULTS)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def _format(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def write_snapshot(self, path) -> None:
        Path(path).write_text(self.snapshot(), encoding="utf-8")


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = body.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        for key, value in parse_config_text(p.read_text(encoding="utf-8")).items():
            cfg.set(key, value)
    if overrides:
        for key, value in overrides.items():
            cfg.set(key, value)
    cfg.validate()
    return cfg
