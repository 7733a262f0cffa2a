"""Run configuration: one JSON document shared by every pipeline stage.

Unknown keys are rejected so a typo in a config file fails loudly rather
than silently falling back to a default.  Validation errors always name
the offending field with its dotted path (e.g. ``quantizer.K``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

# polarization mode -> channel groups kept, in fixed HH, HV, VV order
POLARIZATION_GROUPS = {
    "FP": ("HH", "HV", "VV"),
    "HHHV": ("HH", "HV"),
    "HHVV": ("HH", "VV"),
    "HVVV": ("HV", "VV"),
    "HH": ("HH",),
    "HV": ("HV",),
    "VV": ("VV",),
}

PROFILES = ("paracou-like", "lope-like")


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


def pol_count(mode: str) -> int:
    """Number of polarimetric channels for a mode (3, 2 or 1)."""
    if mode not in POLARIZATION_GROUPS:
        raise ConfigError(
            f"mode: unknown polarization mode {mode!r}; "
            f"expected one of {sorted(POLARIZATION_GROUPS)}"
        )
    return len(POLARIZATION_GROUPS[mode])


def feature_channel_count(phi: int, n_baselines: int) -> int:
    """Feature channels for phi polarizations and n baselines: 3*phi*n - 2."""
    return 3 * phi * n_baselines - 2


@dataclass
class QuantizerConfig:
    h_min: float | None = None  # None: derived from the training reference
    step: float = 1.0
    k: int | None = None        # None: derived from the training reference

    def validate(self) -> None:
        if self.step <= 0:
            raise ConfigError(f"quantizer.step must be > 0, got {self.step}")
        if self.k is not None and self.k < 2:
            raise ConfigError(f"quantizer.K must be >= 2, got {self.k}")


@dataclass
class NetworkConfig:
    base_channels: int = 32
    levels: int = 5

    def validate(self) -> None:
        if self.base_channels < 1:
            raise ConfigError(
                f"network.base_channels must be >= 1, got {self.base_channels}"
            )
        if self.levels < 2:
            raise ConfigError(f"network.levels must be >= 2, got {self.levels}")


@dataclass
class TrainingConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 64
    epochs: int = 600
    decay_factor: float = 0.5
    decay_period: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"training.lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(
                f"training.momentum must be in [0, 1), got {self.momentum}"
            )
        if self.batch < 1:
            raise ConfigError(f"training.batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"training.epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(
                f"training.decay_factor must be in (0, 1], got {self.decay_factor}"
            )
        if self.decay_period < 1:
            raise ConfigError(
                f"training.decay_period must be >= 1, got {self.decay_period}"
            )


@dataclass
class BaselineConfig:
    z_min: float = -10.0
    z_max: float = 80.0
    z_step: float = 0.5
    loading: float = 1e-3
    alpha: float = 0.25
    beta: float = 0.25

    def validate(self) -> None:
        if self.z_step <= 0:
            raise ConfigError(f"baseline.z_step must be > 0, got {self.z_step}")
        if self.z_max <= self.z_min:
            raise ConfigError("baseline.z_max must exceed baseline.z_min")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"baseline.{name} must be in (0, 1], got {v}")
        if self.loading < 0:
            raise ConfigError(f"baseline.loading must be >= 0, got {self.loading}")


@dataclass
class ExperimentConfig:
    profile: str = "paracou-like"
    size: int = 512
    test_rect: tuple[int, int, int, int] = (0, 0, 256, 256)
    modes: tuple[str, ...] = ("FP",)
    methods: tuple[str, ...] = ("catsnet", "beamforming", "capon")

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(
                f"experiment.profile must be one of {PROFILES}, got {self.profile!r}"
            )
        if self.size < 1:
            raise ConfigError(f"experiment.size must be >= 1, got {self.size}")
        if len(self.test_rect) != 4 or any(v < 0 for v in self.test_rect):
            raise ConfigError(
                "experiment.test_rect must be four non-negative ints "
                "(row0, col0, height, width)"
            )
        for m in self.modes:
            pol_count(m)
        for meth in self.methods:
            if meth not in ("catsnet", "catsnet-unified", "beamforming", "capon"):
                raise ConfigError(f"experiment.methods: unknown method {meth!r}")


@dataclass
class RunConfig:
    mode: str = "FP"
    n_baselines: int = 6
    window: int = 9
    patch: int = 64
    stride: int | None = None  # None: equal to patch (non-overlapping tiles)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    paths: dict = field(default_factory=dict)

    @property
    def phi(self) -> int:
        return pol_count(self.mode)

    @property
    def channel_count(self) -> int:
        return self.phi * self.n_baselines

    @property
    def feature_count(self) -> int:
        return feature_channel_count(self.phi, self.n_baselines)

    @property
    def tile_stride(self) -> int:
        return self.patch if self.stride is None else self.stride

    def validate(self) -> None:
        pol_count(self.mode)
        if self.n_baselines < 2:
            raise ConfigError(f"n_baselines must be >= 2, got {self.n_baselines}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be an odd integer >= 1, got {self.window}")
        if self.patch < 1:
            raise ConfigError(f"patch must be > 0, got {self.patch}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        self.quantizer.validate()
        self.network.validate()
        self.training.validate()
        self.baseline.validate()
        self.experiment.validate()
        if not all(isinstance(k, str) for k in self.paths):
            raise ConfigError("paths keys must be strings")


# JSON key -> dataclass attribute, where they differ
_QUANTIZER_KEYS = {"h_min": "h_min", "step": "step", "K": "k"}
_SECTION_FIELDS = {
    "network": ("base_channels", "levels"),
    "training": (
        "lr", "momentum", "batch", "epochs",
        "decay_factor", "decay_period", "seed",
    ),
    "baseline": ("z_min", "z_max", "z_step", "loading", "alpha", "beta"),
    "experiment": ("profile", "size", "test_rect", "modes", "methods"),
}
_TOP_KEYS = (
    "mode", "n_baselines", "window", "patch", "stride",
    "quantizer", "network", "training", "baseline", "experiment", "paths",
)


def _check_unknown(given: dict, allowed, prefix: str = "") -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown config key {prefix}{key!r}")


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_unknown(doc, _TOP_KEYS)

    cfg = RunConfig()
    for key in ("mode", "n_baselines", "window", "patch", "stride"):
        if key in doc:
            setattr(cfg, key, doc[key])

    if "quantizer" in doc:
        q = doc["quantizer"]
        _check_unknown(q, _QUANTIZER_KEYS, "quantizer.")
        for jkey, attr in _QUANTIZER_KEYS.items():
            if jkey in q:
                setattr(cfg.quantizer, attr, q[jkey])

    for section, fields in _SECTION_FIELDS.items():
        if section in doc:
            sub = doc[section]
            _check_unknown(sub, fields, section + ".")
            target = getattr(cfg, section)
            for fname in fields:
                if fname in sub:
                    value = sub[fname]
                    if isinstance(value, list):
                        value = tuple(value)
                    setattr(target, fname, value)

    if "paths" in doc:
        if not isinstance(doc["paths"], dict):
            raise ConfigError("paths must be an object")
        cfg.paths = dict(doc["paths"])

    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "mode": cfg.mode,
        "n_baselines": cfg.n_baselines,
        "window": cfg.window,
        "patch": cfg.patch,
        "stride": cfg.stride,
        "quantizer": {
            "h_min": cfg.quantizer.h_min,
            "step": cfg.quantizer.step,
            "K": cfg.quantizer.k,
        },
        "network": {
            "base_channels": cfg.network.base_channels,
            "levels": cfg.network.levels,
        },
        "training": {
            "lr": cfg.training.lr,
            "momentum": cfg.training.momentum,
            "batch": cfg.training.batch,
            "epochs": cfg.training.epochs,
            "decay_factor": cfg.training.decay_factor,
            "decay_period": cfg.training.decay_period,
            "seed": cfg.training.seed,
        },
        "baseline": {
            "z_min": cfg.baseline.z_min,
            "z_max": cfg.baseline.z_max,
            "z_step": cfg.baseline.z_step,
            "loading": cfg.baseline.loading,
            "alpha": cfg.baseline.alpha,
            "beta": cfg.baseline.beta,
        },
        "experiment": {
            "profile": cfg.experiment.profile,
            "size": cfg.experiment.size,
            "test_rect": list(cfg.experiment.test_rect),
            "modes": list(cfg.experiment.modes),
            "methods": list(cfg.experiment.methods),
        },
        "paths": dict(cfg.paths),
    }


def load_config(path) -> RunConfig:
    """Load and validate a JSON run configuration."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1) + "\n")


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Apply ``{"dotted.key": value}`` overrides to a raw config dict."""
    out = json.loads(json.dumps(doc))  # deep copy, JSON types only
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted!r}: {p!r} is a leaf")
        node[parts[-1]] = value
    return out
