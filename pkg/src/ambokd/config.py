"""Run configuration: dataclasses, the key=value file format, validation.

Config files are plain text, one `key = value` per line with dotted
section prefixes (`amb.gamma = 3`). Blank lines and `#` comments are
ignored. Flags override file values; the fully resolved config is dumped
next to run outputs for provenance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .amb import AmbConfig
from .errors import ConfigError, ParameterError

VARIANTS = (
    "ambokd",
    "mmokd",
    "mmokd_dk",
    "mmokd_dg",
    "mkd",
    "dml_style",
    "unimodal_e",
    "unimodal_v",
    "amm",
)


@dataclass
class DataConfig:
    path: str | None = None
    n_samples: int = 2500
    positive_fraction: float = 0.29
    shape_a: tuple[int, ...] = (3, 16, 16)
    shape_b: tuple[int, ...] = (8, 64)
    sep_a: float = 2.0
    sep_b: float = 1.2
    noise_a: float = 1.0
    noise_b: float = 1.0
    n_classes: int = 2
    seed: int | None = None  # defaults to the run seed
    train_fraction: float = 0.8
    val_noise: bool = True
    noise_level: float = 0.2


@dataclass
class ModelConfig:
    feature_len: int = 64
    conv_channels: int = 8
    temporal_hidden: int = 16
    heads: int = 2
    key_width: int = 16
    tokens: int = 8
    feature_softmax: bool = True


@dataclass
class OptimConfig:
    eta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bias_correction: bool = False
    fusion_backprop_encoders: bool = False


@dataclass
class RunConfig:
    variant: str = "ambokd"
    seed: int = 1
    epochs: int = 15
    batch_size: int = 64
    out_dir: str | None = None
    tau: float = 4.0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    amb: AmbConfig = field(default_factory=AmbConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    # Tri-state ablation overrides; None means "use the variant's default".
    amb_dynamic_weights: bool | None = None
    amb_dynamic_gradients: bool | None = None

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant: unknown variant '{self.variant}'; valid variants: "
                + ", ".join(VARIANTS)
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.tau <= 0:
            raise ConfigError(f"distill.tau: must be > 0, got {self.tau}")
        d = self.data
        if d.path is None:
            if d.n_samples < 1:
                raise ConfigError(f"data.n_samples: must be >= 1, got {d.n_samples}")
            if not 0.0 < d.positive_fraction < 1.0:
                raise ConfigError(
                    f"data.positive_fraction: must lie in (0, 1), got {d.positive_fraction}"
                )
            if d.sep_a < 0 or d.sep_b < 0:
                raise ConfigError("data.sep_a/data.sep_b: must be >= 0")
            if d.noise_a < 0 or d.noise_b < 0:
                raise ConfigError("data.noise_a/data.noise_b: must be >= 0")
        elif not Path(d.path).is_file():
            raise ConfigError(f"data.path: no such file '{d.path}'")
        if not 0.0 < d.train_fraction < 1.0:
            raise ConfigError(
                f"data.train_fraction: must lie in (0, 1), got {d.train_fraction}"
            )
        if not 0.0 <= d.noise_level <= 1.0:
            raise ConfigError(
                f"data.noise_level: must lie in [0, 1], got {d.noise_level}"
            )
        m = self.model
        for key, value in (
            ("model.feature_len", m.feature_len),
            ("model.conv_channels", m.conv_channels),
            ("model.temporal_hidden", m.temporal_hidden),
            ("model.heads", m.heads),
            ("model.key_width", m.key_width),
            ("model.tokens", m.tokens),
        ):
            if value < 1:
                raise ConfigError(f"{key}: must be >= 1, got {value}")
        if (2 * m.feature_len) % m.tokens != 0:
            raise ConfigError(
                f"model.tokens: {m.tokens} must divide the fused length {2 * m.feature_len}"
            )
        o = self.optim
        if o.eta <= 0:
            raise ConfigError(f"optim.eta: must be > 0, got {o.eta}")
        if not (0.0 <= o.beta1 < 1.0 and 0.0 <= o.beta2 < 1.0):
            raise ConfigError("optim.beta1/optim.beta2: must lie in [0, 1)")
        if o.epsilon <= 0:
            raise ConfigError(f"optim.epsilon: must be > 0, got {o.epsilon}")
        try:
            self.amb.validate()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed


# key -> (section attribute or None, field name, parser)
def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{raw}'")


def _parse_shape(raw: str) -> tuple[int, ...]:
    parts = [p for p in raw.lower().replace("×", "x").split("x") if p]
    dims = tuple(int(p) for p in parts)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"not a shape: '{raw}'")
    return dims


def _parse_opt_int(raw: str) -> int | None:
    return None if raw.strip().lower() == "none" else int(raw)


_SCHEMA: dict[str, tuple[str | None, str, object]] = {
    "variant": (None, "variant", str),
    "seed": (None, "seed", int),
    "epochs": (None, "epochs", int),
    "batch_size": (None, "batch_size", int),
    "out_dir": (None, "out_dir", str),
    "distill.tau": (None, "tau", float),
    "amb.dynamic_weights": (None, "amb_dynamic_weights", _parse_bool),
    "amb.dynamic_gradients": (None, "amb_dynamic_gradients", _parse_bool),
    "data.path": ("data", "path", str),
    "data.n_samples": ("data", "n_samples", int),
    "data.positive_fraction": ("data", "positive_fraction", float),
    "data.shape_a": ("data", "shape_a", _parse_shape),
    "data.shape_b": ("data", "shape_b", _parse_shape),
    "data.sep_a": ("data", "sep_a", float),
    "data.sep_b": ("data", "sep_b", float),
    "data.noise_a": ("data", "noise_a", float),
    "data.noise_b": ("data", "noise_b", float),
    "data.n_classes": ("data", "n_classes", int),
    "data.seed": ("data", "seed", _parse_opt_int),
    "data.train_fraction": ("data", "train_fraction", float),
    "data.val_noise": ("data", "val_noise", _parse_bool),
    "data.noise_level": ("data", "noise_level", float),
    "model.feature_len": ("model", "feature_len", int),
    "model.conv_channels": ("model", "conv_channels", int),
    "model.temporal_hidden": ("model", "temporal_hidden", int),
    "model.heads": ("model", "heads", int),
    "model.key_width": ("model", "key_width", int),
    "model.tokens": ("model", "tokens", int),
    "model.feature_softmax": ("model", "feature_softmax", _parse_bool),
    "amb.gamma": ("amb", "gamma", float),
    "amb.r_min": ("amb", "r_min", float),
    "amb.r_max": ("amb", "r_max", float),
    "amb.alpha_min": ("amb", "alpha_min", float),
    "amb.alpha_max": ("amb", "alpha_max", float),
    "amb.beta_min": ("amb", "beta_min", float),
    "amb.beta_max": ("amb", "beta_max", float),
    "amb.ratio_floor": ("amb", "ratio_floor", float),
    "optim.eta": ("optim", "eta", float),
    "optim.beta1": ("optim", "beta1", float),
    "optim.beta2": ("optim", "beta2", float),
    "optim.epsilon": ("optim", "epsilon", float),
    "optim.bias_correction": ("optim", "bias_correction", _parse_bool),
    "optim.fusion_backprop_encoders": ("optim", "fusion_backprop_encoders", _parse_bool),
}


def set_key(cfg: RunConfig, key: str, raw_value: str) -> None:
    if key not in _SCHEMA:
        raise ConfigError(f"{key}: unknown configuration key")
    section, attr, parser = _SCHEMA[key]
    try:
        value = parser(raw_value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot parse value '{raw_value}' ({exc})") from exc
    target = cfg if section is None else getattr(cfg, section)
    setattr(target, attr, value)


def parse_config_file(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line.strip()}'")
        key, _, value = stripped.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus key=value overrides."""
    cfg = RunConfig()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config: no such file '{path}'")
        for key, value in parse_config_file(path).items():
            set_key(cfg, key, value)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    cfg.validate()
    return cfg


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "x".join(str(d) for d in value)
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def dump_resolved(cfg: RunConfig) -> str:
    """Deterministic key=value text of every resolved config entry."""
    lines = []
    for key in sorted(_SCHEMA):
        section, attr, _ = _SCHEMA[key]
        target = cfg if section is None else getattr(cfg, section)
        lines.append(f"{key} = {_format_value(getattr(target, attr))}")
    return "\n".join(lines) + "\n"


def clone_config(cfg: RunConfig) -> RunConfig:
    """Deep copy for sweeps that tweak variant/seed/out_dir per run."""
    import copy

    return copy.deepcopy(cfg)
