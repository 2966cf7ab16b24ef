"""Dataclass configs plus flat key-value config file parsing.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Tuples are comma-separated. Every key is optional and defaults to the desk
configuration below; unknown keys are rejected so typos fail loudly.
"""

import hashlib
import types
import typing
from dataclasses import dataclass, field, fields

from .errors import ConfigError

_MODES = ("scale_wise", "aggregated")
_RECIPES = ("blobs", "two_tone")


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat key-value text into an ordered dict of raw strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _parse_typed(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    if isinstance(tp, types.UnionType) or origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", "null"):
            return None
        return _parse_typed(text, args[0], key)
    if origin is tuple:
        elem = typing.get_args(tp)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_typed(p, elem, key) for p in parts)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp}") from None
    raise ConfigError(f"{key}: unsupported config field type {tp}")


def _render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _KVMixin:
    """Flat serialization shared by the config dataclasses.

    Subclasses set PREFIX; field ``name`` maps to key ``PREFIX + name``.
    """

    PREFIX = ""
    KEY_OVERRIDES: dict = {}

    @classmethod
    def _key(cls, name: str) -> str:
        return cls.PREFIX + cls.KEY_OVERRIDES.get(name, name)

    @classmethod
    def from_kv(cls, kv: dict[str, str], consumed: set[str] | None = None):
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            key = cls._key(f.name)
            if key in kv:
                kwargs[f.name] = _parse_typed(kv[key], hints[f.name], key)
                if consumed is not None:
                    consumed.add(key)
        obj = cls(**kwargs)
        obj.validate()
        return obj

    def to_kv(self) -> dict[str, str]:
        return {self._key(f.name): _render_value(getattr(self, f.name)) for f in fields(self)}

    def validate(self):
        pass


@dataclass(frozen=True)
class ModelConfig(_KVMixin):
    """Generator architecture: token grid, taps, and the scale hierarchy."""

    PREFIX = "g_"

    depth: int = 8
    hidden_dim: int = 128
    num_heads: int = 4
    head_dim: int = 32
    patch_size: int = 2
    grid: int = 8
    channels_in: int = 3
    mlp_ratio: float = 4.0
    output_layers: tuple[int, ...] = (2, 4, 6, 8)
    scale_resolutions: tuple[int, ...] = (16, 8, 4, 2)
    latent_dim: int = 64
    style_dim: int = 128

    @property
    def num_scales(self) -> int:
        return len(self.scale_resolutions)

    @property
    def native_resolution(self) -> int:
        return self.scale_resolutions[0]

    def validate(self):
        for name in ("depth", "hidden_dim", "num_heads", "head_dim", "patch_size",
                     "grid", "channels_in", "latent_dim", "style_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"g_{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("g_mlp_ratio must be positive")
        if self.head_dim % 4 != 0:
            raise ConfigError("g_head_dim must be divisible by 4 for 2D rotary embeddings")
        taps, scales = self.output_layers, self.scale_resolutions
        if len(taps) != len(scales):
            raise ConfigError("g_output_layers and g_scale_resolutions must have equal length")
        if len(taps) < 1:
            raise ConfigError("at least one output tap is required")
        if any(t2 <= t1 for t1, t2 in zip(taps, taps[1:])):
            raise ConfigError("g_output_layers must be strictly increasing")
        if taps[0] < 1 or taps[-1] != self.depth:
            raise ConfigError("g_output_layers must lie in [1, depth] and end at the last block")
        if any(s2 >= s1 for s1, s2 in zip(scales, scales[1:])):
            raise ConfigError("g_scale_resolutions must be strictly decreasing")
        native = self.grid * self.patch_size
        if scales[0] != native:
            raise ConfigError(
                f"native scale {scales[0]} must equal grid*patch_size = {native}")
        for s in scales:
            if s <= 0 or (native % s != 0 and s % native != 0):
                raise ConfigError(f"scale {s} is not an integer factor of the native resolution")


@dataclass(frozen=True)
class DiscConfig(_KVMixin):
    """Discriminator architecture over the concatenated multi-scale sequence."""

    PREFIX = "d_"

    depth: int = 6
    hidden_dim: int = 128
    num_heads: int = 4
    head_dim: int = 32
    channels_in: int = 3
    mlp_ratio: float = 4.0
    scale_resolutions: tuple[int, ...] = (16, 8, 4, 2)
    patch_sizes: tuple[int, ...] = (2, 2, 2, 1)

    @property
    def num_scales(self) -> int:
        return len(self.scale_resolutions)

    def validate(self):
        for name in ("depth", "hidden_dim", "num_heads", "head_dim", "channels_in"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"d_{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("d_mlp_ratio must be positive")
        if self.head_dim % 4 != 0:
            raise ConfigError("d_head_dim must be divisible by 4 for 2D rotary embeddings")
        if len(self.patch_sizes) != len(self.scale_resolutions):
            raise ConfigError("d_patch_sizes must have one entry per scale")
        if any(s2 >= s1 for s1, s2 in zip(self.scale_resolutions, self.scale_resolutions[1:])):
            raise ConfigError("d_scale_resolutions must be strictly decreasing")
        for res, patch in zip(self.scale_resolutions, self.patch_sizes):
            if patch <= 0 or res % patch != 0:
                raise ConfigError(f"patch size {patch} does not divide scale resolution {res}")


@dataclass(frozen=True)
class ConsistencyConfig(_KVMixin):
    """Cross-scale consistency term: weight per intermediate stage plus lambda."""

    PREFIX = "cons_"
    KEY_OVERRIDES = {"lambda_cons": "lambda"}

    lambda_cons: float = 0.1
    weights: tuple[float, ...] = (1.0 / 3.0, 0.5, 1.0)

    def validate(self):
        if self.lambda_cons < 0:
            raise ConfigError("cons_lambda must be nonnegative")
        if any(w < 0 for w in self.weights):
            raise ConfigError("cons_weights must be nonnegative")
        if any(w2 < w1 for w1, w2 in zip(self.weights, self.weights[1:])):
            raise ConfigError("cons_weights must be nondecreasing in the stage index")


@dataclass(frozen=True)
class PenaltyConfig(_KVMixin):
    """Approximated R1/R2 gradient penalties on a sub-batch."""

    PREFIX = "gp_"

    r1_weight: float = 1.0
    r2_weight: float = 1.0
    interval: int = 1
    epsilon: float = 0.01
    fraction: float = 0.25

    def validate(self):
        if self.r1_weight < 0 or self.r2_weight < 0:
            raise ConfigError("penalty weights must be nonnegative")
        if self.interval < 1:
            raise ConfigError("gp_interval must be a positive integer")
        if self.epsilon <= 0:
            raise ConfigError("gp_epsilon must be positive")
        if not 0 < self.fraction <= 1:
            raise ConfigError("gp_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class TrainConfig(_KVMixin):
    PREFIX = "train_"

    learning_rate: float = 2e-4
    betas: tuple[float, ...] = (0.0, 0.99)
    weight_decay: float = 0.0
    batch_size: int = 64
    iterations: int = 5000
    ema_decay: float = 0.999
    seed: int = 0
    discriminator_mode: str = "scale_wise"
    grad_clip: float | None = 1.0
    checkpoint_every: int = 1000
    eval_samples: int = 512
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)

    @classmethod
    def from_kv(cls, kv, consumed=None):
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            if f.name in ("consistency", "penalties"):
                continue
            key = cls._key(f.name)
            if key in kv:
                kwargs[f.name] = _parse_typed(kv[key], hints[f.name], key)
                if consumed is not None:
                    consumed.add(key)
        obj = cls(consistency=ConsistencyConfig.from_kv(kv, consumed),
                  penalties=PenaltyConfig.from_kv(kv, consumed), **kwargs)
        obj.validate()
        return obj

    def to_kv(self):
        out = {}
        for f in fields(self):
            if f.name in ("consistency", "penalties"):
                continue
            out[self._key(f.name)] = _render_value(getattr(self, f.name))
        out.update(self.consistency.to_kv())
        out.update(self.penalties.to_kv())
        return out

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("train_learning_rate must be positive")
        if len(self.betas) != 2 or any(not 0 <= b < 1 for b in self.betas):
            raise ConfigError("train_betas must be a pair of reals in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train_weight_decay must be nonnegative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("train_batch_size and train_iterations must be positive")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigError("train_ema_decay must lie in [0, 1]")
        if self.discriminator_mode not in _MODES:
            raise ConfigError(f"train_discriminator_mode must be one of {_MODES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train_grad_clip must be positive or none")
        if self.checkpoint_every < 1:
            raise ConfigError("train_checkpoint_every must be positive")
        if self.eval_samples < 2:
            raise ConfigError("train_eval_samples must be at least 2")
        self.consistency.validate()
        self.penalties.validate()


@dataclass(frozen=True)
class ToyDatasetSpec(_KVMixin):
    PREFIX = "data_"

    num_classes: int = 8
    resolution: int = 16
    channels: int = 3
    samples_per_class: int = 256
    recipe: str = "blobs"
    seed: int = 0

    def validate(self):
        for name in ("num_classes", "resolution", "channels", "samples_per_class"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"data_{name} must be positive")
        if self.recipe not in _RECIPES:
            raise ConfigError(f"data_recipe must be one of {_RECIPES}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run needs: models, optimizer, data."""

    generator: ModelConfig = field(default_factory=ModelConfig)
    discriminator: DiscConfig = field(default_factory=DiscConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)

    def validate(self):
        g, d = self.generator, self.discriminator
        g.validate()
        d.validate()
        self.train.validate()
        self.data.validate()
        if g.scale_resolutions != d.scale_resolutions:
            raise ConfigError("generator and discriminator scale hierarchies must match")
        if self.data.resolution != g.native_resolution:
            raise ConfigError(
                f"data_resolution {self.data.resolution} must equal the native scale "
                f"{g.native_resolution}")
        if not (g.channels_in == d.channels_in == self.data.channels):
            raise ConfigError("channel counts must agree across generator/discriminator/data")
        if len(self.train.consistency.weights) != g.num_scales - 1:
            raise ConfigError(
                f"cons_weights needs {g.num_scales - 1} entries for {g.num_scales} scales")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ExperimentConfig":
        consumed: set[str] = set()
        cfg = cls(
            generator=ModelConfig.from_kv(kv, consumed),
            discriminator=DiscConfig.from_kv(kv, consumed),
            train=TrainConfig.from_kv(kv, consumed),
            data=ToyDatasetSpec.from_kv(kv, consumed),
        )
        unknown = sorted(set(kv) - consumed)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_kv(parse_kv_text(text))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_kv(self) -> dict[str, str]:
        out = {}
        out.update(self.generator.to_kv())
        out.update(self.discriminator.to_kv())
        out.update(self.train.to_kv())
        out.update(self.data.to_kv())
        return out

    def to_text(self) -> str:
        """Canonical rendering: sorted keys, one per line. Parse round-trips."""
        kv = self.to_kv()
        return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """Re-parse with some flat keys replaced; values are raw strings."""
        kv = self.to_kv()
        for key, value in overrides.items():
            if key not in kv:
                raise ConfigError(f"unknown override key {key!r}")
            kv[key] = value
        return ExperimentConfig.from_kv(kv)
