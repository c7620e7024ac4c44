"""Experiment configuration as a sectioned INI file, plus seeded RNG streams."""

from __future__ import annotations

import configparser
import dataclasses
import io
import zlib
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import get_type_hints

import numpy as np

from .envs import TARGET_SPEEDS, DatasetConfig
from .gail import GailConfig, GailSpecs
from .vae import VaeSpecs, VaeTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    kind: str = "walker"
    seed: int = 0


@dataclass
class DatasetSection:
    train_targets: int = 50
    test_targets: int = 10
    rollouts: int = 5
    test_rollouts: int = 1
    expert_noise: float = 0.1
    style_amps: tuple = (0.0, 0.5, 1.0)
    style_freqs: tuple = (1.0, 1.5, 2.0)
    target_speeds: tuple = TARGET_SPEEDS


@dataclass
class VaeSection:
    encoder_width: int = 64
    latent_dim: int = 8
    action_sizes: tuple = (64, 64)
    channels: int = 16
    wavenet_layers: int = 4
    mixture_components: int = 5
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    clip: float = 10.0


@dataclass
class GailSection:
    policy_sizes: tuple = (64, 32)
    disc_sizes: tuple = (32, 32)
    critic_sizes: tuple = (64, 32)
    init_log_std: float = -1.0
    iterations: int = 300
    n: int = 8
    disc_steps: int = 10
    disc_lr: float = 1e-4
    clip_max: float = 10.0
    max_kl: float = 0.01
    gamma: float = 0.995
    lam: float = 0.97
    damping: float = 0.1
    cg_iters: int = 10
    critic_epochs: int = 5
    critic_lr: float = 1e-3
    standardize: bool = True


@dataclass
class EvalSection:
    seed_offset: int = 0
    endpoint_tol: float = 0.1
    coverage_tol: float = 0.5
    interpolation_pairs: int = 10
    alphas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    blend_window: int = 20
    theorem_instances: int = 100


SECTIONS = {"env": EnvSection, "dataset": DatasetSection, "vae": VaeSection, "gail": GailSection,
            "eval": EvalSection}


@dataclass
class TrainConfig:
    env: EnvSection = field(default_factory=EnvSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    vae: VaeSection = field(default_factory=VaeSection)
    gail: GailSection = field(default_factory=GailSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def default(cls, kind: str = "walker") -> "TrainConfig":
        if kind == "walker":
            return cls(EnvSection("walker"))
        if kind == "reacher":
            return cls(EnvSection("reacher"), DatasetSection(rollouts=4, test_rollouts=2),
                       VaeSection(latent_dim=16, epochs=550, batch_size=4))
        raise ConfigError(f"unknown environment kind '{kind}'")

    # -------------------------------------------------------- conversions
    def dataset_config(self) -> DatasetConfig:
        d = self.dataset
        return DatasetConfig(self.env.kind, d.train_targets, d.test_targets, d.rollouts, d.test_rollouts,
                             d.expert_noise, d.style_amps, d.style_freqs, d.target_speeds, self.env.seed)

    def vae_specs(self, obs_dim: int, action_dim: int) -> VaeSpecs:
        v = self.vae
        return VaeSpecs(obs_dim, action_dim, v.latent_dim, v.encoder_width, v.action_sizes, v.channels,
                        v.wavenet_layers, v.mixture_components)

    def vae_train_config(self) -> VaeTrainConfig:
        return VaeTrainConfig(self.vae.epochs, self.vae.batch_size, self.vae.lr, self.vae.clip)

    def gail_specs(self, obs_dim: int, action_dim: int, conditional: bool = True) -> GailSpecs:
        g = self.gail
        return GailSpecs(obs_dim, action_dim, self.vae.latent_dim if conditional else 0, g.policy_sizes,
                         g.disc_sizes, g.critic_sizes, g.init_log_std)

    def gail_config(self) -> GailConfig:
        g = self.gail
        return GailConfig(g.iterations, g.n, g.disc_steps, g.disc_lr, g.clip_max, g.max_kl, g.gamma, g.lam,
                          g.damping, g.cg_iters, g.critic_epochs, g.critic_lr, g.standardize)

    # ------------------------------------------------------ serialization
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse INI text; keys not given fall back to ``base`` (default: the
        defaults for the file's env kind)."""
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"config: {err}") from err
        for name in cp.sections():
            if name not in SECTIONS:
                raise ConfigError(f"config: unknown section [{name}]")
        if base is None:
            kind = cp.get("env", "kind", fallback="walker")
            base = cls.default(kind)
        out = {}
        for name, klass in SECTIONS.items():
            sec = getattr(base, name)
            hints = get_type_hints(klass)
            values = {}
            if cp.has_section(name):
                known = {f.name for f in fields(klass)}
                for key, raw in cp[name].items():
                    if key not in known:
                        raise ConfigError(f"config: unknown key '{key}' in [{name}]")
                    values[key] = _parse(raw, hints[key], getattr(sec, key), f"{name}.{key}")
            out[name] = dataclasses.replace(sec, **values)
        return cls(**out)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err.strerror}") from err
        return cls.from_ini(text)

    def with_seed(self, seed: int | None) -> "TrainConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, env=dataclasses.replace(self.env, seed=int(seed)))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse(raw: str, hint, default, where: str):
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple:
            if not raw:
                return ()
            elem = type(default[0]) if default else float
            return tuple(elem(x.strip()) for x in raw.split(","))
        return raw
    except ValueError as err:
        raise ConfigError(f"config: bad value {raw!r} for {where}") from err


# ------------------------------------------------------------ full scale

# desk-scale value times factor gives the full-size walker value
FULL_SCALE_FACTORS = {
    ("vae", "encoder_width"): Fraction(25, 8),
    ("vae", "latent_dim"): Fraction(5, 2),
    ("vae", "action_sizes"): (Fraction(25, 8), Fraction(25, 8)),
    ("vae", "channels"): Fraction(2),
    ("vae", "wavenet_layers"): Fraction(3, 2),
    ("gail", "policy_sizes"): (Fraction(25, 8), Fraction(25, 8)),
    ("gail", "disc_sizes"): (Fraction(25, 8), Fraction(2)),
    ("gail", "critic_sizes"): (Fraction(25, 8), Fraction(25, 8)),
    ("gail", "iterations"): Fraction(100),
}


def full_scale(cfg: TrainConfig) -> TrainConfig:
    out = {name: getattr(cfg, name) for name in SECTIONS}
    for (sec, key), factor in FULL_SCALE_FACTORS.items():
        v = getattr(out[sec], key)
        if isinstance(factor, tuple):
            new = tuple(int(Fraction(x) * f) for x, f in zip(v, factor))
        else:
            new = int(Fraction(v) * factor)
        out[sec] = dataclasses.replace(out[sec], **{key: new})
    return TrainConfig(**out)


# ------------------------------------------------------------ rng streams

STREAMS = ("dataset", "init", "training", "eval")


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from one 64-bit seed."""
    if name not in STREAMS and not name.startswith(STREAMS):
        raise ValueError(f"unknown rng stream '{name}'")
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2 ** 64 - 1),
                                                        spawn_key=(zlib.crc32(name.encode()),)))
