"""Flat ``section.key = value`` run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .evaluate import EvalConfig
from .net import NetConfig
from .train import TrainConfig


@dataclass
class BenchConfig:
    translation_frac: float = 0.1
    synthetic_size: int = 64
    write_images: bool = True


@dataclass
class CyclicConfig:
    g_size: int = 16
    shift_mode: str = "0.1"  # "none", "top1" or a ratio in (0, 1)


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    net: NetConfig = field(default_factory=NetConfig)
    cyclic: CyclicConfig = field(default_factory=CyclicConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    match: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def net_config(self) -> NetConfig:
        return dataclasses.replace(self.net, g_size=self.cyclic.g_size)

    def eval_config(self) -> EvalConfig:
        from .evaluate import parse_shift_mode

        return dataclasses.replace(self.match, shift_mode=parse_shift_mode(self.cyclic.shift_mode))


SECTIONS = ("net", "cyclic", "train", "match", "bench")
# derived from other sections at run time, so not user-settable
HIDDEN = {"net.g_size", "match.shift_mode", "train.seed"}


class ConfigError(ValueError):
    pass


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, like):
    t = text.strip()
    if isinstance(like, bool):
        if t.lower() in ("true", "1", "yes", "on"):
            return True
        if t.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    if like is None:
        return None if t.lower() == "none" else t
    return t


def _parse(text: str, like):
    if isinstance(like, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        proto = like[0] if like else 0.0
        return tuple(_parse_scalar(p, proto) for p in parts)
    return _parse_scalar(text, like)


def items(cfg: RunConfig) -> list[tuple[str, object]]:
    """Every settable key with its current value, in a stable order."""
    out = [("seed", cfg.seed), ("workers", cfg.workers)]
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            key = f"{sec}.{f.name}"
            if key not in HIDDEN:
                out.append((key, getattr(obj, f.name)))
    return out


def set_key(cfg: RunConfig, key: str, value: str) -> None:
    known = dict(items(cfg))
    if key not in known:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        parsed = _parse(value, known[key])
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None
    if "." not in key:
        setattr(cfg, key, parsed)
        return
    sec, name = key.split(".", 1)
    setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec), **{name: parsed}))


def parse_lines(lines, cfg: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {raw.strip()!r}")
        k, v = line.split("=", 1)
        try:
            set_key(cfg, k.strip(), v)
        except (ConfigError, ValueError, TypeError) as e:
            raise ConfigError(f"{origin}:{n}: {e}") from None
    return cfg


def load(path=None, overrides=(), seed: int | None = None, workers: int | None = None) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` overrides, then explicit flags.

    The seed falls back to the REMM_SEED environment variable when neither
    the file, the overrides nor the flag set it.
    """
    cfg = RunConfig()
    env = os.environ.get("REMM_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"REMM_SEED must be an integer, got {env!r}") from None
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        parse_lines(p.read_text().splitlines(), cfg, str(p))
    parse_lines(overrides, cfg, "<override>")
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    cfg.net_config()  # validates the combination
    cfg.eval_config()
    return cfg


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in items(cfg))


def echo(cfg: RunConfig, out_dir) -> Path:
    """Write the effective configuration next to a command's outputs."""
    p = Path(out_dir) / "effective_config.txt"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump(cfg))
    return p
