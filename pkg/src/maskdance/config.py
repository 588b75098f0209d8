"""Plain ``key = value`` configuration with typed defaults."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 7
    genres: tuple = ("ballet", "hiphop", "popping", "jazz")
    fps: int = 20
    holdout_every: int = 8

    # tokenizer
    tok_width: int = 128
    tok_latent: int = 64
    tok_codes: int = 128
    tok_layers: int = 2
    tok_beta: float = 0.25
    tok_lr: float = 1e-3
    tok_steps: int = 400
    tok_batch: int = 32
    tok_window: int = 64
    tok_warmup: int = 100
    tok_reset_every: int = 100

    # masked transformer
    width: int = 128
    heads: int = 4
    depth: int = 4
    max_tokens: int = 64
    lr: float = 5e-4
    warmup: int = 200
    weight_decay: float = 0.01
    batch: int = 32
    t2m_steps: int = 600
    cond_drop: float = 0.1
    unmask_weight: float = 1.0
    grad_clip: float = 1.0

    # residual head
    res_width: int = 64
    res_depth: int = 2
    res_music_drop: float = 0.5

    # adapters
    adapter_steps: int = 300
    adapter_batch: int = 16
    adapter_lr: float = 5e-4
    adapter_genre_drop: float = 0.5
    gumbel_temperature: float = 1.0
    lambda_pos: float = 0.5
    lambda_vel: float = 0.1
    lambda_acc: float = 0.05
    lambda_foot: float = 0.1
    lambda_d: float = 1.0
    foot_static: float = 0.01

    # inference
    steps: int = 18
    temperature: float = 1.0
    residual_temperature: float = 1e-8
    cfg_mode: str = "delta"
    w_u: float = 0.0
    w_t: float = 4.0
    w_a: float = 1.0
    w_p: float = 1.0
    w_r: float = 5.0
    residual_music: bool = False
    itto_lr: float = 0.06
    itto_iters: int = 196
    itto_optimizer: str = "adam"

    # metrics
    bas_sigma: float = 3.0
    fsr_height: float = 0.05
    fsr_speed: float = 0.1

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    def replace(self, **kw) -> "Config":
        unknown = set(kw) - set(self.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **kw)

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f for f in fields(self)}
        if key not in types or key.startswith("_"):
            raise ConfigError(f"unknown config key: {key!r}")
        default = getattr(Config(), key)
        try:
            if isinstance(default, bool):
                low = raw.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                value = low in ("true", "1", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            elif isinstance(default, tuple):
                value = tuple(s.strip() for s in raw.split(",") if s.strip())
            else:
                value = raw.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)

    def validate(self) -> "Config":
        if self.cfg_mode not in ("delta", "linear"):
            raise ConfigError("cfg_mode must be 'delta' or 'linear'")
        if self.itto_optimizer not in ("sgd", "adam"):
            raise ConfigError("itto_optimizer must be 'sgd' or 'adam'")
        for k in ("lambda_pos", "lambda_vel", "lambda_acc", "lambda_foot", "lambda_d"):
            if not getattr(self, k) >= 0:
                raise ConfigError(f"{k} must be non-negative")
        if not self.genres:
            raise ConfigError("need at least one genre")
        if self.steps < 1 or self.temperature <= 0:
            raise ConfigError("steps and temperature must be positive")
        return self

    def to_text(self) -> str:
        lines = []
        for k in self.keys():
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            k, v = line.split("=", 1)
            cfg.set(k.strip(), v.strip())
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())
