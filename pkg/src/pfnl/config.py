"""Run configuration and its canonical text form.

Configs serialize to sorted ``key=value`` lines. The same canonical text is
embedded in checkpoints and manifests so a run is reproducible from either.
Files may contain blank lines and ``#`` comments; CLI flags override file
values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .objective import Hyperparams


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {raw!r}")


@dataclass
class TrainConfig:
    episodes: int = 200
    way: int = 5
    shot: int = 4
    query: int = 4
    seed: int = 0
    noise_rate: float = 0.0
    lr_text: float = 1e-3
    lr_vision: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    lr_schedule: str = "none"        # none | cosine
    reweight: bool = True
    reweight_rounds: int = 2
    lambda_fuse: float = 0.5
    lambda_infer: float = 0.5
    tau_temp: float = 0.07
    tau_margin: float = 0.5
    tau_calib: float = 1.0
    gamma: float = 1e-4
    negatives: int = 3
    styles: int = 8
    attn_layers: int = 1
    hidden: int = 0                  # 0 means "same as embedding dim"
    activation: str = "gelu"         # gelu | relu
    hinge_mode: str = "prose"        # prose | paper
    negative_mode: str = "adapted"   # adapted | prompt
    reg_scope: str = "full"          # full | attn

    def validate(self) -> "TrainConfig":
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ConfigError("need way >= 2, shot >= 1, query >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if self.lr_text <= 0 or self.lr_vision <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0 or self.weight_decay < 0:
            raise ConfigError("adam_eps must be > 0 and weight_decay >= 0")
        if self.lr_schedule not in ("none", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.reweight_rounds < 1:
            raise ConfigError("reweight_rounds must be >= 1")
        if self.styles < 1 or self.attn_layers < 1 or self.hidden < 0:
            raise ConfigError("styles/attn_layers must be >= 1, hidden >= 0")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.hyperparams().validate()
        return self

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.lambda_fuse, self.lambda_infer, self.tau_temp,
                           self.tau_margin, self.tau_calib, self.gamma, self.negatives,
                           self.hinge_mode, self.negative_mode, self.reg_scope)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n"
                       for f in sorted(fields(self), key=lambda f: f.name))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
        return cls().merged(values)

    def merged(self, overrides: dict[str, str]) -> "TrainConfig":
        """New config with string overrides applied on top of this one."""
        by_name = {f.name: f for f in fields(self)}
        out = TrainConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        for key, raw in overrides.items():
            f = by_name.get(key)
            if f is None:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                if f.type == "bool" or isinstance(getattr(self, key), bool):
                    value = _parse_bool(raw)
                elif isinstance(getattr(self, key), int):
                    value = int(raw)
                elif isinstance(getattr(self, key), float):
                    value = float(raw)
                else:
                    value = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
            setattr(out, key, value)
        return out

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())
