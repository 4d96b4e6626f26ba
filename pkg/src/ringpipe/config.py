"""Run configuration: dataclass, flat key=value config files, overrides.

Config files are one `key = value` per line, `#` comments allowed; keys
match the RunConfig field names.  Every field has a documented default so
a config file only needs to name what it changes.
"""

import os
from dataclasses import asdict, dataclass, fields

from .optim import LrSchedule
from .tensor import mix64

MODES = ("sequential", "ouroboros-ref", "ouroboros-concurrent")
OPTIMIZERS = ("sgd", "adam")
VOCAB_MODES = ("byte", "char")
TIED_GRAD = ("half_avg", "sum")
STALE_WEIGHTS = ("snapshot", "current")
LR_MODES = ("fixed", "diminishing", "warmup-cosine")
BALANCE = ("even", "by_cost")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data: str = ""
    vocab_mode: str = "byte"
    seq_len: int = 64
    batch_size: int = 16
    # model
    n_blocks: int = 8
    model_dim: int = 64
    ffn_dim: int = 256
    dropout_p: float = 0.1
    # parallel schedule
    k: int = 3
    mode: str = "ouroboros-ref"
    tied_grad: str = "half_avg"
    stale_weights: str = "snapshot"
    balance: str = "even"
    relay_cost: float = 0.05
    # optimization
    optimizer: str = "adam"
    lr: float = 0.00025
    lr_mode: str = "warmup-cosine"
    warmup_steps: int = 500
    steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # seeds
    seed_init: int = 1
    seed_data: int = 2
    seed_dropout: int = 3
    # outputs
    out_dir: str = "run_out"
    checkpoint_every: int = 0
    halt_at: int = 0  # stop after this many steps (0 = run to `steps`)
    resume: str = ""

    @property
    def n_layers(self):
        # embedding + blocks + projection
        return self.n_blocks + 2

    def validate(self, check_paths=True):
        def expect(value, allowed, label):
            if value not in allowed:
                raise ConfigError(f"{label} must be one of {allowed}, got {value!r}")

        expect(self.mode, MODES, "mode")
        expect(self.optimizer, OPTIMIZERS, "optimizer")
        expect(self.vocab_mode, VOCAB_MODES, "vocab_mode")
        expect(self.tied_grad, TIED_GRAD, "tied_grad")
        expect(self.stale_weights, STALE_WEIGHTS, "stale_weights")
        expect(self.lr_mode, LR_MODES, "lr_mode")
        expect(self.balance, BALANCE, "balance")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        if not 1 <= self.k <= self.n_layers:
            raise ConfigError(f"k must be in 1..{self.n_layers}, got {self.k}")
        if self.mode == "ouroboros-concurrent" and self.k < 2:
            raise ConfigError("concurrent mode needs k >= 2")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.lr_mode == "warmup-cosine" and self.warmup_steps >= self.steps:
            raise ConfigError("warmup_steps must be < steps for the cosine schedule")
        if check_paths and not os.path.isfile(self.data):
            raise ConfigError(f"data file not found: {self.data!r}")
        if check_paths and self.resume and not os.path.isfile(self.resume):
            raise ConfigError(f"resume checkpoint not found: {self.resume!r}")
        return self

    def lr_schedule(self):
        return LrSchedule(self.lr, self.lr_mode, self.warmup_steps, self.steps)

    def to_dict(self):
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, raw):
    kind = _FIELD_TYPES[name]
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return str(raw)


def config_from_dict(values):
    cfg = RunConfig()
    for name, raw in values.items():
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {name!r}")
        setattr(cfg, name, _coerce(name, raw))
    return cfg


def parse_config_file(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return config_from_dict(values)


def write_config_file(cfg, path):
    with open(path, "w") as fh:
        for name, value in cfg.to_dict().items():
            fh.write(f"{name} = {value}\n")


def apply_overrides(cfg, overrides):
    """Apply CLI-style overrides; a `seed` key fans out to all three seeds."""
    for name, value in overrides.items():
        if value is None:
            continue
        if name == "seed":
            cfg.seed_init = mix64(int(value), 1)
            cfg.seed_data = mix64(int(value), 2)
            cfg.seed_dropout = mix64(int(value), 3)
            continue
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown override {name!r}")
        setattr(cfg, name, _coerce(name, value))
    return cfg
