"""Run configuration: a flat set of typed keys read from ``key=value`` files."""
import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigurationError


@dataclass
class Config:
    # features
    sample_rate: int = 22050
    n_mels: int = 80
    fft: int = 1024
    hop: int = 256
    win: int = 1024
    # model
    squeeze_h: int = 16
    n_flows: int = 8
    n_mix: int = 4
    channels: int = 32
    n_layers: int = 4
    emb_dim: int = 64
    cond_channels: int = 32
    # training
    lr0: float = 2e-4
    anneal_every: int = 2000
    batch: int = 2
    chunk_len: int = 4000
    max_iters: int = 10000
    checkpoint_every: int = 1000
    seed: int = 0
    # synthesis
    inverse_tol: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigurationError(f"{f.name} must be numeric, got {value!r}")
            if f.name != "seed" and value <= 0:
                raise ConfigurationError(f"{f.name} must be positive, got {value}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.hop != 256:
            raise ConfigurationError("the upsampler is fixed at 256x; hop must be 256")
        if self.chunk_len % self.squeeze_h:
            raise ConfigurationError(
                f"chunk_len {self.chunk_len} is not divisible by squeeze_h {self.squeeze_h}")
        if self.hop % self.squeeze_h:
            raise ConfigurationError(f"hop {self.hop} is not divisible by squeeze_h {self.squeeze_h}")
        if self.win > self.fft:
            raise ConfigurationError("win must not exceed fft")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_pairs(cls, pairs, base=None):
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        values = dataclasses.asdict(base)
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            kind = int if types[key] in (int, "int") else float
            try:
                values[key] = kind(raw) if kind is float else int(str(raw), 10)
            except ValueError as exc:
                raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc
        return cls(**values)

    @classmethod
    def from_text(cls, text, base=None):
        return cls.from_pairs(parse_key_values(text), base)

    @classmethod
    def load(cls, path, base=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), base)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))


def parse_key_values(text):
    """Parse UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs
