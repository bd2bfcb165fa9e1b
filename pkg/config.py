"""Machine configuration for the simulator.

Values mirror the evaluated design point: 144 KB of on-chip memory organised
as 18 banks of 8 KB (banks 16 and 17 reserved for signal processing), a
100 MHz clock and 1600 MB/s of off-chip bandwidth.
"""
import json
import os
from dataclasses import asdict, dataclass, fields, replace

from errors import ConfigError

WORD_BYTES = 8

# Where fixture files live unless SIGDLA_FIXTURES says otherwise
DEFAULT_FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


def fixtures_dir():
    return os.environ.get("SIGDLA_FIXTURES", DEFAULT_FIXTURES)


def fixture_path(*parts):
    return os.path.join(fixtures_dir(), *parts)


@dataclass(frozen=True)
class MachineConfig:
    bank_count: int = 18
    bank_bytes: int = 8192
    signal_banks: tuple = (16, 17)
    staging_words: int = 64
    bandwidth_mb_s: float = 1600.0    # 0 or None: unlimited
    frequency_mhz: float = 100.0
    dma_setup_cycles: int = 20
    overlap_dma: bool = False
    cycle_budget: int = 10 ** 9
    offchip_bytes: int = 8 * 1024 * 1024

    def __post_init__(self):
        if self.bank_count <= 0 or self.bank_bytes <= 0:
            raise ConfigError("bank_count and bank_bytes must be positive")
        if self.bank_bytes % WORD_BYTES:
            raise ConfigError(f"bank_bytes must be a multiple of {WORD_BYTES}")
        if self.bandwidth_mb_s is not None and self.bandwidth_mb_s < 0:
            raise ConfigError("bandwidth_mb_s must be positive (0 for unlimited)")
        if self.frequency_mhz <= 0:
            raise ConfigError("frequency_mhz must be positive")
        if self.staging_words < 2 or self.staging_words % 2:
            raise ConfigError("staging_words must be an even number >= 2")
        for bank in self.signal_banks:
            if not 0 <= bank < self.bank_count:
                raise ConfigError(f"signal bank {bank} outside 0..{self.bank_count - 1}")
        if self.cycle_budget <= 0:
            raise ConfigError("cycle_budget must be positive")

    @property
    def bank_words(self):
        return self.bank_bytes // WORD_BYTES

    @property
    def onchip_words(self):
        return self.bank_count * self.bank_words

    @property
    def main_banks(self):
        return [b for b in range(self.bank_count) if b not in self.signal_banks]

    @property
    def unlimited_bandwidth(self):
        return not self.bandwidth_mb_s

    @property
    def bytes_per_cycle(self):
        """Off-chip bytes moved per clock (16 at the defaults)."""
        if self.unlimited_bandwidth:
            return float("inf")
        return self.bandwidth_mb_s / self.frequency_mhz

    def with_overrides(self, **overrides):
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)

    def to_dict(self):
        data = asdict(self)
        data["signal_banks"] = list(self.signal_banks)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown machine config keys: {sorted(unknown)}")
        values = dict(data)
        if "signal_banks" in values:
            values["signal_banks"] = tuple(values["signal_banks"])
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"bad machine config: {e}") from e

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"machine config not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"machine config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"machine config {path} must be a JSON object")
        return cls.from_dict(data)


DEFAULT_MACHINE = MachineConfig()
