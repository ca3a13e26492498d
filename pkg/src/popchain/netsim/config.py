"""Simulation parameters."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from fractions import Fraction

from ..selection import METRICS

# block sizes (bytes) of the four reference chain instances
REFERENCE_BLOCK_SIZES = (30_160, 76_730, 144_950, 345_910)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    seed: int = 1
    n_mergers: int = 10
    n_signers: int = 500
    n_full: int = 490
    degree_full: int = 10
    degree_signer: int = 20
    degree_merger: int = 70
    bw_down_signer_full: int = 39_000_000
    bw_up_signer_full: int = 13_000_000
    bw_merger: int = 150_000_000
    base_latency: int = 50
    target_block_size: int = 30_160
    avg_tx_size: int = 150
    S_initial: int = 5
    M: int = 3
    R: int = 10
    t: int = 1
    alpha: Fraction = Fraction(1, 2)
    k_delay: int = 500
    target_interval: int = 17_500
    duration: int = 1_800_000

    # not part of the protocol; knobs of the simulated environment
    legacy_open_competition: bool = False
    difficulty_enabled: bool = False
    difficulty_window: int = 1800
    signer_wake_mean: int = 500
    signer_offline_fraction: float = 0.05
    sign_timeout: int = 2_000
    sign_cost: int = 1
    tx_rate: float | None = None
    tx_rate_factor: float = 1.0
    tx_relay_ms: int = 200
    upload_slots: int = 8
    initial_balance: int = 10**9
    metric: str = "hamming"
    scheme: str = "mac"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_mergers", "n_signers", "n_full"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("bw_down_signer_full", "bw_up_signer_full", "bw_merger"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.avg_tx_size <= 0 or self.avg_tx_size > self.target_block_size:
            raise ConfigError("need 0 < avg_tx_size <= target_block_size")
        for name in ("S_initial", "M", "R", "t", "target_interval", "upload_slots", "difficulty_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("base_latency", "k_delay", "duration", "signer_wake_mean", "sign_timeout", "sign_cost", "tx_relay_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.M > self.n_mergers:
            raise ConfigError("M exceeds the number of mergers")
        if not 0 <= self.signer_offline_fraction < 1:
            raise ConfigError("signer_offline_fraction must be in [0, 1)")
        if self.tx_rate is not None and self.tx_rate < 0:
            raise ConfigError("tx_rate must be >= 0")
        if not 0 <= self.alpha:
            raise ConfigError("alpha must be >= 0")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.scheme not in ("mac", "ed25519"):
            raise ConfigError(f"unknown signature scheme {self.scheme!r}")

    @property
    def n_nodes(self) -> int:
        return self.n_mergers + self.n_signers + self.n_full

    @property
    def txs_per_block(self) -> int:
        return max(1, round(self.target_block_size / self.avg_tx_size))

    @property
    def tx_rate_per_ms(self) -> float:
        """Arrival rate; by default a little above what full blocks at target pace consume."""
        if self.tx_rate is not None:
            return self.tx_rate / 1000
        return self.tx_rate_factor * self.txs_per_block / self.target_interval

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def desk_scale(**changes) -> SimConfig:
    """1000 nodes with the reference bandwidths; merger degree scaled with the node count."""
    return SimConfig(**changes)


def full_scale(**changes) -> SimConfig:
    """10K nodes: 100 mergers, 5K signers, the rest full nodes."""
    base = dict(n_mergers=100, n_signers=5000, n_full=4900, degree_merger=700)
    base.update(changes)
    return SimConfig(**base)
