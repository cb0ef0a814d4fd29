"""Repo-wide configuration: one JSON file feeds the ledger, the content
store, the marketplace service and the demo driver.

Every field has a default, so a missing or partial file works; the demo
only ever needs ``--seed``. Addresses for the packaged demo and dev
genesis are derived deterministically from string tags, which keeps
report bundles reproducible without any key management.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregator import MatchConfig
from .hashing import digest
from .ledger import Address, GasSchedule, WEI_PER_ETH
from .learner import Hyperparams

DEFAULT_CODE_SIZE = 4096


def address_for_tag(tag: str) -> Address:
    """Deterministic pseudo-address for a named in-process identity."""
    return Address(digest(b"fedmarket/addr/" + tag.encode("utf-8"))[:20])


@dataclass(frozen=True)
class DemoConfig:
    """Seeded 10-owner scenario parameters (desk scale).

    The learning rate is higher than the library default because plain
    mini-batch descent needs it to converge within 10 local epochs on
    the synthetic task.
    """

    n_owners: int = 10
    budget_wei: int = 10**16  # 0.01 ETH
    arch: tuple[int, ...] = (784, 100, 10)
    aggregator: str = "matched"
    match_config: MatchConfig = field(default_factory=MatchConfig)
    batch_size: int = 64
    learning_rate: float = 0.05
    local_epochs: int = 10
    skew: float = 0.4
    n_train: int = 2000
    n_test: int = 1000
    noise: float = 0.12
    buyer_funding_wei: int = WEI_PER_ETH
    owner_funding_wei: int = 10**16
    min_owners: int = 2

    def hyperparams(self, seed: int) -> Hyperparams:
        return Hyperparams(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            local_epochs=self.local_epochs,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return {
            "n_owners": self.n_owners,
            "budget_wei": self.budget_wei,
            "arch": list(self.arch),
            "aggregator": self.aggregator,
            "match_config": self.match_config.to_dict(),
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "local_epochs": self.local_epochs,
            "skew": self.skew,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "noise": self.noise,
            "buyer_funding_wei": self.buyer_funding_wei,
            "owner_funding_wei": self.owner_funding_wei,
            "min_owners": self.min_owners,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DemoConfig":
        kwargs = dict(data)
        if "arch" in kwargs:
            kwargs["arch"] = tuple(kwargs["arch"])
        if "match_config" in kwargs:
            kwargs["match_config"] = MatchConfig.from_dict(kwargs["match_config"])
        return cls(**kwargs)


@dataclass(frozen=True)
class AppConfig:
    gas_schedule: GasSchedule = field(default_factory=GasSchedule)
    contract_code_size: int = DEFAULT_CODE_SIZE
    cas_root: str = "cas"
    genesis: tuple[tuple[Address, int], ...] = ()
    demo: DemoConfig = field(default_factory=DemoConfig)

    def to_dict(self) -> dict:
        return {
            "gas_schedule": self.gas_schedule.to_dict(),
            "contract_code_size": self.contract_code_size,
            "cas_root": self.cas_root,
            "genesis": [{"address": a.hex(), "balance_wei": b} for a, b in self.genesis],
            "demo": self.demo.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AppConfig":
        kwargs: dict = {}
        if "gas_schedule" in data:
            kwargs["gas_schedule"] = GasSchedule.from_dict(data["gas_schedule"])
        if "contract_code_size" in data:
            kwargs["contract_code_size"] = int(data["contract_code_size"])
        if "cas_root" in data:
            kwargs["cas_root"] = str(data["cas_root"])
        if "genesis" in data:
            kwargs["genesis"] = tuple(
                (Address.from_hex(e["address"]), int(e["balance_wei"])) for e in data["genesis"]
            )
        if "demo" in data:
            kwargs["demo"] = DemoConfig.from_dict(data["demo"])
        return cls(**kwargs)


def dev_genesis(seed: int, demo: DemoConfig) -> tuple[tuple[Address, int], ...]:
    """Buyer plus n funded owner accounts, derived from the seed."""
    accounts = [(address_for_tag(f"buyer-{seed}"), demo.buyer_funding_wei)]
    for i in range(demo.n_owners):
        accounts.append((address_for_tag(f"owner-{seed}-{i}"), demo.owner_funding_wei))
    return tuple(accounts)


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    text = Path(path).read_text(encoding="utf-8")
    return AppConfig.from_dict(json.loads(text))


def save_config(config: AppConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
