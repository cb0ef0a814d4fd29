"""Leave-one-out contribution scoring and budget-exhausting payouts.

An owner's marginal contribution is the accuracy the full aggregate
loses when that owner's model is dropped (clamped at zero: harmful
contributors are paid nothing, never charged). Payments split a fixed
wei budget proportionally to marginals using integer arithmetic only;
the sub-wei rounding remainder goes to the owner with the largest
marginal so the table always sums to the budget exactly. When every
marginal is zero the budget falls back to an equal split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .aggregator import MatchConfig, aggregate_matched, aggregate_naive, ensemble_accuracy
from .learner import Dataset, ModelWeights, evaluate
from .ledger import Address, eth

ACC_SCALE = 10**6  # accuracies enter the money path as integer micro-units

AGGREGATOR_CHOICES = ("naive", "matched", "ensemble")


class TooFewOwners(Exception):
    pass


class LengthMismatch(Exception):
    pass


def canonical_aggregator(name: str) -> str:
    alias = {"ensemble-eval": "ensemble"}
    canonical = alias.get(name, name)
    if canonical not in AGGREGATOR_CHOICES:
        raise ValueError(f"unknown aggregator {name!r}; expected one of {AGGREGATOR_CHOICES}")
    return canonical


@dataclass(frozen=True)
class ContributionReport:
    """Per-owner leave-one-out accuracies, in on-chain CID index order."""

    acc_full: float
    loo_acc: tuple[float, ...]
    marginal: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.loo_acc) != len(self.marginal):
            raise LengthMismatch("loo_acc and marginal lengths differ")

    @property
    def n(self) -> int:
        return len(self.loo_acc)

    def to_dict(self) -> dict:
        return {
            "acc_full": self.acc_full,
            "loo_acc": list(self.loo_acc),
            "marginal": list(self.marginal),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ContributionReport":
        return cls(
            acc_full=float(data["acc_full"]),
            loo_acc=tuple(float(v) for v in data["loo_acc"]),
            marginal=tuple(float(v) for v in data["marginal"]),
        )

    def to_csv(self, owners: Sequence[Address]) -> str:
        if len(owners) != self.n:
            raise LengthMismatch("owner list does not match report length")
        lines = ["owner,address,loo_accuracy,marginal"]
        for i, addr in enumerate(owners):
            lines.append(f"{i},{addr.hex()},{self.loo_acc[i]:.6f},{self.marginal[i]:.6f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PaymentTable:
    entries: tuple[tuple[Address, int], ...]
    budget: int

    def __post_init__(self) -> None:
        if any(amount < 0 for _, amount in self.entries):
            raise ValueError("payments must be non-negative")
        if self.entries and sum(a for _, a in self.entries) != self.budget:
            raise ValueError("payments must sum to the budget exactly")

    def total(self) -> int:
        return sum(amount for _, amount in self.entries)

    def to_dict(self) -> dict:
        return {
            "budget_wei": self.budget,
            "entries": [
                {"address": addr.hex(), "wei": amount, "eth": eth(amount)}
                for addr, amount in self.entries
            ],
        }

    def to_csv(self) -> str:
        lines = ["owner,address,payment_wei,payment_eth"]
        for i, (addr, amount) in enumerate(self.entries):
            lines.append(f"{i},{addr.hex()},{amount},{eth(amount)}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #
# Scoring
# --------------------------------------------------------------------------- #

def _score(models: list[ModelWeights], testset: Dataset, aggregate: str, cfg: MatchConfig) -> float:
    if aggregate == "naive":
        return evaluate(aggregate_naive(models), testset)
    if aggregate == "matched":
        return evaluate(aggregate_matched(models, cfg), testset)
    return ensemble_accuracy(models, testset)


def compute_loo(
    models: list[ModelWeights],
    testset: Dataset,
    aggregate: str = "matched",
    match_config: MatchConfig | None = None,
) -> ContributionReport:
    """Score the full aggregate and each n-1 aggregate (1 + n runs).

    ``models`` must be in on-chain CID index order; pass a MatchConfig
    with an explicit spawn_penalty so all reruns share one value.
    """
    if len(models) < 2:
        raise TooFewOwners(f"leave-one-out needs >= 2 models, got {len(models)}")
    aggregate = canonical_aggregator(aggregate)
    cfg = match_config or MatchConfig()

    acc_full = _score(models, testset, aggregate, cfg)
    loo_acc = []
    for i in range(len(models)):
        rest = models[:i] + models[i + 1 :]
        loo_acc.append(_score(rest, testset, aggregate, cfg))
    marginal = [max(0.0, acc_full - acc) for acc in loo_acc]
    return ContributionReport(acc_full=acc_full, loo_acc=tuple(loo_acc), marginal=tuple(marginal))


# --------------------------------------------------------------------------- #
# Payments
# --------------------------------------------------------------------------- #

def allocate_proportional(marginals: Sequence[int], budget: int) -> list[int]:
    """Integer split of ``budget`` proportional to non-negative marginals.

    floor-divides, then hands the remainder (< n wei) to the largest
    marginal (ties: lowest index). All-zero marginals fall back to an
    equal split with the remainder on index 0.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if any(m < 0 for m in marginals):
        raise ValueError("marginals must be >= 0")
    n = len(marginals)
    if n == 0:
        return []
    total = sum(marginals)
    if total == 0:
        base = budget // n
        payments = [base] * n
        payments[0] += budget - base * n
        return payments
    payments = [budget * m // total for m in marginals]
    remainder = budget - sum(payments)
    top = max(range(n), key=lambda i: (marginals[i], -i))
    payments[top] += remainder
    return payments


def payment_table(
    report: ContributionReport,
    owners: Sequence[Address],
    budget: int,
) -> PaymentTable:
    """Convert a contribution report into wei payouts exhausting ``budget``.

    Accuracies are scaled to integer micro-units before the ratio so no
    float touches the money path.
    """
    if len(owners) != report.n:
        raise LengthMismatch(f"{len(owners)} owners vs report of {report.n}")
    full = round(report.acc_full * ACC_SCALE)
    marginals = [max(0, full - round(acc * ACC_SCALE)) for acc in report.loo_acc]
    payments = allocate_proportional(marginals, budget)
    return PaymentTable(entries=tuple(zip(owners, payments)), budget=budget)
