"""Seeded end-to-end demo: ten owners, one buyer, one budget.

Drives the whole workflow — genesis, job deployment with a 0.01 ETH
escrow, non-IID partitioning, ten local training runs, model submission
through the content store and the registry contract, one-shot
aggregation, leave-one-out scoring and the final payout — then writes
the report bundle:

    local_accuracies.csv   per-owner model quality plus the aggregate
    loo_accuracies.csv     drop-one accuracies and marginals
    payments.csv           the wei/ETH payment table
    gas_report.json        per-transaction gas and fee breakdown
    timings.json           buyer-side and owner-side step durations

Bundles are byte-reproducible for a fixed seed and config. Wall-clock
durations are inherently not, so timings.json carries null durations
unless ``wall_times=True`` (the step keys are always present; live
measurements are always available from the service API).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .aggregator import resolve_spawn_penalty
from .cidstore import CidStore
from .client import InProcessClient
from .config import AppConfig, DemoConfig, address_for_tag, dev_genesis
from .incentives import ContributionReport
from .learner import (
    Dataset,
    Hyperparams,
    MlpArch,
    ModelWeights,
    SyntheticSpec,
    evaluate,
    init_model,
    partition,
    serialize,
    synthetic_digits,
    train,
)
from .ledger import Address, Ledger, eth
from .marketplace import BUYER_STEPS, OWNER_STEPS, MarketplaceService

REPORT_FILES = (
    "local_accuracies.csv",
    "loo_accuracies.csv",
    "payments.csv",
    "gas_report.json",
    "timings.json",
)


def owner_addresses(seed: int, n: int) -> list[Address]:
    return [address_for_tag(f"owner-{seed}-{i}") for i in range(n)]


def buyer_address(seed: int) -> Address:
    return address_for_tag(f"buyer-{seed}")


def dataset_spec(cfg: DemoConfig, seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        seed=seed,
        n_train=cfg.n_train,
        n_test=cfg.n_test,
        dim=cfg.arch[0],
        classes=cfg.arch[-1],
        noise=cfg.noise,
    )


def prepare_owner_models(
    cfg: DemoConfig, seed: int
) -> tuple[Dataset, Dataset, ModelWeights, list[ModelWeights], list[float]]:
    """Owner-side compute: data split, common init, one model per owner.

    Deterministic in (cfg, seed); returns wall-clock training times as a
    side channel for the timing report.
    """
    train_ds, test_ds = synthetic_digits(dataset_spec(cfg, seed))
    parts = partition(train_ds, cfg.n_owners, cfg.skew, seed + 1)
    init = init_model(MlpArch(cfg.arch), seed + 2)
    models, times = [], []
    for i, part in enumerate(parts):
        hp = cfg.hyperparams(seed=seed * 1000 + i)
        started = time.perf_counter()
        models.append(train(init, part, hp))
        times.append(time.perf_counter() - started)
    return train_ds, test_ds, init, models, times


@dataclass
class ScenarioResult:
    """Pure-FL view of the scenario, without any ledger involvement."""

    seed: int
    local_accuracies: list[float]
    matched_accuracy: float
    naive_accuracy: float
    spawn_penalty: float
    global_width: int

    @property
    def best_local(self) -> float:
        return max(self.local_accuracies)

    @property
    def worst_local(self) -> float:
        return min(self.local_accuracies)


def run_skew_scenario(cfg: DemoConfig, seed: int) -> ScenarioResult:
    from .aggregator import aggregate_matched, aggregate_naive, MatchConfig

    _train_ds, test_ds, _init, models, _times = prepare_owner_models(cfg, seed)
    penalty = resolve_spawn_penalty(models, cfg.match_config)
    resolved = MatchConfig(spawn_penalty=penalty, max_global_width=cfg.match_config.max_global_width)
    matched = aggregate_matched(models, resolved)
    return ScenarioResult(
        seed=seed,
        local_accuracies=[evaluate(m, test_ds) for m in models],
        matched_accuracy=evaluate(matched, test_ds),
        naive_accuracy=evaluate(aggregate_naive(models), test_ds),
        spawn_penalty=penalty,
        global_width=matched.weights[0].shape[0],
    )


@dataclass
class DemoResult:
    seed: int
    out_dir: Path
    job: dict
    buyer: str
    owners: list[str]
    local_accuracies: list[float]
    aggregate_accuracy: float
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def _canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _fee_entry(receipt: dict, **extra) -> dict:
    entry = {
        "tx": receipt["tx_hash"],
        "gas": receipt["gas_used"],
        "fee_wei": receipt["fee"],
        "fee_eth": eth(receipt["fee"]),
    }
    entry.update(extra)
    return entry


def write_reports(
    out_dir: Path,
    client,
    job: dict,
    local_accs: list[float],
    aggregate_acc: float,
    wall_times: bool,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    owners = [s["owner"] for s in job["submissions"]]

    lines = ["owner,address,accuracy"]
    for i, (addr, acc) in enumerate(zip(owners, local_accs)):
        lines.append(f"{i},{addr},{acc:.6f}")
    lines.append(f"aggregate,{job['global_model_cid'] or '-'},{aggregate_acc:.6f}")
    (out_dir / "local_accuracies.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    report = ContributionReport.from_dict(job["report"])
    owners_typed = [Address.from_hex(a) for a in owners]
    (out_dir / "loo_accuracies.csv").write_text(report.to_csv(owners_typed), encoding="utf-8")

    pay_lines = ["owner,address,payment_wei,payment_eth"]
    for i, entry in enumerate(job["payments"]["entries"]):
        pay_lines.append(f"{i},{entry['address']},{entry['wei']},{entry['eth']}")
    (out_dir / "payments.csv").write_text("\n".join(pay_lines) + "\n", encoding="utf-8")

    uploads = [
        _fee_entry(client.receipt(tx), owner=owner)
        for tx, owner in zip(job["upload_txs"], owners)
    ]
    payouts = [_fee_entry(client.receipt(tx)) for tx in job["payout_txs"]]
    deploy = _fee_entry(client.receipt(job["deploy_tx"]))
    max_upload = max(u["fee_wei"] for u in uploads)
    min_payout = min(p["fee_wei"] for p in payouts) if payouts else 0
    transfer_fee = client.fee("transfer")
    gas_report = {
        "gas_price_wei": transfer_fee["fee_wei"] // transfer_fee["gas"],
        "deploy": deploy,
        "upload_cid": uploads,
        "payout": payouts,
        "ordering": {
            "deploy_fee_gt_upload_fee": deploy["fee_wei"] > max_upload,
            "upload_within_2x_of_payout_per_recipient": bool(
                payouts
                and max_upload <= 2 * min_payout
                and min_payout <= 2 * max_upload
            ),
        },
    }
    (out_dir / "gas_report.json").write_text(_canonical_json(gas_report), encoding="utf-8")

    timings = client.timings(job["id"])
    if not wall_times:
        timings = {
            "buyer": {step: None for step in timings["buyer"]},
            "owners": {
                owner: {step: None for step in steps}
                for owner, steps in timings["owners"].items()
            },
        }
    (out_dir / "timings.json").write_text(_canonical_json(timings), encoding="utf-8")


def run_demo(
    config: AppConfig,
    seed: int,
    out_dir: str | Path,
    client=None,
    wall_times: bool = False,
    echo=lambda msg: None,
) -> DemoResult:
    """Run the ten-owner scenario end to end and write the report bundle.

    Pass a client to reuse a running server; by default an in-process
    service with a seed-derived genesis is built under ``out_dir``.
    """
    cfg = config.demo
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buyer = buyer_address(seed)
    owners = owner_addresses(seed, cfg.n_owners)

    if client is None:
        ledger = Ledger.genesis(list(dev_genesis(seed, cfg)), config.gas_schedule)
        store = CidStore(out_dir / "cas")
        client = InProcessClient(MarketplaceService(ledger, store, config))

    funding = {addr.hex(): client.balance(addr.hex()) for addr in [buyer] + owners}

    echo(f"[1/5] training {cfg.n_owners} local models (seed {seed})")
    _train_ds, test_ds, _init, models, train_times = prepare_owner_models(cfg, seed)
    local_accs = [evaluate(m, test_ds) for m in models]

    echo(f"[2/5] deploying job contract with budget {eth(cfg.budget_wei)} ETH")
    job = client.create_job(
        {
            "buyer": buyer.hex(),
            "budget_wei": cfg.budget_wei,
            "arch": list(cfg.arch),
            "aggregator": cfg.aggregator,
            "match_config": cfg.match_config.to_dict(),
            "testset": dataset_spec(cfg, seed).to_dict(),
            "min_owners": cfg.min_owners,
            "hyperparams": {
                "batch_size": cfg.batch_size,
                "learning_rate": cfg.learning_rate,
                "local_epochs": cfg.local_epochs,
            },
            "init_seed": seed + 2,
        }
    )
    if job["state"] != "Collecting":
        raise RuntimeError(f"job failed to deploy: {job['failure_reason']}")

    echo("[3/5] owners submitting models (CAS put + on-chain CID)")
    for owner, model, secs in zip(owners, models, train_times):
        client.submit_model(job["id"], owner.hex(), serialize(model), train_seconds=secs)

    echo("[4/5] buyer aggregating, scoring and paying")
    job = client.aggregate(job["id"], buyer.hex())
    aggregate_acc = job["report"]["acc_full"]

    echo("[5/5] writing report bundle")
    write_reports(out_dir, client, job, local_accs, aggregate_acc, wall_times)

    result = DemoResult(
        seed=seed,
        out_dir=out_dir,
        job=job,
        buyer=buyer.hex(),
        owners=[a.hex() for a in owners],
        local_accuracies=local_accs,
        aggregate_accuracy=aggregate_acc,
    )
    _verify(result, client, funding, cfg)
    for name, passed in result.checks.items():
        echo(f"  check {name}: {'ok' if passed else 'FAILED'}")
    return result


def _verify(result: DemoResult, client, funding: dict[str, int], cfg: DemoConfig) -> None:
    """Money conservation facts every run must satisfy."""
    job = result.job
    payments = {e["address"]: e["wei"] for e in job["payments"]["entries"]}
    result.checks["payments_sum_to_budget"] = sum(payments.values()) == cfg.budget_wei
    result.checks["escrow_drained"] = job["escrow_balance"] == 0

    deploy_fee = client.receipt(job["deploy_tx"])["fee"]
    payout_fees = sum(client.receipt(tx)["fee"] for tx in job["payout_txs"])
    buyer_delta = funding[result.buyer] - client.balance(result.buyer)
    result.checks["buyer_paid_budget_plus_gas"] = (
        buyer_delta == cfg.budget_wei + deploy_fee + payout_fees
    )

    upload_fees = {}
    for tx, sub in zip(job["upload_txs"], job["submissions"]):
        receipt = client.receipt(tx)
        upload_fees[sub["owner"]] = upload_fees.get(sub["owner"], 0) + receipt["fee"]
    owners_ok = True
    for owner in result.owners:
        delta = client.balance(owner) - funding[owner]
        owners_ok &= delta == payments.get(owner, 0) - upload_fees.get(owner, 0)
    result.checks["owner_balances_reconcile"] = owners_ok
    result.checks["all_steps_timed"] = set(BUYER_STEPS) <= set(job["timings"]["buyer"]) and all(
        set(OWNER_STEPS) <= set(steps) for steps in job["timings"]["owners"].values()
    )
