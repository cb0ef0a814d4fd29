"""Orchestration service: the full buyer/owner workflow over one ledger.

A job walks the state machine ``Created -> Collecting -> Aggregating ->
Paid`` (or ``-> Failed``): deploying the registry contract escrows the
budget, owners push serialized models into the content store and record
the returned CID on chain, and the buyer finally pulls every CID (free
view calls), retrieves and fuses the models, scores leave-one-out
contributions and pays the table out of escrow — one transfer per
recipient, buyer pays that gas.

Faulty submissions (corrupt blob, bad serialization, wrong shape) do not
fail the job: the owner is excluded with a zero marginal and the
exclusion is recorded on the job.

Each executed step is wall-clock timed; buyer steps live under
``timings`` and per-owner steps under ``owner_timings`` (training time
is measured client-side and reported with the submission).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import contract
from .aggregator import MatchConfig, aggregate_matched, aggregate_naive, resolve_spawn_penalty
from .cidstore import Cid, CidStore, CidStoreError
from .config import AppConfig, dev_genesis
from .incentives import (
    ContributionReport,
    PaymentTable,
    TooFewOwners,
    canonical_aggregator,
    compute_loo,
    payment_table,
)
from .learner import (
    Dataset,
    MlpArch,
    ModelWeights,
    SerializationError,
    SyntheticSpec,
    deserialize,
    serialize,
    synthetic_digits,
)
from .ledger import Address, Ledger, Receipt

log = logging.getLogger("fedmarket.marketplace")

BUYER_STEPS = ("deploy", "download_cids", "retrieve_models", "aggregate", "loo", "payout")
OWNER_STEPS = ("train", "upload_model", "send_cid")


class MarketplaceError(Exception):
    pass


class JobNotFound(MarketplaceError):
    pass


class JobNotCollecting(MarketplaceError):
    pass


class NotBuyer(MarketplaceError):
    pass


@dataclass(frozen=True)
class JobSpec:
    buyer: Address
    budget_wei: int
    arch: MlpArch
    init_model: ModelWeights
    aggregator: str = "matched"
    match_config: MatchConfig = field(default_factory=MatchConfig)
    testset_ref: dict = field(default_factory=dict)
    min_owners: int = 2
    task: str = "classification"
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.budget_wei <= 0:
            raise ValueError("budget must be > 0")
        if self.min_owners < 2:
            raise ValueError("min_owners must be >= 2")
        canonical_aggregator(self.aggregator)


@dataclass
class Job:
    id: str
    spec: JobSpec
    state: str = "Created"
    failure_reason: str | None = None
    contract_address: Address | None = None
    init_model_cid: Cid | None = None
    deploy_receipt: Receipt | None = None
    upload_receipts: list[Receipt] = field(default_factory=list)
    payout_receipts: list[Receipt] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    owner_timings: dict[str, dict[str, float]] = field(default_factory=dict)
    report: ContributionReport | None = None
    payments: PaymentTable | None = None
    excluded: list[tuple[str, str]] = field(default_factory=list)
    global_model_cid: Cid | None = None
    spawn_penalty_used: float | None = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)


@contextmanager
def _timed(sink: dict[str, float], step: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        sink[step] = time.perf_counter() - start


def resolve_testset(ref: dict) -> Dataset:
    """Materialize the buyer-held test set from its descriptor."""
    kind = ref.get("kind")
    if kind == "synthetic_digits":
        _train, test = synthetic_digits(SyntheticSpec.from_dict(ref))
        return test
    if kind == "file":
        with np.load(ref["path"]) as bundle:
            return Dataset(bundle["features"], bundle["labels"], int(bundle["n_classes"]))
    raise ValueError(f"unknown testset descriptor kind {kind!r}")


def job_spec_from_dict(data: dict) -> JobSpec:
    """Build a JobSpec from the wire-format dict used by POST /jobs."""
    from base64 import b64decode

    from .learner import init_model

    testset = data.get("testset") or {}
    if testset.get("kind") not in ("synthetic_digits", "file"):
        raise ValueError("testset.kind must be 'synthetic_digits' or 'file'")
    arch = MlpArch(tuple(data.get("arch", (784, 100, 10))))
    init_b64 = data.get("init_model_b64")
    if init_b64 is not None:
        model = deserialize(b64decode(init_b64))
        if model.arch != arch:
            raise SerializationError("init model arch does not match job arch")
    else:
        model = init_model(arch, int(data.get("init_seed", 0)))
    return JobSpec(
        buyer=Address.from_hex(data["buyer"]),
        budget_wei=int(data["budget_wei"]),
        arch=arch,
        init_model=model,
        aggregator=data.get("aggregator", "matched"),
        match_config=MatchConfig.from_dict(data.get("match_config") or {}),
        testset_ref=testset,
        min_owners=int(data.get("min_owners", 2)),
        task=data.get("task", "classification"),
        hyperparams=data.get("hyperparams") or {},
    )


def job_meta_bytes(spec: JobSpec, init_model_cid: Cid) -> bytes:
    """Canonical JSON published with the contract: what owners need to
    produce conforming models. The init model itself lives in the content
    store; only its CID goes on chain."""
    meta = {
        "task": spec.task,
        "arch": list(spec.arch.dims),
        "aggregator": spec.aggregator,
        "match_config": spec.match_config.to_dict(),
        "init_model_cid": init_model_cid.hex(),
        "min_owners": spec.min_owners,
        "hyperparams": spec.hyperparams,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


class MarketplaceService:
    """In-process service owning the ledger, the content store and jobs.

    Job mutations are serialized per job; ledger writes are globally
    serialized by the ledger itself.
    """

    def __init__(self, ledger: Ledger, store: CidStore, config: AppConfig | None = None):
        self.ledger = ledger
        self.store = store
        self.config = config or AppConfig()
        self.jobs: dict[str, Job] = {}
        self._lock = threading.RLock()
        self._next_id = 1

    @classmethod
    def from_config(cls, config: AppConfig, cas_root=None, seed: int = 0) -> "MarketplaceService":
        genesis = config.genesis or dev_genesis(seed, config.demo)
        ledger = Ledger.genesis(list(genesis), config.gas_schedule)
        store = CidStore(cas_root if cas_root is not None else config.cas_root)
        return cls(ledger, store, config)

    # ------------------------------- jobs ----------------------------------- #

    def create_job(self, spec: JobSpec) -> Job:
        with self._lock:
            job = Job(id=f"job-{self._next_id}", spec=spec)
            self._next_id += 1
            self.jobs[job.id] = job
        with job.lock, _timed(job.timings, "deploy"):
            try:
                init_cid = self.store.put(serialize(spec.init_model))
                address, receipt = contract.deploy(
                    self.ledger,
                    spec.buyer,
                    spec.budget_wei,
                    job_meta_bytes(spec, init_cid),
                    code_size=self.config.contract_code_size,
                )
            except Exception as exc:
                job.state = "Failed"
                job.failure_reason = f"{type(exc).__name__}: {exc}"
                return job
            job.init_model_cid = init_cid
            job.contract_address = address
            job.deploy_receipt = receipt
            job.state = "Collecting"
        return job

    def _job(self, job_id: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise JobNotFound(f"no job {job_id!r}")
        return job

    def submit_model(
        self,
        job_id: str,
        owner: Address,
        model_bytes: bytes,
        train_seconds: float | None = None,
    ) -> Cid:
        """Steps 2-4 for one owner: validate, store, register CID on chain.

        Malformed models are rejected before any transaction, so a bad
        upload costs the owner nothing.
        """
        job = self._job(job_id)
        with job.lock:
            if job.state != "Collecting":
                raise JobNotCollecting(f"job {job_id} is {job.state}, not Collecting")
            model = deserialize(model_bytes)
            if model.arch != job.spec.arch:
                raise SerializationError(
                    f"model arch {model.arch.dims} does not match job arch {job.spec.arch.dims}"
                )
            steps: dict[str, float] = {}
            if train_seconds is not None:
                steps["train"] = float(train_seconds)
            with _timed(steps, "upload_model"):
                cid = self.store.put(model_bytes)
            with _timed(steps, "send_cid"):
                receipt = contract.upload_cid(self.ledger, job.contract_address, owner, cid)
            if not receipt.ok:
                raise MarketplaceError(f"uploadCid reverted: {receipt.revert_reason}")
            job.upload_receipts.append(receipt)
            job.owner_timings[owner.hex()] = steps
            return cid

    def run_aggregation(self, job_id: str, caller: Address) -> Job:
        """Steps 5-7: download CIDs, retrieve models, fuse, score, pay."""
        job = self._job(job_id)
        with job.lock:
            if job.state != "Collecting":
                raise JobNotCollecting(f"job {job_id} is {job.state}, not Collecting")
            if caller != job.spec.buyer:
                raise NotBuyer(f"only the buyer may aggregate job {job_id}")
            count = contract.get_cid_count(self.ledger, job.contract_address)
            if count < job.spec.min_owners:
                raise TooFewOwners(f"{count} submissions, need >= {job.spec.min_owners}")
            job.state = "Aggregating"
            try:
                self._aggregate_and_pay(job)
            except Exception as exc:
                job.state = "Failed"
                job.failure_reason = f"{type(exc).__name__}: {exc}"
                raise
            job.state = "Paid"
            job.timings["total"] = sum(job.timings[s] for s in BUYER_STEPS)
        return job

    def _aggregate_and_pay(self, job: Job) -> None:
        spec = job.spec
        with _timed(job.timings, "download_cids"):
            cids = contract.get_all_cids(self.ledger, job.contract_address)
            submitters = contract.get_submitters(self.ledger, job.contract_address)

        valid: list[tuple[int, ModelWeights]] = []
        with _timed(job.timings, "retrieve_models"):
            for index, (cid, owner) in enumerate(zip(cids, submitters)):
                try:
                    payload = self.store.get(cid)
                    model = deserialize(payload)
                    if model.arch != spec.arch:
                        raise SerializationError(
                            f"arch {model.arch.dims} does not match job arch {spec.arch.dims}"
                        )
                except (CidStoreError, SerializationError) as exc:
                    reason = f"{type(exc).__name__}: {exc}"
                    job.excluded.append((owner.hex(), reason))
                    log.warning("job %s: excluding submission %d from %s (%s)",
                                job.id, index, owner.hex(), reason)
                    continue
                valid.append((index, model))
        if len(valid) < 2:
            raise TooFewOwners(f"only {len(valid)} valid models after exclusions")

        models = [model for _, model in valid]
        choice = canonical_aggregator(spec.aggregator)
        with _timed(job.timings, "aggregate"):
            cfg = spec.match_config
            if choice == "matched":
                penalty = resolve_spawn_penalty(models, cfg)
                cfg = MatchConfig(spawn_penalty=penalty, max_global_width=cfg.max_global_width)
                job.spawn_penalty_used = penalty
                global_model = aggregate_matched(models, cfg)
            elif choice == "naive":
                global_model = aggregate_naive(models)
            else:
                global_model = None  # ensemble: no single-model artifact
            if global_model is not None:
                job.global_model_cid = self.store.put(serialize(global_model))

        with _timed(job.timings, "loo"):
            testset = resolve_testset(spec.testset_ref)
            valid_report = compute_loo(models, testset, choice, cfg if choice == "matched" else None)
            job.report = self._expand_report(valid_report, [i for i, _ in valid], len(cids))

        payments = payment_table(job.report, submitters, spec.budget_wei)
        job.payments = payments
        with _timed(job.timings, "payout"):
            for addr, amount in payments.entries:
                if amount == 0:
                    continue
                receipt = contract.payout(
                    self.ledger, job.contract_address, spec.buyer, [(addr, amount)]
                )
                if not receipt.ok:
                    raise MarketplaceError(f"payout reverted: {receipt.revert_reason}")
                job.payout_receipts.append(receipt)

    @staticmethod
    def _expand_report(valid: ContributionReport, valid_indices: list[int], n: int) -> ContributionReport:
        """Map a report over the valid models back onto all submissions;
        excluded rows score as if dropping them changes nothing."""
        loo = [valid.acc_full] * n
        marginal = [0.0] * n
        for pos, index in enumerate(valid_indices):
            loo[index] = valid.loo_acc[pos]
            marginal[index] = valid.marginal[pos]
        return ContributionReport(acc_full=valid.acc_full, loo_acc=tuple(loo), marginal=tuple(marginal))

    # ------------------------------- reads ---------------------------------- #

    def get_job(self, job_id: str) -> Job:
        return self._job(job_id)

    def get_timings(self, job_id: str) -> dict:
        job = self._job(job_id)
        return {"buyer": dict(job.timings), "owners": {k: dict(v) for k, v in job.owner_timings.items()}}

    def get_payments(self, job_id: str) -> PaymentTable:
        job = self._job(job_id)
        if job.payments is None:
            raise MarketplaceError(f"job {job_id} has no payments (state {job.state})")
        return job.payments

    def job_cids(self, job_id: str) -> list[Cid]:
        job = self._job(job_id)
        if job.contract_address is None:
            return []
        return contract.get_all_cids(self.ledger, job.contract_address)

    def job_snapshot(self, job_id: str) -> dict:
        """JSON-ready view of a job, including live contract state."""
        job = self._job(job_id)
        spec = job.spec
        snapshot = {
            "id": job.id,
            "state": job.state,
            "failure_reason": job.failure_reason,
            "buyer": spec.buyer.hex(),
            "budget_wei": spec.budget_wei,
            "arch": list(spec.arch.dims),
            "aggregator": spec.aggregator,
            "min_owners": spec.min_owners,
            "match_config": spec.match_config.to_dict(),
            "task": spec.task,
            "contract_address": job.contract_address.hex() if job.contract_address else None,
            "init_model_cid": job.init_model_cid.hex() if job.init_model_cid else None,
            "global_model_cid": job.global_model_cid.hex() if job.global_model_cid else None,
            "spawn_penalty_used": job.spawn_penalty_used,
            "excluded": [{"address": a, "reason": r} for a, r in job.excluded],
            "deploy_tx": job.deploy_receipt.tx_hash.hex() if job.deploy_receipt else None,
            "upload_txs": [r.tx_hash.hex() for r in job.upload_receipts],
            "payout_txs": [r.tx_hash.hex() for r in job.payout_receipts],
            "report": job.report.to_dict() if job.report else None,
            "payments": job.payments.to_dict() if job.payments else None,
            "timings": self.get_timings(job_id),
        }
        if job.contract_address is not None:
            submitters = contract.get_submitters(self.ledger, job.contract_address)
            cids = contract.get_all_cids(self.ledger, job.contract_address)
            snapshot["submissions"] = [
                {"index": i, "owner": owner.hex(), "cid": cid.hex()}
                for i, (owner, cid) in enumerate(zip(submitters, cids))
            ]
            snapshot["cid_count"] = len(cids)
            snapshot["escrow_balance"] = contract.get_escrow(self.ledger, job.contract_address)
        else:
            snapshot["submissions"] = []
            snapshot["cid_count"] = 0
            snapshot["escrow_balance"] = 0
        return snapshot

    # --------------------------- fee estimation ----------------------------- #

    def estimate_fee(self, op: str, cid_hex: str | None = None, recipients: int = 1) -> dict:
        """Exact gas/fee for an operation under the current schedule.

        For ``upload_cid`` without a concrete CID, assumes 32 nonzero
        bytes (the worst case, and the common one for random digests).
        """
        sched = self.ledger.schedule
        if op == "deploy":
            gas = (
                sched.tx_base
                + sched.create_base
                + self.config.contract_code_size * sched.code_deposit_per_byte
            )
        elif op == "upload_cid":
            args = bytes.fromhex(cid_hex) if cid_hex else b"\xff" * 32
            if len(args) != 32:
                raise ValueError("cid must be 32 bytes")
            gas = (
                sched.tx_base
                + sched.calldata_cost(args)
                + sched.storage_write_new
                + sched.storage_write_update
            )
        elif op == "payout":
            if recipients < 1:
                raise ValueError("recipients must be >= 1")
            args = b"\xff" * 20 + (10**15).to_bytes(32, "big")
            gas = recipients * (
                sched.tx_base + sched.calldata_cost(args) + sched.storage_write_update
            )
        elif op == "transfer":
            gas = sched.tx_base
        else:
            raise ValueError(f"unknown op {op!r}")
        return {"op": op, "gas": gas, "fee_wei": gas * sched.gas_price}
