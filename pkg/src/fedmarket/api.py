"""HTTP facade over the marketplace service.

All bodies are JSON except raw blob up/download, which use
``application/octet-stream``; model payloads may also travel base64
inside JSON. Errors use one envelope::

    {"code": "<ErrorClass>", "message": "<human readable>"}

Contract revert strings pass through verbatim (an out-of-range registry
read reports exactly "Invalid CID index").
"""

from __future__ import annotations

from base64 import b64decode

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import cidstore, contract, ledger as ledger_mod, marketplace
from .aggregator import ArchMismatch, InvalidConfig
from .incentives import LengthMismatch, TooFewOwners
from .learner import SerializationError
from .ledger import Address
from .marketplace import MarketplaceService

_NOT_FOUND = (marketplace.JobNotFound, ledger_mod.NotFound, cidstore.NotFound, contract.UnknownContract)
_CONFLICT = (marketplace.JobNotCollecting, marketplace.NotBuyer, TooFewOwners, ledger_mod.BadNonce)
_BAD_REQUEST = (
    contract.InvalidCidIndex,
    ledger_mod.InsufficientFunds,
    ledger_mod.MalformedTransaction,
    ledger_mod.DuplicateAddress,
    SerializationError,
    ArchMismatch,
    InvalidConfig,
    LengthMismatch,
    ValueError,
)


class ApiError(Exception):
    """Wrapper that carries a domain exception to the envelope handler."""

    def __init__(self, cause: Exception):
        super().__init__(str(cause))
        self.cause = cause


def _status_for(exc: Exception) -> int:
    if isinstance(exc, _NOT_FOUND):
        return 404
    if isinstance(exc, _CONFLICT):
        return 409
    if isinstance(exc, _BAD_REQUEST):
        return 400
    return 500


def _envelope(exc: Exception) -> JSONResponse:
    return JSONResponse(
        status_code=_status_for(exc),
        content={"code": type(exc).__name__, "message": str(exc)},
    )


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ApiError:
        raise
    except Exception as exc:
        raise ApiError(exc) from exc


class JobCreateRequest(BaseModel):
    buyer: str
    budget_wei: int
    arch: list[int] = [784, 100, 10]
    aggregator: str = "matched"
    match_config: dict | None = None
    testset: dict
    min_owners: int = 2
    task: str = "classification"
    hyperparams: dict = {}
    init_model_b64: str | None = None
    init_seed: int = 0


class ModelSubmitRequest(BaseModel):
    owner: str
    model_b64: str
    train_seconds: float | None = None


class AggregateRequest(BaseModel):
    caller: str


def create_app(service: MarketplaceService) -> FastAPI:
    app = FastAPI(title="fedmarket", docs_url=None, redoc_url=None)

    @app.exception_handler(ApiError)
    async def _handle_api(request: Request, exc: ApiError):
        return _envelope(exc.cause)

    # ------------------------------- jobs ------------------------------- #

    @app.post("/jobs")
    def create_job(req: JobCreateRequest):
        def build():
            spec = marketplace.job_spec_from_dict(req.model_dump())
            job = service.create_job(spec)
            return service.job_snapshot(job.id)

        return _run(build)

    @app.get("/jobs")
    def list_jobs():
        return _run(lambda: {"jobs": [service.job_snapshot(j) for j in service.jobs]})

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return _run(service.job_snapshot, job_id)

    @app.post("/jobs/{job_id}/models")
    async def submit_model(
        job_id: str,
        request: Request,
        owner: str | None = Query(default=None),
        train_seconds: float | None = Query(default=None),
    ):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("application/octet-stream"):
            if owner is None:
                return _envelope(ValueError("octet-stream uploads need an ?owner= query param"))
            payload = await request.body()
            addr, secs = owner, train_seconds
        else:
            body = ModelSubmitRequest.model_validate(await request.json())
            payload = b64decode(body.model_b64)
            addr, secs = body.owner, body.train_seconds
        cid = _run(service.submit_model, job_id, Address.from_hex(addr), payload, secs)
        return {"cid": cid.hex()}

    @app.get("/jobs/{job_id}/cids")
    def job_cids(job_id: str):
        return {"cids": [cid.hex() for cid in _run(service.job_cids, job_id)]}

    @app.post("/jobs/{job_id}/aggregate")
    def aggregate(job_id: str, req: AggregateRequest):
        def go():
            service.run_aggregation(job_id, Address.from_hex(req.caller))
            return service.job_snapshot(job_id)

        return _run(go)

    @app.get("/jobs/{job_id}/payments")
    def payments(job_id: str):
        return _run(lambda: service.get_payments(job_id).to_dict())

    @app.get("/jobs/{job_id}/timings")
    def timings(job_id: str):
        return _run(service.get_timings, job_id)

    # ------------------------------ ledger ------------------------------ #

    @app.get("/ledger/accounts/{addr}")
    def account(addr: str):
        def read():
            address = Address.from_hex(addr)
            return {
                "address": address.hex(),
                "balance_wei": service.ledger.get_balance(address),
                "nonce": service.ledger.get_nonce(address),
            }

        return _run(read)

    @app.get("/ledger/receipts/{tx_hash}")
    def receipt(tx_hash: str):
        return _run(lambda: service.ledger.get_receipt(bytes.fromhex(tx_hash)).to_dict())

    @app.get("/ledger/fees")
    def fees(
        op: str,
        cid: str | None = Query(default=None),
        recipients: int = Query(default=1),
    ):
        return _run(service.estimate_fee, op, cid_hex=cid, recipients=recipients)

    # ------------------------------- cas -------------------------------- #

    @app.post("/cas")
    async def cas_put(request: Request):
        payload = await request.body()
        cid = _run(service.store.put, payload)
        return {"cid": cid.hex()}

    @app.get("/cas/{cid_hex}")
    def cas_get(cid_hex: str):
        payload = _run(lambda: service.store.get(cidstore.Cid.from_hex(cid_hex)))
        return Response(content=payload, media_type="application/octet-stream")

    return app
