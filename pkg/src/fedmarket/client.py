"""Uniform access to a marketplace, in-process or over HTTP.

Both clients speak the same dict shapes as the HTTP API, so the demo
driver and the CLI subcommands are oblivious to the transport.
"""

from __future__ import annotations

from base64 import b64encode

import httpx

from .api import create_app
from .cidstore import Cid
from .ledger import Address
from .marketplace import MarketplaceService


class ApiFailure(Exception):
    """Server-side rejection, carrying the error envelope."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"[{status}] {code}: {message}")
        self.status = status
        self.code = code
        self.message = message


class InProcessClient:
    """Drives a service instance directly (no sockets)."""

    def __init__(self, service: MarketplaceService):
        self.service = service

    def create_job(self, payload: dict) -> dict:
        from .marketplace import job_spec_from_dict

        job = self.service.create_job(job_spec_from_dict(payload))
        return self.service.job_snapshot(job.id)

    def get_job(self, job_id: str) -> dict:
        return self.service.job_snapshot(job_id)

    def submit_model(self, job_id: str, owner: str, payload: bytes,
                     train_seconds: float | None = None) -> str:
        cid = self.service.submit_model(job_id, Address.from_hex(owner), payload, train_seconds)
        return cid.hex()

    def aggregate(self, job_id: str, caller: str) -> dict:
        self.service.run_aggregation(job_id, Address.from_hex(caller))
        return self.service.job_snapshot(job_id)

    def payments(self, job_id: str) -> dict:
        return self.service.get_payments(job_id).to_dict()

    def timings(self, job_id: str) -> dict:
        return self.service.get_timings(job_id)

    def balance(self, addr: str) -> int:
        return self.service.ledger.get_balance(Address.from_hex(addr))

    def receipt(self, tx_hash: str) -> dict:
        return self.service.ledger.get_receipt(bytes.fromhex(tx_hash)).to_dict()

    def fee(self, op: str, cid: str | None = None, recipients: int = 1) -> dict:
        return self.service.estimate_fee(op, cid_hex=cid, recipients=recipients)

    def cas_get(self, cid_hex: str) -> bytes:
        return self.service.store.get(Cid.from_hex(cid_hex))

    def cas_put(self, payload: bytes) -> str:
        return self.service.store.put(payload).hex()


class HttpClient:
    """Talks to a running server; raises ApiFailure on error envelopes."""

    def __init__(self, base_url: str, timeout: float = 300.0):
        self._client = httpx.Client(base_url=base_url, timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _check(self, response: httpx.Response):
        if response.status_code >= 400:
            try:
                body = response.json()
                raise ApiFailure(response.status_code, body.get("code", "?"), body.get("message", "?"))
            except ApiFailure:
                raise
            except Exception:
                raise ApiFailure(response.status_code, "HttpError", response.text[:500])
        return response

    def create_job(self, payload: dict) -> dict:
        return self._check(self._client.post("/jobs", json=payload)).json()

    def get_job(self, job_id: str) -> dict:
        return self._check(self._client.get(f"/jobs/{job_id}")).json()

    def submit_model(self, job_id: str, owner: str, payload: bytes,
                     train_seconds: float | None = None) -> str:
        body = {"owner": owner, "model_b64": b64encode(payload).decode("ascii")}
        if train_seconds is not None:
            body["train_seconds"] = train_seconds
        return self._check(self._client.post(f"/jobs/{job_id}/models", json=body)).json()["cid"]

    def aggregate(self, job_id: str, caller: str) -> dict:
        return self._check(self._client.post(f"/jobs/{job_id}/aggregate", json={"caller": caller})).json()

    def payments(self, job_id: str) -> dict:
        return self._check(self._client.get(f"/jobs/{job_id}/payments")).json()

    def timings(self, job_id: str) -> dict:
        return self._check(self._client.get(f"/jobs/{job_id}/timings")).json()

    def balance(self, addr: str) -> int:
        return self._check(self._client.get(f"/ledger/accounts/{addr}")).json()["balance_wei"]

    def receipt(self, tx_hash: str) -> dict:
        return self._check(self._client.get(f"/ledger/receipts/{tx_hash}")).json()

    def fee(self, op: str, cid: str | None = None, recipients: int = 1) -> dict:
        params: dict = {"op": op, "recipients": recipients}
        if cid is not None:
            params["cid"] = cid
        return self._check(self._client.get("/ledger/fees", params=params)).json()

    def cas_get(self, cid_hex: str) -> bytes:
        return self._check(self._client.get(f"/cas/{cid_hex}")).content

    def cas_put(self, payload: bytes) -> str:
        response = self._client.post(
            "/cas", content=payload, headers={"content-type": "application/octet-stream"}
        )
        return self._check(response).json()["cid"]


def serve_app(service: MarketplaceService, host: str, port: int) -> None:  # pragma: no cover
    import uvicorn

    uvicorn.run(create_app(service), host=host, port=port, log_level="warning")
