"""CID-registry contract: append-only CID log plus buyer-funded escrow.

Behavioral twin of a small registry contract. Anyone may append a
32-byte content identifier (duplicates permitted, indices dense); only
the deploying buyer may release escrowed funds to recipients. Reads are
view calls: they bypass the ledger's transaction path and cost no gas.

Call encoding (shared with the HTTP layer and the CLI):

    calldata = selector | args
    selector = first 4 bytes of sha256(method name)
    uploadCid args = 32-byte CID
    payout    args = repeated (20-byte address | 32-byte big-endian wei)

Gas accounting charges the argument bytes per the ledger's calldata
rates (the selector is treated as dispatch overhead covered by the base
cost) plus the method's storage writes: uploadCid writes one new slot
and updates the counter slot; payout updates one slot per recipient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .cidstore import Cid
from .hashing import selector
from .ledger import Address, GasSchedule, Receipt, Transaction, make_creation_calldata

if TYPE_CHECKING:
    from .ledger import Ledger

SEL_UPLOAD_CID = selector("uploadCid")
SEL_PAYOUT = selector("payout")

DEFAULT_CODE_SIZE = 4096
CODE_FILLER = 0xFE

INVALID_INDEX_MESSAGE = "Invalid CID index"


class ContractError(Exception):
    """Raised by view calls and helpers outside the transaction path."""


class UnknownContract(ContractError):
    pass


class InvalidCidIndex(ContractError):
    def __init__(self) -> None:
        super().__init__(INVALID_INDEX_MESSAGE)


class ContractRevert(Exception):
    """Internal: aborts a dispatched call; the ledger turns it into a
    Reverted receipt charging intrinsic gas only."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@dataclass
class CidStorageState:
    """Registry instance: dense index->CID log, submitters, escrow."""

    buyer: Address
    budget: int
    escrow_balance: int
    job_meta: bytes = b""
    cids: list[Cid] = field(default_factory=list)
    submitters: list[Address] = field(default_factory=list)
    paid: list[tuple[Address, int]] = field(default_factory=list)

    @property
    def cid_count(self) -> int:
        return len(self.cids)

    def to_dict(self) -> dict:
        return {
            "buyer": self.buyer.hex(),
            "budget": self.budget,
            "escrow_balance": self.escrow_balance,
            "job_meta": self.job_meta.hex(),
            "cids": [cid.hex() for cid in self.cids],
            "submitters": [addr.hex() for addr in self.submitters],
            "paid": [[addr.hex(), amount] for addr, amount in self.paid],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CidStorageState":
        return cls(
            buyer=Address.from_hex(data["buyer"]),
            budget=int(data["budget"]),
            escrow_balance=int(data["escrow_balance"]),
            job_meta=bytes.fromhex(data["job_meta"]),
            cids=[Cid.from_hex(h) for h in data["cids"]],
            submitters=[Address.from_hex(h) for h in data["submitters"]],
            paid=[(Address.from_hex(a), int(w)) for a, w in data["paid"]],
        )


# --------------------------------------------------------------------------- #
# Calldata encoding
# --------------------------------------------------------------------------- #

def encode_upload_cid(cid: Cid) -> bytes:
    return SEL_UPLOAD_CID + cid.digest


def encode_payout(entries: list[tuple[Address, int]]) -> bytes:
    parts = [SEL_PAYOUT]
    for addr, amount in entries:
        if amount < 0:
            raise ValueError("payout amount must be non-negative")
        parts.append(addr.bytes + amount.to_bytes(32, "big"))
    return b"".join(parts)


def decode_payout_args(args: bytes) -> list[tuple[Address, int]]:
    if len(args) % 52 != 0:
        raise ContractRevert("malformed payout arguments")
    entries = []
    for off in range(0, len(args), 52):
        addr = Address(args[off : off + 20])
        amount = int.from_bytes(args[off + 20 : off + 52], "big")
        entries.append((addr, amount))
    return entries


# --------------------------------------------------------------------------- #
# Dispatch (called from Ledger.submit_tx under the writer lock)
# --------------------------------------------------------------------------- #

def dispatch_gas(schedule: GasSchedule, sel: bytes, args: bytes) -> int:
    """Storage-write gas for a call, known before execution."""
    if sel == SEL_UPLOAD_CID:
        return schedule.storage_write_new + schedule.storage_write_update
    if sel == SEL_PAYOUT:
        n = len(args) // 52 if len(args) % 52 == 0 else 1
        return n * schedule.storage_write_update
    return 0


def execute_call(
    ledger: "Ledger",
    state: CidStorageState,
    contract_addr: Address,
    caller: Address,
    sel: bytes,
    args: bytes,
) -> tuple[tuple[str, bytes], ...]:
    """Run a contract call. Validates fully before mutating anything so a
    ContractRevert leaves ledger and contract state untouched."""
    if sel == SEL_UPLOAD_CID:
        if len(args) != 32:
            raise ContractRevert("uploadCid expects a 32-byte CID")
        cid = Cid(args)
        state.cids.append(cid)
        state.submitters.append(caller)
        return (("CidUploaded", cid.digest),)

    if sel == SEL_PAYOUT:
        entries = decode_payout_args(args)
        if caller != state.buyer:
            raise ContractRevert("NotBuyer")
        total = sum(amount for _, amount in entries)
        if total > state.escrow_balance:
            raise ContractRevert("EscrowOverdraw")
        contract_acct = ledger._account(contract_addr)
        logs = []
        for addr, amount in entries:
            state.escrow_balance -= amount
            state.paid.append((addr, amount))
            contract_acct.balance -= amount
            ledger._account(addr).balance += amount
            logs.append(("Paid", addr.bytes + amount.to_bytes(32, "big")))
        return tuple(logs)

    raise ContractRevert(f"unknown selector 0x{sel.hex()}")


# --------------------------------------------------------------------------- #
# Caller-facing operations
# --------------------------------------------------------------------------- #

def standin_code(size: int = DEFAULT_CODE_SIZE) -> bytes:
    """Fixed-size blob standing in for compiled contract bytecode."""
    return bytes([CODE_FILLER]) * size


def deploy(
    ledger: "Ledger",
    buyer: Address,
    budget: int,
    job_meta: bytes = b"",
    code_size: int = DEFAULT_CODE_SIZE,
) -> tuple[Address, Receipt]:
    """Create a registry instance escrowing ``budget`` wei from the buyer."""
    tx = Transaction(
        sender=buyer,
        to=None,
        value=budget,
        calldata=make_creation_calldata(standin_code(code_size), job_meta),
        nonce=ledger.get_nonce(buyer),
    )
    receipt = ledger.submit_tx(tx)
    assert receipt.contract_address is not None
    return receipt.contract_address, receipt


def _state(ledger: "Ledger", contract_addr: Address) -> CidStorageState:
    state = ledger.contracts.get(contract_addr)
    if state is None:
        raise UnknownContract(f"no contract at {contract_addr}")
    return state  # type: ignore[return-value]


def upload_cid(ledger: "Ledger", contract_addr: Address, caller: Address, cid: Cid) -> Receipt:
    _state(ledger, contract_addr)
    tx = Transaction(
        sender=caller,
        to=contract_addr,
        value=0,
        calldata=encode_upload_cid(cid),
        nonce=ledger.get_nonce(caller),
    )
    return ledger.submit_tx(tx)


def payout(
    ledger: "Ledger",
    contract_addr: Address,
    caller: Address,
    entries: list[tuple[Address, int]],
) -> Receipt:
    _state(ledger, contract_addr)
    tx = Transaction(
        sender=caller,
        to=contract_addr,
        value=0,
        calldata=encode_payout(entries),
        nonce=ledger.get_nonce(caller),
    )
    return ledger.submit_tx(tx)


# ------------------------------ view calls --------------------------------- #

def get_cid(ledger: "Ledger", contract_addr: Address, index: int) -> Cid:
    """Zero-gas read of the CID at ``index``."""
    state = _state(ledger, contract_addr)
    if not 0 <= index < state.cid_count:
        raise InvalidCidIndex()
    return state.cids[index]


def get_cid_count(ledger: "Ledger", contract_addr: Address) -> int:
    return _state(ledger, contract_addr).cid_count


def get_all_cids(ledger: "Ledger", contract_addr: Address) -> list[Cid]:
    state = _state(ledger, contract_addr)
    return list(state.cids)


def get_submitters(ledger: "Ledger", contract_addr: Address) -> list[Address]:
    return list(_state(ledger, contract_addr).submitters)


def get_job_meta(ledger: "Ledger", contract_addr: Address) -> bytes:
    return _state(ledger, contract_addr).job_meta


def get_escrow(ledger: "Ledger", contract_addr: Address) -> int:
    return _state(ledger, contract_addr).escrow_balance
