"""Deterministic single-node account ledger with nonces and gas metering.

The ledger stands in for a public test network: accounts hold wei, every
state mutation is a Transaction that burns gas priced by a GasSchedule,
and execution is strictly serialized so identical genesis plus an
identical transaction sequence replays to a bitwise-identical state.

Fees are credited to a reserved fee-sink account (``FEE_SINK``) instead of
being destroyed, which keeps total supply checkable:

    sum(balances including fee sink) == total_supply   (always)

Contract creation registers a CID-registry instance (see
:mod:`fedmarket.contract`); calls to registered contracts are dispatched
there. Read-only contract views bypass :meth:`Ledger.submit_tx` entirely
and cost nothing.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from .hashing import digest

WEI_PER_ETH = 10**18


# --------------------------------------------------------------------------- #
# Errors
# --------------------------------------------------------------------------- #

class LedgerError(Exception):
    """Base class for ledger rejections."""


class DuplicateAddress(LedgerError):
    pass


class BadNonce(LedgerError):
    pass


class InsufficientFunds(LedgerError):
    pass


class NotFound(LedgerError):
    pass


class MalformedTransaction(LedgerError):
    pass


# --------------------------------------------------------------------------- #
# Core types
# --------------------------------------------------------------------------- #

@dataclass(frozen=True, order=True)
class Address:
    """20-byte account identifier, rendered as 0x-prefixed lowercase hex."""

    bytes: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.bytes, bytes) or len(self.bytes) != 20:
            raise ValueError("address must be exactly 20 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        body = text[2:] if text.lower().startswith("0x") else text
        raw = bytes.fromhex(body)
        if len(raw) != 20:
            raise ValueError(f"address hex must decode to 20 bytes, got {len(raw)}")
        return cls(raw)

    def hex(self) -> str:
        return "0x" + self.bytes.hex()

    def __str__(self) -> str:
        return self.hex()


FEE_SINK = Address(b"\x00" * 20)


@dataclass
class Account:
    address: Address
    balance: int = 0
    nonce: int = 0

    def __post_init__(self) -> None:
        if self.balance < 0:
            raise ValueError("balance must be non-negative")
        if self.nonce < 0:
            raise ValueError("nonce must be non-negative")


@dataclass(frozen=True)
class GasSchedule:
    """Cost table for transaction execution, in gas units.

    Defaults mirror public-chain conventions. ``gas_price`` converts gas
    to wei; with the default 2 gwei a registry deployment lands near the
    0.002 ETH mark.
    """

    tx_base: int = 21_000
    calldata_nonzero_byte: int = 16
    calldata_zero_byte: int = 4
    storage_write_new: int = 20_000
    storage_write_update: int = 5_000
    create_base: int = 32_000
    code_deposit_per_byte: int = 200
    gas_price: int = 2 * 10**9

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value <= 0:
                raise ValueError(f"gas schedule field {name} must be > 0")
        if self.storage_write_new < self.storage_write_update:
            raise ValueError("storage_write_new must be >= storage_write_update")

    def calldata_cost(self, data: bytes) -> int:
        zeros = data.count(0)
        return zeros * self.calldata_zero_byte + (len(data) - zeros) * self.calldata_nonzero_byte

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "GasSchedule":
        return cls(**{k: int(v) for k, v in data.items()})


@dataclass(frozen=True)
class Transaction:
    """Ledger mutation request. ``to=None`` requests contract creation.

    For creation transactions the calldata layout is::

        u32 code length (big endian) | code bytes | constructor args

    Only the code bytes are charged (per ``code_deposit_per_byte``); the
    constructor args become the contract's job metadata.
    """

    sender: Address
    to: Address | None
    value: int
    calldata: bytes = b""
    nonce: int = 0

    def hash(self) -> bytes:
        to_part = b"\x01" + self.to.bytes if self.to is not None else b"\x00"
        body = (
            b"fmtx1"
            + self.sender.bytes
            + to_part
            + self.value.to_bytes(32, "big")
            + self.nonce.to_bytes(8, "big")
            + len(self.calldata).to_bytes(4, "big")
            + self.calldata
        )
        return digest(body)


@dataclass(frozen=True)
class Receipt:
    tx_hash: bytes
    ok: bool
    revert_reason: str | None
    gas_used: int
    fee: int
    logs: tuple[tuple[str, bytes], ...] = ()
    contract_address: Address | None = None

    @property
    def status(self) -> str:
        return "Success" if self.ok else f"Reverted({self.revert_reason})"

    def to_dict(self) -> dict:
        return {
            "tx_hash": self.tx_hash.hex(),
            "ok": self.ok,
            "revert_reason": self.revert_reason,
            "gas_used": self.gas_used,
            "fee": self.fee,
            "logs": [[name, payload.hex()] for name, payload in self.logs],
            "contract_address": self.contract_address.hex() if self.contract_address else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Receipt":
        return cls(
            tx_hash=bytes.fromhex(data["tx_hash"]),
            ok=bool(data["ok"]),
            revert_reason=data["revert_reason"],
            gas_used=int(data["gas_used"]),
            fee=int(data["fee"]),
            logs=tuple((name, bytes.fromhex(payload)) for name, payload in data["logs"]),
            contract_address=(
                Address.from_hex(data["contract_address"]) if data["contract_address"] else None
            ),
        )


def split_creation_calldata(calldata: bytes) -> tuple[bytes, bytes]:
    """Split creation calldata into (code, constructor args)."""
    if len(calldata) < 4:
        raise MalformedTransaction("creation calldata lacks code-length prefix")
    code_len = int.from_bytes(calldata[:4], "big")
    if 4 + code_len > len(calldata):
        raise MalformedTransaction("creation code length exceeds calldata")
    return calldata[4 : 4 + code_len], calldata[4 + code_len :]


def make_creation_calldata(code: bytes, args: bytes = b"") -> bytes:
    return len(code).to_bytes(4, "big") + code + args


# --------------------------------------------------------------------------- #
# Ledger
# --------------------------------------------------------------------------- #

class Ledger:
    """Account state, receipt history and registered contract instances.

    All mutations run under a single writer lock, in submission order.
    Rejected transactions (BadNonce, InsufficientFunds) raise and leave
    the state untouched; contract-level failures produce Reverted
    receipts that charge intrinsic gas and bump the sender nonce but
    change nothing else.
    """

    def __init__(self, schedule: GasSchedule | None = None):
        self.schedule = schedule or GasSchedule()
        self.accounts: dict[Address, Account] = {}
        self.contracts: dict[Address, object] = {}
        self.receipts: list[Receipt] = []
        self._receipt_index: dict[bytes, Receipt] = {}
        self.total_supply = 0
        self.height = 0
        self._lock = threading.RLock()

    # ------------------------------ genesis -------------------------------- #

    @classmethod
    def genesis(
        cls,
        accounts: list[tuple[Address, int]],
        schedule: GasSchedule | None = None,
    ) -> "Ledger":
        ledger = cls(schedule)
        seen: set[Address] = set()
        for addr, balance in accounts:
            if addr in seen:
                raise DuplicateAddress(f"duplicate genesis address {addr}")
            seen.add(addr)
            ledger.accounts[addr] = Account(addr, balance=balance)
            ledger.total_supply += balance
        return ledger

    # ------------------------------- reads --------------------------------- #

    def get_balance(self, addr: Address) -> int:
        acct = self.accounts.get(addr)
        return acct.balance if acct else 0

    def get_nonce(self, addr: Address) -> int:
        acct = self.accounts.get(addr)
        return acct.nonce if acct else 0

    def get_receipt(self, tx_hash: bytes) -> Receipt:
        receipt = self._receipt_index.get(tx_hash)
        if receipt is None:
            raise NotFound(f"no receipt for hash {tx_hash.hex()}")
        return receipt

    def balances_total(self) -> int:
        return sum(acct.balance for acct in self.accounts.values())

    # ------------------------------ execution ------------------------------ #

    def _account(self, addr: Address) -> Account:
        acct = self.accounts.get(addr)
        if acct is None:
            acct = Account(addr)
            self.accounts[addr] = acct
        return acct

    def contract_address_for(self, sender: Address, nonce: int) -> Address:
        return Address(digest(sender.bytes + nonce.to_bytes(8, "big"))[:20])

    def estimate_gas(self, tx: Transaction) -> int:
        """Gas the transaction will use if it succeeds. Exact, not a bound."""
        from . import contract as contract_mod  # late import: contract depends on ledger types

        sched = self.schedule
        if tx.to is None:
            code, _args = split_creation_calldata(tx.calldata)
            return sched.tx_base + sched.create_base + len(code) * sched.code_deposit_per_byte
        if tx.to in self.contracts:
            sel, args = tx.calldata[:4], tx.calldata[4:]
            intrinsic = sched.tx_base + sched.calldata_cost(args)
            return intrinsic + contract_mod.dispatch_gas(sched, sel, args)
        return sched.tx_base + sched.calldata_cost(tx.calldata)

    def submit_tx(self, tx: Transaction) -> Receipt:
        from . import contract as contract_mod

        with self._lock:
            sched = self.schedule
            sender = self._account(tx.sender)
            if tx.nonce != sender.nonce:
                raise BadNonce(f"expected nonce {sender.nonce}, got {tx.nonce}")
            if tx.value < 0:
                raise MalformedTransaction("negative value")

            gas_success = self.estimate_gas(tx)
            fee_success = gas_success * sched.gas_price
            if sender.balance < tx.value + fee_success:
                raise InsufficientFunds(
                    f"balance {sender.balance} < value {tx.value} + fee {fee_success}"
                )

            logs: tuple[tuple[str, bytes], ...] = ()
            created: Address | None = None
            revert_reason: str | None = None

            if tx.to is None:
                _code, args = split_creation_calldata(tx.calldata)
                created = self.contract_address_for(tx.sender, tx.nonce)
                if created in self.contracts:
                    raise MalformedTransaction(f"contract address collision at {created}")
                self.contracts[created] = contract_mod.CidStorageState(
                    buyer=tx.sender, budget=tx.value, escrow_balance=tx.value, job_meta=args
                )
                sender.balance -= tx.value
                self._account(created).balance += tx.value
                gas_used = gas_success
            elif tx.to in self.contracts:
                sel, args = tx.calldata[:4], tx.calldata[4:]
                state = self.contracts[tx.to]
                try:
                    logs = contract_mod.execute_call(self, state, tx.to, tx.sender, sel, args)
                    sender.balance -= tx.value
                    self._account(tx.to).balance += tx.value
                    gas_used = gas_success
                except contract_mod.ContractRevert as exc:
                    revert_reason = exc.reason
                    gas_used = sched.tx_base + sched.calldata_cost(args)
            else:
                sender.balance -= tx.value
                self._account(tx.to).balance += tx.value
                gas_used = gas_success

            fee = gas_used * sched.gas_price
            sender.balance -= fee
            sender.nonce += 1
            self._account(FEE_SINK).balance += fee

            receipt = Receipt(
                tx_hash=tx.hash(),
                ok=revert_reason is None,
                revert_reason=revert_reason,
                gas_used=gas_used,
                fee=fee,
                logs=logs,
                contract_address=created,
            )
            self.receipts.append(receipt)
            self._receipt_index[receipt.tx_hash] = receipt
            self.height += 1
            return receipt

    # ---------------------------- export / import -------------------------- #

    def export_state(self) -> dict:
        """Canonical JSON-ready snapshot: accounts sorted, receipts in order."""
        contracts = []
        for addr in sorted(self.contracts, key=lambda a: a.bytes):
            state = self.contracts[addr]
            contracts.append({"address": addr.hex(), **state.to_dict()})
        return {
            "schedule": self.schedule.to_dict(),
            "total_supply": self.total_supply,
            "height": self.height,
            "fee_sink": FEE_SINK.hex(),
            "accounts": [
                {
                    "address": acct.address.hex(),
                    "balance": acct.balance,
                    "nonce": acct.nonce,
                }
                for acct in sorted(self.accounts.values(), key=lambda a: a.address.bytes)
            ],
            "receipts": [r.to_dict() for r in self.receipts],
            "contracts": contracts,
        }

    def export_json(self) -> str:
        return json.dumps(self.export_state(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def import_state(cls, data: dict) -> "Ledger":
        from . import contract as contract_mod

        ledger = cls(GasSchedule.from_dict(data["schedule"]))
        ledger.total_supply = int(data["total_supply"])
        ledger.height = int(data["height"])
        for entry in data["accounts"]:
            addr = Address.from_hex(entry["address"])
            ledger.accounts[addr] = Account(addr, int(entry["balance"]), int(entry["nonce"]))
        for entry in data["contracts"]:
            addr = Address.from_hex(entry["address"])
            ledger.contracts[addr] = contract_mod.CidStorageState.from_dict(entry)
        for entry in data["receipts"]:
            receipt = Receipt.from_dict(entry)
            ledger.receipts.append(receipt)
            ledger._receipt_index[receipt.tx_hash] = receipt
        return ledger

    @classmethod
    def import_json(cls, text: str) -> "Ledger":
        return cls.import_state(json.loads(text))


def eth(wei: int, decimals: int = 8) -> str:
    """Render wei as a fixed-point ETH string (Table-style, 8 decimals)."""
    quant = 10 ** (18 - decimals)
    whole, frac = divmod(wei // quant, 10**decimals)
    return f"{whole}.{frac:0{decimals}d}"
