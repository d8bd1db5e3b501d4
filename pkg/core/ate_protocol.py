"""
Announce-then-execute withdrawals.

A withdrawal receipt is first announced (signature verification only, no
funds move) and then approved or rejected by an Approver before anything is
released. The AuditingApprover runs the audit engine against source-chain
state, so unbacked, double-spending and over-sized withdrawals are stopped
even when the relayer's keys are compromised.

SimBridge is a desk-scale lock-and-mint bridge used for the correctness
experiment: one source chain where deposits lock tokens, one destination
chain where approved tickets mint the wrapped token.
"""

import hashlib
import hmac
import json
import logging
import random
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Dict, List, Optional, Sequence, Tuple, Union

from rich.console import Console
from rich.table import Table

from .audit_engine import (
    BridgeAuditEngine,
    Finding,
    FindingCategory,
    RedemptionLedger,
    RedemptionState,
)
from .config import AuditConfig, BridgeConfig, ChainConfig, FeePolicyConfig
from .exceptions import InvalidTransition
from .ingest import ChainEvent, DepositBody, EventKind, TransferBody, WithdrawalBody, index_transfers
from .models import ZERO_ADDRESS, Amount, ChainId, PairKey, TokenId, TxRef
from .pairing import build_index

logger = logging.getLogger(__name__)

BRIDGE_ID = "ate-bridge"
SOURCE = ChainId("src")
DESTINATION = ChainId("dst")
BRIDGE_ADDRESS = "0x" + "b1" * 20
SOURCE_TOKEN = TokenId(SOURCE, "0x" + "a0" * 20, "TKN")
WRAPPED_TOKEN = TokenId(DESTINATION, "0x" + "c0" * 20, "wTKN")
BLOCK_INTERVAL = 12


class TicketState(Enum):
    ANNOUNCED = "Announced"
    APPROVED = "Approved"
    REJECTED = "Rejected"
    EXECUTED = "Executed"


TRANSITIONS: Dict[TicketState, Tuple[TicketState, ...]] = {
    TicketState.ANNOUNCED: (TicketState.APPROVED, TicketState.REJECTED),
    TicketState.APPROVED: (TicketState.EXECUTED,),
    TicketState.REJECTED: (),
    TicketState.EXECUTED: (),
}


@dataclass(frozen=True)
class WithdrawalReceipt:
    """What a relayer hands the destination chain for one deposit"""
    deposit_id: Optional[int]
    amount: int
    recipient: str
    signature: str = ""

    def payload(self) -> bytes:
        return json.dumps(
            {"deposit_id": self.deposit_id, "amount": self.amount, "recipient": self.recipient},
            sort_keys=True,
        ).encode("utf-8")

    @property
    def malformed(self) -> Optional[str]:
        if self.deposit_id is None or self.deposit_id < 0:
            return "receipt has no deposit id"
        if self.amount < 0:
            return "negative amount"
        if not self.recipient:
            return "receipt has no recipient"
        return None


@dataclass
class WithdrawalTicket:
    """Lifecycle record of one announced withdrawal"""
    id: int
    receipt: WithdrawalReceipt
    state: TicketState = TicketState.ANNOUNCED
    decided_by: Optional[str] = None
    reason: Optional[Finding] = None
    note: str = ""
    steps: int = 0
    history: List[TicketState] = field(default_factory=lambda: [TicketState.ANNOUNCED])

    def transition(self, to: TicketState) -> None:
        if to not in TRANSITIONS[self.state]:
            raise InvalidTransition(self.id, self.state.value, to.value)
        self.state = to
        self.history.append(to)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ticket": self.id,
            "deposit_id": self.receipt.deposit_id,
            "amount": str(self.receipt.amount),
            "recipient": self.receipt.recipient,
            "state": self.state.value,
            "history": [state.value for state in self.history],
            "decided_by": self.decided_by,
            "reason": self.reason.category.value if self.reason else None,
            "note": self.note,
            "steps": self.steps,
        }


@dataclass
class Decision:
    approve: bool
    finding: Optional[Finding] = None

    @classmethod
    def approved(cls, finding: Optional[Finding] = None) -> "Decision":
        return cls(True, finding)

    @classmethod
    def rejected(cls, finding: Finding) -> "Decision":
        return cls(False, finding)


class SimBridge:
    """
    Lock-and-mint bridge with a two-step withdrawal.

    checks_enabled toggles the original relayer verification: the
    shared-secret signature tag on receipts and the `received[id]` replay
    guard. Turning it off models compromised relayer keys.
    """

    def __init__(self, checks_enabled: bool = True, secret: bytes = b"relayer-secret"):
        self.checks_enabled = checks_enabled
        self._secret = secret
        self.balances: Dict[Tuple[str, str, str], int] = {}
        self.source_events: List[ChainEvent] = []
        self.destination_events: List[ChainEvent] = []
        self.deposits: Dict[int, ChainEvent] = {}
        self.received: Dict[int, int] = {}
        self.tickets: List[WithdrawalTicket] = []
        self.locked = 0
        self.minted = 0
        self.clock = 0
        self.collateral_violations = 0
        self._next_deposit_id = 0
        self.logger = logging.getLogger(self.__class__.__name__)

    # -- chain plumbing -----------------------------------------------------

    def _tick(self) -> Tuple[int, int]:
        self.clock += 1
        return self.clock, self.clock * BLOCK_INTERVAL

    @staticmethod
    def _tx_hash(*parts: Any) -> str:
        return "0x" + hashlib.sha256("|".join(str(part) for part in parts).encode()).hexdigest()

    def _credit(self, chain: ChainId, address: str, token: TokenId, amount: int) -> None:
        key = (chain.name, address, token.key())
        self.balances[key] = self.balances.get(key, 0) + amount

    def balance(self, chain: ChainId, address: str, token: TokenId) -> int:
        return self.balances.get((chain.name, address, token.key()), 0)

    def check_collateral(self) -> bool:
        """Wrapped supply on the destination never exceeds what is locked on the source"""
        ok = self.minted <= self.locked
        if not ok:
            self.collateral_violations += 1
            self.logger.error(f"❌ Collateralization broken: minted {self.minted} > locked {self.locked}")
        return ok

    # -- source chain -------------------------------------------------------

    def deposit(self, depositor: str, amount: int, recipient: Optional[str] = None) -> ChainEvent:
        """Lock `amount` on the source chain and emit the deposit event"""
        block, block_time = self._tick()
        deposit_id = self._next_deposit_id
        self._next_deposit_id += 1
        tx_hash = self._tx_hash("deposit", deposit_id, depositor, amount)
        transfer = ChainEvent(
            TxRef(SOURCE, tx_hash, 0), block, block_time, BRIDGE_ID, EventKind.TRANSFER,
            TransferBody(SOURCE_TOKEN, depositor, BRIDGE_ADDRESS, Amount(amount)),
        )
        event = ChainEvent(
            TxRef(SOURCE, tx_hash, 1), block, block_time, BRIDGE_ID, EventKind.DEPOSIT,
            DepositBody(
                token=SOURCE_TOKEN, depositor=depositor, deposit_id=deposit_id,
                claimed_amount=Amount(amount), recipient=recipient or depositor, dest_chain=DESTINATION,
            ),
        )
        self.source_events.extend([transfer, event])
        self.deposits[deposit_id] = event
        self._credit(SOURCE, BRIDGE_ADDRESS, SOURCE_TOKEN, amount)
        self.locked += amount
        self.check_collateral()
        return event

    def sign(self, deposit_id: Optional[int], amount: int, recipient: str) -> WithdrawalReceipt:
        """The honest relayer's receipt"""
        unsigned = WithdrawalReceipt(deposit_id, amount, recipient)
        return WithdrawalReceipt(deposit_id, amount, recipient, self._tag(unsigned))

    def _tag(self, receipt: WithdrawalReceipt) -> str:
        return hmac.new(self._secret, receipt.payload(), hashlib.sha256).hexdigest()

    def verify(self, receipt: WithdrawalReceipt) -> bool:
        return hmac.compare_digest(receipt.signature, self._tag(receipt))

    # -- destination chain --------------------------------------------------

    def _mint(self, receipt: WithdrawalReceipt, label: str) -> ChainEvent:
        block, block_time = self._tick()
        tx_hash = self._tx_hash(label, receipt.deposit_id, receipt.recipient, receipt.amount, self.clock)
        event = withdrawal_event(receipt, tx_hash, block, block_time)
        self.destination_events.extend([event, mint_transfer(receipt, tx_hash, block, block_time)])
        self._credit(DESTINATION, receipt.recipient, WRAPPED_TOKEN, receipt.amount)
        self.minted += receipt.amount
        if receipt.deposit_id is not None:
            self.received.setdefault(receipt.deposit_id, receipt.amount)
        return event

    def withdraw_direct(self, receipt: WithdrawalReceipt) -> bool:
        """Unmodified one-step withdrawal; returns whether funds were released"""
        if receipt.malformed:
            return False
        if self.checks_enabled:
            if not self.verify(receipt):
                return False
            if receipt.deposit_id in self.received:
                return False
        self._mint(receipt, "direct")
        self.check_collateral()
        return True

    def announce_withdraw(self, receipt: WithdrawalReceipt) -> WithdrawalTicket:
        """First step: verify the receipt and record the ticket; no funds move"""
        ticket = WithdrawalTicket(len(self.tickets) + 1, receipt)
        self.tickets.append(ticket)
        ticket.steps += 1

        problem = receipt.malformed
        if problem is not None:
            ticket.reason = Finding(
                FindingCategory.UNDECODABLE, TxRef(DESTINATION, f"ticket-{ticket.id}", 0),
                Amount(max(receipt.amount, 0)), note=problem, bridge=BRIDGE_ID,
            )
            ticket.note = problem
            ticket.transition(TicketState.REJECTED)
        elif self.checks_enabled:
            ticket.steps += 1
            if not self.verify(receipt):
                ticket.note = "signature check failed"
                ticket.transition(TicketState.REJECTED)
        self.check_collateral()
        return ticket

    def approve_withdraw(self, ticket: WithdrawalTicket, approver: "Approver") -> WithdrawalTicket:
        """Second step: the approver decides; only an approved ticket releases funds"""
        if ticket.state != TicketState.ANNOUNCED:
            raise InvalidTransition(ticket.id, ticket.state.value, TicketState.APPROVED.value)
        ticket.steps += 1
        decision = approver.decide(ticket, self)
        ticket.decided_by = approver.approver_id

        if not decision.approve:
            ticket.reason = decision.finding
            ticket.transition(TicketState.REJECTED)
        elif self.checks_enabled and ticket.receipt.deposit_id in self.received:
            ticket.note = "deposit already withdrawn"
            ticket.transition(TicketState.REJECTED)
        else:
            ticket.transition(TicketState.APPROVED)
            ticket.reason = decision.finding
            ticket.steps += 1
            self._mint(ticket.receipt, f"ticket-{ticket.id}")
            ticket.transition(TicketState.EXECUTED)
        self.check_collateral()
        return ticket


def withdrawal_event(receipt: WithdrawalReceipt, tx_hash: str, block: int, block_time: int) -> ChainEvent:
    pair = PairKey.by_id(BRIDGE_ID, receipt.deposit_id) if receipt.deposit_id is not None else None
    return ChainEvent(
        TxRef(DESTINATION, tx_hash, 1), block, block_time, BRIDGE_ID, EventKind.WITHDRAWAL,
        WithdrawalBody(WRAPPED_TOKEN, receipt.recipient, pair, Amount(receipt.amount), SOURCE),
    )


def mint_transfer(receipt: WithdrawalReceipt, tx_hash: str, block: int, block_time: int) -> ChainEvent:
    return ChainEvent(
        TxRef(DESTINATION, tx_hash, 0), block, block_time, BRIDGE_ID, EventKind.TRANSFER,
        TransferBody(WRAPPED_TOKEN, ZERO_ADDRESS, receipt.recipient, Amount(receipt.amount)),
    )


def ate_audit_config() -> AuditConfig:
    """Audit configuration matching SimBridge's chains and tokens"""
    return AuditConfig(
        chains=[ChainConfig(name=SOURCE.name), ChainConfig(name=DESTINATION.name)],
        bridges=[
            BridgeConfig(
                bridge_id=BRIDGE_ID,
                pairing_strategies=["id"],
                addresses=[BRIDGE_ADDRESS],
                default_fee=FeePolicyConfig(kind="indeterminate"),
                token_equivalence=[(SOURCE_TOKEN.key(), WRAPPED_TOKEN.key())],
                tokens=[SOURCE_TOKEN.key(), WRAPPED_TOKEN.key()],
            )
        ],
    )


class Approver(ABC):
    """Decides announced tickets before execution"""
    approver_id = "approver"

    @abstractmethod
    def decide(self, ticket: WithdrawalTicket, bridge: SimBridge) -> Decision:
        ...


class NaiveApprover(Approver):
    """Approves everything"""
    approver_id = "naive"

    def decide(self, ticket: WithdrawalTicket, bridge: SimBridge) -> Decision:
        return Decision.approved()


class _TentativeLedger:
    """Holds a redemption until the approval is final"""

    def __init__(self, base: RedemptionState):
        self.base = base
        self.marked: Optional[Tuple[TxRef, TxRef]] = None

    def redeemer(self, deposit: TxRef) -> Optional[TxRef]:
        return self.base.redeemer(deposit)

    def mark_redeemed(self, deposit: TxRef, withdrawal: TxRef) -> Optional[TxRef]:
        prior = self.base.redeemer(deposit)
        if prior is None:
            self.marked = (deposit, withdrawal)
        return prior


class AuditingApprover(Approver):
    """Rejects exactly the tickets the audit engine classifies as violations"""
    approver_id = "auditor"

    def __init__(self, config: Optional[AuditConfig] = None):
        self.engine = BridgeAuditEngine(config or ate_audit_config())
        self.ledger = RedemptionLedger()
        self.logger = logging.getLogger(self.__class__.__name__)

    def decide(self, ticket: WithdrawalTicket, bridge: SimBridge) -> Decision:
        receipt = ticket.receipt
        tx_hash = SimBridge._tx_hash("announced", ticket.id)
        block, block_time = bridge.clock + 1, (bridge.clock + 1) * BLOCK_INTERVAL
        w = withdrawal_event(receipt, tx_hash, block, block_time)

        source = [event for event in bridge.source_events if event.kind == EventKind.DEPOSIT]
        cfg = self.engine.bridge_config(BRIDGE_ID)
        index = build_index(source, None, cfg.pairing_strategies)
        transfers = index_transfers(bridge.source_events + [mint_transfer(receipt, tx_hash, block, block_time)])

        tentative = _TentativeLedger(self.ledger)
        finding = self.engine.audit_event(
            w, index, tentative, self.engine.resolve(w, transfers),
            lambda deposit: self.engine.resolve(deposit, transfers),
        )
        if finding.category.is_violation:
            self.logger.info(f"Ticket {ticket.id} rejected: {finding.category.value}")
            return Decision.rejected(finding)
        if tentative.marked is not None:
            self.ledger.mark_redeemed(*tentative.marked)
        return Decision.approved(finding)


# ---------------------------------------------------------------------------
# Correctness experiment
# ---------------------------------------------------------------------------

MALICIOUS_KINDS = ("over-withdraw", "unbacked", "double-spend")

EXPECTED_REJECTIONS = {
    "over-withdraw": FindingCategory.AMOUNT_EXCEEDS_INFLOW,
    "unbacked": FindingCategory.UNBACKED_WITHDRAWAL,
    "double-spend": FindingCategory.DOUBLE_SPEND,
}


@dataclass
class TicketOutcome:
    ticket: int
    kind: str
    state: str
    category: Optional[str]

    def to_dict(self) -> Dict[str, Any]:
        return {"ticket": self.ticket, "kind": self.kind, "state": self.state, "category": self.category}


@dataclass
class ExperimentReport:
    seed: int
    executed: int = 0
    rejected: int = 0
    per_category: Dict[str, int] = field(default_factory=dict)
    outcomes: List[TicketOutcome] = field(default_factory=list)
    malicious_positions: List[int] = field(default_factory=list)
    collateralized: bool = True
    steps: int = 0

    def outcome_multiset(self) -> List[Tuple[str, str, Optional[str]]]:
        """Outcomes with positions stripped; equal across seeds when results are position independent"""
        return sorted(
            ((outcome.kind, outcome.state, outcome.category) for outcome in self.outcomes),
            key=lambda item: (item[0], item[1], item[2] or ""),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "executed": self.executed,
            "rejected": self.rejected,
            "per_category": dict(sorted(self.per_category.items())),
            "malicious_positions": self.malicious_positions,
            "collateralized": self.collateralized,
            "steps": self.steps,
            "outcomes": [outcome.to_dict() for outcome in self.outcomes],
        }


def _plan(rng: random.Random, n_total: int, malicious: Sequence[str]) -> List[str]:
    """Kind of every slot; a double spend always follows at least one benign slot"""
    plan = ["benign"] * n_total
    kinds = list(malicious)
    rng.shuffle(kinds)
    for position, kind in zip(sorted(rng.sample(range(n_total), len(kinds))), kinds):
        plan[position] = kind
    if "double-spend" in plan and "benign" in plan:
        slot = plan.index("double-spend")
        first_benign = plan.index("benign")
        if first_benign > slot:
            plan[slot], plan[first_benign] = plan[first_benign], plan[slot]
    return plan


def run_correctness_experiment(
    seed: int,
    n_total: int = 100,
    malicious: Sequence[str] = MALICIOUS_KINDS,
    benign_only: bool = False,
    approver: Optional[Approver] = None,
    checks_enabled: bool = False,
) -> Tuple[ExperimentReport, SimBridge]:
    """
    Run n_total deposit/withdrawal pairs through announce-then-execute.

    Malicious tickets sit at seed-derived positions and carry forged
    signatures; relayer checks are off by default so they reach the
    approver.
    """
    unknown = [kind for kind in malicious if kind not in EXPECTED_REJECTIONS]
    if unknown:
        raise ValueError(f"unknown malicious kinds: {unknown}")
    if not benign_only and len(malicious) > n_total:
        raise ValueError("more malicious tickets than slots")
    if not benign_only and "double-spend" in malicious and len(malicious) >= n_total:
        raise ValueError("a double spend needs at least one benign withdrawal to replay")

    rng = random.Random(seed)
    plan = _plan(rng, n_total, () if benign_only else malicious)
    bridge = SimBridge(checks_enabled=checks_enabled)
    approver = approver or AuditingApprover()
    report = ExperimentReport(seed=seed, malicious_positions=[i for i, kind in enumerate(plan) if kind != "benign"])
    redeemed: List[Tuple[int, int]] = []
    forged = "00" * 32

    for slot, kind in enumerate(plan):
        user = "0x" + hashlib.sha256(f"{seed}:user:{slot}".encode()).hexdigest()[:40]
        amount = rng.randint(1, 10**9)
        if kind == "benign":
            deposit = bridge.deposit(user, amount)
            receipt = bridge.sign(deposit.deposit.deposit_id, amount, user)
        elif kind == "over-withdraw":
            deposit = bridge.deposit(user, amount)
            receipt = WithdrawalReceipt(deposit.deposit.deposit_id, amount + rng.randint(1, 10**6), user, forged)
        elif kind == "unbacked":
            receipt = WithdrawalReceipt(10**12 + slot, amount, user, forged)
        else:
            victim_id, victim_amount = rng.choice(redeemed) if redeemed else (0, amount)
            receipt = WithdrawalReceipt(victim_id, victim_amount, user, forged)

        ticket = bridge.announce_withdraw(receipt)
        if ticket.state == TicketState.ANNOUNCED:
            bridge.approve_withdraw(ticket, approver)
        if kind == "benign" and ticket.state == TicketState.EXECUTED and receipt.deposit_id is not None:
            redeemed.append((receipt.deposit_id, receipt.amount))

        category = ticket.reason.category.value if ticket.reason and ticket.state == TicketState.REJECTED else None
        report.outcomes.append(TicketOutcome(ticket.id, kind, ticket.state.value, category))
        report.steps += ticket.steps

    report.executed = sum(1 for outcome in report.outcomes if outcome.state == TicketState.EXECUTED.value)
    report.rejected = sum(1 for outcome in report.outcomes if outcome.state == TicketState.REJECTED.value)
    report.per_category = dict(Counter(outcome.category for outcome in report.outcomes if outcome.category))
    report.collateralized = bridge.collateral_violations == 0
    logger.info(
        f"Experiment seed {seed}: {report.executed} executed, {report.rejected} rejected, "
        f"collateralized={report.collateralized}"
    )
    return report, bridge


def write_transcript(tickets: Sequence[WithdrawalTicket], target: Union[str, Path, IO[str]]) -> int:
    """Tickets as newline-delimited JSON"""
    lines = [json.dumps(ticket.to_dict(), sort_keys=True) for ticket in tickets]
    if isinstance(target, (str, Path)):
        with open(target, "w", encoding="utf-8") as handle:
            handle.write("".join(line + "\n" for line in lines))
    else:
        target.write("".join(line + "\n" for line in lines))
    return len(lines)


def render_experiment_table(reports: Sequence[ExperimentReport], console: Optional[Console] = None) -> Table:
    """One row per seed: executed, rejected and the rejection categories"""
    table = Table(title="Announce-then-execute correctness")
    table.add_column("Seed", justify="right")
    table.add_column("Executed", justify="right", style="green")
    table.add_column("Rejected", justify="right", style="red")
    table.add_column("Rejection categories")
    table.add_column("Malicious at")
    table.add_column("Collateralized")
    for report in reports:
        table.add_row(
            str(report.seed),
            str(report.executed),
            str(report.rejected),
            ", ".join(f"{name}={count}" for name, count in sorted(report.per_category.items())) or "-",
            ", ".join(str(position) for position in report.malicious_positions) or "-",
            "✅" if report.collateralized else "❌",
        )
    (console or Console()).print(table)
    return table
