"""
Bridge Audit Engine

Applies the balance invariant (outflow <= inflow - costs) to every
withdrawal, keeps the redemption ledger that exposes double spends, and
classifies each withdrawal into exactly one Finding. Also computes the
aggregate inflow - outflow series per bridge and token class.
"""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

from rich.console import Console
from rich.table import Table

from .config import AuditConfig, BridgeConfig
from .exceptions import AmountUnresolvable, DuplicateDepositKey, UndecodableEvent
from .ingest import ChainEvent, EventKind, ResolvedAmount, index_transfers, resolve_amount
from .models import (
    PPM_DENOMINATOR,
    Amount,
    EventOrder,
    FeePolicy,
    FeePolicyKind,
    TokenEquivalence,
    TokenFlag,
    TxRef,
    Underflow,
    amount_sub_checked,
)
from .pairing import DepositLookup, ExternalMap, PairOutcome, PairOutcomeKind, build_index, pair_withdrawal

logger = logging.getLogger(__name__)

# A resolved amount, or the reason it could not be resolved
Resolution = Union[ResolvedAmount, AmountUnresolvable]


class FindingCategory(Enum):
    """Mechanical verdicts, most severe first"""
    UNDECODABLE = "Undecodable"
    UNPAIRABLE = "Unpairable"
    UNBACKED_WITHDRAWAL = "UnbackedWithdrawal"
    DOUBLE_SPEND = "DoubleSpend"
    DESTINATION_MISMATCH = "DestinationMismatch"
    TOKEN_MISMATCH = "TokenMismatch"
    AMOUNT_EXCEEDS_INFLOW = "AmountExceedsInflow"
    ZERO_WITHDRAWAL = "ZeroWithdrawal"
    AMOUNT_BELOW_EXPECTED = "AmountBelowExpected"
    MISSING_RECIPIENT = "MissingRecipient"
    TEST_TOKEN = "TestToken"
    BALANCED = "Balanced"

    @property
    def is_label(self) -> bool:
        """Report label only; never an attack signal"""
        return self == FindingCategory.TEST_TOKEN

    @property
    def is_violation(self) -> bool:
        return self != FindingCategory.BALANCED and not self.is_label


@dataclass(frozen=True)
class Finding:
    """One audit verdict for one withdrawal"""
    category: FindingCategory
    withdrawal: TxRef
    outflow: Amount
    deposit: Optional[TxRef] = None
    inflow: Optional[Amount] = None
    max_allowed: Optional[Amount] = None
    note: str = ""
    bridge: str = ""
    token: Optional[str] = None
    recipient: Optional[str] = None
    block_time: int = 0

    @property
    def finding_id(self) -> str:
        return self.withdrawal.key()

    @property
    def alert_key(self) -> str:
        return f"{self.withdrawal.key()}|{self.category.value}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "category": self.category.value,
            "bridge": self.bridge,
            "withdrawal": self.withdrawal.to_dict(),
            "deposit": self.deposit.to_dict() if self.deposit else None,
            "inflow": str(self.inflow) if self.inflow is not None else None,
            "outflow": str(self.outflow),
            "max_allowed": str(self.max_allowed) if self.max_allowed is not None else None,
            "token": self.token,
            "recipient": self.recipient,
            "block_time": self.block_time,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Finding":
        """Inverse of to_dict; unknown categories raise ValueError"""
        def amount(key: str) -> Optional[Amount]:
            value = data.get(key)
            return Amount.parse(value) if value is not None else None

        return cls(
            category=FindingCategory(data["category"]),
            withdrawal=TxRef.from_dict(data["withdrawal"]),
            outflow=amount("outflow") or Amount(0),
            deposit=TxRef.from_dict(data["deposit"]) if data.get("deposit") else None,
            inflow=amount("inflow"),
            max_allowed=amount("max_allowed"),
            note=data.get("note", ""),
            bridge=data.get("bridge", ""),
            token=data.get("token"),
            recipient=data.get("recipient"),
            block_time=int(data.get("block_time", 0)),
        )


class RedemptionState(Protocol):
    """Deposit -> first redeeming withdrawal, insert-once"""

    def redeemer(self, deposit: TxRef) -> Optional[TxRef]: ...

    def mark_redeemed(self, deposit: TxRef, withdrawal: TxRef) -> Optional[TxRef]: ...


class RedemptionLedger:
    """In-memory redemption ledger used by batch audits and the approver"""

    def __init__(self):
        self._redeemed: Dict[TxRef, TxRef] = {}

    def redeemer(self, deposit: TxRef) -> Optional[TxRef]:
        return self._redeemed.get(deposit)

    def mark_redeemed(self, deposit: TxRef, withdrawal: TxRef) -> Optional[TxRef]:
        """Record the first redeemer; returns the prior one unchanged if present"""
        prior = self._redeemed.get(deposit)
        if prior is None:
            self._redeemed[deposit] = withdrawal
        return prior

    def items(self) -> List[Tuple[TxRef, TxRef]]:
        return sorted(self._redeemed.items(), key=lambda item: item[0].key())

    def digest(self) -> str:
        return ledger_digest(self.items())

    def __len__(self) -> int:
        return len(self._redeemed)

    def __contains__(self, deposit: TxRef) -> bool:
        return deposit in self._redeemed


def ledger_digest(entries: Iterable[Tuple[TxRef, TxRef]]) -> str:
    """sha256 over sorted `deposit=withdrawal` lines"""
    lines = sorted(f"{deposit.key()}={withdrawal.key()}" for deposit, withdrawal in entries)
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BridgeTransaction:
    """A withdrawal with whatever deposit and amounts could be established"""
    withdrawal: ChainEvent
    pair: PairOutcome
    outflow: Optional[ResolvedAmount] = None
    deposit: Optional[ChainEvent] = None
    inflow: Optional[ResolvedAmount] = None
    unresolved_reason: Optional[str] = None


def make_transaction(w: ChainEvent, pair: PairOutcome, outflow: Resolution,
                     inflow_of: Callable[[ChainEvent], Resolution]) -> BridgeTransaction:
    reasons: List[str] = []
    if isinstance(outflow, AmountUnresolvable):
        reasons.append(f"outflow: {outflow.reason}")
        outflow_amount = None
    else:
        outflow_amount = outflow

    inflow_amount = None
    if pair.matched and pair.deposit is not None:
        inflow = inflow_of(pair.deposit)
        if isinstance(inflow, AmountUnresolvable):
            reasons.append(f"inflow: {inflow.reason}")
        else:
            inflow_amount = inflow

    return BridgeTransaction(
        withdrawal=w,
        pair=pair,
        outflow=outflow_amount,
        deposit=pair.deposit,
        inflow=inflow_amount,
        unresolved_reason="; ".join(reasons) or None,
    )


def compute_max_outflow(inflow: Amount, policy: FeePolicy, explicit_fee: Optional[Amount] = None) -> Amount:
    """
    Largest withdrawal a deposit of `inflow` backs under `policy`.

    A fee larger than the inflow caps the allowance at zero. A missing
    explicit fee counts as zero.
    """
    if policy.kind == FeePolicyKind.INDETERMINATE:
        return inflow
    if policy.kind == FeePolicyKind.PROPORTIONAL:
        ppm = policy.ppm or 0
        return Amount(inflow.value - inflow.value * ppm // PPM_DENOMINATOR)

    fee = policy.amount if policy.kind == FeePolicyKind.FIXED else explicit_fee
    result = amount_sub_checked(inflow, fee or Amount(0))
    if isinstance(result, Underflow):
        logger.debug(f"Fee exceeds inflow by {result.shortfall}, allowance clamped to 0")
        return Amount(0)
    return result


def _base_finding(bt: BridgeTransaction, category: FindingCategory, **extra: Any) -> Finding:
    w = bt.withdrawal
    body = w.withdrawal
    return Finding(
        category=category,
        withdrawal=w.ref,
        outflow=bt.outflow.amount if bt.outflow else (body.claimed_amount or Amount(0)),
        bridge=w.bridge_id,
        token=body.token.key(),
        recipient=body.recipient,
        block_time=w.block_time,
        **extra,
    )


def audit_withdrawal(
    bt: BridgeTransaction,
    ledger: RedemptionState,
    equiv: TokenEquivalence,
    cfg: BridgeConfig,
    disabled: FrozenSet[FindingCategory] = frozenset(),
) -> Finding:
    """
    Classify one withdrawal. Callers present withdrawals in EventOrder.

    Checks run in fixed priority and the first that holds names the
    category; later matched-path conditions are listed in the note. Balanced
    and every verdict past the double-spend check consume the deposit.
    `disabled` switches off matched-path checks (test hook).
    """
    w = bt.withdrawal
    pair = bt.pair

    if pair.kind == PairOutcomeKind.DEPOSIT_UNDECODABLE and pair.broken_deposit is not None:
        broken = pair.broken_deposit
        return _base_finding(
            bt, FindingCategory.UNDECODABLE, deposit=broken.ref,
            note=f"backing deposit {broken.ref} undecodable: {broken.reason}",
        )
    if bt.outflow is None or (pair.matched and bt.inflow is None):
        return _base_finding(
            bt, FindingCategory.UNDECODABLE,
            deposit=bt.deposit.ref if bt.deposit else None,
            note=bt.unresolved_reason or "amount unresolvable",
        )
    if pair.kind == PairOutcomeKind.UNPAIRABLE:
        note = f"pairing strategy disabled for {pair.handle}" if pair.handle else "no pairing handle"
        return _base_finding(bt, FindingCategory.UNPAIRABLE, note=note)
    if pair.kind == PairOutcomeKind.NO_DEPOSIT:
        return _base_finding(bt, FindingCategory.UNBACKED_WITHDRAWAL, note=f"no deposit for {pair.handle}")

    deposit = bt.deposit
    assert deposit is not None and bt.inflow is not None
    dep_body = deposit.deposit
    inflow = bt.inflow.amount
    outflow = bt.outflow.amount
    max_allowed = compute_max_outflow(
        inflow, cfg.fee_policy_for(dep_body.token, w.withdrawal.token), dep_body.explicit_fee
    )
    evidence = dict(deposit=deposit.ref, inflow=inflow, max_allowed=max_allowed)

    if FindingCategory.DOUBLE_SPEND not in disabled:
        prior = ledger.redeemer(deposit.ref)
        if prior is not None and prior != w.ref:
            return _base_finding(
                bt, FindingCategory.DOUBLE_SPEND, note=f"deposit already redeemed by {prior}", **evidence
            )

    conditions: List[FindingCategory] = []
    if dep_body.dest_chain is not None and dep_body.dest_chain != w.chain:
        conditions.append(FindingCategory.DESTINATION_MISMATCH)
    if not equiv.equivalent(dep_body.token, w.withdrawal.token):
        conditions.append(FindingCategory.TOKEN_MISMATCH)
    if outflow > max_allowed:
        conditions.append(FindingCategory.AMOUNT_EXCEEDS_INFLOW)
    if outflow.is_zero and not inflow.is_zero:
        conditions.append(FindingCategory.ZERO_WITHDRAWAL)
    elif cfg.strict_fees and outflow < max_allowed:
        conditions.append(FindingCategory.AMOUNT_BELOW_EXPECTED)
    if dep_body.recipient is None:
        conditions.append(FindingCategory.MISSING_RECIPIENT)
    if TokenFlag.TEST_TOKEN in cfg.token_flags(w.withdrawal.token) | cfg.token_flags(dep_body.token):
        conditions.append(FindingCategory.TEST_TOKEN)
    conditions = [condition for condition in conditions if condition not in disabled]

    ledger.mark_redeemed(deposit.ref, w.ref)

    if not conditions:
        return _base_finding(bt, FindingCategory.BALANCED, **evidence)
    notes = []
    if FindingCategory.DESTINATION_MISMATCH in conditions:
        notes.append(f"deposit destined for {dep_body.dest_chain}, withdrawn on {w.chain}")
    if len(conditions) > 1:
        notes.append("also: " + ", ".join(condition.value for condition in conditions[1:]))
    return _base_finding(bt, conditions[0], note="; ".join(notes), **evidence)


# ---------------------------------------------------------------------------
# Batch audit
# ---------------------------------------------------------------------------

@dataclass
class AuditSummary:
    """Counts over one audit run"""
    analyzed: int = 0
    deposits: int = 0
    withdrawal_only: int = 0
    deposit_only: int = 0
    deposit_only_amount: int = 0
    categories: Dict[str, int] = field(default_factory=dict)
    failed_bridges: Dict[str, str] = field(default_factory=dict)
    parse_errors: int = 0

    @property
    def violations(self) -> int:
        return sum(
            count for name, count in self.categories.items() if FindingCategory(name).is_violation
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "analyzed": self.analyzed,
            "deposits": self.deposits,
            "withdrawal_only": self.withdrawal_only,
            "deposit_only": self.deposit_only,
            "deposit_only_amount": str(self.deposit_only_amount),
            "violations": self.violations,
            "categories": dict(sorted(self.categories.items())),
            "failed_bridges": dict(sorted(self.failed_bridges.items())),
            "parse_errors": self.parse_errors,
        }


@dataclass
class AuditResult:
    findings: List[Finding]
    summary: AuditSummary
    ledger: RedemptionLedger


def has_violations(findings: Iterable[Finding]) -> bool:
    return any(finding.category.is_violation for finding in findings)


class BridgeAuditEngine:
    """
    Pairs withdrawals with deposits and applies the balance invariant.

    The same engine serves batch audits (in-memory index and ledger) and the
    live monitor (store-backed lookup and ledger) through audit_event.
    """

    def __init__(self, config: Optional[AuditConfig] = None,
                 disabled_checks: Iterable[FindingCategory] = ()):
        self.config = config or AuditConfig()
        self.disabled_checks = frozenset(disabled_checks)
        self.logger = logging.getLogger(self.__class__.__name__)

    def bridge_config(self, bridge_id: str) -> BridgeConfig:
        return self.config.bridge(bridge_id)

    def resolve(self, event: ChainEvent, transfers: Mapping[Tuple[str, str], Sequence[ChainEvent]]) -> Resolution:
        adjacent = transfers.get((event.ref.chain.name, event.ref.tx_hash), ())
        try:
            return resolve_amount(event, adjacent, self.bridge_config(event.bridge_id))
        except AmountUnresolvable as e:
            return e

    def audit_event(
        self,
        w: ChainEvent,
        lookup: DepositLookup,
        ledger: RedemptionState,
        outflow: Resolution,
        inflow_of: Callable[[ChainEvent], Resolution],
    ) -> Finding:
        """Pair, resolve and classify one withdrawal"""
        cfg = self.bridge_config(w.bridge_id)
        bt = make_transaction(w, pair_withdrawal(w, lookup), outflow, inflow_of)
        finding = audit_withdrawal(bt, ledger, cfg.equivalence(), cfg, self.disabled_checks)
        if finding.category.is_violation:
            self.logger.info(
                f"❌ {finding.category.value} {w.ref} on {w.bridge_id}",
                extra={"bridge": w.bridge_id, "category": finding.category.value, "chain": w.chain.name},
            )
        return finding

    def audit_trace(
        self,
        events: Iterable[ChainEvent],
        undecodable: Sequence[UndecodableEvent] = (),
        external_map: Optional[ExternalMap] = None,
        parse_errors: int = 0,
    ) -> AuditResult:
        """
        Audit a complete multi-chain trace.

        Deterministic: findings come out in EventOrder of their withdrawals. A
        bridge whose deposits collide on an id is reported as failed and its
        withdrawals are skipped; other bridges are unaffected. Undecodable
        withdrawals become Undecodable findings; undecodable deposits make
        the withdrawals that name them Undecodable rather than unbacked.
        """
        ordered = sorted(events, key=ChainEvent.order)
        transfers = index_transfers(ordered)
        deposits: Dict[str, List[ChainEvent]] = {}
        withdrawals: Dict[str, List[ChainEvent]] = {}
        for event in ordered:
            if event.kind == EventKind.DEPOSIT:
                deposits.setdefault(event.bridge_id, []).append(event)
            elif event.kind == EventKind.WITHDRAWAL:
                withdrawals.setdefault(event.bridge_id, []).append(event)
        broken_deposits: Dict[str, List[UndecodableEvent]] = {}
        for placeholder in undecodable:
            if placeholder.kind == EventKind.DEPOSIT.value and placeholder.ref is not None:
                broken_deposits.setdefault(placeholder.bridge_id or "", []).append(placeholder)

        summary = AuditSummary(parse_errors=parse_errors)
        ledger = RedemptionLedger()
        inflows: Dict[TxRef, Resolution] = {}
        ordered_findings: List[Tuple[EventOrder, Finding]] = []

        def inflow_of(deposit: ChainEvent) -> Resolution:
            if deposit.ref not in inflows:
                inflows[deposit.ref] = self.resolve(deposit, transfers)
            return inflows[deposit.ref]

        for bridge_id in sorted(set(deposits) | set(withdrawals)):
            cfg = self.bridge_config(bridge_id)
            bridge_deposits = deposits.get(bridge_id, [])
            summary.deposits += len(bridge_deposits)
            try:
                index = build_index(
                    bridge_deposits, external_map, cfg.pairing_strategies, broken_deposits.get(bridge_id, ())
                )
            except DuplicateDepositKey as e:
                self.logger.error(f"Bridge {bridge_id} not audited: {e}", extra={"bridge": bridge_id})
                summary.failed_bridges[bridge_id] = str(e)
                continue

            for w in withdrawals.get(bridge_id, []):
                finding = self.audit_event(w, index, ledger, self.resolve(w, transfers), inflow_of)
                ordered_findings.append((w.order(), finding))

            for deposit in bridge_deposits:
                if deposit.ref not in ledger:
                    summary.deposit_only += 1
                    inflow = inflow_of(deposit)
                    if isinstance(inflow, ResolvedAmount):
                        summary.deposit_only_amount += inflow.amount.value

        for placeholder in undecodable:
            if placeholder.kind != EventKind.WITHDRAWAL.value or placeholder.ref is None:
                continue
            if placeholder.bridge_id in summary.failed_bridges:
                continue
            ref = placeholder.ref
            finding = Finding(
                category=FindingCategory.UNDECODABLE,
                withdrawal=ref,
                outflow=Amount(0),
                bridge=placeholder.bridge_id or "",
                block_time=placeholder.block_time,
                note=placeholder.reason,
            )
            order = EventOrder(placeholder.block_time, ref.chain.name, placeholder.block, ref.log_index, ref.tx_hash)
            ordered_findings.append((order, finding))

        ordered_findings.sort(key=lambda item: item[0])
        findings = [finding for _, finding in ordered_findings]

        summary.analyzed = len(findings)
        summary.categories = dict(Counter(finding.category.value for finding in findings))
        summary.withdrawal_only = sum(
            1 for finding in findings
            if finding.category in (FindingCategory.UNBACKED_WITHDRAWAL, FindingCategory.UNPAIRABLE)
        )
        self.logger.info(
            f"Audited {summary.analyzed} withdrawals across {len(set(deposits) | set(withdrawals))} bridges, "
            f"{summary.violations} violations"
        )
        return AuditResult(findings, summary, ledger)


def audit_trace(
    events: Iterable[ChainEvent],
    config: Optional[AuditConfig] = None,
    undecodable: Sequence[UndecodableEvent] = (),
    external_map: Optional[ExternalMap] = None,
    disabled_checks: Iterable[FindingCategory] = (),
) -> AuditResult:
    return BridgeAuditEngine(config, disabled_checks).audit_trace(events, undecodable, external_map)


# ---------------------------------------------------------------------------
# Aggregate flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowPoint:
    t: int
    value: int


def aggregate_flow(
    events: Iterable[ChainEvent], bucket: int, config: Optional[AuditConfig] = None
) -> Dict[Tuple[str, str], List[FlowPoint]]:
    """
    Cumulative inflow - outflow per (bridge, token class), one point per bucket.

    The point at t covers every event with block_time < t + bucket. Every
    series runs from its own first bucket to the last bucket of the trace.
    Events whose amount cannot be resolved are left out.
    """
    if bucket <= 0:
        raise ValueError(f"bucket must be > 0, got {bucket}")
    config = config or AuditConfig()
    ordered = sorted(events, key=ChainEvent.order)
    transfers = index_transfers(ordered)
    deltas: Dict[Tuple[str, str], List[Tuple[int, int]]] = {}
    last_time: Optional[int] = None

    for event in ordered:
        if event.kind == EventKind.TRANSFER:
            continue
        cfg = config.bridge(event.bridge_id)
        adjacent = transfers.get((event.ref.chain.name, event.ref.tx_hash), ())
        try:
            resolved = resolve_amount(event, adjacent, cfg)
        except AmountUnresolvable as e:
            logger.debug(f"Flow skips {event.ref}: {e}")
            continue
        token = event.body.token  # type: ignore[union-attr]
        key = (event.bridge_id, cfg.equivalence().class_of(token))
        sign = 1 if event.kind == EventKind.DEPOSIT else -1
        deltas.setdefault(key, []).append((event.block_time, sign * resolved.amount.value))
        last_time = event.block_time if last_time is None else max(last_time, event.block_time)

    series: Dict[Tuple[str, str], List[FlowPoint]] = {}
    if last_time is None:
        return series
    last_bucket = (last_time // bucket) * bucket
    for key in sorted(deltas):
        points = deltas[key]
        t = (points[0][0] // bucket) * bucket
        total, i = 0, 0
        out: List[FlowPoint] = []
        while t <= last_bucket:
            while i < len(points) and points[i][0] < t + bucket:
                total += points[i][1]
                i += 1
            out.append(FlowPoint(t, total))
            t += bucket
        series[key] = out
    return series


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_summary_table(summary: AuditSummary, console: Optional[Console] = None) -> Table:
    """Print the per-category summary; returns the table for callers that embed it"""
    table = Table(title="Bridge audit summary")
    table.add_column("Metric", style="cyan")
    table.add_column("Count", justify="right")
    table.add_row("Analyzed withdrawals", str(summary.analyzed))
    table.add_row("Deposits", str(summary.deposits))
    table.add_row("Withdrawal-only", str(summary.withdrawal_only))
    table.add_row("Deposit-only (pending)", f"{summary.deposit_only} ({summary.deposit_only_amount})")
    for category in FindingCategory:
        count = summary.categories.get(category.value, 0)
        if count:
            style = "red" if category.is_violation else None
            table.add_row(category.value, str(count), style=style)
    table.add_row("Violations", str(summary.violations), style="bold")
    for bridge_id, reason in sorted(summary.failed_bridges.items()):
        table.add_row(f"FAILED {bridge_id}", reason, style="yellow")
    if summary.parse_errors:
        table.add_row("Parse errors", str(summary.parse_errors))
    (console or Console()).print(table)
    return table
