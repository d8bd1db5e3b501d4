"""
Deterministic synthetic bridge traffic.

generate() turns a ScenarioConfig into per-chain event logs: benign
deposit/withdrawal flows (fee-consistent, finality respecting, with pending
deposits, reflection tokens and optional zero withdrawals) plus injected
attacks, each labelled with the finding category the auditor must produce.
The same config always yields byte-identical logs.
"""

import hashlib
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Set, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .audit_engine import Finding, FindingCategory, compute_max_outflow
from .config import (
    AuditConfig,
    BridgeConfig,
    ChainConfig,
    FeePolicyConfig,
    MonitorConfig,
    ReflectionScaleConfig,
)
from .exceptions import ConfigError
from .ingest import ChainEvent, DepositBody, EventKind, TransferBody, WithdrawalBody, write_event_log
from .models import ZERO_ADDRESS, Amount, ChainId, PairKey, TokenId, TxRef

logger = logging.getLogger(__name__)

REFLECTION_NUMERATOR = 3
REFLECTION_DENOMINATOR = 2
MIN_AMOUNT = 1_000
MAX_AMOUNT = 10**12


class AttackKind(Enum):
    FAKE_DEPOSIT = "FakeDeposit"
    UNBACKED_WITHDRAWAL = "UnbackedWithdrawal"
    REPLAY = "Replay"
    AMOUNT_MISMATCH = "AmountMismatch"
    WRONG_DESTINATION = "WrongDestination"

    @property
    def expected_category(self) -> FindingCategory:
        return EXPECTED_CATEGORY[self]


# FakeDeposit and AmountMismatch share a category; only the attack labels separate them
EXPECTED_CATEGORY = {
    AttackKind.FAKE_DEPOSIT: FindingCategory.AMOUNT_EXCEEDS_INFLOW,
    AttackKind.UNBACKED_WITHDRAWAL: FindingCategory.UNBACKED_WITHDRAWAL,
    AttackKind.REPLAY: FindingCategory.DOUBLE_SPEND,
    AttackKind.AMOUNT_MISMATCH: FindingCategory.AMOUNT_EXCEEDS_INFLOW,
    AttackKind.WRONG_DESTINATION: FindingCategory.DESTINATION_MISMATCH,
}


class ScenarioBridge(BaseModel):
    """One simulated lock-and-mint bridge, source → destination"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    bridge_id: str = Field(min_length=1)
    source: str
    destination: str
    fee: FeePolicyConfig = Field(default_factory=FeePolicyConfig)
    pairing: Literal["id", "hash"] = "id"
    tokens: List[str] = Field(default_factory=lambda: ["USDC"], min_length=1)
    reflection_tokens: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "ScenarioBridge":
        if self.source == self.destination:
            raise ValueError(f"bridge {self.bridge_id} must connect two different chains")
        unknown = set(self.reflection_tokens) - set(self.tokens)
        if unknown:
            raise ValueError(f"reflection tokens not in token list: {sorted(unknown)}")
        return self


class Injection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttackKind
    count: int = Field(default=1, ge=0)
    start: int = Field(default=0, ge=0)
    end: Optional[int] = Field(default=None, gt=0)


def _default_chains() -> List[ChainConfig]:
    return [
        ChainConfig(name="ethereum", finality_lag=780, block_interval=12),
        ChainConfig(name="bsc", finality_lag=45, block_interval=3),
    ]


def _default_bridges() -> List[ScenarioBridge]:
    return [
        ScenarioBridge(
            bridge_id="alpha", source="ethereum", destination="bsc",
            fee=FeePolicyConfig(kind="proportional", ppm=1_000), tokens=["USDC", "RFX"], reflection_tokens=["RFX"],
        ),
        ScenarioBridge(
            bridge_id="beta", source="bsc", destination="ethereum",
            fee=FeePolicyConfig(kind="indeterminate"), pairing="hash", tokens=["WBNB"],
        ),
    ]


class ScenarioConfig(BaseModel):
    """Everything generate() needs; equal configs produce equal traces"""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=1, ge=0, lt=2**64)
    chains: List[ChainConfig] = Field(default_factory=_default_chains, min_length=2)
    bridges: List[ScenarioBridge] = Field(default_factory=_default_bridges, min_length=1)
    traffic: float = Field(default=60.0, ge=0)
    duration: int = Field(default=24 * 3600, gt=0)
    benign_count: Optional[int] = Field(default=None, ge=0)
    injections: List[Injection] = Field(default_factory=list)
    pending_rate: float = Field(default=0.02, ge=0, le=1)
    zero_withdrawal_rate: float = Field(default=0.0, ge=0, le=1)
    min_delay: int = Field(default=60, ge=1)
    max_delay: int = Field(default=3600, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "ScenarioConfig":
        names = {chain.name for chain in self.chains}
        if len(names) != len(self.chains):
            raise ValueError("chain names must be unique")
        for bridge in self.bridges:
            for name in (bridge.source, bridge.destination):
                if name not in names:
                    raise ValueError(f"bridge {bridge.bridge_id} uses unknown chain {name}")
        if len({bridge.bridge_id for bridge in self.bridges}) != len(self.bridges):
            raise ValueError("bridge ids must be unique")
        if self.max_delay < self.min_delay:
            raise ValueError("max_delay must be >= min_delay")
        return self

    @property
    def flow_count(self) -> int:
        if self.benign_count is not None:
            return self.benign_count
        return round(self.traffic * self.duration / 3600)

    def chain(self, name: str) -> ChainConfig:
        return next(chain for chain in self.chains if chain.name == name)


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"invalid scenario {path}: {e}") from e


def _hex(seed: int, *parts: Any) -> str:
    return hashlib.sha256(":".join(str(part) for part in (seed,) + parts).encode("utf-8")).hexdigest()


def token_for(seed: int, bridge_id: str, symbol: str, chain: str) -> TokenId:
    """The bridged token `symbol` as it exists on `chain`"""
    return TokenId(ChainId(chain), "0x" + _hex(seed, "token", bridge_id, symbol, chain)[:40], symbol)


def bridge_address(seed: int, bridge_id: str, chain: str) -> str:
    return "0x" + _hex(seed, "bridge", bridge_id, chain)[:40]


def scenario_audit_config(config: ScenarioConfig) -> AuditConfig:
    """
    AuditConfig matching a scenario: every bridged token is declared on every
    chain and all copies are equivalent; deposits without a Transfer count as
    zero inflow.
    """
    bridges = []
    for bridge in config.bridges:
        tokens, links, scales = [], [], []
        for symbol in bridge.tokens:
            copies = [token_for(config.seed, bridge.bridge_id, symbol, chain.name).key() for chain in config.chains]
            tokens.extend(copies)
            links.extend((copies[0], other) for other in copies[1:])
            if symbol in bridge.reflection_tokens:
                scales.append(ReflectionScaleConfig(
                    token=token_for(config.seed, bridge.bridge_id, symbol, bridge.source).key(),
                    numerator=REFLECTION_NUMERATOR,
                    denominator=REFLECTION_DENOMINATOR,
                ))
        bridges.append(BridgeConfig(
            bridge_id=bridge.bridge_id,
            pairing_strategies=[bridge.pairing],
            treat_missing_transfer_as_zero=True,
            addresses=[bridge_address(config.seed, bridge.bridge_id, chain.name) for chain in config.chains],
            default_fee=bridge.fee,
            token_equivalence=links,
            reflection_scales=scales,
            tokens=tokens,
        ))
    return AuditConfig(chains=list(config.chains), bridges=bridges, monitor=MonitorConfig())


@dataclass
class _TxDraft:
    chain: ChainConfig
    time: int
    seq: int
    tx_hash: str
    bridge_id: str
    items: List[Tuple[EventKind, Any]]
    attack: Optional[AttackKind] = None


@dataclass
class _Flow:
    """A generated deposit and, once withdrawn, its withdrawal"""
    bridge: ScenarioBridge
    symbol: str
    user: str
    deposit: _TxDraft
    pair_ref: PairKey
    inflow: int
    max_allowed: int
    withdrawal: Optional[_TxDraft] = None


@dataclass
class GeneratedTrace:
    """Per-chain logs in EventOrder plus the attack labels"""
    config: ScenarioConfig
    logs: Dict[str, List[ChainEvent]]
    ground_truth: Dict[TxRef, FindingCategory]
    attacks: Dict[TxRef, AttackKind]
    audit_config: AuditConfig
    benign_flows: int = 0
    pending_deposits: int = 0
    zero_withdrawals: int = 0

    def events(self) -> List[ChainEvent]:
        merged = [event for events in self.logs.values() for event in events]
        return sorted(merged, key=ChainEvent.order)

    def chain_ids(self) -> List[ChainId]:
        return [chain.chain_id() for chain in self.config.chains]


class _Generator:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.seed = config.seed
        self.rng = random.Random(config.seed)
        self.drafts: List[_TxDraft] = []
        self.flows: List[_Flow] = []
        self.next_deposit_id: Dict[str, int] = {bridge.bridge_id: 0 for bridge in config.bridges}
        self.pending = 0
        self.zero = 0

    def _new_draft(self, chain: ChainConfig, time: int, bridge_id: str, label: str) -> _TxDraft:
        seq = len(self.drafts)
        draft = _TxDraft(chain, time, seq, "0x" + _hex(self.seed, "tx", label, seq), bridge_id, [])
        self.drafts.append(draft)
        return draft

    @staticmethod
    def _block_time(chain: ChainConfig, time: int) -> int:
        return time // chain.block_interval * chain.block_interval

    def _withdrawal_time(self, flow: _Flow, after: Optional[int] = None) -> int:
        source = self.config.chain(flow.bridge.source)
        destination = self.config.chain(flow.bridge.destination)
        earliest = self._block_time(source, flow.deposit.time) + source.finality_lag + destination.block_interval
        if after is not None:
            earliest = max(earliest, after + destination.block_interval)
        return earliest + self.rng.randint(self.config.min_delay, self.config.max_delay)

    def _deposit(self, bridge: ScenarioBridge, time: int, user: str, backed: bool = True) -> _Flow:
        symbol = self.rng.choice(bridge.tokens)
        source = self.config.chain(bridge.source)
        token = token_for(self.seed, bridge.bridge_id, symbol, bridge.source)
        fee = bridge.fee
        floor = MIN_AMOUNT + ((fee.amount or 0) if fee.kind == "fixed" else 0)
        logged = self.rng.randint(floor, max(floor, MAX_AMOUNT))

        inflow = logged
        if symbol in bridge.reflection_tokens:
            inflow = logged * REFLECTION_NUMERATOR // REFLECTION_DENOMINATOR
        explicit_fee = self.rng.randint(0, inflow // 100) if fee.kind == "explicit" else None

        draft = self._new_draft(source, time, bridge.bridge_id, "deposit")
        deposit_id = None
        if bridge.pairing == "id":
            deposit_id = self.next_deposit_id[bridge.bridge_id]
            self.next_deposit_id[bridge.bridge_id] += 1
        pair_ref = (
            PairKey.by_id(bridge.bridge_id, deposit_id) if deposit_id is not None
            else PairKey.by_deposit_hash(draft.tx_hash)
        )
        if backed:
            draft.items.append((EventKind.TRANSFER, TransferBody(
                token, user, bridge_address(self.seed, bridge.bridge_id, bridge.source), Amount(logged)
            )))
        else:
            inflow = 0
        draft.items.append((EventKind.DEPOSIT, DepositBody(
            token=token,
            depositor=user,
            deposit_id=deposit_id,
            claimed_amount=Amount(logged),
            recipient=user,
            dest_chain=ChainId(bridge.destination),
            explicit_fee=Amount(explicit_fee) if explicit_fee is not None else None,
        )))
        max_allowed = int(compute_max_outflow(
            Amount(inflow), fee.to_policy(), Amount(explicit_fee) if explicit_fee is not None else None
        ))
        flow = _Flow(bridge, symbol, user, draft, pair_ref, inflow, max_allowed)
        self.flows.append(flow)
        return flow

    def _withdraw(
        self,
        flow: _Flow,
        amount: int,
        time: int,
        chain_name: Optional[str] = None,
        pair_ref: Optional[PairKey] = None,
        attack: Optional[AttackKind] = None,
    ) -> _TxDraft:
        bridge = flow.bridge
        chain_name = chain_name or bridge.destination
        chain = self.config.chain(chain_name)
        token = token_for(self.seed, bridge.bridge_id, flow.symbol, chain_name)
        draft = self._new_draft(chain, time, bridge.bridge_id, "withdrawal")
        draft.attack = attack
        draft.items.append((EventKind.WITHDRAWAL, WithdrawalBody(
            token, flow.user, pair_ref or flow.pair_ref, Amount(amount), ChainId(bridge.source)
        )))
        draft.items.append((EventKind.TRANSFER, TransferBody(token, ZERO_ADDRESS, flow.user, Amount(amount))))
        return draft

    def _user(self, label: str, n: int) -> str:
        return "0x" + _hex(self.seed, "user", label, n)[:40]

    # -- traffic ------------------------------------------------------------

    def benign(self, n: int, time: Optional[int] = None) -> _Flow:
        bridge = self.rng.choice(self.config.bridges)
        time = self.rng.randrange(self.config.duration) if time is None else time
        flow = self._deposit(bridge, time, self._user("benign", n))
        if self.rng.random() < self.config.pending_rate:
            self.pending += 1
            return flow
        amount = flow.max_allowed
        if self.config.zero_withdrawal_rate and self.rng.random() < self.config.zero_withdrawal_rate:
            amount = 0
            self.zero += 1
        flow.withdrawal = self._withdraw(flow, amount, self._withdrawal_time(flow))
        return flow

    def inject(self, injection: Injection, n: int) -> None:
        end = injection.end or self.config.duration
        start = min(injection.start, end - 1)
        time = self.rng.randrange(start, end)
        bridge = self.rng.choice(self.config.bridges)
        user = self._user(injection.kind.value, n)
        kind = injection.kind

        if kind == AttackKind.FAKE_DEPOSIT:
            flow = self._deposit(bridge, time, user, backed=False)
            claimed = flow.deposit.items[-1][1].claimed_amount.value
            flow.withdrawal = self._withdraw(flow, claimed, self._withdrawal_time(flow), attack=kind)

        elif kind == AttackKind.UNBACKED_WITHDRAWAL:
            ghost = _Flow(bridge, self.rng.choice(bridge.tokens), user, _TxDraft(
                self.config.chain(bridge.source), time, -1, "", bridge.bridge_id, []
            ), PairKey.by_id(bridge.bridge_id, 0), 0, 0)
            if bridge.pairing == "id":
                handle = PairKey.by_id(bridge.bridge_id, 10**9 + n)
            else:
                handle = PairKey.by_deposit_hash("0x" + _hex(self.seed, "ghost", n))
            amount = self.rng.randint(MIN_AMOUNT, MAX_AMOUNT)
            self._withdraw(ghost, amount, self._withdrawal_time(ghost), pair_ref=handle, attack=kind)

        elif kind == AttackKind.REPLAY:
            candidates = [
                flow for flow in self.flows
                if flow.withdrawal is not None and flow.withdrawal.attack is None
                and flow.withdrawal.items[0][1].claimed_amount.value > 0
                and injection.start <= flow.deposit.time < end
            ]
            if not candidates:
                candidates = [self._ensure_withdrawn(self.benign(-1 - n, time))]
            victim = self.rng.choice(candidates)
            assert victim.withdrawal is not None
            amount = victim.withdrawal.items[0][1].claimed_amount.value
            self._withdraw(victim, amount, self._withdrawal_time(victim, after=victim.withdrawal.time), attack=kind)

        elif kind == AttackKind.AMOUNT_MISMATCH:
            flow = self._deposit(bridge, time, user)
            amount = flow.max_allowed + self.rng.randint(1, 10**6)
            flow.withdrawal = self._withdraw(flow, amount, self._withdrawal_time(flow), attack=kind)

        elif kind == AttackKind.WRONG_DESTINATION:
            flow = self._deposit(bridge, time, user)
            wrong = next(chain.name for chain in self.config.chains if chain.name != bridge.destination)
            flow.withdrawal = self._withdraw(
                flow, flow.max_allowed, self._withdrawal_time(flow), chain_name=wrong, attack=kind
            )

    def _ensure_withdrawn(self, flow: _Flow) -> _Flow:
        if flow.withdrawal is None or flow.withdrawal.items[0][1].claimed_amount.is_zero:
            if flow.withdrawal is None:
                self.pending -= 1
            else:
                self.zero -= 1
                self.drafts.remove(flow.withdrawal)
            flow.withdrawal = self._withdraw(flow, flow.max_allowed, self._withdrawal_time(flow))
        return flow

    # -- output -------------------------------------------------------------

    def finalize(self) -> Tuple[Dict[str, List[ChainEvent]], Dict[TxRef, AttackKind]]:
        logs: Dict[str, List[ChainEvent]] = {chain.name: [] for chain in self.config.chains}
        attacks: Dict[TxRef, AttackKind] = {}
        next_log: Dict[Tuple[str, int], int] = {}
        for draft in sorted(self.drafts, key=lambda d: (d.chain.name, d.time, d.seq)):
            chain = draft.chain.chain_id()
            block = draft.time // draft.chain.block_interval
            block_time = block * draft.chain.block_interval
            for kind, body in draft.items:
                log_index = next_log.get((chain.name, block), 0)
                next_log[(chain.name, block)] = log_index + 1
                event = ChainEvent(TxRef(chain, draft.tx_hash, log_index), block, block_time, draft.bridge_id, kind, body)
                logs[chain.name].append(event)
                if kind == EventKind.WITHDRAWAL and draft.attack is not None:
                    attacks[event.ref] = draft.attack
        return logs, attacks


def generate(config: ScenarioConfig) -> GeneratedTrace:
    """Render a scenario into per-chain logs and ground truth"""
    generator = _Generator(config)
    for n in range(config.flow_count):
        generator.benign(n)
    n = 0
    for injection in config.injections:
        for _ in range(injection.count):
            generator.inject(injection, n)
            n += 1
    logs, attacks = generator.finalize()

    benign = sum(1 for flow in generator.flows if flow.withdrawal is not None and flow.withdrawal.attack is None)
    trace = GeneratedTrace(
        config=config,
        logs=logs,
        ground_truth={ref: kind.expected_category for ref, kind in attacks.items()},
        attacks=attacks,
        audit_config=scenario_audit_config(config),
        benign_flows=benign,
        pending_deposits=generator.pending,
        zero_withdrawals=generator.zero,
    )
    logger.info(
        f"Generated seed {config.seed}: {sum(len(events) for events in logs.values())} events, "
        f"{len(attacks)} attacks, {generator.pending} pending deposits"
    )
    return trace


def ground_truth_records(trace: GeneratedTrace) -> List[Dict[str, Any]]:
    records = [
        {
            "withdrawal_tx": ref.tx_hash,
            "chain": ref.chain.name,
            "log_index": ref.log_index,
            "category": category.value,
            "attack": trace.attacks[ref].value,
        }
        for ref, category in trace.ground_truth.items()
    ]
    return sorted(records, key=lambda record: (record["chain"], record["withdrawal_tx"], record["log_index"]))


def write_trace(trace: GeneratedTrace, out_dir: Union[str, Path]) -> List[Path]:
    """Write `<chain>.jsonl`, `ground_truth.jsonl` and `audit_config.json`"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for chain, events in sorted(trace.logs.items()):
        path = out / f"{chain}.jsonl"
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            write_event_log(events, handle)
        written.append(path)

    truth_path = out / "ground_truth.jsonl"
    with open(truth_path, "w", encoding="utf-8", newline="\n") as handle:
        for record in ground_truth_records(trace):
            handle.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
    written.append(truth_path)

    config_path = out / "audit_config.json"
    config_path.write_text(
        json.dumps(trace.audit_config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    written.append(config_path)
    return written


def load_ground_truth(path: Union[str, Path]) -> Dict[TxRef, FindingCategory]:
    truth: Dict[TxRef, FindingCategory] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                record = json.loads(line)
                ref = TxRef(ChainId(record["chain"]), record["withdrawal_tx"], int(record.get("log_index", 0)))
                truth[ref] = FindingCategory(record["category"])
    return truth


@dataclass
class ScoreReport:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    confusion: Dict[Tuple[str, str], int] = field(default_factory=dict)
    missed: List[TxRef] = field(default_factory=list)
    spurious: List[TxRef] = field(default_factory=list)

    @property
    def precision(self) -> float:
        flagged = self.true_positives + self.false_positives
        return self.true_positives / flagged if flagged else 1.0

    @property
    def recall(self) -> float:
        expected = self.true_positives + self.false_negatives
        return self.true_positives / expected if expected else 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": {f"{expected}->{actual}": count for (expected, actual), count in sorted(self.confusion.items())},
        }


def score(
    findings: Iterable[Finding],
    ground_truth: Dict[TxRef, FindingCategory],
    zero_withdrawal_benign: bool = True,
) -> ScoreReport:
    """
    Exact comparison of violation findings against labelled attacks on
    (withdrawal, category). Zero withdrawals outside the ground truth are not
    counted as false positives when zero_withdrawal_benign is set.

    FakeDeposit and AmountMismatch both expect AmountExceedsInflow, so the
    category alone cannot tell them apart; matching is per withdrawal, and
    which attack a hit belongs to comes from the trace's attack labels
    (GeneratedTrace.attacks), not from the finding.
    """
    flagged: Dict[TxRef, FindingCategory] = {}
    for finding in findings:
        if not finding.category.is_violation:
            continue
        if (
            zero_withdrawal_benign
            and finding.category == FindingCategory.ZERO_WITHDRAWAL
            and finding.withdrawal not in ground_truth
        ):
            continue
        flagged[finding.withdrawal] = finding.category

    report = ScoreReport()
    confusion: Counter = Counter()
    for ref, expected in ground_truth.items():
        actual = flagged.get(ref)
        confusion[(expected.value, actual.value if actual else "none")] += 1
        if actual == expected:
            report.true_positives += 1
        else:
            report.false_negatives += 1
            report.missed.append(ref)
    for ref, actual in flagged.items():
        if ground_truth.get(ref) != actual:
            report.false_positives += 1
            report.spurious.append(ref)
    report.confusion = dict(confusion)
    return report


def expected_categories(trace: GeneratedTrace) -> Set[FindingCategory]:
    return set(trace.ground_truth.values())
