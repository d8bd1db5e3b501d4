"""
Event-log ingestion and transferred-value resolution.

Normalized per-chain logs (newline-delimited JSON, one event per line) are
parsed into ChainEvents. resolve_amount then works out how many tokens a
deposit or withdrawal really moved: a trusted bridge claim, the adjacent
ERC-20 style Transfer, or the internal transaction of a native-coin move,
with reflection-token scaling applied where configured.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import (
    IO,
    Any,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .config import BridgeConfig
from .exceptions import AmountUnresolvable, ParseError, UndecodableEvent
from .models import (
    ZERO_ADDRESS,
    Amount,
    ChainId,
    EventOrder,
    PairKey,
    TokenFlag,
    TokenId,
    TxRef,
)

logger = logging.getLogger(__name__)

COMMON_KEYS = ("chain", "block", "block_time", "tx_hash", "log_index", "bridge", "kind")


class EventKind(Enum):
    """What a log record describes"""
    DEPOSIT = "deposit"
    WITHDRAWAL = "withdrawal"
    TRANSFER = "transfer"


@dataclass(frozen=True)
class DepositBody:
    """Bridge deposit event payload"""
    token: TokenId
    depositor: str
    deposit_id: Optional[int] = None
    claimed_amount: Optional[Amount] = None
    recipient: Optional[str] = None
    dest_chain: Optional[ChainId] = None
    explicit_fee: Optional[Amount] = None


@dataclass(frozen=True)
class WithdrawalBody:
    """Bridge withdrawal event payload; pair_ref None is legal input"""
    token: TokenId
    recipient: str
    pair_ref: Optional[PairKey] = None
    claimed_amount: Optional[Amount] = None
    source_chain: Optional[ChainId] = None


@dataclass(frozen=True)
class TransferBody:
    """Token Transfer (or native internal transaction) payload"""
    token: TokenId
    from_address: str
    to_address: str
    value: Amount


EventBody = Union[DepositBody, WithdrawalBody, TransferBody]


@dataclass(frozen=True)
class ChainEvent:
    """One normalized event from one chain"""
    ref: TxRef
    block: int
    block_time: int
    bridge_id: str
    kind: EventKind
    body: EventBody

    @property
    def chain(self) -> ChainId:
        return self.ref.chain

    def order(self) -> EventOrder:
        return EventOrder(
            self.block_time, self.ref.chain.name, self.block, self.ref.log_index, self.ref.tx_hash
        )

    @property
    def deposit(self) -> DepositBody:
        assert isinstance(self.body, DepositBody), f"{self.ref} is not a deposit"
        return self.body

    @property
    def withdrawal(self) -> WithdrawalBody:
        assert isinstance(self.body, WithdrawalBody), f"{self.ref} is not a withdrawal"
        return self.body

    @property
    def transfer(self) -> TransferBody:
        assert isinstance(self.body, TransferBody), f"{self.ref} is not a transfer"
        return self.body


class AmountSource(Enum):
    """Where a resolved amount came from"""
    BRIDGE_EVENT = "bridge_event"
    ADJACENT_TRANSFER = "adjacent_transfer"
    INTERNAL_TRANSACTION = "internal_transaction"


@dataclass(frozen=True)
class ResolvedAmount:
    """The true number of tokens a deposit or withdrawal moved"""
    amount: Amount
    source: AmountSource
    scaled: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {"amount": str(self.amount), "source": self.source.value, "scaled": self.scaled}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResolvedAmount":
        return cls(Amount.parse(data["amount"]), AmountSource(data["source"]), bool(data["scaled"]))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _require_int(record: Dict[str, Any], key: str, line: int) -> int:
    value = record.get(key)
    if value is None:
        raise ParseError(line, f"{key} required")
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ParseError(line, f"{key} must be a non-negative integer")
    return value


def _require_str(record: Dict[str, Any], key: str, line: int) -> str:
    value = record.get(key)
    if value is None:
        raise ParseError(line, f"{key} required")
    if not isinstance(value, str) or not value:
        raise ParseError(line, f"{key} must be a non-empty string")
    return value


def _optional_str(record: Dict[str, Any], key: str, line: int) -> Optional[str]:
    if record.get(key) is None:
        return None
    return _require_str(record, key, line)


def _optional_amount(record: Dict[str, Any], key: str, line: int) -> Optional[Amount]:
    value = record.get(key)
    if value is None:
        return None
    try:
        return Amount.parse(value)
    except ValueError:
        raise ParseError(line, f"{key} must be a decimal string")


def _parse_pair_by(value: Any, bridge_id: str, line: int) -> Optional[PairKey]:
    if value is None:
        return None
    if not isinstance(value, dict) or len(value) != 1:
        raise ParseError(line, "pair_by must be an object with exactly one of id, hash, ext")
    (variant, handle), = value.items()
    if variant == "id" and isinstance(handle, int) and not isinstance(handle, bool) and handle >= 0:
        return PairKey.by_id(bridge_id, handle)
    if variant == "hash" and isinstance(handle, str) and handle:
        return PairKey.by_deposit_hash(handle)
    if variant == "ext" and isinstance(handle, str) and handle:
        return PairKey.external(handle)
    raise ParseError(line, f"invalid pair_by {value!r}")


def parse_record(record: Dict[str, Any], chain: ChainId, line: int = 0) -> ChainEvent:
    """Turn one decoded JSON object into a ChainEvent"""
    if not isinstance(record, dict):
        raise ParseError(line, "record must be a JSON object")

    chain_name = _require_str(record, "chain", line)
    if chain_name != chain.name:
        raise ParseError(line, f"chain {chain_name!r} does not match log chain {chain.name!r}")
    block = _require_int(record, "block", line)
    block_time = _require_int(record, "block_time", line)
    tx_hash = _require_str(record, "tx_hash", line).lower()
    log_index = _require_int(record, "log_index", line)
    bridge_id = _require_str(record, "bridge", line)
    kind_name = _require_str(record, "kind", line)
    try:
        kind = EventKind(kind_name)
    except ValueError:
        raise ParseError(line, f"unknown kind {kind_name!r}")

    ref = TxRef(chain, tx_hash, log_index)

    def missing(key: str) -> UndecodableEvent:
        raw_id = record.get("deposit_id") if kind == EventKind.DEPOSIT else None
        if not isinstance(raw_id, int) or isinstance(raw_id, bool) or raw_id < 0:
            raw_id = None
        return UndecodableEvent(line, f"{key} required", ref, kind.value, bridge_id, block, block_time, raw_id)

    required = {
        EventKind.DEPOSIT: ("token", "from"),
        EventKind.WITHDRAWAL: ("token", "recipient"),
        EventKind.TRANSFER: ("token", "from", "to", "value"),
    }[kind]
    for key in required:
        if record.get(key) in (None, ""):
            raise missing(key)

    token = TokenId(chain, _require_str(record, "token", line).lower())

    body: EventBody
    if kind == EventKind.DEPOSIT:
        deposit_id = record.get("deposit_id")
        if deposit_id is not None:
            deposit_id = _require_int(record, "deposit_id", line)
        dest = _optional_str(record, "dest_chain", line)
        to = _optional_str(record, "to", line)
        body = DepositBody(
            token=token,
            depositor=_require_str(record, "from", line).lower(),
            deposit_id=deposit_id,
            claimed_amount=_optional_amount(record, "amount", line),
            recipient=to.lower() if to else None,
            dest_chain=ChainId(dest) if dest else None,
            explicit_fee=_optional_amount(record, "fee", line),
        )
    elif kind == EventKind.WITHDRAWAL:
        source = _optional_str(record, "source_chain", line)
        body = WithdrawalBody(
            token=token,
            recipient=_require_str(record, "recipient", line).lower(),
            pair_ref=_parse_pair_by(record.get("pair_by"), bridge_id, line),
            claimed_amount=_optional_amount(record, "amount", line),
            source_chain=ChainId(source) if source else None,
        )
    else:
        value = _optional_amount(record, "value", line)
        assert value is not None
        body = TransferBody(
            token=token,
            from_address=_require_str(record, "from", line).lower(),
            to_address=_require_str(record, "to", line).lower(),
            value=value,
        )

    return ChainEvent(ref, block, block_time, bridge_id, kind, body)


def parse_event_log(
    stream: Iterable[Union[bytes, str]], chain: ChainId
) -> Iterator[Union[ChainEvent, ParseError]]:
    """
    Parse a newline-delimited event log.

    Yields events in file order. A malformed record yields a ParseError
    (UndecodableEvent when the declared kind's fields are missing) and
    parsing carries on with the next line.
    """
    last_block_time = -1
    for line_no, raw in enumerate(stream, start=1):
        try:
            text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        except UnicodeDecodeError as e:
            yield ParseError(line_no, f"invalid UTF-8: {e}")
            continue
        text = text.strip()
        if not text:
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as e:
            yield ParseError(line_no, f"invalid JSON: {e.msg}")
            continue
        try:
            event = parse_record(record, chain, line_no)
        except ParseError as e:
            yield e
            continue
        if event.block_time < last_block_time:
            yield ParseError(line_no, f"block_time {event.block_time} decreased (previous {last_block_time})")
            continue
        last_block_time = event.block_time
        yield event


def event_to_record(event: ChainEvent) -> Dict[str, Any]:
    """The External Interfaces record for an event, canonical key order"""
    record: Dict[str, Any] = {
        "chain": event.ref.chain.name,
        "block": event.block,
        "block_time": event.block_time,
        "tx_hash": event.ref.tx_hash,
        "log_index": event.ref.log_index,
        "bridge": event.bridge_id,
        "kind": event.kind.value,
    }
    body = event.body
    if isinstance(body, DepositBody):
        if body.deposit_id is not None:
            record["deposit_id"] = body.deposit_id
        record["token"] = body.token.address
        if body.claimed_amount is not None:
            record["amount"] = str(body.claimed_amount)
        record["from"] = body.depositor
        if body.recipient is not None:
            record["to"] = body.recipient
        if body.dest_chain is not None:
            record["dest_chain"] = body.dest_chain.name
        if body.explicit_fee is not None:
            record["fee"] = str(body.explicit_fee)
    elif isinstance(body, WithdrawalBody):
        if body.pair_ref is not None:
            record["pair_by"] = body.pair_ref.to_wire()
        record["token"] = body.token.address
        if body.claimed_amount is not None:
            record["amount"] = str(body.claimed_amount)
        record["recipient"] = body.recipient
        if body.source_chain is not None:
            record["source_chain"] = body.source_chain.name
    else:
        record["token"] = body.token.address
        record["from"] = body.from_address
        record["to"] = body.to_address
        record["value"] = str(body.value)
    return record


def serialize_event(event: ChainEvent) -> str:
    """One canonical log line (no trailing newline)"""
    return json.dumps(event_to_record(event), separators=(",", ":"))


def read_event_log(path: Union[str, Path], chain: ChainId) -> Tuple[List[ChainEvent], List[ParseError]]:
    """Parse a whole log file, splitting events from per-record errors"""
    events: List[ChainEvent] = []
    errors: List[ParseError] = []
    with open(path, "rb") as handle:
        for item in parse_event_log(handle, chain):
            if isinstance(item, ParseError):
                logger.warning(f"{path}: {item}")
                errors.append(item)
            else:
                events.append(item)
    logger.info(f"Parsed {len(events)} events from {path} ({len(errors)} errors)")
    return events, errors


def sniff_chain(path: Union[str, Path]) -> str:
    """Chain name of a log file: first record's `chain`, else the file stem"""
    try:
        with open(path, "rb") as handle:
            for raw in handle:
                if raw.strip():
                    record = json.loads(raw)
                    if isinstance(record, dict) and isinstance(record.get("chain"), str):
                        return record["chain"]
                    break
    except (OSError, json.JSONDecodeError, UnicodeDecodeError):
        pass
    return Path(path).stem


def read_event_logs(
    paths: Sequence[Union[str, Path]], chains: Sequence[ChainId] = ()
) -> Tuple[List[ChainEvent], List[ParseError]]:
    """Parse several chain files; chains not configured get finality_lag 0"""
    by_name = {chain.name: chain for chain in chains}
    events: List[ChainEvent] = []
    errors: List[ParseError] = []
    for path in paths:
        name = sniff_chain(path)
        chain_events, chain_errors = read_event_log(path, by_name.get(name, ChainId(name)))
        events.extend(chain_events)
        errors.extend(chain_errors)
    return events, errors


def write_event_log(events: Iterable[ChainEvent], handle: IO[str]) -> int:
    count = 0
    for event in events:
        handle.write(serialize_event(event) + "\n")
        count += 1
    return count


# ---------------------------------------------------------------------------
# Amount resolution
# ---------------------------------------------------------------------------

def index_transfers(events: Iterable[ChainEvent]) -> Dict[Tuple[str, str], List[ChainEvent]]:
    """Transfer events grouped by (chain, tx_hash), ordered by log_index"""
    grouped: Dict[Tuple[str, str], List[ChainEvent]] = {}
    for event in events:
        if event.kind == EventKind.TRANSFER:
            grouped.setdefault((event.ref.chain.name, event.ref.tx_hash), []).append(event)
    for transfers in grouped.values():
        transfers.sort(key=lambda event: event.ref.log_index)
    return grouped


def _passes_direction_check(event: ChainEvent, transfer: TransferBody, bridge_addresses) -> bool:
    if event.kind == EventKind.DEPOSIT:
        return transfer.to_address in bridge_addresses or transfer.to_address == ZERO_ADDRESS
    return transfer.from_address in bridge_addresses or transfer.from_address == ZERO_ADDRESS


def select_transfer(
    event: ChainEvent, adjacent: Sequence[ChainEvent], bridge_cfg: BridgeConfig
) -> Optional[ChainEvent]:
    """
    Pick the Transfer that carries a bridge event's value.

    Candidates move the same token in the same transaction and pass the
    direction check (into the bridge or burn address for deposits, out of the
    bridge or mint address for withdrawals). Configured log-index offsets win;
    otherwise the candidate nearest in log_index is chosen, earlier on ties.
    """
    token = event.body.token  # type: ignore[union-attr]
    addresses = bridge_cfg.bridge_addresses()
    candidates = [
        transfer for transfer in adjacent
        if transfer.kind == EventKind.TRANSFER
        and transfer.ref.tx_hash == event.ref.tx_hash
        and transfer.ref.chain == event.ref.chain
        and transfer.transfer.token == token
        and _passes_direction_check(event, transfer.transfer, addresses)
    ]
    if not candidates:
        return None

    if bridge_cfg.transfer_log_offsets:
        by_index = {transfer.ref.log_index: transfer for transfer in candidates}
        for offset in bridge_cfg.transfer_log_offsets:
            hit = by_index.get(event.ref.log_index + offset)
            if hit is not None:
                return hit
        return None

    return min(
        candidates,
        key=lambda transfer: (abs(transfer.ref.log_index - event.ref.log_index), transfer.ref.log_index),
    )


def resolve_amount(
    event: ChainEvent, adjacent: Sequence[ChainEvent], bridge_cfg: BridgeConfig
) -> ResolvedAmount:
    """
    Establish how many tokens a deposit or withdrawal moved.

    Order: trusted bridge claim, then the selected adjacent Transfer (the
    internal transaction record for native coins), with reflection scaling.
    A deposit nothing corroborates resolves to zero when the bridge sets
    treat_missing_transfer_as_zero.

    Raises:
        AmountUnresolvable: no source applies
    """
    if event.kind not in (EventKind.DEPOSIT, EventKind.WITHDRAWAL):
        raise ValueError(f"resolve_amount needs a deposit or withdrawal, got {event.kind.value}")
    body = event.body
    assert isinstance(body, (DepositBody, WithdrawalBody))

    if bridge_cfg.trusted_claims and body.claimed_amount is not None:
        return ResolvedAmount(body.claimed_amount, AmountSource.BRIDGE_EVENT)

    transfer = select_transfer(event, adjacent, bridge_cfg)
    if transfer is not None:
        source = AmountSource.INTERNAL_TRANSACTION if body.token.is_native else AmountSource.ADJACENT_TRANSFER
        value = transfer.transfer.value
        if TokenFlag.REFLECTION in bridge_cfg.token_flags(body.token):
            scale = bridge_cfg.reflection_scale(body.token, event.block)
            if scale is None:
                raise AmountUnresolvable(
                    f"no reflection scale for {body.token.key()} at block {event.block}"
                )
            return ResolvedAmount(Amount(value.value * scale.numerator // scale.denominator), source, scaled=True)
        return ResolvedAmount(value, source)

    if event.kind == EventKind.DEPOSIT and bridge_cfg.treat_missing_transfer_as_zero:
        logger.debug(f"Deposit {event.ref} has no corroborating transfer, inflow treated as zero")
        return ResolvedAmount(Amount(0), AmountSource.BRIDGE_EVENT)

    raise AmountUnresolvable(f"no transfer of {body.token.key()} corroborates {event.kind.value} {event.ref}")
