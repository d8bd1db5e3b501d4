"""
Deposit index and withdrawal pairing.

Each bridge gets one DepositIndex. Withdrawals name their deposit by id,
by deposit transaction hash, or through an out-of-band key resolved from an
external map file; anything else is unpairable.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

from .exceptions import ConfigError, DuplicateDepositKey, UndecodableEvent
from .ingest import ChainEvent, EventKind
from .models import PairKey, PairKeyKind, TxRef

logger = logging.getLogger(__name__)

# External map entries name a deposit by (chain, deposit tx hash)
ExternalMap = Mapping[str, Tuple[str, str]]


class PairOutcomeKind(Enum):
    """Result of looking a withdrawal's handle up"""
    MATCHED = "matched"
    NO_DEPOSIT = "no_deposit"
    UNPAIRABLE = "unpairable"
    DEPOSIT_UNDECODABLE = "deposit_undecodable"


@dataclass(frozen=True)
class PairOutcome:
    kind: PairOutcomeKind
    deposit: Optional[ChainEvent] = None
    handle: Optional[PairKey] = None
    broken_deposit: Optional[UndecodableEvent] = None

    @property
    def matched(self) -> bool:
        return self.kind == PairOutcomeKind.MATCHED


class DepositLookup(Protocol):
    """What pair_withdrawal needs; the live store implements it too"""
    strategies: Tuple[str, ...]

    def has_external(self, key: str) -> bool: ...

    def lookup(self, key: PairKey) -> Optional[ChainEvent]: ...

    def lookup_undecodable(self, key: PairKey) -> Optional[UndecodableEvent]: ...


def placeholder_handles(placeholder: UndecodableEvent) -> List[PairKey]:
    """Handles an undecodable deposit still exposes: its id when readable, its tx hash"""
    if placeholder.ref is None:
        return []
    handles = [PairKey.by_deposit_hash(placeholder.ref.tx_hash)]
    if placeholder.deposit_id is not None and placeholder.bridge_id:
        handles.insert(0, PairKey.by_id(placeholder.bridge_id, placeholder.deposit_id))
    return handles


@dataclass
class DepositIndex:
    """Pairing handles of one bridge's deposits; immutable once built"""
    bridge_id: Optional[str] = None
    by_id: Dict[PairKey, TxRef] = field(default_factory=dict)
    by_hash: Dict[PairKey, TxRef] = field(default_factory=dict)
    external: Dict[str, TxRef] = field(default_factory=dict)
    deposits: Dict[TxRef, ChainEvent] = field(default_factory=dict)
    undecodable: Dict[PairKey, UndecodableEvent] = field(default_factory=dict)
    strategies: Tuple[str, ...] = ("id", "hash", "external")

    def __len__(self) -> int:
        return len(self.by_id) + len(self.by_hash) + len(self.external)

    def has_external(self, key: str) -> bool:
        return key in self.external or PairKey.external(key) in self.undecodable

    def lookup(self, key: PairKey) -> Optional[ChainEvent]:
        if key.kind == PairKeyKind.BY_ID:
            ref = self.by_id.get(key)
        elif key.kind == PairKeyKind.BY_DEPOSIT_HASH:
            ref = self.by_hash.get(key)
        else:
            ref = self.external.get(key.external_key or "")
        return self.deposits.get(ref) if ref is not None else None

    def lookup_undecodable(self, key: PairKey) -> Optional[UndecodableEvent]:
        return self.undecodable.get(key)


def load_external_map(path: Union[str, Path]) -> Dict[str, Tuple[str, str]]:
    """Read `{"key", "deposit_tx", "chain"}` lines into key -> (chain, tx hash)"""
    mapping: Dict[str, Tuple[str, str]] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                entry = json.loads(line)
                key, tx, chain = entry["key"], entry["deposit_tx"], entry["chain"]
                if key in mapping and mapping[key] != (chain, tx.lower()):
                    raise ConfigError(f"{path}:{line_no}: external key {key!r} mapped twice")
                mapping[key] = (chain, tx.lower())
    except OSError as e:
        raise ConfigError(f"cannot read external map {path}: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        raise ConfigError(f"invalid external map {path}: {e}") from e
    logger.info(f"Loaded {len(mapping)} external pairing entries from {path}")
    return mapping


def build_index(
    deposits: Sequence[ChainEvent],
    external_map: Optional[ExternalMap] = None,
    strategies: Sequence[str] = ("id", "hash", "external"),
    undecodable: Sequence[UndecodableEvent] = (),
) -> DepositIndex:
    """
    Index every pairing handle the deposits expose.

    ById when a deposit_id is present; ByDepositHash always. Two deposits in
    one transaction alias on the hash handle: the lowest log_index keeps it.
    Undecodable deposit placeholders are indexed separately under whatever
    handles they still expose; a decoded deposit always takes precedence.

    Raises:
        DuplicateDepositKey: two deposits share a deposit id
    """
    ordered = sorted(deposits, key=lambda event: (event.ref.chain.name, event.ref.tx_hash, event.ref.log_index))
    bridge_ids = {event.bridge_id for event in ordered}
    index = DepositIndex(
        bridge_id=next(iter(bridge_ids)) if len(bridge_ids) == 1 else None,
        strategies=tuple(strategies),
    )
    by_tx: Dict[Tuple[str, str], TxRef] = {}

    for event in ordered:
        if event.kind != EventKind.DEPOSIT:
            raise ValueError(f"build_index expects deposits only, got {event.kind.value} {event.ref}")
        index.deposits[event.ref] = event
        body = event.deposit

        if body.deposit_id is not None:
            key = PairKey.by_id(event.bridge_id, body.deposit_id)
            first = index.by_id.get(key)
            if first is not None and first != event.ref:
                raise DuplicateDepositKey(key, first, event.ref)
            index.by_id[key] = event.ref

        hash_key = PairKey.by_deposit_hash(event.ref.tx_hash)
        first = index.by_hash.get(hash_key)
        if first is None:
            index.by_hash[hash_key] = event.ref
        elif first != event.ref:
            logger.warning(f"Deposit hash {event.ref.tx_hash} aliases {first} and {event.ref}; keeping {first}")
        by_tx.setdefault((event.ref.chain.name, event.ref.tx_hash), event.ref)

    broken_by_tx: Dict[Tuple[str, str], UndecodableEvent] = {}
    for placeholder in sorted(
        (item for item in undecodable if item.ref is not None),
        key=lambda item: (item.ref.chain.name, item.ref.tx_hash, item.ref.log_index),
    ):
        for handle in placeholder_handles(placeholder):
            index.undecodable.setdefault(handle, placeholder)
        broken_by_tx.setdefault((placeholder.ref.chain.name, placeholder.ref.tx_hash), placeholder)

    for key, (chain, tx_hash) in (external_map or {}).items():
        ref = by_tx.get((chain, tx_hash.lower()))
        if ref is None:
            broken = broken_by_tx.get((chain, tx_hash.lower()))
            if broken is not None:
                index.undecodable.setdefault(PairKey.external(key), broken)
            else:
                logger.debug(f"External key {key} names unknown deposit {chain}:{tx_hash}")
            continue
        index.external[key] = ref

    logger.debug(f"Built deposit index: {len(index.deposits)} deposits, {len(index)} handles")
    return index


def pair_withdrawal(w: ChainEvent, index: DepositLookup) -> PairOutcome:
    """
    Match a withdrawal to its backing deposit.

    Matched when the handle resolves, DepositUndecodable when it names a
    deposit that could not be decoded, NoDeposit when a handle is present but
    names nothing (sentinel hashes included), Unpairable when no handle exists
    or the handle's strategy is disabled for the bridge. A withdrawal without
    pair_by is looked up in the external map under its own tx hash.
    """
    if w.kind != EventKind.WITHDRAWAL:
        raise ValueError(f"pair_withdrawal expects a withdrawal, got {w.kind.value} {w.ref}")

    handle = w.withdrawal.pair_ref
    if handle is None:
        if "external" in index.strategies and index.has_external(w.ref.tx_hash):
            handle = PairKey.external(w.ref.tx_hash)
        else:
            return PairOutcome(PairOutcomeKind.UNPAIRABLE)

    strategy = {"id": "id", "hash": "hash", "ext": "external"}[handle.kind.value]
    if strategy not in index.strategies:
        return PairOutcome(PairOutcomeKind.UNPAIRABLE, handle=handle)

    deposit = index.lookup(handle)
    if deposit is None:
        broken = index.lookup_undecodable(handle)
        if broken is not None and broken.bridge_id == w.bridge_id:
            return PairOutcome(PairOutcomeKind.DEPOSIT_UNDECODABLE, handle=handle, broken_deposit=broken)
        return PairOutcome(PairOutcomeKind.NO_DEPOSIT, handle=handle)
    if deposit.bridge_id != w.bridge_id:
        return PairOutcome(PairOutcomeKind.NO_DEPOSIT, handle=handle)
    return PairOutcome(PairOutcomeKind.MATCHED, deposit=deposit, handle=handle)


def pair_all(withdrawals: Iterable[ChainEvent], index: DepositIndex) -> List[PairOutcome]:
    return [pair_withdrawal(w, index) for w in withdrawals]
