"""
Embedded two-tier audit store.

A directory holding `hot.log`, `cold.log` and `checkpoint.json`. Both logs
are append-only sequences of length-prefixed JSON StoreRecords; the last
record for a key wins and a tombstone (payload null) deletes it. Records
older than the hot window migrate to the cold log. Opening the store
replays both logs, drops a torn trailing record and resolves keys found in
both tiers: a crash mid-eviction keeps the cold copy, a crash mid-overwrite
keeps the newer hot one.
"""

import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from core.audit_engine import Finding, Resolution, ledger_digest
from core.exceptions import AmountUnresolvable, ParseError, StoreError, UndecodableEvent
from core.ingest import ChainEvent, EventKind, ResolvedAmount, event_to_record, parse_record
from core.models import ChainId, PairKey, TxRef
from core.pairing import placeholder_handles

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">I")

DEPOSIT = "deposit:"
INFLOW = "inflow:"
PAIRKEY = "pairkey:"
BROKEN = "undecodable:"
REDEEMED = "redeemed:"
FINDING = "finding:"
ALERT = "alert:"
TOKEN = "token:"


class Tier(Enum):
    HOT = "hot"
    COLD = "cold"


@dataclass(frozen=True)
class StoreRecord:
    key: str
    payload: Optional[Dict[str, Any]]
    tier: Tier
    written_at: int

    @property
    def is_tombstone(self) -> bool:
        return self.payload is None

    def encode(self) -> bytes:
        body = json.dumps(
            {"key": self.key, "payload": self.payload, "tier": self.tier.value, "written_at": self.written_at},
            separators=(",", ":"),
            sort_keys=True,
        ).encode("utf-8")
        return HEADER.pack(len(body)) + body

    @classmethod
    def decode(cls, body: bytes) -> "StoreRecord":
        data = json.loads(body.decode("utf-8"))
        return cls(data["key"], data["payload"], Tier(data["tier"]), int(data["written_at"]))


@dataclass
class Checkpoint:
    """Progress marker written atomically after each audit batch"""
    chains: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    ledger_digest: str = ""
    horizon: Optional[int] = None
    next_batch_id: int = 1
    deferred: List[Dict[str, Any]] = field(default_factory=list)
    pending_alerts: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "chains": {name: {"block": block, "block_time": block_time}
                       for name, (block, block_time) in sorted(self.chains.items())},
            "ledger_digest": self.ledger_digest,
            "horizon": self.horizon,
            "next_batch_id": self.next_batch_id,
            "deferred": self.deferred,
            "pending_alerts": self.pending_alerts,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Checkpoint":
        return cls(
            chains={name: (int(entry["block"]), int(entry["block_time"]))
                    for name, entry in data.get("chains", {}).items()},
            ledger_digest=data.get("ledger_digest", ""),
            horizon=data.get("horizon"),
            next_batch_id=int(data.get("next_batch_id", 1)),
            deferred=list(data.get("deferred", [])),
            pending_alerts=list(data.get("pending_alerts", [])),
        )


def resolution_to_dict(resolution: Resolution) -> Dict[str, Any]:
    if isinstance(resolution, AmountUnresolvable):
        return {"unresolved": resolution.reason}
    return resolution.to_dict()


def resolution_from_dict(data: Mapping[str, Any]) -> Resolution:
    if "unresolved" in data:
        return AmountUnresolvable(data["unresolved"])
    return ResolvedAmount.from_dict(dict(data))


def event_from_record(record: Mapping[str, Any]) -> ChainEvent:
    try:
        return parse_record(dict(record), ChainId(record["chain"]))
    except (ParseError, KeyError) as e:
        raise StoreError(f"stored event is corrupt: {e}") from e


def _pairkey_name(key: PairKey) -> str:
    return PAIRKEY + key.describe()


class AuditStore:
    """
    File-backed deposit, redemption, finding and alert store for live mode.

    Single logical writer; readers may run concurrently. mark_redeemed is an
    atomic compare-and-set made durable (fsync) before it returns.
    """

    def __init__(self, directory: Union[str, Path], fsync: bool = True):
        self.directory = Path(directory)
        self.fsync = fsync
        self.hot_path = self.directory / "hot.log"
        self.cold_path = self.directory / "cold.log"
        self.checkpoint_path = self.directory / "checkpoint.json"
        self._hot: Dict[str, StoreRecord] = {}
        self._cold: Dict[str, StoreRecord] = {}
        self._lock = threading.RLock()
        self.logger = logging.getLogger(self.__class__.__name__)
        self._open()

    # ------------------------------------------------------------------
    # Log plumbing
    # ------------------------------------------------------------------

    def _open(self) -> None:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._cold = self._replay(self.cold_path, Tier.COLD)
            self._hot = self._replay(self.hot_path, Tier.HOT)
        except OSError as e:
            raise StoreError(f"cannot open store at {self.directory}: {e}") from e

        both = sorted(set(self._hot) & set(self._cold))
        if both:
            # Eviction copies keep written_at, so cold wins ties; a newer hot record is an interrupted overwrite
            newer_hot = [key for key in both if self._hot[key].written_at > self._cold[key].written_at]
            evicted = [key for key in both if key not in newer_hot]
            self.logger.warning(
                f"Recovering {len(both)} keys found in both tiers: "
                f"{len(evicted)} interrupted evictions, {len(newer_hot)} interrupted overwrites"
            )
            if newer_hot:
                self._append(
                    self.cold_path,
                    [StoreRecord(key, None, Tier.COLD, self._hot[key].written_at) for key in newer_hot],
                    sync=True,
                )
                for key in newer_hot:
                    del self._cold[key]
            if evicted:
                for key in evicted:
                    del self._hot[key]
                self._rewrite_hot(list(self._hot.values()))
        self.logger.info(f"Store opened at {self.directory}: {len(self._hot)} hot, {len(self._cold)} cold records")

    def _replay(self, path: Path, tier: Tier) -> Dict[str, StoreRecord]:
        records: Dict[str, StoreRecord] = {}
        if not path.exists():
            path.touch()
            return records
        valid_bytes = 0
        with open(path, "rb") as handle:
            data = handle.read()
        offset = 0
        while offset + HEADER.size <= len(data):
            (length,) = HEADER.unpack_from(data, offset)
            end = offset + HEADER.size + length
            if end > len(data):
                break
            try:
                record = StoreRecord.decode(data[offset + HEADER.size:end])
            except (json.JSONDecodeError, UnicodeDecodeError, KeyError, ValueError) as e:
                raise StoreError(f"{path}: corrupt record at byte {offset}: {e}") from e
            if record.is_tombstone:
                records.pop(record.key, None)
            else:
                records[record.key] = record
            offset = end
            valid_bytes = end
        if valid_bytes < len(data):
            self.logger.warning(f"{path}: dropping torn trailing record ({len(data) - valid_bytes} bytes)")
            with open(path, "r+b") as handle:
                handle.truncate(valid_bytes)
        return records

    def _append(self, path: Path, records: Iterable[StoreRecord], sync: bool) -> None:
        payload = b"".join(record.encode() for record in records)
        if not payload:
            return
        try:
            with open(path, "ab") as handle:
                handle.write(payload)
                handle.flush()
                if sync and self.fsync:
                    os.fsync(handle.fileno())
        except OSError as e:
            raise StoreError(f"write to {path} failed: {e}") from e

    def _rewrite_hot(self, records: List[StoreRecord]) -> None:
        tmp = self.hot_path.with_suffix(".log.tmp")
        try:
            with open(tmp, "wb") as handle:
                handle.write(b"".join(record.encode() for record in records))
                handle.flush()
                if self.fsync:
                    os.fsync(handle.fileno())
            os.replace(tmp, self.hot_path)
        except OSError as e:
            raise StoreError(f"rewrite of {self.hot_path} failed: {e}") from e

    # ------------------------------------------------------------------
    # Generic key access
    # ------------------------------------------------------------------

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        """Hot tier first, then cold"""
        with self._lock:
            record = self._hot.get(key) or self._cold.get(key)
            return record.payload if record else None

    def tier_of(self, key: str) -> Optional[Tier]:
        with self._lock:
            if key in self._hot:
                return Tier.HOT
            if key in self._cold:
                return Tier.COLD
            return None

    def put(self, key: str, payload: Dict[str, Any], now: int, sync: bool = False) -> None:
        """
        Write into the hot tier, then tombstone any cold copy.

        A crash between the two writes leaves the key in both tiers with the
        hot copy newer; recovery keeps it.
        """
        with self._lock:
            record = StoreRecord(key, payload, Tier.HOT, now)
            self._append(self.hot_path, [record], sync or key in self._cold)
            self._hot[key] = record
            if key in self._cold:
                self._append(self.cold_path, [StoreRecord(key, None, Tier.COLD, now)], sync=True)
                del self._cold[key]

    def delete(self, key: str, now: int) -> bool:
        with self._lock:
            for tier, path, records in ((Tier.HOT, self.hot_path, self._hot), (Tier.COLD, self.cold_path, self._cold)):
                if key in records:
                    self._append(path, [StoreRecord(key, None, tier, now)], sync=False)
                    del records[key]
                    return True
            return False

    def keys(self, prefix: str = "") -> List[str]:
        with self._lock:
            return sorted(key for key in set(self._hot) | set(self._cold) if key.startswith(prefix))

    def __len__(self) -> int:
        with self._lock:
            return len(self._hot) + len(self._cold)

    # ------------------------------------------------------------------
    # Deposits
    # ------------------------------------------------------------------

    def put_deposit(self, deposit: ChainEvent, inflow: Resolution, now: int) -> None:
        """Store a deposit, its resolved inflow and its pairing handles"""
        if deposit.kind != EventKind.DEPOSIT:
            raise ValueError(f"put_deposit expects a deposit, got {deposit.kind.value}")
        ref_key = deposit.ref.key()
        with self._lock:
            self.put(DEPOSIT + ref_key, {"event": event_to_record(deposit)}, now)
            self.put(INFLOW + ref_key, resolution_to_dict(inflow), now)

            handles = [PairKey.by_deposit_hash(deposit.ref.tx_hash)]
            if deposit.deposit.deposit_id is not None:
                handles.insert(0, PairKey.by_id(deposit.bridge_id, deposit.deposit.deposit_id))
            for handle in handles:
                name = _pairkey_name(handle)
                existing = self.get(name)
                if existing is None:
                    self.put(name, {"ref": deposit.ref.to_dict()}, now)
                elif TxRef.from_dict(existing["ref"]) != deposit.ref:
                    self.logger.warning(
                        f"Handle {handle} already names {TxRef.from_dict(existing['ref'])}; ignoring {deposit.ref}",
                        extra={"bridge": deposit.bridge_id},
                    )

    def get_deposit(self, ref: TxRef) -> Optional[ChainEvent]:
        payload = self.get(DEPOSIT + ref.key())
        return event_from_record(payload["event"]) if payload else None

    def get_inflow(self, ref: TxRef) -> Resolution:
        payload = self.get(INFLOW + ref.key())
        if payload is None:
            return AmountUnresolvable(f"no stored inflow for {ref}")
        return resolution_from_dict(payload)

    def put_undecodable_deposit(self, placeholder: UndecodableEvent, now: int) -> None:
        """Keep an undecodable deposit findable under the handles it still exposes"""
        if placeholder.ref is None:
            return
        payload = {
            "ref": placeholder.ref.to_dict(),
            "bridge": placeholder.bridge_id,
            "block": placeholder.block,
            "block_time": placeholder.block_time,
            "reason": placeholder.reason,
        }
        with self._lock:
            for handle in placeholder_handles(placeholder):
                if self.get(BROKEN + handle.describe()) is None:
                    self.put(BROKEN + handle.describe(), payload, now)

    def lookup_undecodable(self, key: PairKey) -> Optional[UndecodableEvent]:
        payload = self.get(BROKEN + key.describe())
        if payload is None:
            return None
        return UndecodableEvent(
            0, payload["reason"], TxRef.from_dict(payload["ref"]), EventKind.DEPOSIT.value,
            payload["bridge"], int(payload["block"]), int(payload["block_time"]),
        )

    def register_external(self, mapping: Mapping[str, Tuple[str, str]], now: int) -> int:
        """Attach external-map keys to stored deposits; returns how many resolved"""
        resolved = 0
        for key, (chain, tx_hash) in mapping.items():
            by_hash = PairKey.by_deposit_hash(tx_hash)
            hit = self.get(_pairkey_name(by_hash))
            if hit is not None and hit["ref"]["chain"] == chain:
                self.put(_pairkey_name(PairKey.external(key)), hit, now)
                resolved += 1
                continue
            broken = self.get(BROKEN + by_hash.describe())
            if broken is not None and broken["ref"]["chain"] == chain:
                self.put(BROKEN + PairKey.external(key).describe(), broken, now)
                resolved += 1
        return resolved

    def has_external(self, key: str) -> bool:
        handle = PairKey.external(key)
        return self.get(_pairkey_name(handle)) is not None or self.get(BROKEN + handle.describe()) is not None

    def lookup(self, key: PairKey) -> Optional[ChainEvent]:
        hit = self.get(_pairkey_name(key))
        return self.get_deposit(TxRef.from_dict(hit["ref"])) if hit else None

    def view(self, strategies: Iterable[str]) -> "StoreDepositView":
        return StoreDepositView(self, tuple(strategies))

    # ------------------------------------------------------------------
    # Redemption ledger
    # ------------------------------------------------------------------

    def redeemer(self, deposit: TxRef) -> Optional[TxRef]:
        payload = self.get(REDEEMED + deposit.key())
        return TxRef.from_dict(payload["withdrawal"]) if payload else None

    def mark_redeemed(self, deposit: TxRef, withdrawal: TxRef, now: int) -> Optional[TxRef]:
        """
        Compare-and-set the first redeemer of a deposit.

        Returns None when this call recorded the redemption, otherwise the
        prior redeemer (which equals `withdrawal` on an idempotent replay).
        """
        with self._lock:
            prior = self.redeemer(deposit)
            if prior is not None:
                return prior
            self.put(REDEEMED + deposit.key(), {"withdrawal": withdrawal.to_dict()}, now, sync=True)
            return None

    def ledger_entries(self) -> List[Tuple[TxRef, TxRef]]:
        entries = []
        for key in self.keys(REDEEMED):
            payload = self.get(key)
            if payload:
                entries.append((TxRef.from_key(key[len(REDEEMED):]), TxRef.from_dict(payload["withdrawal"])))
        return entries

    def ledger_digest(self) -> str:
        return ledger_digest(self.ledger_entries())

    # ------------------------------------------------------------------
    # Findings, alerts, tokens
    # ------------------------------------------------------------------

    def put_finding(self, finding: Finding, now: int) -> None:
        self.put(FINDING + finding.finding_id, finding.to_dict(), now)

    def get_finding(self, withdrawal: TxRef) -> Optional[Finding]:
        payload = self.get(FINDING + withdrawal.key())
        return Finding.from_dict(payload) if payload else None

    def findings(self) -> List[Finding]:
        return [Finding.from_dict(self.get(key) or {}) for key in self.keys(FINDING)]

    def alert_sent(self, alert_key: str) -> bool:
        return self.get(ALERT + alert_key) is not None

    def record_alert(self, alert_key: str, batch_id: int, now: int) -> None:
        self.put(ALERT + alert_key, {"batch_id": batch_id, "emitted_at": now}, now, sync=True)

    def token_seen(self, token_key: str) -> bool:
        return self.get(TOKEN + token_key) is not None

    def register_token(self, token_key: str, now: int) -> None:
        if not self.token_seen(token_key):
            self.put(TOKEN + token_key, {"first_seen": now}, now)

    # ------------------------------------------------------------------
    # Tiering and checkpoints
    # ------------------------------------------------------------------

    def evict_to_cold(self, now: int, hot_window: int) -> int:
        """
        Move hot records written before now - hot_window to the cold log.

        Cold copies are appended and synced before the hot log is replaced,
        so a crash in between leaves duplicates that recovery resolves.
        """
        if hot_window <= 0:
            raise ValueError(f"hot_window must be > 0, got {hot_window}")
        cutoff = now - hot_window
        with self._lock:
            stale = [record for record in self._hot.values() if record.written_at < cutoff]
            if not stale:
                return 0
            moved = [StoreRecord(record.key, record.payload, Tier.COLD, record.written_at) for record in stale]
            self._append(self.cold_path, moved, sync=True)
            for record in moved:
                self._cold[record.key] = record
                del self._hot[record.key]
            self._rewrite_hot(list(self._hot.values()))
        self.logger.info(f"Evicted {len(moved)} records older than {cutoff} to cold storage")
        return len(moved)

    def load_checkpoint(self) -> Optional[Checkpoint]:
        if not self.checkpoint_path.exists():
            return None
        try:
            return Checkpoint.from_dict(json.loads(self.checkpoint_path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise StoreError(f"unreadable checkpoint {self.checkpoint_path}: {e}") from e

    def save_checkpoint(self, checkpoint: Checkpoint) -> None:
        """Whole-file atomic replace"""
        tmp = self.checkpoint_path.with_suffix(".json.tmp")
        try:
            with open(tmp, "w", encoding="utf-8") as handle:
                json.dump(checkpoint.to_dict(), handle, sort_keys=True)
                handle.flush()
                if self.fsync:
                    os.fsync(handle.fileno())
            os.replace(tmp, self.checkpoint_path)
        except OSError as e:
            raise StoreError(f"checkpoint write failed: {e}") from e

    def close(self) -> None:
        self.logger.debug(f"Store at {self.directory} closed")

    def __enter__(self) -> "AuditStore":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


@dataclass
class StoreDepositView:
    """A store seen through one bridge's pairing strategies"""
    store: AuditStore
    strategies: Tuple[str, ...]

    def has_external(self, key: str) -> bool:
        return self.store.has_external(key)

    def lookup(self, key: PairKey) -> Optional[ChainEvent]:
        return self.store.lookup(key)

    def lookup_undecodable(self, key: PairKey) -> Optional[UndecodableEvent]:
        return self.store.lookup_undecodable(key)


@dataclass
class StoreLedgerView:
    """The store's redemption records stamped with the current poll time"""
    store: AuditStore
    now: int

    def redeemer(self, deposit: TxRef) -> Optional[TxRef]:
        return self.store.redeemer(deposit)

    def mark_redeemed(self, deposit: TxRef, withdrawal: TxRef) -> Optional[TxRef]:
        return self.store.mark_redeemed(deposit, withdrawal, self.now)
