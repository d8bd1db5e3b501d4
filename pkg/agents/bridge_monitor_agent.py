"""
Bridge Monitor Agent

Live auditing of cross-chain bridges. Each poll pulls newly finalized
events from every chain source, stores deposits, and audits only those
withdrawals whose block_time is covered by the sync horizon: the slowest
chain's finalized head. Later withdrawals wait in the checkpoint until the
horizon catches up. Violations are persisted before they are alerted, and
alerts are deduplicated through the store so restarts never repeat them.

Features:
- Finality-aware multi-chain synchronization
- Incremental auditing against the two-tier audit store
- Crash recovery from the last checkpoint
- Batched, deduplicated alerts to JSONL or webhook-outbox sinks
- Injected clock so every timing property runs in simulated time
"""

import asyncio
import logging
import time
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from core.audit_engine import BridgeAuditEngine, Finding, FindingCategory
from core.config import AuditConfig
from core.exceptions import UndecodableEvent
from core.ingest import ChainEvent, EventKind, event_to_record, index_transfers
from core.models import Amount, EventOrder
from integrations.audit_store import (
    AuditStore,
    Checkpoint,
    StoreLedgerView,
    event_from_record,
    resolution_from_dict,
    resolution_to_dict,
)
from agents.alert_sinks import Alert, AlertDispatcher, AlertKind
from integrations.chain_sources import ChainSource, SourceBatch

logger = logging.getLogger(__name__)


class AsyncContextAgent:
    """Async context manager base for long-running agents"""

    def __init__(self):
        self.is_initialized = False
        self.logger = logging.getLogger(self.__class__.__name__)

    async def initialize(self):
        await self._initialize()
        self.is_initialized = True
        return True

    async def _initialize(self):
        """Override in subclass"""
        pass

    async def cleanup(self):
        await self._cleanup()
        self.is_initialized = False

    async def _cleanup(self):
        """Override in subclass"""
        pass

    def is_ready(self):
        return self.is_initialized

    async def __aenter__(self):
        await self.initialize()
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        await self.cleanup()
        return False


class Clock(ABC):
    """Source of 'now' for the monitor; logic never reads the wall clock directly"""

    @abstractmethod
    def now(self) -> int:
        ...

    @abstractmethod
    async def sleep(self, seconds: int, stop: Optional[asyncio.Event] = None) -> None:
        ...


class SystemClock(Clock):
    def now(self) -> int:
        return int(time.time())

    async def sleep(self, seconds: int, stop: Optional[asyncio.Event] = None) -> None:
        if stop is None:
            await asyncio.sleep(seconds)
            return
        try:
            await asyncio.wait_for(stop.wait(), timeout=seconds)
        except asyncio.TimeoutError:
            pass


class SimulatedClock(Clock):
    """Time advances only when the monitor sleeps"""

    def __init__(self, start: int = 0):
        self.t = start

    def now(self) -> int:
        return self.t

    def advance(self, seconds: int) -> None:
        self.t += seconds

    async def sleep(self, seconds: int, stop: Optional[asyncio.Event] = None) -> None:
        self.t += seconds
        await asyncio.sleep(0)


@dataclass
class PollReport:
    events_seen: int = 0
    withdrawals_audited: int = 0
    alerts_emitted: int = 0
    deferred: int = 0
    horizon: Optional[int] = None
    batch_id: Optional[int] = None
    failed_sources: List[str] = field(default_factory=list)
    findings: List[Finding] = field(default_factory=list)
    alerts: List[Alert] = field(default_factory=list)


async def _fetch(source: ChainSource, now: int) -> Union[SourceBatch, Exception]:
    try:
        return await source.peek_finalized_batch(now)
    except Exception as e:
        logger.error(f"❌ Source {source.chain} failed, keeping its last head: {e}", extra={"chain": source.chain.name})
        return e


async def _deliver(
    alerts: List[Alert], store: AuditStore, sink: AlertDispatcher, now: int
) -> Optional[List[Alert]]:
    """Send alerts not yet recorded as sent; None when no sink accepted them"""
    fresh = [alert for alert in alerts if not store.alert_sent(alert.key)]
    if not fresh:
        return []
    if not await sink.dispatch(fresh):
        return None
    for alert in fresh:
        store.record_alert(alert.key, alert.batch_id, now)
    return fresh


async def poll_once(
    sources: Sequence[ChainSource],
    store: AuditStore,
    engine: BridgeAuditEngine,
    sink: AlertDispatcher,
    now: int,
    concurrent: Optional[bool] = None,
) -> PollReport:
    """
    One monitor round: ingest, audit up to the sync horizon, persist, alert.

    Sources are peeked and only committed once the checkpoint covering
    their batch is saved, so a round that fails anywhere before that is
    replayed in full by the next one. Replays are idempotent: deposits and
    findings are overwritten with equal values and a withdrawal that already
    redeemed its deposit finds itself as the redeemer.

    Alerts left undelivered by an earlier round (crash or sink failure) go
    out ahead of this round's and stay pending until a sink accepts them. A
    failing source contributes nothing this round and holds the horizon at
    its last finalized head.
    """
    report = PollReport()
    checkpoint = store.load_checkpoint() or Checkpoint()
    monitor_cfg = engine.config.monitor

    leftover = [Alert.from_state(state) for state in checkpoint.pending_alerts]

    for source in sources:
        saved = checkpoint.chains.get(source.chain.name)
        if saved is not None and source.position != saved:
            source.resume_from(*saved)

    if concurrent if concurrent is not None else monitor_cfg.concurrent_sources:
        results = await asyncio.gather(*(_fetch(source, now) for source in sources))
    else:
        results = [await _fetch(source, now) for source in sources]

    batch_events: List[ChainEvent] = []
    placeholders: List[UndecodableEvent] = []
    fetched: List[ChainSource] = []
    for source, result in zip(sources, results):
        if isinstance(result, Exception):
            report.failed_sources.append(source.chain.name)
            continue
        fetched.append(source)
        batch_events.extend(result.events)
        placeholders.extend(result.undecodable)
        checkpoint.chains[source.chain.name] = (result.head_block, result.head_time)
    report.events_seen = len(batch_events)

    # Ingest: deposits go straight to the store, withdrawals join the deferred queue
    batch_events.sort(key=ChainEvent.order)
    transfers = index_transfers(batch_events)
    for event in batch_events:
        if event.kind == EventKind.DEPOSIT:
            store.put_deposit(event, engine.resolve(event, transfers), now)
        elif event.kind == EventKind.WITHDRAWAL:
            checkpoint.deferred.append(
                {"event": event_to_record(event), "outflow": resolution_to_dict(engine.resolve(event, transfers))}
            )
    for placeholder in placeholders:
        if placeholder.kind == EventKind.DEPOSIT.value:
            store.put_undecodable_deposit(placeholder, now)

    heads = [checkpoint.chains.get(source.chain.name) for source in sources]
    if sources and all(head is not None for head in heads):
        candidate = min(head[1] for head in heads if head is not None)
        checkpoint.horizon = candidate if checkpoint.horizon is None else max(checkpoint.horizon, candidate)
    report.horizon = checkpoint.horizon

    # Audit everything the horizon now covers, in event order
    ready: List[Tuple[EventOrder, ChainEvent, Dict[str, Any]]] = []
    waiting: List[Dict[str, Any]] = []
    for entry in checkpoint.deferred:
        event = event_from_record(entry["event"])
        if checkpoint.horizon is not None and event.block_time <= checkpoint.horizon:
            ready.append((event.order(), event, entry))
        else:
            waiting.append(entry)
    ready.sort(key=lambda item: item[0])

    ledger = StoreLedgerView(store, now)
    declared = engine.config.declared_tokens()
    findings: List[Tuple[EventOrder, Finding]] = []
    unknown_tokens: List[Finding] = []
    new_tokens: List[str] = []
    for order, event, entry in ready:
        cfg = engine.bridge_config(event.bridge_id)
        finding = engine.audit_event(
            event, store.view(cfg.pairing_strategies), ledger, resolution_from_dict(entry["outflow"]),
            lambda deposit: store.get_inflow(deposit.ref),
        )
        findings.append((order, finding))
        token_key = finding.token or ""
        if token_key not in declared and token_key not in new_tokens and not store.token_seen(token_key):
            if monitor_cfg.alert_on_unknown_token:
                unknown_tokens.append(finding)
            new_tokens.append(token_key)

    for placeholder in placeholders:
        if placeholder.kind != EventKind.WITHDRAWAL.value or placeholder.ref is None:
            continue
        ref = placeholder.ref
        finding = Finding(
            category=FindingCategory.UNDECODABLE, withdrawal=ref, outflow=Amount(0),
            bridge=placeholder.bridge_id or "", block_time=placeholder.block_time, note=placeholder.reason,
        )
        findings.append((EventOrder(placeholder.block_time, ref.chain.name, placeholder.block,
                                    ref.log_index, ref.tx_hash), finding))
    findings.sort(key=lambda item: item[0])

    for _, finding in findings:
        store.put_finding(finding, now)
    report.findings = [finding for _, finding in findings]
    report.withdrawals_audited = len(report.findings)
    checkpoint.deferred = waiting
    report.deferred = len(waiting)

    # Persist, then alert
    batch_id = checkpoint.next_batch_id
    alerts: List[Alert] = []
    flagged_tokens = {finding.withdrawal for finding in unknown_tokens}
    for finding in report.findings:
        if finding.withdrawal in flagged_tokens:
            alerts.append(Alert(finding, batch_id, now, AlertKind.UNKNOWN_TOKEN))
        if finding.category.is_violation:
            alerts.append(Alert(finding, batch_id, now))
    pending_keys = {alert.key for alert in leftover}
    alerts = [alert for alert in alerts if alert.key not in pending_keys and not store.alert_sent(alert.key)]
    if alerts:
        checkpoint.next_batch_id += 1
        report.batch_id = batch_id
    outgoing = leftover + alerts
    checkpoint.pending_alerts = [alert.to_state() for alert in outgoing]
    checkpoint.ledger_digest = store.ledger_digest()
    store.save_checkpoint(checkpoint)
    for source in fetched:
        source.commit()
    for token_key in new_tokens:
        store.register_token(token_key, now)

    if outgoing:
        sent = await _deliver(outgoing, store, sink, now)
        if sent is None:
            logger.error(f"❌ {len(outgoing)} alerts undelivered, kept pending for the next poll")
        else:
            report.alerts = sent
            report.alerts_emitted = len(sent)
            checkpoint.pending_alerts = []
            store.save_checkpoint(checkpoint)

    store.evict_to_cold(now, monitor_cfg.hot_window)
    logger.info(
        f"Poll at {now}: {report.events_seen} events, {report.withdrawals_audited} audited, "
        f"{report.deferred} deferred, {report.alerts_emitted} alerts, horizon {report.horizon}"
    )
    return report


@dataclass
class MonitorRunSummary:
    polls: int = 0
    alerts: List[Alert] = field(default_factory=list)
    batches: List[int] = field(default_factory=list)
    errors: int = 0

    def alerts_by_category(self) -> Dict[str, int]:
        return dict(Counter(alert.finding.category.value for alert in self.alerts))

    @property
    def violation_alerts(self) -> int:
        return sum(1 for alert in self.alerts if alert.kind == AlertKind.VIOLATION)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "polls": self.polls,
            "alerts": len(self.alerts),
            "violation_alerts": self.violation_alerts,
            "batches": self.batches,
            "alerts_by_category": self.alerts_by_category(),
            "errors": self.errors,
        }


async def run_monitor(
    config: AuditConfig,
    sources: Sequence[ChainSource],
    store: AuditStore,
    sink: AlertDispatcher,
    stop: Optional[asyncio.Event] = None,
    clock: Optional[Clock] = None,
    max_polls: Optional[int] = None,
    engine: Optional[BridgeAuditEngine] = None,
) -> MonitorRunSummary:
    """
    Poll at the configured interval until `stop` is set or max_polls is reached.

    Errors inside a poll are logged and the loop carries on; the next poll
    retries from the last checkpoint.
    """
    stop = stop or asyncio.Event()
    clock = clock or SystemClock()
    engine = engine or BridgeAuditEngine(config)
    interval = config.monitor.poll_interval
    summary = MonitorRunSummary()

    while not stop.is_set() and (max_polls is None or summary.polls < max_polls):
        try:
            report = await poll_once(sources, store, engine, sink, clock.now())
            summary.alerts.extend(report.alerts)
            if report.batch_id is not None:
                summary.batches.append(report.batch_id)
        except Exception as e:
            summary.errors += 1
            logger.error(f"❌ Poll failed, retrying next interval: {e}")
        summary.polls += 1
        if stop.is_set() or (max_polls is not None and summary.polls >= max_polls):
            break
        await clock.sleep(interval, stop)

    logger.info(f"Monitor stopped after {summary.polls} polls, {len(summary.alerts)} alerts")
    return summary


class BridgeMonitorAgent(AsyncContextAgent):
    """
    Long-running bridge auditor

    Wraps run_monitor with store lifecycle, sink construction from config
    and a run summary.
    """

    def __init__(
        self,
        config: AuditConfig,
        sources: Sequence[ChainSource],
        state_dir: Union[str, Path],
        clock: Optional[Clock] = None,
        dispatcher: Optional[AlertDispatcher] = None,
        disabled_checks: Sequence[FindingCategory] = (),
    ):
        super().__init__()
        self.config = config
        self.sources = list(sources)
        self.state_dir = Path(state_dir)
        self.clock = clock or SystemClock()
        self.dispatcher = dispatcher
        self.engine = BridgeAuditEngine(config, disabled_checks)
        self.store: Optional[AuditStore] = None
        self._stop = asyncio.Event()

    async def _initialize(self):
        self.store = AuditStore(self.state_dir)
        if self.dispatcher is None:
            self.dispatcher = AlertDispatcher.from_config(self.config.monitor, self.state_dir)
        self.logger.info(
            f"Bridge monitor initialized for {len(self.sources)} chains, "
            f"{len(self.config.bridges)} bridges, poll every {self.config.monitor.poll_interval}s"
        )

    async def run(self, max_polls: Optional[int] = None) -> Dict[str, Any]:
        if not self.is_ready() or self.store is None or self.dispatcher is None:
            raise RuntimeError("Agent is not initialized")
        self._stop.clear()
        summary = await run_monitor(
            self.config, self.sources, self.store, self.dispatcher,
            stop=self._stop, clock=self.clock, max_polls=max_polls, engine=self.engine,
        )
        result = summary.to_dict()
        result["state_dir"] = str(self.state_dir)
        return result

    def stop(self) -> None:
        self._stop.set()

    async def _cleanup(self):
        if self.store is not None:
            self.store.close()
            self.store = None
