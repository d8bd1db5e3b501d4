"""
Alert records and delivery sinks for the bridge monitor.

Alerts raised in one poll share a batch id. The dispatcher fans a batch out
to every configured sink; a failing sink is logged and does not stop the
others. Real email or HTTP delivery is left to whatever drains the outbox.
"""

import json
import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Union

from core.audit_engine import Finding
from core.config import MonitorConfig

logger = logging.getLogger(__name__)


class AlertKind(Enum):
    VIOLATION = "violation"
    UNKNOWN_TOKEN = "unknown_token"


@dataclass(frozen=True)
class Alert:
    """A finding worth telling an operator about"""
    finding: Finding
    batch_id: int
    emitted_at: int
    kind: AlertKind = AlertKind.VIOLATION

    @property
    def key(self) -> str:
        """Dedup key: (withdrawal, category) for violations, the token for unseen tokens"""
        if self.kind == AlertKind.UNKNOWN_TOKEN:
            return f"unknown_token|{self.finding.token}"
        return self.finding.alert_key

    def to_record(self) -> Dict[str, Any]:
        finding = self.finding
        return {
            "alert_key": self.key,
            "batch_id": self.batch_id,
            "kind": self.kind.value,
            "category": finding.category.value,
            "bridge": finding.bridge,
            "withdrawal": finding.withdrawal.to_dict(),
            "deposit": finding.deposit.to_dict() if finding.deposit else None,
            "amounts": {
                "inflow": str(finding.inflow) if finding.inflow is not None else None,
                "outflow": str(finding.outflow),
                "max_allowed": str(finding.max_allowed) if finding.max_allowed is not None else None,
            },
            "token": finding.token,
            "note": finding.note,
            "block_time": finding.block_time,
            "emitted_at": self.emitted_at,
        }

    def to_state(self) -> Dict[str, Any]:
        """Form kept in the checkpoint until delivery is confirmed"""
        return {"finding": self.finding.to_dict(), "batch_id": self.batch_id,
                "emitted_at": self.emitted_at, "kind": self.kind.value}

    @classmethod
    def from_state(cls, data: Mapping[str, Any]) -> "Alert":
        return cls(Finding.from_dict(data["finding"]), int(data["batch_id"]),
                   int(data["emitted_at"]), AlertKind(data["kind"]))


class AlertSink(ABC):
    name = "sink"

    @abstractmethod
    async def emit(self, alerts: Sequence[Alert]) -> None:
        """Deliver one batch; raise on failure"""


class JsonlAlertSink(AlertSink):
    """
    One JSON alert record per line, appended to a file.

    Alerts whose key is already in the file are skipped, so a batch
    re-sent after a crash lands once.
    """
    name = "jsonl"

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._written: Optional[Set[str]] = None

    def written_keys(self) -> Set[str]:
        if self._written is None:
            self._written = {record["alert_key"] for record in self.read() if "alert_key" in record}
        return self._written

    async def emit(self, alerts: Sequence[Alert]) -> None:
        written = self.written_keys()
        fresh = [alert for alert in alerts if alert.key not in written]
        if not fresh:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as handle:
            for alert in fresh:
                handle.write(json.dumps(alert.to_record(), sort_keys=True) + "\n")
            handle.flush()
        written.update(alert.key for alert in fresh)

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with open(self.path, "r", encoding="utf-8") as handle:
            return [json.loads(line) for line in handle if line.strip()]


class WebhookOutboxSink(AlertSink):
    """Writes each batch as an HTTP-POST-shaped request file into an outbox directory"""
    name = "webhook"

    def __init__(self, directory: Union[str, Path], url: str):
        self.directory = Path(directory)
        self.url = url

    async def emit(self, alerts: Sequence[Alert]) -> None:
        if not alerts:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        batch_id = alerts[0].batch_id
        request = {
            "method": "POST",
            "url": self.url,
            "headers": {"Content-Type": "application/json"},
            "body": {"batch_id": batch_id, "alerts": [alert.to_record() for alert in alerts]},
        }
        target = self.directory / f"batch-{batch_id:06d}.json"
        tmp = target.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as handle:
            json.dump(request, handle, sort_keys=True, indent=2)
        os.replace(tmp, target)


class AlertDispatcher:
    """Multi-sink alert delivery"""

    def __init__(self, sinks: Sequence[AlertSink]):
        self.sinks = list(sinks)
        self.logger = logging.getLogger(self.__class__.__name__)

    @classmethod
    def from_config(cls, monitor: MonitorConfig, base_dir: Union[str, Path] = ".") -> "AlertDispatcher":
        base = Path(base_dir)
        if monitor.sink == "webhook":
            return cls([WebhookOutboxSink(base / "outbox", monitor.webhook_url)])
        return cls([JsonlAlertSink(base / monitor.sink_path)])

    async def dispatch(self, alerts: Sequence[Alert]) -> List[str]:
        """Send a batch to every sink; returns the names of sinks that accepted it"""
        delivered: List[str] = []
        if not alerts:
            return delivered
        for sink in self.sinks:
            try:
                await sink.emit(alerts)
                delivered.append(sink.name)
            except Exception as e:
                self.logger.error(f"Failed to deliver batch {alerts[0].batch_id} via {sink.name}: {e}")
        if delivered:
            self.logger.warning(
                f"🚨 Alert batch {alerts[0].batch_id}: {len(alerts)} alerts via {', '.join(delivered)}",
                extra={"batch_id": alerts[0].batch_id},
            )
        return delivered
