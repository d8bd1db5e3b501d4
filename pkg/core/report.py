"""
Category report: maps mechanical findings to the operator-facing labels
New / Test / Error / Suspicious and tallies them per bridge.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Union

from rich.console import Console
from rich.table import Table

from .audit_engine import Finding, FindingCategory
from .config import ReportRules
from .exceptions import ParseError

logger = logging.getLogger(__name__)

LABELS = ("New", "Test", "Error", "Suspicious")

DEFAULT_LABELS: Dict[FindingCategory, str] = {
    FindingCategory.UNBACKED_WITHDRAWAL: "New",
    FindingCategory.DOUBLE_SPEND: "New",
    FindingCategory.AMOUNT_EXCEEDS_INFLOW: "New",
    FindingCategory.TOKEN_MISMATCH: "New",
    FindingCategory.AMOUNT_BELOW_EXPECTED: "New",
    FindingCategory.TEST_TOKEN: "Test",
    FindingCategory.DESTINATION_MISMATCH: "Error",
    FindingCategory.ZERO_WITHDRAWAL: "Error",
    FindingCategory.MISSING_RECIPIENT: "Error",
    FindingCategory.UNPAIRABLE: "Error",
    FindingCategory.UNDECODABLE: "Error",
}


@dataclass
class BridgeReportRow:
    bridge: str
    analyzed: int = 0
    reported: int = 0
    labels: Dict[str, int] = field(default_factory=lambda: {label: 0 for label in LABELS})

    def to_dict(self) -> Dict[str, object]:
        return {"bridge": self.bridge, "analyzed": self.analyzed, "reported": self.reported, **self.labels}


def label_for(finding: Finding, rules: ReportRules) -> Optional[str]:
    """Report label of a finding; Balanced findings have none unless suspicious"""
    if finding.recipient and finding.recipient.lower() in rules.suspicious_addresses:
        return "Suspicious"
    override = rules.category_labels.get(finding.category.value)
    if override is not None:
        return override
    return DEFAULT_LABELS.get(finding.category)


def build_report(findings: Iterable[Finding], rules: Optional[ReportRules] = None) -> List[BridgeReportRow]:
    rules = rules or ReportRules()
    reported = set(rules.reported_txs)
    rows: Dict[str, BridgeReportRow] = {}
    for finding in findings:
        row = rows.setdefault(finding.bridge, BridgeReportRow(finding.bridge))
        row.analyzed += 1
        if finding.withdrawal.tx_hash.lower() in reported:
            row.reported += 1
        label = label_for(finding, rules)
        if label is not None:
            row.labels[label] += 1
    return [rows[bridge] for bridge in sorted(rows)]


def iter_findings(path: Union[str, Path]) -> Iterator[Finding]:
    """
    Read a findings NDJSON file.

    Raises:
        ParseError: malformed line or unknown category
    """
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield Finding.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(line_no, f"bad finding: {e}") from e


def render_report_table(rows: List[BridgeReportRow], console: Optional[Console] = None) -> Table:
    table = Table(title="Bridge transactions by label")
    table.add_column("Bridge", style="cyan")
    for column in ("Analyzed", "Reported") + LABELS:
        table.add_column(column, justify="right")
    totals = BridgeReportRow("Total")
    for row in rows:
        table.add_row(row.bridge, str(row.analyzed), str(row.reported), *(str(row.labels[label]) for label in LABELS))
        totals.analyzed += row.analyzed
        totals.reported += row.reported
        for label in LABELS:
            totals.labels[label] += row.labels[label]
    table.add_row(
        "Total", str(totals.analyzed), str(totals.reported),
        *(str(totals.labels[label]) for label in LABELS), style="bold",
    )
    (console or Console()).print(table)
    return table
