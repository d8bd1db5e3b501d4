#!/usr/bin/env python3
"""
Announce-then-execute walkthrough

Plays the three attacks a compromised relayer can mount against a
lock-and-mint bridge, first against the unmodified one-step withdrawal and
then against announce-then-execute with an auditing approver, and finishes
with the 100-pair correctness experiment over several seeds.
"""

import argparse
import sys
from pathlib import Path

from rich.console import Console
from rich.table import Table

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).parent.parent))

from core.ate_protocol import (  # noqa: E402
    AuditingApprover,
    SimBridge,
    TicketState,
    WithdrawalReceipt,
    render_experiment_table,
    run_correctness_experiment,
)
from core.logging_config import configure_logging  # noqa: E402

console = Console()
FORGED = "00" * 32
ALICE = "0x" + "a1" * 20
MALLORY = "0x" + "ee" * 20


def attack_receipts(bridge: SimBridge):
    """One honest withdrawal followed by the three forged ones"""
    honest = bridge.deposit(ALICE, 5_000)
    victim_id = honest.deposit.deposit_id
    yield "honest withdrawal", bridge.sign(victim_id, 5_000, ALICE)

    own = bridge.deposit(MALLORY, 1_000)
    yield "over-withdraw", WithdrawalReceipt(own.deposit.deposit_id, 1_000_000, MALLORY, FORGED)
    yield "unbacked", WithdrawalReceipt(999_999, 120_000, MALLORY, FORGED)
    yield "double-spend", WithdrawalReceipt(victim_id, 5_000, MALLORY, FORGED)


def compare_protocols() -> None:
    direct = SimBridge(checks_enabled=False)
    ate = SimBridge(checks_enabled=False)
    approver = AuditingApprover()

    table = Table(title="Compromised relayer: one-step vs announce-then-execute")
    table.add_column("Withdrawal", style="cyan")
    table.add_column("One-step")
    table.add_column("Announce-then-execute")
    table.add_column("Reason")

    for (label, receipt), (_, ate_receipt) in zip(attack_receipts(direct), attack_receipts(ate)):
        released = direct.withdraw_direct(receipt)
        ticket = ate.announce_withdraw(ate_receipt)
        if ticket.state == TicketState.ANNOUNCED:
            ate.approve_withdraw(ticket, approver)
        table.add_row(
            label,
            "💸 released" if released else "blocked",
            "✅ executed" if ticket.state == TicketState.EXECUTED else "🚨 rejected",
            ticket.reason.category.value if ticket.reason and ticket.state == TicketState.REJECTED else "",
        )
    console.print(table)
    console.print(
        f"One-step bridge: minted {direct.minted} against {direct.locked} locked "
        f"({'❌ undercollateralized' if direct.minted > direct.locked else '✅ collateralized'})"
    )
    console.print(
        f"Announce-then-execute: minted {ate.minted} against {ate.locked} locked "
        f"({'❌ undercollateralized' if ate.minted > ate.locked else '✅ collateralized'})"
    )


def main() -> int:
    parser = argparse.ArgumentParser(description="Announce-then-execute walkthrough")
    parser.add_argument("--seeds", type=int, default=10, help="Seeds for the correctness experiment")
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args()
    configure_logging(args.log_level)

    console.print("\n🏛️  [bold]Announce-then-execute[/bold]\n")
    compare_protocols()

    console.print("\n[bold]Correctness experiment[/bold] (100 pairs, 3 malicious at random positions)\n")
    reports = [run_correctness_experiment(seed)[0] for seed in range(args.seeds)]
    render_experiment_table(reports, console)
    same = all(report.outcome_multiset() == reports[0].outcome_multiset() for report in reports)
    console.print(f"Outcome independent of malicious positions: {'✅' if same else '❌'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
