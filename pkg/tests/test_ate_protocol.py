"""
Announce-then-execute withdrawals on the simulated lock-and-mint bridge.
"""

import json

import pytest

from core.ate_protocol import (
    EXPECTED_REJECTIONS,
    AuditingApprover,
    NaiveApprover,
    SimBridge,
    TicketState,
    WithdrawalReceipt,
    WithdrawalTicket,
    run_correctness_experiment,
    write_transcript,
)
from core.audit_engine import FindingCategory
from core.exceptions import InvalidTransition

USER = "0x" + "a1" * 20
FORGED = "00" * 32


class TestTicketLifecycle:
    """State machine edges"""

    def test_illegal_transitions_raise(self):
        ticket = WithdrawalTicket(1, WithdrawalReceipt(0, 10, USER))
        with pytest.raises(InvalidTransition) as excinfo:
            ticket.transition(TicketState.EXECUTED)
        assert excinfo.value.ticket_id == 1
        ticket.transition(TicketState.REJECTED)
        with pytest.raises(InvalidTransition):
            ticket.transition(TicketState.APPROVED)
        assert ticket.history == [TicketState.ANNOUNCED, TicketState.REJECTED]

    def test_decided_ticket_cannot_be_approved_again(self):
        bridge = SimBridge()
        deposit = bridge.deposit(USER, 100)
        ticket = bridge.announce_withdraw(bridge.sign(deposit.deposit.deposit_id, 100, USER))
        bridge.approve_withdraw(ticket, AuditingApprover())
        assert ticket.state == TicketState.EXECUTED
        with pytest.raises(InvalidTransition):
            bridge.approve_withdraw(ticket, AuditingApprover())

    def test_announce_moves_no_funds(self):
        bridge = SimBridge()
        deposit = bridge.deposit(USER, 100)
        bridge.announce_withdraw(bridge.sign(deposit.deposit.deposit_id, 100, USER))
        assert bridge.minted == 0
        assert bridge.destination_events == []

    def test_malformed_receipt_is_rejected_at_announce(self):
        bridge = SimBridge()
        ticket = bridge.announce_withdraw(WithdrawalReceipt(None, 5, USER))
        assert ticket.state == TicketState.REJECTED
        assert ticket.reason.category == FindingCategory.UNDECODABLE


class TestAuditingApprover:
    """Rejections follow the audit engine"""

    def test_rejected_ticket_leaves_the_deposit_redeemable(self):
        bridge = SimBridge(checks_enabled=False)
        approver = AuditingApprover()
        deposit_id = bridge.deposit(USER, 100).deposit.deposit_id

        greedy = bridge.approve_withdraw(
            bridge.announce_withdraw(WithdrawalReceipt(deposit_id, 150, USER, FORGED)), approver
        )
        assert greedy.state == TicketState.REJECTED
        assert greedy.reason.category == FindingCategory.AMOUNT_EXCEEDS_INFLOW

        honest = bridge.approve_withdraw(bridge.announce_withdraw(bridge.sign(deposit_id, 100, USER)), approver)
        assert honest.state == TicketState.EXECUTED
        assert honest.history == [TicketState.ANNOUNCED, TicketState.APPROVED, TicketState.EXECUTED]

        replay = bridge.approve_withdraw(
            bridge.announce_withdraw(WithdrawalReceipt(deposit_id, 100, "0x" + "ee" * 20, FORGED)), approver
        )
        assert replay.reason.category == FindingCategory.DOUBLE_SPEND
        assert bridge.minted == bridge.locked == 100

    def test_unbacked_receipt(self):
        bridge = SimBridge(checks_enabled=False)
        ticket = bridge.announce_withdraw(WithdrawalReceipt(12345, 70, USER, FORGED))
        bridge.approve_withdraw(ticket, AuditingApprover())
        assert ticket.reason.category == FindingCategory.UNBACKED_WITHDRAWAL
        assert bridge.check_collateral()


class TestCorrectnessExperiment:
    """Mixed benign and malicious workloads"""

    def test_ninety_seven_executed_three_rejected(self):
        report, bridge = run_correctness_experiment(seed=1)
        assert report.executed == 97
        assert report.rejected == 3
        assert report.per_category == {category.value: 1 for category in EXPECTED_REJECTIONS.values()}
        assert report.collateralized
        for outcome in report.outcomes:
            if outcome.kind != "benign":
                assert outcome.category == EXPECTED_REJECTIONS[outcome.kind].value
        assert bridge.minted <= bridge.locked

    def test_benign_only(self):
        report, _ = run_correctness_experiment(seed=2, benign_only=True)
        assert report.executed == 100
        assert report.rejected == 0
        assert report.malicious_positions == []

    def test_outcome_independent_of_positions(self):
        reports = [run_correctness_experiment(seed=seed)[0] for seed in range(10)]
        assert len({tuple(report.malicious_positions) for report in reports}) > 1
        baseline = reports[0].outcome_multiset()
        for report in reports[1:]:
            assert report.outcome_multiset() == baseline

    def test_same_seed_same_report(self):
        first, _ = run_correctness_experiment(seed=42, n_total=30)
        second, _ = run_correctness_experiment(seed=42, n_total=30)
        assert first.to_dict() == second.to_dict()

    def test_naive_approver_loses_collateral(self):
        report, bridge = run_correctness_experiment(seed=3, approver=NaiveApprover())
        assert report.executed == 100
        assert not report.collateralized
        assert bridge.minted > bridge.locked

    def test_naive_approver_with_checks_matches_direct_withdrawal(self):
        report, _ = run_correctness_experiment(seed=4, approver=NaiveApprover(), checks_enabled=True)

        direct = SimBridge(checks_enabled=True)
        deposit_id = direct.deposit(USER, 100).deposit.deposit_id
        assert direct.withdraw_direct(direct.sign(deposit_id, 100, USER))
        assert not direct.withdraw_direct(direct.sign(deposit_id, 100, USER))
        assert not direct.withdraw_direct(WithdrawalReceipt(deposit_id + 1, 100, USER, FORGED))

        assert report.executed == 97
        assert report.rejected == 3
        assert report.per_category == {}
        assert report.collateralized

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            run_correctness_experiment(seed=1, malicious=["phishing"])
        with pytest.raises(ValueError):
            run_correctness_experiment(seed=1, n_total=2, malicious=["unbacked"] * 3)
        with pytest.raises(ValueError):
            run_correctness_experiment(seed=1, n_total=1, malicious=["double-spend"])

    def test_transcript(self, tmp_path):
        report, bridge = run_correctness_experiment(seed=5, n_total=20)
        path = tmp_path / "tickets.jsonl"
        assert write_transcript(bridge.tickets, path) == 20
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [row["state"] for row in rows] == [outcome.state for outcome in report.outcomes]
        assert sum(1 for row in rows if row["state"] == "Rejected" and row["reason"]) == 3
        print("✅ Announce-then-execute experiment verified")
