"""
Synthetic traffic generator and ground-truth scoring.
"""

import json

import pytest

from core.audit_engine import FindingCategory, audit_trace
from core.config import ChainConfig, FeePolicyConfig
from core.exceptions import ConfigError
from core.ingest import EventKind, read_event_logs
from core.models import PairKeyKind
from core.simchain import (
    AttackKind,
    Injection,
    ScenarioBridge,
    ScenarioConfig,
    generate,
    load_ground_truth,
    load_scenario,
    score,
    write_trace,
)

ALL_ATTACKS = [Injection(kind=kind) for kind in AttackKind]


def audited(trace, **kwargs):
    return audit_trace(trace.events(), trace.audit_config, **kwargs)


def backing_deposit(trace, withdrawal):
    pair = withdrawal.withdrawal.pair_ref
    for event in trace.events():
        if event.kind != EventKind.DEPOSIT:
            continue
        if pair.kind == PairKeyKind.BY_ID and (event.bridge_id, event.deposit.deposit_id) == (pair.bridge_id, pair.deposit_id):
            return event
        if pair.kind == PairKeyKind.BY_DEPOSIT_HASH and event.ref.tx_hash == pair.tx_hash:
            return event
    return None


class TestBenignTraffic:
    """No injections means nothing to flag"""

    def test_clean_trace_has_no_violations(self):
        trace = generate(ScenarioConfig(seed=1, benign_count=100))
        result = audited(trace)
        assert trace.ground_truth == {}
        assert result.summary.violations == 0
        assert result.summary.failed_bridges == {}
        assert result.summary.analyzed == trace.benign_flows
        assert result.summary.deposit_only == trace.pending_deposits

    def test_withdrawals_wait_for_source_finality(self):
        trace = generate(ScenarioConfig(seed=2, benign_count=60))
        lags = {chain.name: chain.finality_lag for chain in trace.config.chains}
        checked = 0
        for event in trace.events():
            if event.kind != EventKind.WITHDRAWAL:
                continue
            deposit = backing_deposit(trace, event)
            assert event.block_time > deposit.block_time + lags[deposit.chain.name]
            checked += 1
        assert checked == trace.benign_flows

    def test_zero_withdrawals_are_scored_as_benign_by_default(self):
        trace = generate(ScenarioConfig(seed=9, benign_count=80, zero_withdrawal_rate=0.2))
        findings = audited(trace).findings
        zero = [finding for finding in findings if finding.category == FindingCategory.ZERO_WITHDRAWAL]
        assert trace.zero_withdrawals > 0
        assert len(zero) == trace.zero_withdrawals
        assert score(findings, trace.ground_truth).false_positives == 0
        assert score(findings, trace.ground_truth, zero_withdrawal_benign=False).false_positives == len(zero)


class TestDeterminism:
    def test_same_seed_same_bytes(self, tmp_path):
        config = ScenarioConfig(seed=7, benign_count=40, injections=ALL_ATTACKS)
        first = write_trace(generate(config), tmp_path / "a")
        second = write_trace(generate(config), tmp_path / "b")
        assert [path.name for path in first] == [path.name for path in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_different_seed_different_trace(self, tmp_path):
        a = write_trace(generate(ScenarioConfig(seed=1, benign_count=10)), tmp_path / "a")
        b = write_trace(generate(ScenarioConfig(seed=2, benign_count=10)), tmp_path / "b")
        assert a[0].read_bytes() != b[0].read_bytes()

    def test_written_trace_audits_like_the_in_memory_one(self, tmp_path):
        trace = generate(ScenarioConfig(seed=7, benign_count=40, injections=ALL_ATTACKS))
        write_trace(trace, tmp_path)
        events, errors = read_event_logs(
            [tmp_path / f"{chain.name}.jsonl" for chain in trace.config.chains], trace.chain_ids()
        )
        assert errors == []
        from_disk = audit_trace(events, trace.audit_config).findings
        assert from_disk == audited(trace).findings
        assert load_ground_truth(tmp_path / "ground_truth.jsonl") == trace.ground_truth


class TestInjectedAttacks:
    """Every labelled attack is found with its expected category"""

    def test_one_of_each(self):
        trace = generate(ScenarioConfig(seed=7, benign_count=50, injections=ALL_ATTACKS))
        assert len(trace.ground_truth) == 5
        assert sorted(category.value for category in trace.ground_truth.values()) == sorted(
            kind.expected_category.value for kind in AttackKind
        )
        report = score(audited(trace).findings, trace.ground_truth)
        assert report.true_positives == 5
        assert report.false_positives == 0
        assert report.false_negatives == 0
        assert report.precision == report.recall == 1.0

    def test_disabled_double_spend_check_misses_every_replay(self):
        injections = [Injection(kind=AttackKind.REPLAY, count=3), Injection(kind=AttackKind.UNBACKED_WITHDRAWAL)]
        trace = generate(ScenarioConfig(seed=4, benign_count=30, injections=injections))
        result = audited(trace, disabled_checks=[FindingCategory.DOUBLE_SPEND])
        report = score(result.findings, trace.ground_truth)
        replays = {ref for ref, kind in trace.attacks.items() if kind == AttackKind.REPLAY}
        assert report.false_negatives == len(replays) == 3
        assert set(report.missed) == replays
        assert report.true_positives == 1
        assert report.confusion[("DoubleSpend", "none")] == 3

    def test_injection_window(self):
        trace = generate(ScenarioConfig(
            seed=5, benign_count=10, injections=[Injection(kind=AttackKind.AMOUNT_MISMATCH, count=4, start=600, end=900)]
        ))
        assert len(trace.attacks) == 4
        for ref in trace.attacks:
            withdrawal = next(event for event in trace.events() if event.ref == ref)
            deposit = backing_deposit(trace, withdrawal)
            assert 600 - 12 <= deposit.block_time < 900

    @pytest.mark.slow
    def test_full_day_at_scale(self):
        injections = [Injection(kind=kind, count=10) for kind in AttackKind]
        trace = generate(ScenarioConfig(seed=2024, zero_withdrawal_rate=0.05, injections=injections))
        assert len(trace.ground_truth) == 50
        report = score(audited(trace).findings, trace.ground_truth)
        assert (report.true_positives, report.false_positives, report.false_negatives) == (50, 0, 0)
        print("✅ Full-day scenario scored perfectly")

    @pytest.mark.slow
    def test_hundred_thousand_flows_over_three_chains(self):
        """Mixed fee policies, reflection tokens and pending deposits at scale, all benign"""
        trace = generate(ScenarioConfig(
            seed=77,
            benign_count=100_000,
            chains=[
                ChainConfig(name="ethereum", finality_lag=780, block_interval=12),
                ChainConfig(name="bsc", finality_lag=45, block_interval=3),
                ChainConfig(name="polygon", finality_lag=256, block_interval=2),
            ],
            bridges=[
                ScenarioBridge(
                    bridge_id="alpha", source="ethereum", destination="bsc",
                    fee=FeePolicyConfig(kind="proportional", ppm=1_000), tokens=["USDC", "RFX"], reflection_tokens=["RFX"],
                ),
                ScenarioBridge(
                    bridge_id="beta", source="bsc", destination="polygon",
                    fee=FeePolicyConfig(kind="explicit"), pairing="hash", tokens=["WBNB"],
                ),
            ],
        ))
        result = audited(trace)
        assert trace.pending_deposits > 0
        assert result.summary.violations == 0
        assert result.summary.failed_bridges == {}
        assert result.summary.analyzed == trace.benign_flows
        assert result.summary.deposit_only == trace.pending_deposits
        assert {finding.bridge for finding in result.findings} == {"alpha", "beta"}
        print("✅ 100k flows over three chains audited clean")


class TestPerAttackScoring:
    """Each attack kind alone, many seeds"""

    @staticmethod
    def run(kind, seeds, benign_count):
        for seed in seeds:
            trace = generate(ScenarioConfig(seed=seed, benign_count=benign_count, injections=[Injection(kind=kind, count=10)]))
            report = score(audited(trace).findings, trace.ground_truth)
            assert len(trace.ground_truth) == 10
            assert (report.precision, report.recall) == (1.0, 1.0), (seed, report.to_dict())

    @pytest.mark.parametrize("kind", list(AttackKind))
    def test_reduced(self, kind):
        self.run(kind, range(2), 150)

    def test_fake_deposit_and_amount_mismatch_share_a_category(self):
        """Scoring matches per withdrawal; the attack labels say which attack each hit was"""
        injections = [Injection(kind=AttackKind.FAKE_DEPOSIT, count=3), Injection(kind=AttackKind.AMOUNT_MISMATCH, count=3)]
        trace = generate(ScenarioConfig(seed=4, benign_count=150, injections=injections))
        assert set(trace.ground_truth.values()) == {FindingCategory.AMOUNT_EXCEEDS_INFLOW}
        assert sorted(kind.value for kind in trace.attacks.values()) == sorted(
            [AttackKind.FAKE_DEPOSIT.value] * 3 + [AttackKind.AMOUNT_MISMATCH.value] * 3
        )
        report = score(audited(trace).findings, trace.ground_truth)
        assert (report.true_positives, report.false_positives, report.false_negatives) == (6, 0, 0)
        assert report.confusion == {("AmountExceedsInflow", "AmountExceedsInflow"): 6}

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", list(AttackKind))
    def test_twenty_seeds_of_a_thousand_flows(self, kind):
        self.run(kind, range(100, 120), 1_000)


class TestScenarioFiles:
    def test_load_scenario(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps({"seed": 3, "benign_count": 5, "injections": [{"kind": "Replay", "count": 2}]}))
        config = load_scenario(path)
        assert config.seed == 3
        assert config.injections[0].kind == AttackKind.REPLAY
        assert config.flow_count == 5

    @pytest.mark.parametrize("content", [
        "{not json",
        json.dumps({"seed": -1}),
        json.dumps({"bridges": [{"bridge_id": "x", "source": "ethereum", "destination": "solana"}]}),
        json.dumps({"min_delay": 100, "max_delay": 10}),
        json.dumps({"surprise": True}),
    ])
    def test_invalid_scenario(self, tmp_path, content):
        path = tmp_path / "scenario.json"
        path.write_text(content)
        with pytest.raises(ConfigError):
            load_scenario(path)

    def test_missing_scenario(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "absent.json")
