"""
Live monitor: finality-aware deferral, alert batching and dedup, restart
recovery and sink failures.
"""

import asyncio
import json
import math
import random
from collections import Counter

import pytest

from agents.alert_sinks import AlertDispatcher, JsonlAlertSink
from agents.bridge_monitor_agent import BridgeMonitorAgent, SimulatedClock, poll_once, run_monitor
from core.audit_engine import BridgeAuditEngine, FindingCategory, audit_trace
from core.config import MonitorConfig
from core.exceptions import StoreError
from core.ingest import serialize_event
from core.models import ChainId, TxRef
from core.simchain import AttackKind, Injection, ScenarioConfig, generate
from integrations.audit_store import AuditStore
from integrations.chain_sources import FileChainSource, SimChainSource, sources_for_trace

from trace_builder import DESTINATION, OTHER_TOKEN, SOURCE, audit_config, bridge_config

INTERVAL = 300


@pytest.fixture
def store(tmp_path):
    with AuditStore(tmp_path / "state", fsync=False) as opened:
        yield opened


@pytest.fixture
def sink(tmp_path):
    return JsonlAlertSink(tmp_path / "alerts.jsonl")


def sources_for(builder, source_lag=0, destination_lag=0):
    return [
        SimChainSource(ChainId(SOURCE.name, source_lag), builder.on(SOURCE)),
        SimChainSource(ChainId(DESTINATION.name, destination_lag), builder.on(DESTINATION)),
    ]


def three_attack_trace(seed=3):
    return generate(ScenarioConfig(
        seed=seed,
        benign_count=12,
        duration=3_600,
        injections=[
            Injection(kind=AttackKind.UNBACKED_WITHDRAWAL),
            Injection(kind=AttackKind.REPLAY),
            Injection(kind=AttackKind.AMOUNT_MISMATCH),
        ],
    ))


def poll_budget(trace):
    end = max(event.block_time for event in trace.events())
    lag = max(chain.finality_lag for chain in trace.chain_ids())
    return math.ceil((end + lag) / INTERVAL) + 2


async def run_trace(trace, state_dir, sink_path, max_polls, start=0):
    config = trace.audit_config.model_copy(update={"monitor": MonitorConfig(poll_interval=INTERVAL)})
    with AuditStore(state_dir, fsync=False) as store:
        return await run_monitor(
            config,
            sources_for_trace(trace),
            store,
            AlertDispatcher([JsonlAlertSink(sink_path)]),
            clock=SimulatedClock(start),
            max_polls=max_polls,
        )


def live_config(trace, **monitor):
    return trace.audit_config.model_copy(update={"monitor": MonitorConfig(poll_interval=INTERVAL, **monitor)})


def violation_multiset(records):
    return Counter(
        (TxRef.from_dict(record["withdrawal"]), record["category"])
        for record in records if record["kind"] == "violation"
    )


def batch_violations(result):
    return Counter(
        (finding.withdrawal, finding.category.value) for finding in result.findings if finding.category.is_violation
    )


class Crash(Exception):
    """Stands in for the monitor process dying"""


class KillSwitch:
    """
    Counts durable store writes and, once armed, kills the run at one of them.

    With `after` the write lands before the kill.
    """

    WRITES = ("_append", "_rewrite_hot", "save_checkpoint")

    def __init__(self, mocker):
        self.writes = 0
        self.at = None
        self.after = False
        self.fired = False
        for name in self.WRITES:
            mocker.patch.object(AuditStore, name, self._counting(getattr(AuditStore, name)))

    def arm(self, at, after):
        self.writes = 0
        self.at = at
        self.after = after
        self.fired = False

    def _counting(self, write):
        switch = self

        def counted(store, *args, **kwargs):
            switch.writes += 1
            kill = not switch.fired and switch.writes == switch.at
            if kill:
                switch.fired = True
                if not switch.after:
                    raise Crash(f"killed before write {switch.writes}")
            write(store, *args, **kwargs)
            if kill:
                raise Crash(f"killed after write {switch.writes}")

        return counted


def drive_with_restarts(trace, config, state_dir, sink_path):
    """
    Poll through a trace on run_monitor's schedule. A Crash restarts the
    process: fresh store handle, sources and sink, then the same poll again.
    Returns the number of restarts.
    """
    engine = BridgeAuditEngine(config)

    def boot():
        return (
            AuditStore(state_dir, fsync=False),
            sources_for_trace(trace),
            AlertDispatcher([JsonlAlertSink(sink_path)]),
        )

    store, sources, dispatcher = boot()
    restarts = 0
    poll = 0
    while poll < poll_budget(trace):
        try:
            asyncio.run(poll_once(sources, store, engine, dispatcher, now=poll * INTERVAL))
        except Crash:
            restarts += 1
            store, sources, dispatcher = boot()
            continue
        poll += 1
    return restarts


class TestDeferral:
    """Withdrawals wait for the slowest chain's finalized head"""

    @pytest.mark.asyncio
    async def test_alert_arrives_once_the_horizon_covers_it(self, builder, config, store, sink):
        builder.deposit(1_000, deposit_id=1)
        withdrawal = builder.withdrawal(5_000, pair=99)
        sources = sources_for(builder, source_lag=600)
        engine = BridgeAuditEngine(config)
        dispatcher = AlertDispatcher([sink])

        first = await poll_once(sources, store, engine, dispatcher, now=withdrawal.block_time)
        assert first.deferred == 1
        assert first.horizon == withdrawal.block_time - 600
        assert first.alerts == []
        assert sink.read() == []

        second = await poll_once(sources, store, engine, dispatcher, now=withdrawal.block_time + 600)
        assert second.deferred == 0
        assert [alert.finding.category for alert in second.alerts] == [FindingCategory.UNBACKED_WITHDRAWAL]
        (record,) = sink.read()
        assert record["category"] == "UnbackedWithdrawal"
        assert TxRef.from_dict(record["withdrawal"]) == withdrawal.ref
        assert record["batch_id"] == 1

    @pytest.mark.asyncio
    async def test_lagging_deposit_is_not_mistaken_for_unbacked(self, builder, config, store, sink):
        builder.deposit(1_000, deposit_id=1)
        withdrawal = builder.withdrawal(1_000, pair=1)
        sources = sources_for(builder, source_lag=600)
        engine = BridgeAuditEngine(config)
        dispatcher = AlertDispatcher([sink])

        await poll_once(sources, store, engine, dispatcher, now=withdrawal.block_time)
        report = await poll_once(sources, store, engine, dispatcher, now=withdrawal.block_time + 600)
        assert [finding.category for finding in report.findings] == [FindingCategory.BALANCED]
        assert sink.read() == []
        assert store.get_finding(withdrawal.ref).category == FindingCategory.BALANCED

    @pytest.mark.asyncio
    async def test_empty_feed(self, config, store, sink):
        sources = [SimChainSource(SOURCE, []), SimChainSource(DESTINATION, [])]
        engine = BridgeAuditEngine(config)
        report = await poll_once(sources, store, engine, AlertDispatcher([sink]), now=5_000)
        assert report.alerts_emitted == 0
        assert report.horizon == 5_000
        assert store.load_checkpoint().chains == {"ethereum": (-1, 5_000), "bsc": (-1, 5_000)}


class TestAlerts:
    """Batching, unknown tokens and delivery failures"""

    @pytest.mark.asyncio
    async def test_unknown_token_alert_once_per_token(self, builder, config, store, sink):
        builder.deposit(1_000, deposit_id=1)
        builder.deposit(1_000, deposit_id=2)
        first = builder.withdrawal(1_000, pair=1, token=OTHER_TOKEN)
        builder.withdrawal(1_000, pair=2, token=OTHER_TOKEN, time=first.block_time + 1_000)
        sources = sources_for(builder)
        engine = BridgeAuditEngine(config)
        dispatcher = AlertDispatcher([sink])

        await poll_once(sources, store, engine, dispatcher, now=first.block_time)
        await poll_once(sources, store, engine, dispatcher, now=first.block_time + 2_000)
        kinds = Counter((record["kind"], record["category"]) for record in sink.read())
        assert kinds == Counter({("violation", "TokenMismatch"): 2, ("unknown_token", "TokenMismatch"): 1})
        assert store.token_seen(OTHER_TOKEN.key())

    @pytest.mark.asyncio
    async def test_unknown_token_alert_can_be_switched_off(self, builder, store, sink):
        builder.deposit(1_000, deposit_id=1)
        builder.withdrawal(1_000, pair=1, token=OTHER_TOKEN)
        config = audit_config(bridge_config())
        config = config.model_copy(update={"monitor": MonitorConfig(alert_on_unknown_token=False)})
        await poll_once(sources_for(builder), store, BridgeAuditEngine(config), AlertDispatcher([sink]), now=10**6)
        assert [record["kind"] for record in sink.read()] == ["violation"]

    @pytest.mark.asyncio
    async def test_failed_delivery_is_retried_on_the_next_poll(self, builder, config, store, sink, mocker):
        builder.withdrawal(5_000, pair=99)
        real_emit = JsonlAlertSink.emit
        attempts = []

        async def flaky_emit(self, alerts):
            attempts.append(len(alerts))
            if len(attempts) == 1:
                raise OSError("disk full")
            await real_emit(self, alerts)

        mocker.patch.object(JsonlAlertSink, "emit", flaky_emit)
        engine = BridgeAuditEngine(config)
        dispatcher = AlertDispatcher([sink])
        sources = sources_for(builder)

        failed = await poll_once(sources, store, engine, dispatcher, now=10**6)
        assert failed.alerts_emitted == 0
        assert sink.read() == []
        assert len(store.load_checkpoint().pending_alerts) == 1

        retried = await poll_once(sources, store, engine, dispatcher, now=10**6 + 60)
        assert retried.alerts_emitted == 1
        await poll_once(sources, store, engine, dispatcher, now=10**6 + 120)
        assert len(sink.read()) == 1
        assert attempts == [1, 1]
        assert store.load_checkpoint().pending_alerts == []

    @pytest.mark.asyncio
    async def test_one_failing_sink_does_not_block_the_other(self, builder, config, store, tmp_path, mocker):
        builder.withdrawal(5_000, pair=99)
        healthy = JsonlAlertSink(tmp_path / "healthy.jsonl")
        broken = JsonlAlertSink(tmp_path / "broken.jsonl")
        mocker.patch.object(broken, "emit", side_effect=OSError("unreachable"))
        report = await poll_once(
            sources_for(builder), store, BridgeAuditEngine(config), AlertDispatcher([broken, healthy]), now=10**6
        )
        assert report.alerts_emitted == 1
        assert len(healthy.read()) == 1
        assert broken.read() == []


class TestScenarioRuns:
    """End-to-end over generated traffic"""

    @pytest.mark.asyncio
    async def test_three_attacks_three_alerts(self, tmp_path):
        trace = three_attack_trace()
        summary = await run_trace(trace, tmp_path / "state", tmp_path / "alerts.jsonl", poll_budget(trace))
        records = JsonlAlertSink(tmp_path / "alerts.jsonl").read()
        flagged = {TxRef.from_dict(record["withdrawal"]): FindingCategory(record["category"]) for record in records}
        assert len(records) == 3
        assert flagged == trace.ground_truth
        assert summary.errors == 0
        assert sum(summary.alerts_by_category().values()) == 3

    @pytest.mark.asyncio
    async def test_alert_comes_from_the_first_poll_covering_the_attack(self, tmp_path):
        trace = three_attack_trace(seed=8)
        await run_trace(trace, tmp_path / "state", tmp_path / "alerts.jsonl", poll_budget(trace))
        lag = max(chain.finality_lag for chain in trace.chain_ids())
        records = JsonlAlertSink(tmp_path / "alerts.jsonl").read()
        assert len(records) == 3
        for record in records:
            assert record["emitted_at"] - INTERVAL < record["block_time"] + lag <= record["emitted_at"]

    @pytest.mark.asyncio
    async def test_restart_matches_uninterrupted_run(self, tmp_path):
        trace = three_attack_trace(seed=11)
        total = poll_budget(trace)
        await run_trace(trace, tmp_path / "straight", tmp_path / "straight.jsonl", total)

        split = total // 2
        await run_trace(trace, tmp_path / "restarted", tmp_path / "restarted.jsonl", split)
        await run_trace(
            trace, tmp_path / "restarted", tmp_path / "restarted.jsonl", total - split, start=split * INTERVAL
        )

        straight = (tmp_path / "straight.jsonl").read_text()
        restarted = (tmp_path / "restarted.jsonl").read_text()
        assert restarted == straight
        assert len(straight.splitlines()) == len(trace.ground_truth)

        with AuditStore(tmp_path / "straight", fsync=False) as a, AuditStore(tmp_path / "restarted", fsync=False) as b:
            assert a.ledger_digest() == b.ledger_digest()

    @pytest.mark.asyncio
    async def test_rerunning_a_finished_state_sends_nothing_new(self, tmp_path):
        trace = three_attack_trace(seed=5)
        total = poll_budget(trace)
        await run_trace(trace, tmp_path / "state", tmp_path / "alerts.jsonl", total)
        summary = await run_trace(trace, tmp_path / "state", tmp_path / "alerts.jsonl", 3, start=total * INTERVAL)
        assert summary.alerts == []
        assert len(JsonlAlertSink(tmp_path / "alerts.jsonl").read()) == len(trace.ground_truth)


class TestBridgeMonitorAgent:
    @pytest.mark.asyncio
    async def test_agent_lifecycle(self, builder, config, tmp_path):
        builder.deposit(1_000, deposit_id=1)
        builder.withdrawal(5_000, pair=99)
        agent = BridgeMonitorAgent(config, sources_for(builder), tmp_path / "state", clock=SimulatedClock(10**6))
        with pytest.raises(RuntimeError):
            await agent.run(max_polls=1)

        async with agent:
            assert agent.is_ready()
            result = await agent.run(max_polls=2)

        assert not agent.is_ready()
        assert result["polls"] == 2
        assert result["alerts_by_category"] == {"UnbackedWithdrawal": 1}
        assert len(JsonlAlertSink(tmp_path / "state" / "alerts.jsonl").read()) == 1
        print("✅ Monitor agent lifecycle verified")


class TestPollMatchesBatchAudit:
    """Polling a whole trace reaches the batch audit's verdicts"""

    def test_poll_once_over_a_generated_trace(self, tmp_path):
        trace = three_attack_trace(seed=21)
        engine = BridgeAuditEngine(live_config(trace))
        sink = JsonlAlertSink(tmp_path / "alerts.jsonl")
        dispatcher = AlertDispatcher([sink])
        sources = sources_for_trace(trace)
        batch = audit_trace(trace.events(), trace.audit_config)

        with AuditStore(tmp_path / "state", fsync=False) as store:
            for poll in range(poll_budget(trace)):
                asyncio.run(poll_once(sources, store, engine, dispatcher, now=poll * INTERVAL))
            live = Counter(finding.category for finding in store.findings())
            assert store.ledger_digest() == batch.ledger.digest()

        assert violation_multiset(sink.read()) == batch_violations(batch)
        assert live == Counter(finding.category for finding in batch.findings)
        assert live[FindingCategory.BALANCED] > 0
        print("✅ Live polling agrees with the batch audit")


class TestCrashRecovery:
    """Kills and transient failures anywhere in a poll lose and repeat nothing"""

    @pytest.mark.parametrize("point", range(20))
    def test_killed_run_matches_batch_audit(self, point, tmp_path, mocker):
        trace = three_attack_trace(seed=13)
        config = live_config(trace, hot_window=2 * INTERVAL)
        switch = KillSwitch(mocker)
        drive_with_restarts(trace, config, tmp_path / "clean", tmp_path / "clean.jsonl")
        rng = random.Random(point)
        switch.arm(at=rng.randrange(1, switch.writes + 1), after=rng.random() < 0.5)

        restarts = drive_with_restarts(trace, config, tmp_path / "killed", tmp_path / "killed.jsonl")
        assert restarts == 1

        batch = audit_trace(trace.events(), trace.audit_config)
        records = JsonlAlertSink(tmp_path / "killed.jsonl").read()
        assert violation_multiset(records) == batch_violations(batch)
        assert len({record["alert_key"] for record in records}) == len(records)
        with AuditStore(tmp_path / "killed", fsync=False) as store:
            assert store.ledger_entries() == batch.ledger.items()

    def test_killed_between_store_writes_and_checkpoint(self, tmp_path, mocker):
        """Every write of the poll has landed; its checkpoint has not"""
        trace = three_attack_trace(seed=13)
        real_save = AuditStore.save_checkpoint
        kills = []

        def crash_before_alerting_checkpoint(store, checkpoint):
            if checkpoint.pending_alerts and not kills:
                kills.append(checkpoint.next_batch_id)
                raise Crash("killed before checkpoint")
            real_save(store, checkpoint)

        mocker.patch.object(AuditStore, "save_checkpoint", crash_before_alerting_checkpoint)
        restarts = drive_with_restarts(trace, live_config(trace), tmp_path / "state", tmp_path / "alerts.jsonl")
        assert restarts == 1

        batch = audit_trace(trace.events(), trace.audit_config)
        assert violation_multiset(JsonlAlertSink(tmp_path / "alerts.jsonl").read()) == batch_violations(batch)
        with AuditStore(tmp_path / "state", fsync=False) as store:
            assert store.ledger_digest() == batch.ledger.digest()

    def test_redemption_recorded_once_across_a_crash(self, tmp_path, mocker):
        """Killed after the compare-and-set, before the checkpoint: the replay finds itself as redeemer"""
        trace = three_attack_trace(seed=13)
        real_mark = AuditStore.mark_redeemed
        crashed = []

        def crash_after_first_redemption(store, deposit, withdrawal, now):
            prior = real_mark(store, deposit, withdrawal, now)
            if not crashed:
                crashed.append((deposit, withdrawal))
                raise Crash("killed after compare-and-set")
            return prior

        mocker.patch.object(AuditStore, "mark_redeemed", crash_after_first_redemption)
        restarts = drive_with_restarts(trace, live_config(trace), tmp_path / "state", tmp_path / "alerts.jsonl")
        assert restarts == 1

        ((deposit, withdrawal),) = crashed
        batch = audit_trace(trace.events(), trace.audit_config)
        expected = {finding.withdrawal: finding.category for finding in batch.findings}
        with AuditStore(tmp_path / "state", fsync=False) as store:
            assert store.redeemer(deposit) == withdrawal
            assert store.get_finding(withdrawal).category == expected[withdrawal]
            assert store.ledger_entries() == batch.ledger.items()
        assert violation_multiset(JsonlAlertSink(tmp_path / "alerts.jsonl").read()) == batch_violations(batch)

    @pytest.mark.asyncio
    async def test_transient_checkpoint_failure_loses_no_batch(self, tmp_path, mocker):
        """A poll that fails to checkpoint is replayed by the same process"""
        trace = three_attack_trace()
        real_save = AuditStore.save_checkpoint
        failures = []

        def fail_once(store, checkpoint):
            if checkpoint.pending_alerts and not failures:
                failures.append(checkpoint.next_batch_id)
                raise StoreError("checkpoint write failed: disk busy")
            real_save(store, checkpoint)

        mocker.patch.object(AuditStore, "save_checkpoint", fail_once)
        summary = await run_trace(trace, tmp_path / "state", tmp_path / "alerts.jsonl", poll_budget(trace) + 1)
        assert summary.errors == 1
        assert len(failures) == 1

        batch = audit_trace(trace.events(), trace.audit_config)
        records = JsonlAlertSink(tmp_path / "alerts.jsonl").read()
        assert violation_multiset(records) == batch_violations(batch)
        assert summary.violation_alerts == len(records) == 3


class TestUndecodableDeposits:
    @pytest.mark.asyncio
    async def test_withdrawal_of_an_undecodable_deposit(self, builder, config, store, sink, tmp_path):
        deposit = builder.deposit(1_000, deposit_id=1)
        withdrawal = builder.withdrawal(1_000, pair=1)
        broken = json.loads(serialize_event(deposit))
        del broken["token"]
        source_log = tmp_path / "ethereum.jsonl"
        source_log.write_text("".join(
            (json.dumps(broken) if event == deposit else serialize_event(event)) + "\n"
            for event in builder.on(SOURCE)
        ))
        destination_log = tmp_path / "bsc.jsonl"
        destination_log.write_text("".join(serialize_event(event) + "\n" for event in builder.on(DESTINATION)))
        sources = [FileChainSource(source_log, SOURCE), FileChainSource(destination_log, DESTINATION)]

        report = await poll_once(sources, store, BridgeAuditEngine(config), AlertDispatcher([sink]), now=10**6)
        (finding,) = report.findings
        assert finding.category == FindingCategory.UNDECODABLE
        assert finding.deposit == deposit.ref
        (record,) = sink.read()
        assert record["category"] == "Undecodable"
        assert TxRef.from_dict(record["withdrawal"]) == withdrawal.ref
        assert store.get_finding(withdrawal.ref).category == FindingCategory.UNDECODABLE
