"""
Event-log parsing and transferred-value resolution.
"""

import json

import pytest

from core.config import ReflectionScaleConfig
from core.exceptions import AmountUnresolvable, ParseError, UndecodableEvent
from core.ingest import (
    AmountSource,
    ChainEvent,
    EventKind,
    TransferBody,
    index_transfers,
    parse_event_log,
    parse_record,
    read_event_log,
    read_event_logs,
    resolve_amount,
    serialize_event,
    write_event_log,
)
from core.models import Amount, ChainId, PairKeyKind, TokenId, TxRef

from trace_builder import (
    BRIDGE_ADDRESS,
    DESTINATION,
    SOURCE,
    SOURCE_TOKEN,
    USER,
    bridge_config,
)

ETH = ChainId("ethereum")


def deposit_record(**overrides):
    record = {
        "chain": "ethereum",
        "block": 100,
        "block_time": 1_700_000_000,
        "tx_hash": "0xAA01",
        "log_index": 1,
        "bridge": "portal",
        "kind": "deposit",
        "deposit_id": 7,
        "token": "0x" + "11" * 20,
        "amount": "5000",
        "from": USER,
        "to": USER,
        "dest_chain": "bsc",
    }
    record.update(overrides)
    return {key: value for key, value in record.items() if value is not None}


def lines(*records):
    return [json.dumps(record) + "\n" for record in records]


class TestParseRecord:
    """Single-record decoding"""

    def test_deposit_fields(self):
        event = parse_record(deposit_record(), ETH, 1)
        assert event.kind == EventKind.DEPOSIT
        assert event.ref.tx_hash == "0xaa01"
        assert event.deposit.deposit_id == 7
        assert event.deposit.claimed_amount == Amount(5000)
        assert event.deposit.dest_chain == ChainId("bsc")

    def test_withdrawal_pair_handles(self):
        base = {
            "chain": "ethereum", "block": 1, "block_time": 10, "tx_hash": "0x01", "log_index": 0,
            "bridge": "portal", "kind": "withdrawal", "token": "0x22", "recipient": USER,
        }
        by_id = parse_record(dict(base, pair_by={"id": 3}), ETH)
        assert by_id.withdrawal.pair_ref.kind == PairKeyKind.BY_ID
        assert by_id.withdrawal.pair_ref.bridge_id == "portal"
        by_hash = parse_record(dict(base, pair_by={"hash": "0xABC"}), ETH)
        assert by_hash.withdrawal.pair_ref.tx_hash == "0xabc"
        bare = parse_record(base, ETH)
        assert bare.withdrawal.pair_ref is None
        with pytest.raises(ParseError):
            parse_record(dict(base, pair_by={"id": 1, "hash": "0x1"}), ETH)

    def test_amount_must_be_decimal_string(self):
        with pytest.raises(ParseError):
            parse_record(deposit_record(amount=5000), ETH)
        with pytest.raises(ParseError):
            parse_record(deposit_record(amount="5e3"), ETH)

    def test_chain_must_match_log(self):
        with pytest.raises(ParseError) as excinfo:
            parse_record(deposit_record(chain="bsc"), ETH, 4)
        assert excinfo.value.line == 4

    def test_missing_kind_fields_are_undecodable(self):
        """A known kind without its required fields keeps its identity"""
        with pytest.raises(UndecodableEvent) as excinfo:
            parse_record(deposit_record(token=None), ETH, 9)
        error = excinfo.value
        assert error.kind == "deposit"
        assert error.bridge_id == "portal"
        assert error.ref.tx_hash == "0xaa01"
        assert error.block_time == 1_700_000_000
        assert error.deposit_id == 7

    def test_undecodable_deposit_ignores_a_malformed_id(self):
        with pytest.raises(UndecodableEvent) as excinfo:
            parse_record(deposit_record(token=None, deposit_id="seven"), ETH)
        assert excinfo.value.deposit_id is None

    def test_unknown_kind_is_a_plain_parse_error(self):
        with pytest.raises(ParseError) as excinfo:
            parse_record(deposit_record(kind="mint"), ETH)
        assert not isinstance(excinfo.value, UndecodableEvent)


class TestParseEventLog:
    """Streaming parse keeps going past bad lines"""

    def test_three_valid_one_garbage(self):
        stream = lines(
            deposit_record(tx_hash="0x01", deposit_id=1),
            deposit_record(tx_hash="0x02", deposit_id=2),
        ) + ["{not json\n"] + lines(deposit_record(tx_hash="0x03", deposit_id=3))
        items = list(parse_event_log(stream, ETH))
        events = [item for item in items if not isinstance(item, ParseError)]
        errors = [item for item in items if isinstance(item, ParseError)]
        assert [event.deposit.deposit_id for event in events] == [1, 2, 3]
        assert len(errors) == 1
        assert errors[0].line == 3

    def test_decreasing_block_time_is_rejected(self):
        stream = lines(
            deposit_record(tx_hash="0x01", block_time=100),
            deposit_record(tx_hash="0x02", block_time=90),
            deposit_record(tx_hash="0x03", block_time=100),
        )
        items = list(parse_event_log(stream, ETH))
        assert isinstance(items[1], ParseError)
        assert not isinstance(items[2], ParseError)

    def test_blank_lines_and_bytes(self):
        stream = [b"\n", json.dumps(deposit_record()).encode(), b"   \n", b"\xff\xfe\n"]
        items = list(parse_event_log(stream, ETH))
        assert len(items) == 2
        assert isinstance(items[1], ParseError)

    def test_serialized_line_parses_back(self, builder):
        builder.deposit(1_000, deposit_id=1)
        builder.withdrawal(1_000, pair=1)
        for event in builder.events:
            line = serialize_event(event)
            assert " " not in line
            (parsed,) = parse_event_log([line], event.chain)
            assert parsed == event

    def test_read_event_logs_sniffs_chain(self, builder, tmp_path):
        builder.deposit(1_000, deposit_id=1)
        builder.withdrawal(1_000, pair=1)
        source_path = tmp_path / "eth-log.jsonl"
        dest_path = tmp_path / "bsc-log.jsonl"
        with open(source_path, "w") as handle:
            write_event_log(builder.on(SOURCE), handle)
        with open(dest_path, "w") as handle:
            write_event_log(builder.on(DESTINATION), handle)
            handle.write("garbage\n")

        events, errors = read_event_logs([source_path, dest_path], [ChainId("bsc", finality_lag=45)])
        assert len(events) == 4
        assert len(errors) == 1
        assert {event.chain.name for event in events} == {"ethereum", "bsc"}

        only_dest, _ = read_event_log(dest_path, DESTINATION)
        assert all(event.chain == DESTINATION for event in only_dest)


class TestResolveAmount:
    """How many tokens a bridge event really moved"""

    def test_adjacent_transfer_beats_the_claim(self, builder):
        deposit = builder.deposit(5_000, deposit_id=1, transfer_value=4_000)
        resolved = resolve_amount(deposit, builder.events, bridge_config())
        assert resolved.amount == Amount(4_000)
        assert resolved.source == AmountSource.ADJACENT_TRANSFER

    def test_trusted_claim(self, builder):
        deposit = builder.deposit(5_000, deposit_id=1, transfer_value=4_000)
        resolved = resolve_amount(deposit, builder.events, bridge_config(trusted_claims=True))
        assert resolved.amount == Amount(5_000)
        assert resolved.source == AmountSource.BRIDGE_EVENT

    def test_unbacked_deposit(self, builder):
        deposit = builder.deposit(5_000, deposit_id=1, backed=False)
        with pytest.raises(AmountUnresolvable):
            resolve_amount(deposit, builder.events, bridge_config())
        zeroed = resolve_amount(deposit, builder.events, bridge_config(treat_missing_transfer_as_zero=True))
        assert zeroed.amount == Amount(0)

    def test_withdrawal_without_mint_is_unresolvable(self, builder):
        withdrawal = builder.withdrawal(5_000, pair=1, minted=False)
        with pytest.raises(AmountUnresolvable):
            resolve_amount(withdrawal, builder.events, bridge_config(treat_missing_transfer_as_zero=True))

    def test_reflection_scaling_is_exact(self, builder):
        deposit = builder.deposit(1_000, deposit_id=1, transfer_value=1_001)
        cfg = bridge_config(reflection_scales=[ReflectionScaleConfig(
            token=SOURCE_TOKEN.key(), numerator=3, denominator=2,
        )])
        resolved = resolve_amount(deposit, builder.events, cfg)
        assert resolved.amount == Amount(1_501)
        assert resolved.scaled

    def test_reflection_without_scale_for_block(self, builder):
        deposit = builder.deposit(1_000, deposit_id=1)
        cfg = bridge_config(reflection_scales=[ReflectionScaleConfig(
            token=SOURCE_TOKEN.key(), numerator=3, denominator=2, from_block=deposit.block + 1,
        )])
        with pytest.raises(AmountUnresolvable):
            resolve_amount(deposit, builder.events, cfg)

    def test_transfer_in_wrong_direction_is_ignored(self, builder):
        deposit = builder.deposit(5_000, deposit_id=1, backed=False)
        honest = builder.deposit(5_000, deposit_id=2)
        # a transfer out of the bridge in the deposit's transaction does not back it
        stray = ChainEvent(
            TxRef(SOURCE, deposit.ref.tx_hash, 2), deposit.block, deposit.block_time, "testbridge",
            EventKind.TRANSFER, TransferBody(SOURCE_TOKEN, BRIDGE_ADDRESS, USER, Amount(5_000)),
        )
        with pytest.raises(AmountUnresolvable):
            resolve_amount(deposit, builder.events + [stray], bridge_config())
        assert resolve_amount(honest, builder.events, bridge_config()).amount == Amount(5_000)

    def test_native_coin_uses_internal_transaction(self, builder):
        native = TokenId(SOURCE, "native")
        deposit = builder.deposit(2_000, deposit_id=1, token=native)
        resolved = resolve_amount(deposit, builder.events, bridge_config())
        assert resolved.source == AmountSource.INTERNAL_TRANSACTION

    def test_configured_log_offset(self, builder):
        deposit = builder.deposit(5_000, deposit_id=1)
        assert resolve_amount(deposit, builder.events, bridge_config(transfer_log_offsets=[-1])).amount == Amount(5_000)
        with pytest.raises(AmountUnresolvable):
            resolve_amount(deposit, builder.events, bridge_config(transfer_log_offsets=[1]))

    def test_index_transfers_groups_by_transaction(self, builder):
        builder.deposit(1, deposit_id=1)
        builder.deposit(2, deposit_id=2)
        grouped = index_transfers(builder.events)
        assert len(grouped) == 2
        assert all(len(group) == 1 for group in grouped.values())
