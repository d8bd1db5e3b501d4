"""
Core value types: amounts, identifiers, pairing handles, fee policies,
event order and token equivalence.
"""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from core.models import (
    Amount,
    ChainId,
    EventOrder,
    FeePolicy,
    FeePolicyKind,
    PairKey,
    PairKeyKind,
    TokenEquivalence,
    TokenFlag,
    TokenId,
    TxRef,
    Underflow,
    amount_sub_checked,
)

ETH = ChainId("ethereum")
BSC = ChainId("bsc")
POLYGON = ChainId("polygon")


class TestAmount:
    """Exact base-unit amounts"""

    def test_rejects_negative_and_non_integers(self):
        """Amounts are non-negative ints only"""
        with pytest.raises(ValueError):
            Amount(-1)
        with pytest.raises(TypeError):
            Amount(1.5)  # type: ignore[arg-type]
        with pytest.raises(TypeError):
            Amount(True)

    def test_parse_decimal_strings(self):
        """Only plain digit strings parse"""
        assert Amount.parse("120000000000000000000000") == Amount(120_000 * 10**18)
        for bad in ("1.5", "-1", " 1", "", "1e3", "０"):
            with pytest.raises(ValueError):
                Amount.parse(bad)

    def test_checked_subtraction_reports_underflow(self):
        """Underflow is a value, never a clamp"""
        result = amount_sub_checked(Amount(5), Amount(8))
        assert isinstance(result, Underflow)
        assert result.shortfall == 3
        assert amount_sub_checked(Amount(8), Amount(5)) == Amount(3)

    @given(a=st.integers(min_value=0, max_value=10**40), b=st.integers(min_value=0, max_value=10**40))
    def test_checked_subtraction_property(self, a, b):
        """a - b is an Amount exactly when b <= a, and adding b back restores a"""
        result = amount_sub_checked(Amount(a), Amount(b))
        if b <= a:
            assert isinstance(result, Amount)
            assert result + Amount(b) == Amount(a)
        else:
            assert isinstance(result, Underflow)
            assert result.shortfall == b - a


class TestIdentifiers:
    """Chains, tokens, event references"""

    def test_chain_identity_is_the_name(self):
        assert ChainId("bsc", finality_lag=45) == ChainId("bsc")
        with pytest.raises(ValueError):
            ChainId("")
        with pytest.raises(ValueError):
            ChainId("bsc", finality_lag=-1)

    def test_token_equality_ignores_symbol_and_flags(self):
        plain = TokenId(ETH, "0xabc")
        assert plain == TokenId(ETH, "0xabc", "WETH", frozenset({TokenFlag.REFLECTION}))
        assert plain != TokenId(BSC, "0xabc")
        assert plain.with_flags([TokenFlag.TEST_TOKEN]).flags == frozenset({TokenFlag.TEST_TOKEN})

    def test_token_from_key(self):
        token = TokenId.from_key("ethereum:0xABC")
        assert token == TokenId(ETH, "0xabc")
        assert token.key() == "ethereum:0xabc"
        with pytest.raises(ValueError):
            TokenId.from_key("no-separator")

    def test_txref_key_and_dict(self):
        ref = TxRef(BSC, "0xdead", 3)
        assert TxRef.from_key(ref.key()) == ref
        assert TxRef.from_dict(ref.to_dict()) == ref


class TestPairKey:
    """Pairing handles populate exactly one variant"""

    def test_variants(self):
        assert PairKey.by_id("portal", 7).describe() == "id:portal:7"
        assert PairKey.by_deposit_hash("0xABCD").tx_hash == "0xabcd"
        assert PairKey.external("k1").to_wire() == {"ext": "k1"}

    def test_rejects_mixed_or_empty_variants(self):
        with pytest.raises(ValueError):
            PairKey(PairKeyKind.BY_ID, bridge_id="portal")
        with pytest.raises(ValueError):
            PairKey(PairKeyKind.BY_DEPOSIT_HASH, tx_hash="0x1", external_key="k")
        with pytest.raises(ValueError):
            PairKey.by_id("portal", -1)


class TestFeePolicy:
    def test_parameters_are_validated(self):
        with pytest.raises(ValueError):
            FeePolicy(FeePolicyKind.FIXED)
        with pytest.raises(ValueError):
            FeePolicy.proportional(1_000_000)
        assert FeePolicy.proportional(999_999).ppm == 999_999
        assert FeePolicy.indeterminate().kind == FeePolicyKind.INDETERMINATE


class TestEventOrder:
    @given(st.lists(
        st.tuples(
            st.integers(min_value=0, max_value=50),
            st.sampled_from(["bsc", "ethereum"]),
            st.integers(min_value=0, max_value=5),
            st.integers(min_value=0, max_value=5),
            st.sampled_from(["0x01", "0x02"]),
        ),
        max_size=20,
    ))
    def test_order_is_total_and_input_independent(self, rows):
        """Sorting gives the same sequence whatever the input order"""
        orders = [EventOrder(*row) for row in rows]
        assert sorted(orders) == sorted(reversed(orders))
        ordered = sorted(orders)
        assert all(a <= b for a, b in zip(ordered, ordered[1:]))

    def test_block_time_dominates_chain_name(self):
        assert EventOrder(10, "ethereum", 900, 0, "0x1") < EventOrder(11, "bsc", 1, 0, "0x1")
        assert EventOrder(10, "bsc", 900, 0, "0x1") < EventOrder(10, "ethereum", 1, 0, "0x1")


class TestTokenEquivalence:
    """Wrapped/native correspondence"""

    def test_declared_links_are_symmetric_and_transitive(self):
        weth = TokenId(ETH, "0x01")
        bweth = TokenId(BSC, "0x02")
        pweth = TokenId(POLYGON, "0x03")
        equiv = TokenEquivalence([(weth, bweth), (pweth, bweth)])
        assert equiv.equivalent(bweth, weth)
        assert equiv.equivalent(weth, pweth)
        assert equiv.class_of(weth) == equiv.class_of(pweth)
        assert len(equiv) == 2

    def test_unrelated_tokens(self):
        equiv = TokenEquivalence([(TokenId(ETH, "0x01"), TokenId(BSC, "0x02"))])
        stranger = TokenId(BSC, "0x99")
        assert equiv.equivalent(stranger, stranger)
        assert not equiv.equivalent(stranger, TokenId(ETH, "0x01"))
        assert equiv.class_of(stranger) == stranger.key()
