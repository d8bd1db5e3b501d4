"""
Core domain types for the bridge ledger auditor.

Identifiers, exact base-unit amounts, pairing handles, fee policies and the
deterministic event order shared by every other module. All types here are
immutable value types.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, NamedTuple, Optional, Tuple, Union

NATIVE_TOKEN = "native"
ZERO_ADDRESS = "0x" + "0" * 40
PPM_DENOMINATOR = 1_000_000


@dataclass(frozen=True)
class ChainId:
    """A monitored blockchain; identity is the name alone"""
    name: str
    finality_lag: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.name:
            raise ValueError("chain name must be non-empty")
        if self.finality_lag < 0:
            raise ValueError(f"finality_lag must be >= 0, got {self.finality_lag}")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, order=True)
class Amount:
    """Non-negative token amount in base units (never a float)"""
    value: int

    def __post_init__(self):
        if not isinstance(self.value, int) or isinstance(self.value, bool):
            raise TypeError(f"Amount must wrap an int, got {type(self.value).__name__}")
        if self.value < 0:
            raise ValueError(f"Amount cannot be negative: {self.value}")

    def __add__(self, other: "Amount") -> "Amount":
        return Amount(self.value + other.value)

    def __int__(self) -> int:
        return self.value

    def __str__(self) -> str:
        return str(self.value)

    @property
    def is_zero(self) -> bool:
        return self.value == 0

    @classmethod
    def parse(cls, text: str) -> "Amount":
        """Parse a decimal string of digits only"""
        if not isinstance(text, str) or not text.isascii() or not text.isdigit():
            raise ValueError(f"not a decimal amount: {text!r}")
        return cls(int(text))


@dataclass(frozen=True)
class Underflow:
    """Checked subtraction went below zero"""
    minuend: Amount
    subtrahend: Amount

    @property
    def shortfall(self) -> int:
        return self.subtrahend.value - self.minuend.value


def amount_sub_checked(a: Amount, b: Amount) -> Union[Amount, Underflow]:
    """Return a - b, or Underflow when b > a. Never clamps."""
    if a.value >= b.value:
        return Amount(a.value - b.value)
    return Underflow(a, b)


class TokenFlag(Enum):
    """Token behaviours that change how amounts are interpreted or reported"""
    REFLECTION = "reflection"
    TEST_TOKEN = "test_token"


@dataclass(frozen=True)
class TokenId:
    """A token on one chain; (chain, address) is the identity"""
    chain: ChainId
    address: str
    symbol: Optional[str] = field(default=None, compare=False)
    flags: FrozenSet[TokenFlag] = field(default=frozenset(), compare=False)

    @property
    def is_native(self) -> bool:
        return self.address == NATIVE_TOKEN

    def key(self) -> str:
        return f"{self.chain.name}:{self.address}"

    def with_flags(self, flags: Iterable[TokenFlag]) -> "TokenId":
        return TokenId(self.chain, self.address, self.symbol, frozenset(flags))

    @classmethod
    def from_key(cls, key: str) -> "TokenId":
        """Build from a "chain:address" string as used in config files"""
        chain, sep, address = key.partition(":")
        if not sep or not chain or not address:
            raise ValueError(f"token key must be 'chain:address', got {key!r}")
        return cls(ChainId(chain), address.lower())

    def __str__(self) -> str:
        return self.symbol or self.key()


@dataclass(frozen=True)
class TxRef:
    """Locates one event: (chain, tx_hash, log_index)"""
    chain: ChainId
    tx_hash: str
    log_index: int

    def key(self) -> str:
        return f"{self.chain.name}:{self.tx_hash}:{self.log_index}"

    @classmethod
    def from_key(cls, key: str) -> "TxRef":
        chain, tx_hash, log_index = key.rsplit(":", 2)
        return cls(ChainId(chain), tx_hash, int(log_index))

    def to_dict(self) -> Dict[str, object]:
        return {"chain": self.chain.name, "tx_hash": self.tx_hash, "log_index": self.log_index}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "TxRef":
        return cls(ChainId(str(data["chain"])), str(data["tx_hash"]), int(data["log_index"]))  # type: ignore[arg-type]

    def __str__(self) -> str:
        return self.key()


class PairKeyKind(Enum):
    """How a withdrawal names its backing deposit"""
    BY_ID = "id"
    BY_DEPOSIT_HASH = "hash"
    EXTERNAL = "ext"


@dataclass(frozen=True)
class PairKey:
    """A pairing handle; exactly one variant is populated"""
    kind: PairKeyKind
    bridge_id: Optional[str] = None
    deposit_id: Optional[int] = None
    tx_hash: Optional[str] = None
    external_key: Optional[str] = None

    def __post_init__(self):
        populated = {
            PairKeyKind.BY_ID: self.bridge_id is not None and self.deposit_id is not None,
            PairKeyKind.BY_DEPOSIT_HASH: self.tx_hash is not None,
            PairKeyKind.EXTERNAL: self.external_key is not None,
        }
        others = [kind for kind, present in populated.items() if present and kind != self.kind]
        if not populated[self.kind] or others:
            raise ValueError(f"PairKey {self.kind.value} must populate exactly its own variant")
        if self.deposit_id is not None and self.deposit_id < 0:
            raise ValueError("deposit_id must be unsigned")

    @classmethod
    def by_id(cls, bridge_id: str, deposit_id: int) -> "PairKey":
        return cls(PairKeyKind.BY_ID, bridge_id=bridge_id, deposit_id=deposit_id)

    @classmethod
    def by_deposit_hash(cls, tx_hash: str) -> "PairKey":
        return cls(PairKeyKind.BY_DEPOSIT_HASH, tx_hash=tx_hash.lower())

    @classmethod
    def external(cls, key: str) -> "PairKey":
        return cls(PairKeyKind.EXTERNAL, external_key=key)

    def describe(self) -> str:
        """Stable string form, used as a storage key"""
        if self.kind == PairKeyKind.BY_ID:
            return f"id:{self.bridge_id}:{self.deposit_id}"
        if self.kind == PairKeyKind.BY_DEPOSIT_HASH:
            return f"hash:{self.tx_hash}"
        return f"ext:{self.external_key}"

    def to_wire(self) -> Dict[str, object]:
        """The `pair_by` object of the event-log format"""
        if self.kind == PairKeyKind.BY_ID:
            return {"id": self.deposit_id}
        if self.kind == PairKeyKind.BY_DEPOSIT_HASH:
            return {"hash": self.tx_hash}
        return {"ext": self.external_key}

    def __str__(self) -> str:
        return self.describe()


class EventOrder(NamedTuple):
    """
    Total order over trace events.

    block_time first so cross-chain interleaving is reproducible, then chain
    name, block and log index; tx_hash only separates malformed fixtures that
    reuse a log index.
    """
    block_time: int
    chain: str
    block: int
    log_index: int
    tx_hash: str


class FeePolicyKind(Enum):
    """Ways a bridge charges costs"""
    EXPLICIT = "explicit"
    FIXED = "fixed"
    PROPORTIONAL = "proportional"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class FeePolicy:
    """Per-(bridge, token) rule for computing costs"""
    kind: FeePolicyKind
    amount: Optional[Amount] = None
    ppm: Optional[int] = None

    def __post_init__(self):
        if self.kind == FeePolicyKind.FIXED and self.amount is None:
            raise ValueError("fixed fee policy needs an amount")
        if self.kind == FeePolicyKind.PROPORTIONAL:
            if self.ppm is None or not 0 <= self.ppm < PPM_DENOMINATOR:
                raise ValueError(f"ppm must be in [0, {PPM_DENOMINATOR}), got {self.ppm}")

    @classmethod
    def explicit(cls) -> "FeePolicy":
        return cls(FeePolicyKind.EXPLICIT)

    @classmethod
    def fixed(cls, amount: int) -> "FeePolicy":
        return cls(FeePolicyKind.FIXED, amount=Amount(amount))

    @classmethod
    def proportional(cls, ppm: int) -> "FeePolicy":
        return cls(FeePolicyKind.PROPORTIONAL, ppm=ppm)

    @classmethod
    def indeterminate(cls) -> "FeePolicy":
        return cls(FeePolicyKind.INDETERMINATE)


class TokenEquivalence:
    """
    Wrapped/native correspondence across chains.

    Declared links are unordered; tokens joined through a chain of links share
    one equivalence class. Every token is equivalent to itself.
    """

    def __init__(self, pairs: Iterable[Tuple[TokenId, TokenId]] = ()):
        parent: Dict[str, str] = {}

        def find(key: str) -> str:
            parent.setdefault(key, key)
            while parent[key] != key:
                parent[key] = parent[parent[key]]
                key = parent[key]
            return key

        self.pairs: FrozenSet[FrozenSet[str]] = frozenset(
            frozenset((a.key(), b.key())) for a, b in pairs
        )
        for link in self.pairs:
            keys = sorted(link)
            root_a, root_b = find(keys[0]), find(keys[-1])
            if root_a != root_b:
                parent[max(root_a, root_b)] = min(root_a, root_b)

        self._class: Dict[str, str] = {key: find(key) for key in list(parent)}

    def class_of(self, token: TokenId) -> str:
        """Representative key of the token's equivalence class"""
        key = token.key()
        return self._class.get(key, key)

    def equivalent(self, a: TokenId, b: TokenId) -> bool:
        return a == b or self.class_of(a) == self.class_of(b)

    def __len__(self) -> int:
        return len(self.pairs)
