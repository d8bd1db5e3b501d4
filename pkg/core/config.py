"""
Configuration models for the bridge ledger auditor.

JSON config files are validated with pydantic; monitor settings fall back to
environment variables (after load_dotenv) and then to built-in defaults.
"""

import json
import logging
import os
from fractions import Fraction
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Optional, Set, Tuple, Union

from dotenv import load_dotenv
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)

from .exceptions import ConfigError
from .models import ChainId, FeePolicy, FeePolicyKind, TokenEquivalence, TokenFlag, TokenId

logger = logging.getLogger(__name__)

NINETY_DAYS = 90 * 24 * 3600


class FeePolicyConfig(BaseModel):
    """Fee rule as written in a config file"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["explicit", "fixed", "proportional", "indeterminate"] = "indeterminate"
    amount: Optional[int] = Field(default=None, ge=0)
    ppm: Optional[int] = Field(default=None, ge=0, lt=1_000_000)

    @model_validator(mode="after")
    def _check_parameters(self) -> "FeePolicyConfig":
        if self.kind == "fixed" and self.amount is None:
            raise ValueError("fixed fee policy needs 'amount'")
        if self.kind == "proportional" and self.ppm is None:
            raise ValueError("proportional fee policy needs 'ppm'")
        return self

    def to_policy(self) -> FeePolicy:
        if self.kind == "fixed":
            return FeePolicy.fixed(self.amount or 0)
        if self.kind == "proportional":
            return FeePolicy.proportional(self.ppm or 0)
        return FeePolicy(FeePolicyKind(self.kind))


class ReflectionScaleConfig(BaseModel):
    """Exact rational applied to logged Transfer values over a block range"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    token: str
    numerator: int = Field(gt=0)
    denominator: int = Field(gt=0)
    from_block: int = Field(default=0, ge=0)
    to_block: Optional[int] = Field(default=None, ge=0)

    def covers(self, block: int) -> bool:
        return self.from_block <= block and (self.to_block is None or block <= self.to_block)


class ChainConfig(BaseModel):
    """A monitored chain"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(min_length=1)
    finality_lag: int = Field(default=0, ge=0)
    block_interval: int = Field(default=12, gt=0)

    def chain_id(self) -> ChainId:
        return ChainId(self.name, self.finality_lag)


class BridgeConfig(BaseModel):
    """Per-bridge auditing rules"""
    model_config = ConfigDict(extra="forbid")

    bridge_id: str = Field(min_length=1)
    pairing_strategies: List[Literal["id", "hash", "external"]] = Field(
        default_factory=lambda: ["id", "hash", "external"]
    )
    trusted_claims: bool = False
    treat_missing_transfer_as_zero: bool = False
    addresses: List[str] = Field(default_factory=list)
    default_fee: FeePolicyConfig = Field(default_factory=FeePolicyConfig)
    fee_policies: Dict[str, FeePolicyConfig] = Field(default_factory=dict)
    token_equivalence: List[Tuple[str, str]] = Field(default_factory=list)
    reflection_scales: List[ReflectionScaleConfig] = Field(default_factory=list)
    test_tokens: List[str] = Field(default_factory=list)
    tokens: List[str] = Field(default_factory=list)
    transfer_log_offsets: List[int] = Field(default_factory=list)
    strict_fees: bool = False

    _equivalence: Optional[TokenEquivalence] = PrivateAttr(default=None)

    @field_validator("addresses", "test_tokens", "tokens")
    @classmethod
    def _lowercase(cls, values: List[str]) -> List[str]:
        return [value.lower() for value in values]

    @field_validator("token_equivalence")
    @classmethod
    def _lowercase_pairs(cls, pairs: List[Tuple[str, str]]) -> List[Tuple[str, str]]:
        return [(a.lower(), b.lower()) for a, b in pairs]

    @model_validator(mode="after")
    def _check_token_keys(self) -> "BridgeConfig":
        keys = list(self.test_tokens) + list(self.tokens) + [scale.token for scale in self.reflection_scales]
        keys += [key for pair in self.token_equivalence for key in pair]
        keys += [key for key in self.fee_policies if key != "*"]
        for key in keys:
            TokenId.from_key(key)
        return self

    # Derived views, cached on first use

    def bridge_addresses(self) -> FrozenSet[str]:
        return frozenset(self.addresses)

    def fee_policy_for(self, *tokens: TokenId) -> FeePolicy:
        """Policy for the first token with an entry, else the bridge default"""
        for token in tokens:
            entry = self.fee_policies.get(token.key())
            if entry is not None:
                return entry.to_policy()
        entry = self.fee_policies.get("*", self.default_fee)
        return entry.to_policy()

    def equivalence(self) -> TokenEquivalence:
        if self._equivalence is None:
            self._equivalence = TokenEquivalence(
                (TokenId.from_key(a), TokenId.from_key(b)) for a, b in self.token_equivalence
            )
        return self._equivalence

    def token_flags(self, token: TokenId) -> Set[TokenFlag]:
        flags: Set[TokenFlag] = set()
        key = token.key()
        if key in self.test_tokens:
            flags.add(TokenFlag.TEST_TOKEN)
        if any(scale.token == key for scale in self.reflection_scales):
            flags.add(TokenFlag.REFLECTION)
        return flags

    def flagged(self, token: TokenId) -> TokenId:
        return token.with_flags(self.token_flags(token))

    def reflection_scale(self, token: TokenId, block: int) -> Optional[Fraction]:
        key = token.key()
        for scale in self.reflection_scales:
            if scale.token == key and scale.covers(block):
                return Fraction(scale.numerator, scale.denominator)
        return None

    def declared_tokens(self) -> FrozenSet[str]:
        """Every token key this bridge's config mentions"""
        keys = set(self.tokens) | set(self.test_tokens)
        keys |= {scale.token for scale in self.reflection_scales}
        keys |= {key for pair in self.token_equivalence for key in pair}
        keys |= {key for key in self.fee_policies if key != "*"}
        return frozenset(keys)


class MonitorConfig(BaseModel):
    """Live monitor settings"""
    model_config = ConfigDict(extra="forbid")

    poll_interval: int = Field(default=60, gt=0)
    hot_window: int = Field(default=NINETY_DAYS, gt=0)
    sink: Literal["jsonl", "webhook"] = "jsonl"
    sink_path: str = "alerts.jsonl"
    webhook_url: str = "https://alerts.invalid/bridge-audit"
    alert_on_unknown_token: bool = True
    concurrent_sources: bool = False

    @classmethod
    def create_default(cls) -> "MonitorConfig":
        """Defaults overridden by BRIDGE_AUDIT_* environment variables"""
        load_dotenv()
        overrides: Dict[str, Union[int, str]] = {}
        if os.getenv("BRIDGE_AUDIT_POLL_INTERVAL"):
            overrides["poll_interval"] = int(os.environ["BRIDGE_AUDIT_POLL_INTERVAL"])
        if os.getenv("BRIDGE_AUDIT_HOT_WINDOW"):
            overrides["hot_window"] = int(os.environ["BRIDGE_AUDIT_HOT_WINDOW"])
        if os.getenv("BRIDGE_AUDIT_SINK"):
            overrides["sink"] = os.environ["BRIDGE_AUDIT_SINK"]
        try:
            return cls(**overrides)
        except ValidationError as e:
            raise ConfigError(f"invalid BRIDGE_AUDIT_* environment: {e}") from e


class AuditConfig(BaseModel):
    """Top-level deployment configuration"""
    model_config = ConfigDict(extra="forbid")

    chains: List[ChainConfig] = Field(default_factory=list)
    bridges: List[BridgeConfig] = Field(default_factory=list)
    strict_fees: bool = False
    monitor: MonitorConfig = Field(default_factory=MonitorConfig.create_default)

    @model_validator(mode="after")
    def _unique_names(self) -> "AuditConfig":
        names = [chain.name for chain in self.chains]
        if len(names) != len(set(names)):
            raise ValueError(f"chain names must be unique: {names}")
        bridge_ids = [bridge.bridge_id for bridge in self.bridges]
        if len(bridge_ids) != len(set(bridge_ids)):
            raise ValueError(f"bridge ids must be unique: {bridge_ids}")
        return self

    def chain(self, name: str) -> ChainId:
        for chain in self.chains:
            if chain.name == name:
                return chain.chain_id()
        return ChainId(name)

    def chain_ids(self) -> List[ChainId]:
        return [chain.chain_id() for chain in self.chains]

    def bridge(self, bridge_id: str) -> BridgeConfig:
        """Config for a bridge; unknown bridges get conservative defaults"""
        for bridge in self.bridges:
            if bridge.bridge_id == bridge_id:
                if self.strict_fees and not bridge.strict_fees:
                    return bridge.model_copy(update={"strict_fees": True})
                return bridge
        logger.debug(f"No config for bridge {bridge_id}, using defaults")
        return BridgeConfig(bridge_id=bridge_id, strict_fees=self.strict_fees)

    def declared_tokens(self) -> FrozenSet[str]:
        keys: Set[str] = set()
        for bridge in self.bridges:
            keys |= bridge.declared_tokens()
        return frozenset(keys)


class ReportRules(BaseModel):
    """Label rules for the category report"""
    model_config = ConfigDict(extra="forbid")

    reported_txs: List[str] = Field(default_factory=list)
    suspicious_addresses: List[str] = Field(default_factory=list)
    category_labels: Dict[str, Literal["New", "Test", "Error", "Suspicious"]] = Field(default_factory=dict)

    @field_validator("reported_txs", "suspicious_addresses")
    @classmethod
    def _lowercase(cls, values: List[str]) -> List[str]:
        return [value.lower() for value in values]


def load_report_rules(path: Union[str, Path, None]) -> ReportRules:
    if path is None:
        return ReportRules()
    try:
        return ReportRules.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as e:
        raise ConfigError(f"cannot read rules {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"invalid rules {path}: {e}") from e


def load_audit_config(path: Union[str, Path, None], strict_fees: bool = False) -> AuditConfig:
    """Read and validate an AuditConfig JSON file; None yields the defaults"""
    if path is None:
        config = AuditConfig()
    else:
        try:
            raw = Path(path).read_text(encoding="utf-8")
            config = AuditConfig.model_validate(json.loads(raw))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except (json.JSONDecodeError, ValidationError, ValueError) as e:
            raise ConfigError(f"invalid config {path}: {e}") from e
    if strict_fees:
        config = config.model_copy(update={"strict_fees": True})
    logger.info(f"Loaded audit config: {len(config.chains)} chains, {len(config.bridges)} bridges")
    return config
