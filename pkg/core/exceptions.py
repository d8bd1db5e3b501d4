"""
Exception hierarchy for the bridge ledger auditor.

Absence of data (no deposit, no handle, underflow) is modelled as values
elsewhere; these exceptions cover malformed input and operational failures.
"""

from typing import Any, Optional


class BridgeAuditError(Exception):
    """Base class for all auditor errors"""


class ConfigError(BridgeAuditError):
    """Configuration file missing, unreadable or invalid"""


class ParseError(BridgeAuditError):
    """A single event-log record could not be parsed"""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UndecodableEvent(ParseError):
    """
    Record declares a kind but lacks the fields that kind requires.

    Carries whatever identity could be recovered so a withdrawal placeholder
    can still produce an Undecodable finding downstream, and a deposit
    placeholder can still be found by the withdrawals that name it.
    """

    def __init__(
        self,
        line: int,
        reason: str,
        ref: Optional[Any] = None,
        kind: Optional[str] = None,
        bridge_id: Optional[str] = None,
        block: int = 0,
        block_time: int = 0,
        deposit_id: Optional[int] = None,
    ):
        super().__init__(line, reason)
        self.ref = ref
        self.kind = kind
        self.bridge_id = bridge_id
        self.block = block
        self.block_time = block_time
        self.deposit_id = deposit_id


class AmountUnresolvable(BridgeAuditError):
    """No trusted claim, Transfer event or internal transaction gives the amount"""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class DuplicateDepositKey(BridgeAuditError):
    """Two deposits expose the same pairing handle"""

    def __init__(self, key: Any, first_ref: Any, second_ref: Any):
        super().__init__(f"duplicate deposit key {key}: {first_ref} and {second_ref}")
        self.key = key
        self.first_ref = first_ref
        self.second_ref = second_ref


class StoreError(BridgeAuditError):
    """Audit store I/O or corruption"""


class InvalidTransition(BridgeAuditError):
    """Withdrawal ticket moved along an edge the state machine does not allow"""

    def __init__(self, ticket_id: int, from_state: Any, to_state: Any):
        super().__init__(f"ticket {ticket_id}: illegal transition {from_state} -> {to_state}")
        self.ticket_id = ticket_id
        self.from_state = from_state
        self.to_state = to_state


class SourceError(BridgeAuditError):
    """A chain source failed to deliver its next batch"""

    def __init__(self, chain: str, reason: str):
        super().__init__(f"{chain}: {reason}")
        self.chain = chain
        self.reason = reason
