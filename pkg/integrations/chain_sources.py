"""
Chain sources for the live monitor.

A source hands out finalized events only: everything whose block_time is at
or before `now - finality_lag`, in file order, never the same block twice.
A peeked batch is served again until the caller commits it.
FileChainSource tails a normalized event-log file; SimChainSource serves a
generated trace held in memory. Real RPC adapters would implement the same
interface.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from core.exceptions import ParseError, SourceError, UndecodableEvent
from core.ingest import ChainEvent, parse_event_log
from core.models import ChainId
from core.simchain import GeneratedTrace

logger = logging.getLogger(__name__)


@dataclass
class SourceBatch:
    """One poll's worth of finalized events from one chain"""
    chain: ChainId
    events: List[ChainEvent]
    head_block: int
    head_time: int
    undecodable: List[UndecodableEvent] = field(default_factory=list)


class ChainSource(ABC):
    """Provider of in-order, non-overlapping batches of finalized events"""

    def __init__(self, chain: ChainId):
        self.chain = chain
        self.last_block: Optional[int] = None
        self.head_time: Optional[int] = None
        self._staged: Optional[Tuple[int, Optional[int], int]] = None
        self.logger = logging.getLogger(f"{self.__class__.__name__}.{chain.name}")

    def resume_from(self, block: int, head_time: int) -> None:
        """Continue after a checkpointed (block, finalized head time)"""
        self.last_block = None if block < 0 else block
        self.head_time = head_time
        self._staged = None
        self.logger.info(f"Resuming {self.chain} after block {block} (head time {head_time})")

    @property
    def positioned(self) -> bool:
        return self.head_time is not None

    @property
    def position(self) -> Optional[Tuple[int, int]]:
        """Committed (head block, head time) in checkpoint form"""
        if self.head_time is None:
            return None
        return (self.last_block if self.last_block is not None else -1, self.head_time)

    @abstractmethod
    def _pending(self) -> List[Union[ChainEvent, ParseError]]:
        """Events read but not yet handed out, in log order"""

    @abstractmethod
    def _consume(self, count: int) -> None:
        """Drop the first `count` pending items"""

    async def peek_finalized_batch(self, now: int) -> SourceBatch:
        """
        Finalized events after the committed position.

        The source does not move until commit(); peeking again re-serves the
        same events plus anything finalized since.
        """
        cutoff = now - self.chain.finality_lag
        pending = self._pending()
        events: List[ChainEvent] = []
        undecodable: List[UndecodableEvent] = []
        taken = 0
        for item in pending:
            item_time = item.block_time if isinstance(item, (ChainEvent, UndecodableEvent)) else None
            if item_time is not None and item_time > cutoff:
                break
            taken += 1
            if isinstance(item, ChainEvent):
                if self.last_block is not None and item.block <= self.last_block:
                    continue
                events.append(item)
            elif isinstance(item, UndecodableEvent) and item.ref is not None:
                if self.last_block is not None and item.block <= self.last_block:
                    continue
                undecodable.append(item)
            else:
                self.logger.warning(f"Skipping unparseable record: {item}")

        last_block = self.last_block
        blocks = [event.block for event in events] + [item.block for item in undecodable]
        if blocks:
            last_block = max(last_block if last_block is not None else 0, max(blocks))
        head_time = max(self.head_time if self.head_time is not None else cutoff, cutoff)
        self._staged = (taken, last_block, head_time)
        head_block = last_block if last_block is not None else -1
        return SourceBatch(self.chain, events, head_block, head_time, undecodable)

    def commit(self) -> None:
        """Move past the last peeked batch"""
        if self._staged is None:
            return
        taken, last_block, head_time = self._staged
        self._consume(taken)
        self.last_block = last_block
        self.head_time = head_time
        self._staged = None

    async def next_finalized_batch(self, now: int) -> SourceBatch:
        batch = await self.peek_finalized_batch(now)
        self.commit()
        return batch


class FileChainSource(ChainSource):
    """Tails a newline-delimited event log; only complete lines are read"""

    def __init__(self, path: Union[str, Path], chain: ChainId):
        super().__init__(chain)
        self.path = Path(path)
        self._offset = 0
        self._line = 0
        self._buffer: List[Union[ChainEvent, ParseError]] = []

    def _read_new_lines(self) -> List[bytes]:
        try:
            with open(self.path, "rb") as handle:
                handle.seek(self._offset)
                data = handle.read()
        except OSError as e:
            raise SourceError(self.chain.name, f"cannot read {self.path}: {e}") from e
        complete = data[: data.rfind(b"\n") + 1]
        self._offset += len(complete)
        return complete.splitlines(keepends=True)

    def _pending(self) -> List[Union[ChainEvent, ParseError]]:
        lines = self._read_new_lines()
        for item in parse_event_log(lines, self.chain):
            if isinstance(item, ParseError):
                item.line += self._line
            self._buffer.append(item)
        self._line += len(lines)
        return self._buffer

    def _consume(self, count: int) -> None:
        del self._buffer[:count]


class SimChainSource(ChainSource):
    """Serves a pre-generated per-chain event list as if it were a live chain"""

    def __init__(self, chain: ChainId, events: Sequence[ChainEvent]):
        super().__init__(chain)
        self._events: List[Union[ChainEvent, ParseError]] = sorted(events, key=ChainEvent.order)
        self._cursor = 0

    def _pending(self) -> List[Union[ChainEvent, ParseError]]:
        return self._events[self._cursor:]

    def _consume(self, count: int) -> None:
        self._cursor += count

    @property
    def exhausted(self) -> bool:
        return self._cursor >= len(self._events)


def sources_for_trace(trace: GeneratedTrace) -> List[SimChainSource]:
    """One SimChainSource per chain of a generated trace, with configured finality lags"""
    return [SimChainSource(chain, trace.logs.get(chain.name, [])) for chain in trace.chain_ids()]
