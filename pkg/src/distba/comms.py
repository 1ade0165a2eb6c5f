"""In-process collectives for K worker threads.

Every collective is a rendezvous: each rank deposits its payload, the last
rank to arrive reduces the payloads in ascending rank order, and all ranks
leave with the same result. Reductions therefore give bit-identical results
on every rank and are reproducible for a fixed K.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class CollectiveError(RuntimeError):
    pass


class CollectiveMismatchError(CollectiveError):
    """Ranks disagree on the collective being executed (kind, sequence or length)."""


class CollectiveTimeoutError(CollectiveError):
    def __init__(self, kind: str, seq: int, missing: list[int]):
        self.missing = missing
        super().__init__(f"{kind} #{seq} timed out; ranks not arrived: {missing}")


class GroupAbortedError(CollectiveError):
    pass


@dataclass
class _Entry:
    seq: int
    kind: str
    payload: Any


@dataclass
class _Outcome:
    value: Any = None
    error: Exception | None = None
    readers: int = 0


class WorkerGroup:
    def __init__(self, size: int, timeout: float = 120.0):
        if size < 1:
            raise ValueError(f"group size must be >= 1, got {size}")
        self.size = size
        self.timeout = timeout
        self._cond = threading.Condition()
        self._arrived: dict[int, _Entry] = {}
        self._generation = 0
        self._outcomes: dict[int, _Outcome] = {}
        self._seq = [0] * size
        self._abort: tuple[int, BaseException] | None = None

    def sequence(self, rank: int) -> int:
        return self._seq[rank]

    def abort(self, rank: int, exc: BaseException) -> None:
        """Mark the group broken so peers blocked in a collective fail fast."""
        with self._cond:
            if self._abort is None:
                self._abort = (rank, exc)
            self._cond.notify_all()

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside group of size {self.size}")

    def _collective(self, rank: int, kind: str, payload: Any, combine: Callable[[list[Any]], Any]) -> Any:
        self._check_rank(rank)
        seq = self._seq[rank]
        self._seq[rank] += 1
        if self.size == 1:
            return combine([payload])
        with self._cond:
            if self._abort is not None:
                raise GroupAbortedError(f"group aborted by rank {self._abort[0]}: {self._abort[1]!r}")
            gen = self._generation
            if rank in self._arrived:
                raise CollectiveMismatchError(f"rank {rank} entered {kind} #{seq} twice")
            self._arrived[rank] = _Entry(seq, kind, payload)
            if len(self._arrived) == self.size:
                entries = [self._arrived[r] for r in range(self.size)]
                outcome = _Outcome(readers=self.size)
                try:
                    sig = {(e.seq, e.kind) for e in entries}
                    if len(sig) != 1:
                        raise CollectiveMismatchError(
                            "ranks called mismatched collectives: "
                            + ", ".join(f"rank {r}: {e.kind} #{e.seq}" for r, e in enumerate(entries))
                        )
                    outcome.value = combine([e.payload for e in entries])
                except Exception as exc:  # delivered to every rank
                    outcome.error = exc
                self._outcomes[gen] = outcome
                self._arrived = {}
                self._generation += 1
                self._cond.notify_all()
            else:
                done = self._cond.wait_for(
                    lambda: self._generation != gen or self._abort is not None, timeout=self.timeout
                )
                if self._generation == gen:
                    if self._abort is not None:
                        raise GroupAbortedError(f"group aborted by rank {self._abort[0]}: {self._abort[1]!r}")
                    if not done:
                        missing = [r for r in range(self.size) if r not in self._arrived]
                        raise CollectiveTimeoutError(kind, seq, missing)
            outcome = self._outcomes[gen]
            outcome.readers -= 1
            if outcome.readers == 0:
                del self._outcomes[gen]
        if outcome.error is not None:
            raise outcome.error
        return outcome.value

    # -- public collectives -------------------------------------------------

    def allreduce_sum(self, rank: int, local) -> np.ndarray:
        """Sum ``local`` over ranks in ascending rank order; every rank gets a private copy."""
        local = np.asarray(local)
        result = self._collective(rank, "allreduce", local, _ordered_sum)
        return result.copy()

    def allreduce_scalar(self, rank: int, value: float) -> float:
        return float(self.allreduce_sum(rank, np.array([value]))[0])

    def allreduce_max(self, rank: int, local) -> np.ndarray:
        """Elementwise maximum over ranks."""
        local = np.asarray(local)
        return self._collective(rank, "allreduce_max", local, _ordered_max).copy()

    def barrier(self, rank: int) -> None:
        self._collective(rank, "barrier", None, lambda payloads: None)

    def assert_identical(self, rank: int, value, what: str = "value") -> None:
        """Debug collective: raise if ``value`` differs (bitwise) between ranks."""
        arr = np.ascontiguousarray(value)

        def check(payloads):
            ref = payloads[0]
            for r, p in enumerate(payloads[1:], 1):
                if p.shape != ref.shape or p.tobytes() != ref.tobytes():
                    raise CollectiveError(f"{what} differs between rank 0 and rank {r}")

        self._collective(rank, "assert_identical", arr, check)


def _ordered_sum(payloads: list[np.ndarray]) -> np.ndarray:
    if len({p.shape for p in payloads}) != 1:
        raise CollectiveMismatchError(f"allreduce buffer shapes differ across ranks: {[p.shape for p in payloads]}")
    total = payloads[0].copy()
    for p in payloads[1:]:
        total += p
    return total


def _ordered_max(payloads: list[np.ndarray]) -> np.ndarray:
    if len({p.shape for p in payloads}) != 1:
        raise CollectiveMismatchError(f"allreduce buffer shapes differ across ranks: {[p.shape for p in payloads]}")
    total = payloads[0].copy()
    for p in payloads[1:]:
        np.maximum(total, p, out=total)
    return total


def allreduce_sum(group: WorkerGroup, rank: int, local) -> np.ndarray:
    return group.allreduce_sum(rank, local)


def barrier(group: WorkerGroup, rank: int) -> None:
    group.barrier(rank)


def run_workers(size: int, fn: Callable[[WorkerGroup, int], Any], timeout: float = 120.0) -> list[Any]:
    """Run ``fn(group, rank)`` on ``size`` threads and return the per-rank results.

    An exception on any rank aborts the group and is re-raised here
    (lowest failing rank first).
    """
    group = WorkerGroup(size, timeout)
    if size == 1:
        return [fn(group, 0)]
    results: list[Any] = [None] * size
    errors: list[BaseException | None] = [None] * size

    def target(rank: int) -> None:
        try:
            results[rank] = fn(group, rank)
        except BaseException as exc:
            errors[rank] = exc
            group.abort(rank, exc)

    threads = [threading.Thread(target=target, args=(r,), name=f"worker-{r}") for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    primary = [e for e in errors if e is not None and not isinstance(e, GroupAbortedError)]
    if primary:
        raise primary[0]
    if any(errors):
        raise next(e for e in errors if e is not None)
    return results
