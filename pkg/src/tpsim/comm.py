"""Simulated message-passing fabric with exact element accounting.

Every collective is decomposed into point-to-point sends so the ledger counts
follow from the decomposition alone:

=============== ======================================== =================
primitive       decomposition                            total volume
=============== ======================================== =================
broadcast       root sends to every other member         (g-1)*m
reduce          every non-root sends to the root         (g-1)*m
all_reduce      ring reduce-scatter + ring all-gather    2*(g-1)*m
all_gather      ring, shards of m/g                      (g-1)*m
reduce_scatter  ring, slices of m/g                      (g-1)*m
ring_shift      every member sends to its successor      g*m
=============== ======================================== =================

``m`` is the full tensor size (for all_gather: the gathered size).

A rank program is a callable taking a :class:`RankComm`. :meth:`Fabric.run`
executes one copy per rank under either scheduler:

``"threads"``
    one OS thread per rank, free-running, blocking on channel conditions.
``"roundrobin"``
    cooperative: exactly one rank executes at a time; control passes to the
    next runnable rank in ascending order (wrapping) only when the running
    rank blocks or finishes.

Programs interact only through FIFO channels keyed by (sender, receiver) and
receives name their source, so values and ledger totals are identical under
both schedulers.
"""
from __future__ import annotations

import csv
import re
import threading
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .errors import (
    Deadlock,
    RankAborted,
    RootNotInGroup,
    SelfSend,
    ShapeMismatch,
    IndivisibleLength,
    UnknownRank,
)
from .mesh import CommGroup

SCHEDULERS = ("threads", "roundrobin")


@dataclass(frozen=True)
class LedgerRow:
    primitive: str
    group: str
    rank: int
    elements_sent: int
    elements_received: int


def axis_of(group_id: str) -> str:
    return re.sub(r"\d+$", "", group_id)


class CommLedger:
    """Counters keyed by (primitive, group id, rank)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sent = defaultdict(int)
        self._received = defaultdict(int)

    def record(self, primitive: str, group: str, sender: int, receiver: int, elements: int):
        with self._lock:
            self._sent[(primitive, group, sender)] += elements
            self._received[(primitive, group, receiver)] += elements

    def rows(self) -> list[LedgerRow]:
        with self._lock:
            keys = sorted(set(self._sent) | set(self._received))
            return [
                LedgerRow(p, g, r, self._sent.get((p, g, r), 0), self._received.get((p, g, r), 0))
                for p, g, r in keys
            ]

    def total_sent(self, primitive: str | None = None, axis: str | None = None) -> int:
        return sum(
            row.elements_sent
            for row in self.rows()
            if (primitive is None or row.primitive == primitive)
            and (axis is None or axis_of(row.group) == axis)
        )

    def total_received(self) -> int:
        return sum(row.elements_received for row in self.rows())

    def sent_by_rank(self, rank: int) -> int:
        return sum(row.elements_sent for row in self.rows() if row.rank == rank)

    def by_axis(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for row in self.rows():
            out[axis_of(row.group)] += row.elements_sent
        return dict(sorted(out.items()))

    def by_primitive(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for row in self.rows():
            out[row.primitive] += row.elements_sent
        return dict(sorted(out.items()))

    def to_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["primitive", "group", "rank", "elements_sent", "elements_received"])
        for row in self.rows():
            w.writerow([row.primitive, row.group, row.rank, row.elements_sent, row.elements_received])


class Fabric:
    """Channels, scheduler and ledger for ``world_size`` simulated ranks."""

    def __init__(self, world_size: int, scheduler: str = "threads", ledger: CommLedger | None = None):
        if scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}, got {scheduler!r}")
        self.world_size = world_size
        self.scheduler = scheduler
        self.ledger = ledger if ledger is not None else CommLedger()
        self._cond = threading.Condition()

    # -- scheduling -------------------------------------------------------

    def run(self, program, timeout: float | None = None) -> list:
        """Run ``program(comm)`` on every rank; return per-rank results."""
        p = self.world_size
        self._channels = defaultdict(deque)
        self._arrivals = defaultdict(list)
        self._waiting = [None] * p
        self._finished = [False] * p
        self._failure = None
        self._baton = 0
        results = [None] * p

        def worker(rank):
            comm = RankComm(self, rank)
            try:
                if self.scheduler == "roundrobin":
                    with self._cond:
                        while self._baton != rank and self._failure is None:
                            self._cond.wait()
                        self._raise_if_failed()
                results[rank] = program(comm)
            except BaseException as exc:  # noqa: BLE001 - propagated to run()
                with self._cond:
                    if self._failure is None and not isinstance(exc, RankAborted):
                        self._failure = exc
                    self._cond.notify_all()
            finally:
                with self._cond:
                    self._finished[rank] = True
                    self._waiting[rank] = None
                    if self.scheduler == "roundrobin":
                        if self._baton == rank:
                            self._pass_baton(rank)
                    elif self._all_stuck():
                        self._fail(Deadlock(self._stuck_message()))
                    self._cond.notify_all()

        threads = [threading.Thread(target=worker, args=(r,), daemon=True) for r in range(p)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout)
            if t.is_alive():
                with self._cond:
                    self._fail(Deadlock("rank program did not finish within the timeout"))
                t.join()
        if self._failure is not None:
            raise self._failure
        return results

    def _raise_if_failed(self):
        if self._failure is not None:
            raise RankAborted(f"aborted after failure elsewhere: {self._failure!r}")

    def _fail(self, exc):
        if self._failure is None:
            self._failure = exc
        self._cond.notify_all()

    def _all_stuck(self) -> bool:
        live = [r for r in range(self.world_size) if not self._finished[r]]
        if not live:
            return False
        return all(self._waiting[r] is not None and not self._waiting[r]() for r in live)

    def _stuck_message(self) -> str:
        live = [r for r in range(self.world_size) if not self._finished[r]]
        return f"deadlock: ranks {live} are all blocked"

    def _pass_baton(self, current: int):
        p = self.world_size
        for off in range(1, p + 1):
            r = (current + off) % p
            if self._finished[r]:
                continue
            pred = self._waiting[r]
            if pred is None or pred():
                self._baton = r
                self._cond.notify_all()
                return
        self._baton = None
        if not all(self._finished):
            self._fail(Deadlock(self._stuck_message()))

    def _block_until(self, rank: int, pred):
        """Called with ``self._cond`` held."""
        if self.scheduler == "roundrobin":
            self._raise_if_failed()
            if pred():
                return
            self._waiting[rank] = pred
            self._pass_baton(rank)
            while self._baton != rank and self._failure is None:
                self._cond.wait()
            self._waiting[rank] = None
            self._raise_if_failed()
            return
        while True:
            self._raise_if_failed()
            if pred():
                self._waiting[rank] = None
                return
            self._waiting[rank] = pred
            if self._all_stuck():
                self._fail(Deadlock(self._stuck_message()))
                self._raise_if_failed()
            self._cond.wait()

    # -- raw transport ----------------------------------------------------

    def _check_rank(self, rank: int):
        if not isinstance(rank, (int, np.integer)) or not 0 <= rank < self.world_size:
            raise UnknownRank(f"rank {rank!r} not in fabric of size {self.world_size}")

    def _post(self, src: int, dst: int, payload: np.ndarray, primitive: str, group: str):
        self._check_rank(dst)
        if src == dst:
            raise SelfSend(f"rank {src} cannot send to itself")
        data = np.array(payload, dtype=np.float64, copy=True)
        self.ledger.record(primitive, group, src, dst, int(data.size))
        with self._cond:
            self._channels[(src, dst)].append(data)
            self._cond.notify_all()

    def _take(self, dst: int, src: int) -> np.ndarray:
        self._check_rank(src)
        if src == dst:
            raise SelfSend(f"rank {dst} cannot receive from itself")
        with self._cond:
            chan = self._channels[(src, dst)]
            self._block_until(dst, lambda: len(chan) > 0)
            return chan.popleft()

    def _rendezvous(self, rank: int, key, meta):
        """Zero-volume barrier; returns every member's ``meta`` in member order."""
        group_ranks = key[0]
        with self._cond:
            slot = self._arrivals[key]
            slot.append((rank, meta))
            self._cond.notify_all()
            self._block_until(rank, lambda: len(slot) >= len(group_ranks))
            order = {r: m for r, m in slot}
            return [order[r] for r in group_ranks]


class RankComm:
    """A single rank's view of the fabric."""

    def __init__(self, fabric: Fabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self._seq: dict[tuple, int] = defaultdict(int)

    @property
    def world_size(self) -> int:
        return self.fabric.world_size

    # -- point to point ---------------------------------------------------

    def send(self, to: int, payload):
        self.fabric._post(self.rank, to, np.asarray(payload), "send", "p2p")

    def recv(self, frm: int) -> np.ndarray:
        return self.fabric._take(self.rank, frm)

    # -- helpers ----------------------------------------------------------

    def _enter(self, group: CommGroup, meta=None) -> list:
        if self.rank not in group.ranks:
            raise UnknownRank(f"rank {self.rank} is not a member of group {group.id}")
        if len(set(group.ranks)) != len(group.ranks):
            raise ValueError(f"group {group.id} has repeated members")
        key = (group.ranks, group.id)
        self._seq[key] += 1
        return self.fabric._rendezvous(self.rank, (group.ranks, group.id, self._seq[key]), meta)

    def _same_shapes(self, group: CommGroup, arr: np.ndarray, what: str):
        shapes = self._enter(group, arr.shape)
        if any(s != arr.shape for s in shapes):
            raise ShapeMismatch(f"{what} on {group.id}: member shapes differ {shapes}")

    def _ring(self, group: CommGroup):
        g = group.size
        idx = group.index(self.rank)
        return idx, group.ranks[(idx + 1) % g], group.ranks[(idx - 1) % g]

    def barrier(self, group: CommGroup):
        self._enter(group)

    # -- collectives ------------------------------------------------------

    def broadcast(self, group: CommGroup, root: int, payload=None) -> np.ndarray:
        if root not in group.ranks:
            raise RootNotInGroup(f"root {root} not in group {group.id}")
        self._enter(group)
        if self.rank == root:
            data = np.array(payload, dtype=np.float64, copy=True)
            for r in group.ranks:
                if r != root:
                    self.fabric._post(root, r, data, "broadcast", group.id)
            return data
        return self.fabric._take(self.rank, root)

    def reduce(self, group: CommGroup, root: int, payload) -> np.ndarray | None:
        """Sum onto ``root`` in ascending member order; non-roots get None."""
        if root not in group.ranks:
            raise RootNotInGroup(f"root {root} not in group {group.id}")
        x = np.asarray(payload, dtype=np.float64)
        self._same_shapes(group, x, "reduce")
        if self.rank != root:
            self.fabric._post(self.rank, root, x, "reduce", group.id)
            return None
        acc = None
        for r in group.ranks:
            v = x if r == root else self.fabric._take(root, r)
            acc = v.copy() if acc is None else acc + v
        return acc

    def all_reduce(self, group: CommGroup, payload) -> np.ndarray:
        """Elementwise sum over the group.

        Chunk ``c`` of the flattened payload is accumulated along the ring
        starting at member ``c+1`` and ending at member ``c``, i.e. in the
        order ``c+1, c+2, ..., g-1, 0, ..., c``. The order is fixed, so results
        are bit-identical between runs and schedulers.
        """
        x = np.asarray(payload, dtype=np.float64)
        self._same_shapes(group, x, "all_reduce")
        g = group.size
        if g == 1:
            return x.copy()
        idx, nxt, prv = self._ring(group)
        chunks = [c.copy() for c in np.array_split(x.ravel(), g)]
        for s in range(g - 1):
            self.fabric._post(self.rank, nxt, chunks[(idx - s - 1) % g], "all_reduce", group.id)
            c = (idx - s - 2) % g
            chunks[c] = self.fabric._take(self.rank, prv) + chunks[c]
        for s in range(g - 1):
            self.fabric._post(self.rank, nxt, chunks[(idx - s) % g], "all_reduce", group.id)
            chunks[(idx - s - 1) % g] = self.fabric._take(self.rank, prv)
        return np.concatenate(chunks).reshape(x.shape)

    def all_gather(self, group: CommGroup, shard) -> np.ndarray:
        """Concatenate member shards along axis 0 in member order."""
        x = np.asarray(shard, dtype=np.float64)
        self._same_shapes(group, x, "all_gather")
        g = group.size
        if g == 1:
            return x.copy()
        idx, nxt, prv = self._ring(group)
        blocks = [None] * g
        blocks[idx] = x.copy()
        for s in range(g - 1):
            self.fabric._post(self.rank, nxt, blocks[(idx - s) % g], "all_gather", group.id)
            blocks[(idx - s - 1) % g] = self.fabric._take(self.rank, prv)
        return np.concatenate(blocks, axis=0)

    def reduce_scatter(self, group: CommGroup, payload) -> np.ndarray:
        """Sum over the group, leaving member ``i`` with the ``i``-th slice along axis 0."""
        x = np.asarray(payload, dtype=np.float64)
        self._same_shapes(group, x, "reduce_scatter")
        g = group.size
        if x.ndim == 0 or x.shape[0] % g:
            raise IndivisibleLength(f"leading dim of {x.shape} not divisible by group size {g}")
        if g == 1:
            return x.copy()
        idx, nxt, prv = self._ring(group)
        blocks = [b.copy() for b in np.split(x, g, axis=0)]
        for s in range(g - 1):
            self.fabric._post(self.rank, nxt, blocks[(idx - s - 1) % g], "reduce_scatter", group.id)
            c = (idx - s - 2) % g
            blocks[c] = self.fabric._take(self.rank, prv) + blocks[c]
        return blocks[idx]

    def ring_shift(self, group: CommGroup, payload) -> np.ndarray:
        """Member ``i`` receives the payload of member ``i-1``."""
        x = np.asarray(payload, dtype=np.float64)
        self._same_shapes(group, x, "ring_shift")
        if group.size == 1:
            return x.copy()
        _, nxt, prv = self._ring(group)
        self.fabric._post(self.rank, nxt, x, "ring_shift", group.id)
        return self.fabric._take(self.rank, prv)


def run_ranks(world_size: int, program, scheduler: str = "threads", ledger: CommLedger | None = None):
    """Convenience wrapper: build a fabric, run, return (results, ledger)."""
    fabric = Fabric(world_size, scheduler, ledger)
    results = fabric.run(program)
    return results, fabric.ledger
