"""Per-rank live-byte accounting with peak tracking and device/host transfers."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass

DEVICE = "device"
HOST = "host"


@dataclass(frozen=True)
class MemoryEvent:
    seq: int
    rank: int
    device: str
    op: str
    label: str
    nbytes: int
    live: int


class MemoryLedger:
    def __init__(self):
        self._live = defaultdict(int)
        self._peak = defaultdict(int)
        self._transfers = defaultdict(int)
        self.events: list[MemoryEvent] = []

    def _log(self, rank, device, op, label, nbytes):
        self.events.append(
            MemoryEvent(len(self.events), rank, device, op, label, nbytes, self._live[(rank, device)])
        )

    def alloc(self, rank: int, device: str, nbytes: int, label: str = ""):
        if nbytes < 0:
            raise ValueError("allocation size must be non-negative")
        key = (rank, device)
        self._live[key] += nbytes
        self._peak[key] = max(self._peak[key], self._live[key])
        self._log(rank, device, "alloc", label, nbytes)

    def free(self, rank: int, device: str, nbytes: int, label: str = ""):
        key = (rank, device)
        if nbytes < 0 or nbytes > self._live[key]:
            raise ValueError(f"cannot free {nbytes} bytes from {self._live[key]} live on {key}")
        self._live[key] -= nbytes
        self._log(rank, device, "free", label, nbytes)

    def transfer(self, rank: int, src: str, dst: str, nbytes: int, label: str = ""):
        self._transfers[(rank, src, dst)] += nbytes
        self._log(rank, f"{src}->{dst}", "transfer", label, nbytes)

    def live(self, rank: int, device: str = DEVICE) -> int:
        return self._live[(rank, device)]

    def peak(self, rank: int, device: str = DEVICE) -> int:
        return self._peak[(rank, device)]

    def transferred(self, rank: int | None = None) -> int:
        return sum(v for (r, _, _), v in self._transfers.items() if rank is None or r == rank)

    def to_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "rank", "device", "op", "label", "bytes", "live_bytes"])
        for e in self.events:
            w.writerow([e.seq, e.rank, e.device, e.op, e.label, e.nbytes, e.live])
