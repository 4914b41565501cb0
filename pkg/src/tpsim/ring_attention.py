"""Sequence-parallel self-attention with a K ring pass and a V ring pass.

Each of ``N`` ranks holds a contiguous ``s/N`` slice of Q, K and V. Key blocks
travel around the ring ``N-1`` times so every rank can fill its rows of the
score matrix; softmax is applied once the rows are complete, then value blocks
make the same trip and the output is accumulated block by block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .comm import CommLedger, Fabric, RankComm
from .errors import IndivisibleSequence, ShapeMismatch
from .mesh import SEQUENCE, DeviceMesh, build_mesh
from .tensor import matmul, softmax_rows, transpose


@dataclass
class SeqShard:
    rank: int
    seq_len: int
    lo: int
    hi: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    @property
    def d_k(self) -> int:
        return self.q.shape[1]


def split_sequence(q, k, v, n: int) -> list[SeqShard]:
    if not (q.shape == k.shape == v.shape) or q.ndim != 2:
        raise ShapeMismatch(f"Q, K, V must share a 2D shape, got {q.shape}, {k.shape}, {v.shape}")
    s = q.shape[0]
    if s % n:
        raise IndivisibleSequence(f"sequence length {s} not divisible by {n} ranks")
    c = s // n
    return [
        SeqShard(r, s, r * c, (r + 1) * c, q[r * c:(r + 1) * c].copy(), k[r * c:(r + 1) * c].copy(), v[r * c:(r + 1) * c].copy())
        for r in range(n)
    ]


def ring_attention_scores(comm: RankComm, mesh: DeviceMesh, shard: SeqShard, *, normalize: bool = True):
    """This rank's rows of ``softmax(Q K^T / sqrt(d_k))`` (raw scores if not ``normalize``)."""
    ring = mesh.group_of(comm.rank, "ring")
    n = ring.size
    if shard.seq_len % n:
        raise IndivisibleSequence(f"sequence length {shard.seq_len} not divisible by {n} ranks")
    c = shard.seq_len // n
    idx = ring.index(comm.rank)
    scale = 1.0 / math.sqrt(shard.d_k)
    scores = np.empty((shard.hi - shard.lo, shard.seq_len))
    kb = shard.k
    for step in range(n):
        src = (idx - step) % n
        scores[:, src * c:(src + 1) * c] = matmul(shard.q, transpose(kb)) * scale
        if step < n - 1:
            kb = comm.ring_shift(ring, kb)
    return softmax_rows(scores) if normalize else scores


def ring_attention_forward(comm: RankComm, mesh: DeviceMesh, shard: SeqShard):
    """This rank's rows of ``softmax(Q K^T / sqrt(d_k)) V``."""
    return _forward(comm, mesh, shard)[0]


def _forward(comm, mesh, shard):
    ring = mesh.group_of(comm.rank, "ring")
    n = ring.size
    attn = ring_attention_scores(comm, mesh, shard)
    c = shard.seq_len // n
    idx = ring.index(comm.rank)
    out = np.zeros_like(shard.v)
    vb = shard.v
    for step in range(n):
        # attention columns of block src line up with the rows of V block src
        src = (idx - step) % n
        out += matmul(attn[:, src * c:(src + 1) * c], vb)
        if step < n - 1:
            vb = comm.ring_shift(ring, vb)
    return out, attn


@dataclass
class AttentionResult:
    output: np.ndarray
    attention: np.ndarray
    ledger: CommLedger

    @property
    def volume(self) -> int:
        return self.ledger.total_sent()


def serial_attention(q, k, v, *, return_weights: bool = False):
    a = softmax_rows(matmul(q, transpose(k)) / math.sqrt(q.shape[1]))
    out = matmul(a, v)
    return (out, a) if return_weights else out


def run_ring_attention(q, k, v, n: int, scheduler: str = "threads") -> AttentionResult:
    mesh = build_mesh(SEQUENCE, n)
    shards = split_sequence(q, k, v, n)
    fabric = Fabric(n, scheduler)
    outs = fabric.run(lambda comm: _forward(comm, mesh, shards[comm.rank]))
    return AttentionResult(
        np.concatenate([o for o, _ in outs], axis=0),
        np.concatenate([a for _, a in outs], axis=0),
        fabric.ledger,
    )
