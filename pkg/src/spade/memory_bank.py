"""Fixed-capacity FIFO embedding queues with template-space footprints.

A :class:`MemoryBank` is immutable: :func:`enqueue` builds a new bank and
never touches the arrays of the old one, so any bank object a cohort holds on
to is a stable snapshot.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .correspondence import TemplateFootprint, iou_many
from .errors import ConfigError, DataError, ValidationError

NORM_TOL = 1e-6


@dataclass(eq=False)
class BankEntry:
    embedding: np.ndarray
    footprint: TemplateFootprint
    age: int = -1


def _frozen(a):
    a.setflags(write=False)
    return a


class MemoryBank:
    def __init__(self, capacity: int, embedding_shape=None, _arrays=None, _next_age=0):
        if capacity < 1:
            raise ConfigError("bank capacity must be at least 1")
        self.capacity = int(capacity)
        self.embedding_shape = None if embedding_shape is None else tuple(embedding_shape)
        if _arrays is None:
            shape = self.embedding_shape or (0,)
            _arrays = (np.zeros((0, *shape), np.float32), np.zeros((0, 3)), np.zeros((0, 3)),
                       np.zeros(0, np.int64))
        self._emb, self._lo, self._size, self._age = (_frozen(a) for a in _arrays)
        self._next_age = int(_next_age)

    def __len__(self):
        return len(self._age)

    def __repr__(self):
        return f"MemoryBank(capacity={self.capacity}, size={len(self)}, shape={self.embedding_shape})"

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb

    @property
    def footprint_lows(self):
        return self._lo

    @property
    def footprint_sizes(self):
        return self._size

    @property
    def ages(self):
        return self._age

    @property
    def entries(self) -> list[BankEntry]:
        return [BankEntry(self._emb[i], TemplateFootprint(self._lo[i], self._size[i]), int(self._age[i]))
                for i in range(len(self))]

    def ious(self, anchor) -> np.ndarray:
        return iou_many(anchor, self._lo, self._size)


def _check_unit(emb):
    flat = np.asarray(emb, dtype=np.float64).reshape(len(emb), -1)
    norms = np.linalg.norm(flat, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise ValidationError(f"embedding {int(bad[0])} has norm {norms[bad[0]]:.8f}, expected 1")


def enqueue_arrays(bank: MemoryBank, embeddings, lows, sizes) -> MemoryBank:
    emb = np.asarray(embeddings, dtype=np.float32)
    if len(emb) == 0:
        return bank
    _check_unit(emb)
    shape = bank.embedding_shape or emb.shape[1:]
    if emb.shape[1:] != tuple(shape):
        raise ValidationError(f"embedding shape {emb.shape[1:]} does not match bank {tuple(shape)}")
    ages = np.arange(bank._next_age, bank._next_age + len(emb), dtype=np.int64)
    keep = bank.capacity
    arrays = (
        np.concatenate([bank._emb.reshape(-1, *shape), emb])[-keep:],
        np.concatenate([bank._lo, np.asarray(lows, np.float64).reshape(-1, 3)])[-keep:],
        np.concatenate([bank._size, np.asarray(sizes, np.float64).reshape(-1, 3)])[-keep:],
        np.concatenate([bank._age, ages])[-keep:],
    )
    return MemoryBank(bank.capacity, shape, tuple(np.ascontiguousarray(a) for a in arrays),
                      bank._next_age + len(emb))


def enqueue(bank: MemoryBank, new_entries) -> MemoryBank:
    """Append entries in order, evicting the oldest beyond capacity."""
    new_entries = list(new_entries)
    if not new_entries:
        return bank
    return enqueue_arrays(
        bank,
        np.stack([np.asarray(e.embedding) for e in new_entries]),
        np.stack([e.footprint.corner for e in new_entries]),
        np.stack([e.footprint.size for e in new_entries]),
    )


def overlap_split(bank: MemoryBank, anchor, o: float):
    """Index arrays ``(below, above)`` (queue order) plus the IoUs; ties go below."""
    if not 0.0 <= o <= 1.0:
        raise ConfigError(f"overlap threshold must lie in [0, 1], got {o}")
    ious = bank.ious(anchor)
    above = ious > o
    return np.flatnonzero(~above), np.flatnonzero(above), ious


class BankMass:
    """Per-entry similarity mass over a whole bank, kept in step with the queue.

    ``mass(bank)[i]`` is the sum over every entry ``j`` of
    ``exp((e_i . e_j - 1) / tau)``. Consecutive banks share most entries, so
    after the first call only rows and columns for entries that arrived or
    left since the previous bank are computed.
    """

    def __init__(self, tau: float, block: int = 2048):
        self.tau = float(tau)
        self.block = int(block)
        self._bank = None
        self._ages = np.zeros(0, np.int64)
        self._emb = None
        self._mass = np.zeros(0)

    def _exp_sums(self, rows, cols):
        out = np.zeros(len(rows))
        for a in range(0, len(cols), self.block):
            out += np.exp((rows @ cols[a:a + self.block].T - 1.0) / self.tau).sum(axis=1)
        return out

    def mass(self, bank: MemoryBank) -> np.ndarray:
        if bank is self._bank:
            return self._mass
        ages = bank.ages
        emb = bank.embeddings.reshape(len(bank), int(np.prod(bank.embedding_shape or (0,)))).astype(np.float64)
        start = int(np.searchsorted(self._ages, ages[0])) if len(ages) else 0
        kept = len(self._ages) - start
        # ages alone do not identify entries across unrelated banks, so the shared rows must match too
        if (len(ages) and 0 < kept <= len(ages) and np.array_equal(ages[:kept], self._ages[start:])
                and np.array_equal(emb[:kept], self._emb[start:])):
            gone, new = self._emb[:start], emb[kept:]
            mass = np.empty(len(ages))
            mass[:kept] = self._mass[start:] - self._exp_sums(emb[:kept], gone) + self._exp_sums(emb[:kept], new)
            mass[kept:] = self._exp_sums(new, emb)
        else:
            mass = self._exp_sums(emb, emb)
        self._bank, self._ages, self._emb, self._mass = bank, ages.copy(), emb, mass
        return mass


def partition_by_overlap(bank: MemoryBank, anchor, o: float):
    below, above, _ = overlap_split(bank, anchor, o)
    entries = bank.entries
    return [entries[i] for i in below], [entries[i] for i in above]


def save_bank(bank: MemoryBank, path) -> None:
    header = {"capacity": bank.capacity, "count": len(bank),
              "embedding_shape": list(bank.embedding_shape or ()), "next_age": bank._next_age}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(bank._emb, "<f4").tobytes())
        fh.write(np.ascontiguousarray(np.concatenate([bank._lo, bank._size], axis=1), "<f8").tobytes())
        fh.write(np.ascontiguousarray(bank._age, "<i8").tobytes())


def load_bank(path) -> MemoryBank:
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read bank {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: bank header is not JSON") from exc
    n = int(header["count"])
    shape = tuple(header["embedding_shape"])
    n_emb = n * int(np.prod(shape)) * 4
    if len(payload) != n_emb + n * 6 * 8 + n * 8:
        raise DataError(f"{path}: bank payload size mismatch")
    emb = np.frombuffer(payload[:n_emb], "<f4").reshape(n, *shape).astype(np.float32)
    fp = np.frombuffer(payload[n_emb:n_emb + n * 48], "<f8").reshape(n, 6)
    ages = np.frombuffer(payload[n_emb + n * 48:], "<i8").astype(np.int64)
    return MemoryBank(header["capacity"], shape or None,
                      (emb, fp[:, :3].copy(), fp[:, 3:].copy(), ages), header["next_age"])
