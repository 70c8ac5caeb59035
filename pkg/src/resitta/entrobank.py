"""Entropy-driven memory bank.

When full, a new sample may only displace a record from the dominant classes
(the most populous inferred labels). Victims are chosen in strict priority:
outdated records, then long-persisted over-confident records, then the most
uncertain record if the newcomer is more certain than it.

Ages are not stored per record. Each record keeps the arrival index at which it
was inserted and its age is ``arrivals - stamp``, which is what incrementing
every age once per add would produce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

PROB_FLOOR = 1e-12


def entropy_of(dist) -> float:
    # sorted terms and an exactly rounded sum make the result independent of
    # class order, so permuted distributions tie exactly
    terms = sorted(-p * math.log(max(p, PROB_FLOOR)) for p in np.asarray(dist, dtype=np.float64).tolist())
    return math.fsum(terms)


@dataclass
class BankConfig:
    capacity: int = 64
    t_forget: int = 1000
    t_mature: int = 200
    num_classes: int = 10
    use_outdated: bool = True
    use_overconfident: bool = True
    use_uncertainty: bool = True

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if not 0 <= self.t_mature <= self.t_forget:
            raise ValueError(f"need 0 <= t_mature <= t_forget, got {self.t_mature}, {self.t_forget}")


@dataclass
class MemoryRecord:
    sample: Any
    inferred_label: int
    entropy: float
    stamp: int
    age: int = 0


@dataclass
class AddResult:
    accepted: bool
    evicted: MemoryRecord | None = None
    # one of: insert, outdated, overconfident, uncertainty, rejected
    reason: str = "insert"
    dominant: frozenset = field(default_factory=frozenset)


class Bank:
    def __init__(self, config: BankConfig):
        self.config = config
        self._records: list[MemoryRecord] = []
        self._counts = np.zeros(config.num_classes, dtype=np.int64)
        self.arrivals = 0

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[MemoryRecord]:
        for r in self._records:
            r.age = self.arrivals - r.stamp
        return list(self._records)

    def class_counts(self) -> np.ndarray:
        return self._counts.copy()

    def dominant_classes(self) -> frozenset[int]:
        if not self._records:
            raise ValueError("dominant classes of an empty bank are undefined")
        top = self._counts.max()
        return frozenset(int(c) for c in np.flatnonzero(self._counts == top))

    def class_min_entropies(self) -> np.ndarray:
        out = np.full(self.config.num_classes, np.inf)
        for r in self._records:
            if r.entropy < out[r.inferred_label]:
                out[r.inferred_label] = r.entropy
        return out

    def is_class_min_entropy(self, rec: MemoryRecord, minima: np.ndarray | None = None) -> bool:
        # scope of the minimum: every record in the bank sharing rec's label
        if minima is None:
            minima = self.class_min_entropies()
        return rec.entropy == minima[rec.inferred_label]

    def _choose_victim(self, entropy: float) -> tuple[int | None, str, frozenset]:
        cfg = self.config
        dom = self.dominant_classes()
        now = self.arrivals
        cands = [(i, r) for i, r in enumerate(self._records) if r.inferred_label in dom]

        if cfg.use_outdated:
            # largest age, ties -> earliest inserted (smallest stamp == largest age anyway)
            best = None
            for i, r in cands:
                if now - r.stamp >= cfg.t_forget and (best is None or r.stamp < self._records[best].stamp):
                    best = i
            if best is not None:
                return best, "outdated", dom

        if cfg.use_overconfident:
            minima = self.class_min_entropies()
            best = None
            for i, r in cands:
                if now - r.stamp >= cfg.t_mature and self.is_class_min_entropy(r, minima):
                    b = self._records[best] if best is not None else None
                    if b is None or (r.entropy, r.stamp) < (b.entropy, b.stamp):
                        best = i
            if best is not None:
                return best, "overconfident", dom

        if not cfg.use_uncertainty:
            # without the entropy comparison only the discard branch remains
            return None, "rejected", dom

        worst = None
        for i, r in cands:
            # strict > keeps the earliest-inserted among equal entropies
            if worst is None or r.entropy > self._records[worst].entropy:
                worst = i
        if entropy < self._records[worst].entropy:
            return worst, "uncertainty", dom
        return None, "rejected", dom

    def add(self, sample, dist) -> AddResult:
        dist = np.asarray(dist, dtype=np.float64)
        if dist.shape != (self.config.num_classes,):
            raise ValueError(f"expected a distribution over {self.config.num_classes} classes, got {dist.shape}")
        self.arrivals += 1
        label = int(np.argmax(dist))
        ent = entropy_of(dist)
        rec = MemoryRecord(sample, label, ent, stamp=self.arrivals)

        if len(self._records) < self.config.capacity:
            self._insert(rec)
            return AddResult(True)

        victim, reason, dom = self._choose_victim(ent)
        if victim is None:
            return AddResult(False, None, reason, dom)
        old = self._records.pop(victim)
        self._counts[old.inferred_label] -= 1
        old.age = self.arrivals - old.stamp
        self._insert(rec)
        return AddResult(True, old, reason, dom)

    def _insert(self, rec: MemoryRecord) -> None:
        self._records.append(rec)
        self._counts[rec.inferred_label] += 1

    def snapshot(self) -> list[tuple[Any, int]]:
        return [(r.sample, r.inferred_label) for r in self._records]

    def refresh_entropies(self, dists: np.ndarray) -> None:
        """Overwrite stored entropies with fresh ones (one row per record, snapshot order)."""
        for r, d in zip(self._records, dists):
            r.entropy = entropy_of(d)

    def dump(self) -> str:
        """Plain-text table: one ``index label age entropy`` row per record."""
        lines = ["# index inferred_label age entropy"]
        for i, r in enumerate(self.records):
            lines.append(f"{i} {r.inferred_label} {r.age} {r.entropy:.17g}")
        return "\n".join(lines) + "\n"

    def state_dict(self) -> dict:
        return {
            "arrivals": self.arrivals,
            "records": [
                {"inferred_label": r.inferred_label, "entropy": r.entropy, "stamp": r.stamp} for r in self._records
            ],
        }

    def load_state(self, state: dict, samples: list) -> None:
        self.arrivals = int(state["arrivals"])
        self._records = []
        self._counts[:] = 0
        for meta, s in zip(state["records"], samples):
            self._insert(MemoryRecord(s, int(meta["inferred_label"]), float(meta["entropy"]), int(meta["stamp"])))
