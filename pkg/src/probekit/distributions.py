"""Normalized token distributions shared by the sampler and the analytics."""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

NORMALIZATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Distribution:
    """A token -> probability map whose weights sum to one."""

    weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("distribution must have at least one token")
        total = 0.0
        for token, weight in self.weights.items():
            if not token:
                raise ValueError("distribution token labels must be non-empty")
            if weight < 0:
                raise ValueError(f"negative weight for {token!r}: {weight}")
            total += weight
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"weights sum to {total!r}, expected 1.0")

    @classmethod
    def from_counts(cls, counts: Mapping[str, int | float]) -> "Distribution":
        """Normalize raw counts or unnormalized positive weights."""
        total = float(sum(counts.values()))
        if total <= 0:
            raise ValueError("counts must have positive total")
        return cls({token: count / total for token, count in counts.items()})

    def get(self, token: str) -> float:
        return self.weights.get(token, 0.0)

    def support(self) -> frozenset[str]:
        return frozenset(self.weights)

    def top(self, k: int) -> list[tuple[str, float]]:
        """The k heaviest tokens, heaviest first; ties break on the label."""
        if k < 1:
            raise ValueError("k must be >= 1")
        ranked = sorted(self.weights.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:k]

    def coverage(self, k: int) -> float:
        """Probability mass carried by the k heaviest tokens."""
        return sum(weight for _, weight in self.top(k))

    def aligned(self, other: "Distribution") -> tuple[list[str], np.ndarray, np.ndarray]:
        """Weight vectors of both distributions over the sorted union support."""
        labels = sorted(self.support() | other.support())
        x = np.array([self.get(t) for t in labels], dtype=float)
        y = np.array([other.get(t) for t in labels], dtype=float)
        return labels, x, y
