"""Multi-source datasets and blockwise missing patterns."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from r2learn.errors import ConfigError, ContractError, DataError

SPLITS = ("train", "validation", "test")


class MissingPattern:
    """Boolean ``S x M`` observation matrix; ``mask[s, m]`` is True when source
    ``s`` observes modality ``m``."""

    def __init__(self, mask):
        mask = np.array(mask, dtype=bool)
        if mask.ndim != 2 or mask.size == 0:
            raise ConfigError(f"missing pattern must be a nonempty S x M matrix, got {mask.shape}")
        if not mask.any(axis=1).all():
            bad = np.flatnonzero(~mask.any(axis=1)).tolist()
            raise ConfigError(f"sources {bad} observe no modality")
        if not mask.any(axis=0).all():
            bad = np.flatnonzero(~mask.any(axis=0)).tolist()
            raise ConfigError(f"modalities {bad} are observed by no source")
        mask.flags.writeable = False
        self.mask = mask

    @property
    def n_sources(self) -> int:
        return self.mask.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.mask.shape[1]

    def sources_observing(self, m: int) -> np.ndarray:
        """``O_m``: sorted source indices observing modality ``m``."""
        return np.flatnonzero(self.mask[:, m])

    def modalities_of(self, s: int) -> np.ndarray:
        """``O^(s)``: sorted modality indices observed by source ``s``."""
        return np.flatnonzero(self.mask[s])

    def __eq__(self, other):
        return isinstance(other, MissingPattern) and np.array_equal(self.mask, other.mask)

    def __repr__(self):
        rows = ["".join("x" if v else "." for v in r) for r in self.mask]
        return f"MissingPattern({'/'.join(rows)})"

    @classmethod
    def full(cls, S: int, M: int) -> "MissingPattern":
        return cls(np.ones((S, M), dtype=bool))


@dataclass
class SourceData:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"source arrays misaligned: X {self.X.shape}, y {self.y.shape}")

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass
class MultiSourceDataset:
    """``S`` sources of ``(X, y)``; blockwise data adds modality widths and a mask.

    Masked blocks hold NaN in ``X``; the mask is authoritative and
    :meth:`block` refuses to hand them out.
    """

    sources: list
    modality_dims: Optional[tuple] = None
    pattern: Optional[MissingPattern] = None
    split: str = "train"

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceData) else SourceData(*s) for s in self.sources]
        if not self.sources:
            raise DataError("dataset has no sources")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        p = {s.X.shape[1] for s in self.sources}
        if len(p) != 1:
            raise DataError(f"sources disagree on covariate dimension: {sorted(p)}")
        if (self.modality_dims is None) != (self.pattern is None):
            raise DataError("modality_dims and pattern must be given together")
        if self.modality_dims is not None:
            self.modality_dims = tuple(int(q) for q in self.modality_dims)
            if sum(self.modality_dims) != self.p:
                raise DataError(f"modality widths {self.modality_dims} do not sum to p={self.p}")
            if self.pattern.mask.shape != (self.S, len(self.modality_dims)):
                raise DataError(f"mask shape {self.pattern.mask.shape} does not match "
                                f"S={self.S}, M={len(self.modality_dims)}")

    @property
    def S(self) -> int:
        return len(self.sources)

    @property
    def p(self) -> int:
        return self.sources[0].X.shape[1]

    @property
    def is_blockwise(self) -> bool:
        return self.pattern is not None

    @property
    def M(self) -> int:
        return len(self.modality_dims) if self.modality_dims else 1

    def modality_slice(self, m: int) -> slice:
        if self.modality_dims is None:
            raise ContractError("dataset has no modality partition")
        start = sum(self.modality_dims[:m])
        return slice(start, start + self.modality_dims[m])

    def block(self, s: int, m: int) -> np.ndarray:
        """Covariates of modality ``m`` for source ``s``; only observed blocks are readable."""
        if not self.pattern.mask[s, m]:
            raise ContractError(f"modality {m} is not observed by source {s}")
        return self.sources[s].X[:, self.modality_slice(m)]

    def observed_blocks(self, s: int) -> dict:
        return {int(m): self.block(s, m) for m in self.pattern.modalities_of(s)}

    def with_sources(self, sources) -> "MultiSourceDataset":
        return MultiSourceDataset(sources, self.modality_dims, self.pattern, self.split)

    def subset(self, source_ids) -> "MultiSourceDataset":
        """Dataset restricted to some sources, in the given order."""
        srcs = [self.sources[s] for s in source_ids]
        pattern = None if self.pattern is None else MissingPattern(self.pattern.mask[list(source_ids)])
        return MultiSourceDataset(srcs, self.modality_dims, pattern, self.split)
