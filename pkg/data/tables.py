"""
Table containers shared by every pipeline stage
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from data.schema import FeatureSchema


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class RawTable:
    """Parsed rows before cleaning; cells hold raw values or the missing marker"""

    frame: pd.DataFrame
    schema: FeatureSchema
    sources: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def missing_count(self) -> int:
        marker = self.schema.missing_marker
        return int((self.frame.astype(str) == marker).to_numpy().sum())


@dataclass(frozen=True)
class EncodedTable:
    """Model-ready matrix with the sensitive column withheld from X.

    `blocks` maps every feature column to its slice of X; categorical
    columns own a one-hot block, continuous columns a width-1 slice.
    `frame` keeps the cleaned feature values (no sensitive, no target),
    indexed by row id, for tokenisation.
    """

    X: np.ndarray
    y: np.ndarray
    s: np.ndarray
    ids: np.ndarray
    feature_names: tuple[str, ...]
    blocks: dict[str, tuple[int, int]]
    schema: FeatureSchema
    frame: pd.DataFrame
    dropped_rows: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "X", _frozen(np.asarray(self.X, dtype=np.float64)))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=np.int64)))
        object.__setattr__(self, "s", _frozen(np.asarray(self.s, dtype=np.int64)))
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=np.int64)))

    @property
    def n_rows(self) -> int:
        return int(self.X.shape[0])

    @property
    def width(self) -> int:
        return int(self.X.shape[1])

    def positions(self, ids: np.ndarray) -> np.ndarray:
        """Row positions of the given ids (KeyError on unknown ids)"""
        lookup = pd.Index(self.ids)
        pos = lookup.get_indexer(np.asarray(ids, dtype=np.int64))
        if (pos < 0).any():
            missing = np.asarray(ids)[pos < 0][:5].tolist()
            raise KeyError(f"unknown row ids: {missing}")
        return pos

    def subset(self, ids: np.ndarray) -> EncodedTable:
        pos = self.positions(ids)
        return EncodedTable(
            X=self.X[pos],
            y=self.y[pos],
            s=self.s[pos],
            ids=self.ids[pos],
            feature_names=self.feature_names,
            blocks=self.blocks,
            schema=self.schema,
            frame=self.frame.loc[self.ids[pos]],
            dropped_rows=self.dropped_rows,
            metadata=dict(self.metadata),
        )


@dataclass(frozen=True)
class SplitIndex:
    """Disjoint train / test row ids"""

    train_ids: np.ndarray
    test_ids: np.ndarray
    seed: int
    test_frac: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_ids", _frozen(np.asarray(self.train_ids, dtype=np.int64)))
        object.__setattr__(self, "test_ids", _frozen(np.asarray(self.test_ids, dtype=np.int64)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "test_frac": self.test_frac,
            "train_ids": self.train_ids.tolist(),
            "test_ids": self.test_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SplitIndex:
        return cls(
            train_ids=np.asarray(data["train_ids"], dtype=np.int64),
            test_ids=np.asarray(data["test_ids"], dtype=np.int64),
            seed=int(data["seed"]),
            test_frac=float(data["test_frac"]),
        )
