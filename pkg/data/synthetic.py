"""
Synthetic oracle data with a planted hidden group
Features are drawn from group-shifted distributions so the group can be
recovered from non-sensitive columns; labels lean towards group 0.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from data.adult import clean_and_encode
from data.schema import ColumnSpec, FeatureSchema
from data.tables import EncodedTable, RawTable

GROUP_SHIFT = 1.5
CATEGORY_LEVELS = ("a", "b", "c", "d")

# level distributions favoured by each group at full correlation
_GROUP_LEVEL_PROBS = {
    0: np.array([0.45, 0.45, 0.05, 0.05]),
    1: np.array([0.05, 0.05, 0.45, 0.45]),
}


def synthetic_schema(n_shifted: int = 6, n_categorical: int = 2) -> FeatureSchema:
    columns = [ColumnSpec(f"shift_{j}", "continuous") for j in range(n_shifted)]
    columns += [ColumnSpec(f"cat_{j}", "categorical", CATEGORY_LEVELS) for j in range(n_categorical)]
    columns += [
        ColumnSpec("merit", "continuous"),
        ColumnSpec("group", "sensitive", ("g0", "g1")),
        ColumnSpec("label", "target", ("neg", "pos")),
    ]
    return FeatureSchema(columns=tuple(columns), positive_target="pos", sensitive_positive="g1")


def make_synthetic_raw(
    n: int,
    corr_strength: float,
    seed: int = 0,
    label_bias: float = 1.0,
    n_shifted: int = 6,
    n_categorical: int = 2,
) -> RawTable:
    """Raw table whose hidden group G is the sensitive column.

    corr_strength scales how far the shifted continuous features and the
    categorical level mix move with G (0 = independent of G). label_bias is
    added to the label logit for G=0 and subtracted for G=1.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if not 0.0 <= corr_strength <= 1.0:
        raise ValueError(f"corr_strength must lie in [0, 1], got {corr_strength}")

    rng = np.random.default_rng(seed)
    schema = synthetic_schema(n_shifted, n_categorical)
    group = rng.integers(0, 2, size=n)
    sign = 2.0 * group - 1.0

    data: dict[str, object] = {}
    for j in range(n_shifted):
        data[f"shift_{j}"] = rng.normal(size=n) + corr_strength * GROUP_SHIFT * sign

    uniform = np.full(len(CATEGORY_LEVELS), 1.0 / len(CATEGORY_LEVELS))
    for j in range(n_categorical):
        u = rng.random(n)
        levels = np.empty(n, dtype=object)
        for g in (0, 1):
            probs = (1.0 - corr_strength) * uniform + corr_strength * _GROUP_LEVEL_PROBS[g]
            codes = np.searchsorted(np.cumsum(probs), u[group == g], side="right")
            codes = np.minimum(codes, len(CATEGORY_LEVELS) - 1)
            levels[group == g] = np.asarray(CATEGORY_LEVELS, dtype=object)[codes]
        data[f"cat_{j}"] = levels

    merit = rng.normal(size=n)
    data["merit"] = merit
    logit = 2.5 * merit - 1.0 - label_bias * sign
    positive = rng.random(n) < 1.0 / (1.0 + np.exp(-logit))
    data["group"] = np.where(group == 1, "g1", "g0")
    data["label"] = np.where(positive, "pos", "neg")

    frame = pd.DataFrame(data, columns=schema.names)
    frame.index = pd.RangeIndex(n, name="id")
    return RawTable(frame=frame, schema=schema, sources=(f"synthetic:n={n},corr={corr_strength},seed={seed}",))


def make_synthetic(
    n: int,
    corr_strength: float,
    seed: int = 0,
    label_bias: float = 1.0,
    n_shifted: int = 6,
    n_categorical: int = 2,
) -> EncodedTable:
    """Encoded synthetic table (statistics over all rows); S holds the planted group"""
    raw = make_synthetic_raw(n, corr_strength, seed, label_bias, n_shifted, n_categorical)
    encoded = clean_and_encode(raw)
    encoded.metadata.update(
        {"source": "synthetic", "n": n, "corr_strength": corr_strength, "seed": seed,
         "label_bias": label_bias}
    )
    return encoded
