"""
Adult census income ingestion and encoding
Parses the UCI files, drops incomplete rows, one-hot / z-score encodes the
features with the sensitive column withheld, and produces random splits.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from data.schema import ADULT_SCHEMA, FeatureSchema
from data.tables import EncodedTable, RawTable, SplitIndex
from modules.errors import ParseError, SchemaError

logger = logging.getLogger(__name__)

ZERO_VARIANCE_TOL = 1e-12


def _normalise_target(value: str) -> str:
    # adult.test writes labels as "<=50K." / ">50K."
    return value[:-1] if value.endswith(".") else value


def _parse_lines(
    lines: Iterable[str], schema: FeatureSchema, source: str
) -> list[list[str]]:
    arity = len(schema.columns)
    target_pos = schema.names.index(schema.target_column.name)
    vocabularies = {
        i: set(spec.vocabulary)
        for i, spec in enumerate(schema.columns)
        if spec.kind != "continuous"
    }
    continuous = [i for i, spec in enumerate(schema.columns) if spec.kind == "continuous"]
    rows: list[list[str]] = []

    for line_number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("|"):
            continue
        fields = [f.strip() for f in next(csv.reader([stripped], skipinitialspace=True))]
        if len(fields) != arity:
            raise ParseError(
                f"{source}: expected {arity} fields, found {len(fields)}", line_number
            )
        fields[target_pos] = _normalise_target(fields[target_pos])

        for i, vocab in vocabularies.items():
            value = fields[i]
            if value != schema.missing_marker and value not in vocab:
                raise SchemaError(
                    f"{source} line {line_number}: unknown level '{value}' "
                    f"for column '{schema.columns[i].name}'"
                )
        for i in continuous:
            value = fields[i]
            if value == schema.missing_marker:
                continue
            try:
                float(value)
            except ValueError:
                raise ParseError(
                    f"{source}: non-numeric value '{value}' in column "
                    f"'{schema.columns[i].name}'",
                    line_number,
                ) from None
        rows.append(fields)
    return rows


def ingest_adult(
    path: str | Path | Sequence[str | Path], schema: FeatureSchema = ADULT_SCHEMA
) -> RawTable:
    """Parse one or more Adult CSV files into a RawTable.

    Multiple files (train then test) are concatenated; row ids follow file
    order. Cells keep their string form; missing cells keep the marker.
    """
    paths = [Path(path)] if isinstance(path, (str, Path)) else [Path(p) for p in path]
    rows: list[list[str]] = []
    for file_path in paths:
        if not file_path.exists():
            raise FileNotFoundError(f"Adult data file not found: {file_path}")
        with file_path.open(encoding="utf-8") as handle:
            rows.extend(_parse_lines(handle, schema, file_path.name))

    frame = pd.DataFrame(rows, columns=schema.names, dtype=object)
    frame.index = pd.RangeIndex(len(frame), name="id")
    raw = RawTable(frame=frame, schema=schema, sources=tuple(str(p) for p in paths))
    logger.info(
        "Ingested %d rows (%d missing cells) from %s",
        raw.n_rows, raw.missing_count, ", ".join(p.name for p in paths),
    )
    return raw


def complete_rows(raw: RawTable, schema: FeatureSchema | None = None) -> pd.Series:
    """Boolean mask over raw rows holding no missing marker in any schema column"""
    schema = schema or raw.schema
    missing_names = [n for n in schema.names if n not in raw.frame.columns]
    if missing_names:
        raise SchemaError(f"schema columns absent from table: {missing_names}")
    return ~(raw.frame[schema.names].astype(str) == schema.missing_marker).any(axis=1)


def clean_and_encode(
    raw: RawTable,
    schema: FeatureSchema | None = None,
    split: SplitIndex | None = None,
) -> EncodedTable:
    """Drop incomplete rows and encode the rest.

    Continuous columns are z-scored with statistics from the split's train
    rows when a split is given, otherwise from every retained row.
    """
    schema = schema or raw.schema
    frame = raw.frame[schema.names]
    has_missing = ~complete_rows(raw, schema)
    clean = frame.loc[~has_missing]
    dropped = int(has_missing.sum())
    if dropped:
        logger.info("Dropped %d of %d rows containing '%s'", dropped, len(frame), schema.missing_marker)

    ids = clean.index.to_numpy(dtype=np.int64)
    if split is not None:
        fit_mask = np.isin(ids, split.train_ids)
        if not fit_mask.any():
            raise SchemaError("split has no train rows among the cleaned rows")
    else:
        fit_mask = np.ones(len(ids), dtype=bool)

    feature_frame = pd.DataFrame(index=clean.index)
    blocks: dict[str, tuple[int, int]] = {}
    names: list[str] = []
    columns: list[np.ndarray] = []
    stats: dict[str, tuple[float, float]] = {}
    offset = 0

    for spec in schema.feature_columns:
        values = clean[spec.name]
        if spec.kind == "categorical":
            levels = values.astype(str).to_numpy()
            unknown = sorted(set(levels) - set(spec.vocabulary))
            if unknown:
                raise SchemaError(f"unknown levels {unknown} in column '{spec.name}'")
            if len(set(levels)) <= 1 and len(levels) > 0:
                logger.warning("Column '%s' is constant after cleaning", spec.name)
            lookup = {level: k for k, level in enumerate(spec.vocabulary)}
            codes = np.fromiter((lookup[v] for v in levels), dtype=np.int64, count=len(levels))
            onehot = np.zeros((len(levels), len(spec.vocabulary)))
            onehot[np.arange(len(levels)), codes] = 1.0
            columns.append(onehot)
            names.extend(f"{spec.name}={level}" for level in spec.vocabulary)
            blocks[spec.name] = (offset, offset + len(spec.vocabulary))
            offset += len(spec.vocabulary)
            feature_frame[spec.name] = levels
        else:
            numeric = pd.to_numeric(values, errors="raise").to_numpy(dtype=np.float64)
            fit_values = numeric[fit_mask]
            mean = float(fit_values.mean()) if fit_values.size else 0.0
            std = float(fit_values.std()) if fit_values.size else 1.0
            if std < ZERO_VARIANCE_TOL:
                logger.warning("Column '%s' has zero variance; std clamped to 1", spec.name)
                std = 1.0
            stats[spec.name] = (mean, std)
            columns.append(((numeric - mean) / std)[:, None])
            names.append(spec.name)
            blocks[spec.name] = (offset, offset + 1)
            offset += 1
            feature_frame[spec.name] = numeric

    X = np.hstack(columns) if columns else np.zeros((len(ids), 0))
    y = (clean[schema.target_column.name].astype(str).to_numpy() == schema.positive_target)
    s = (clean[schema.sensitive_column.name].astype(str).to_numpy() == schema.sensitive_positive)

    return EncodedTable(
        X=X,
        y=y.astype(np.int64),
        s=s.astype(np.int64),
        ids=ids,
        feature_names=tuple(names),
        blocks=blocks,
        schema=schema.with_stats(stats),
        frame=feature_frame,
        dropped_rows=dropped,
    )


def split(encoded: EncodedTable | np.ndarray, test_frac: float = 0.2, seed: int = 0) -> SplitIndex:
    """Unstratified random train/test split of an encoded table (or its row ids), deterministic in the seed"""
    if not 0.0 < test_frac < 1.0:
        raise ValueError(f"test_frac must lie in (0, 1), got {test_frac}")
    ids = np.asarray(encoded.ids if isinstance(encoded, EncodedTable) else encoded, dtype=np.int64)
    n = len(ids)
    if n < 2:
        raise ValueError(f"cannot split {n} rows; need at least 2")

    n_test = min(max(int(round(n * test_frac)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_ids = np.sort(ids[perm[:n_test]])
    train_ids = np.sort(ids[perm[n_test:]])
    return SplitIndex(train_ids=train_ids, test_ids=test_ids, seed=seed, test_frac=test_frac)


def decode_categorical(encoded: EncodedTable, column: str) -> np.ndarray:
    """Recover categorical levels from a one-hot block"""
    spec = encoded.schema.column(column)
    if spec.kind != "categorical":
        raise SchemaError(f"column '{column}' is not categorical")
    start, stop = encoded.blocks[column]
    codes = encoded.X[:, start:stop].argmax(axis=1)
    return np.asarray(spec.vocabulary, dtype=object)[codes]
