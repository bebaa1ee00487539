"""
Data validation functions for encoded tables
Ensures schema, encoding and split invariants hold before training
"""

from typing import Any, Dict, List, Tuple

import numpy as np

from data.schema import FeatureSchema
from data.tables import EncodedTable, SplitIndex

STANDARDIZATION_TOL = 1e-6


def validate_schema(schema: FeatureSchema) -> Tuple[bool, List[str]]:
    """Validate feature schema structure"""
    errors = []
    kinds = [c.kind for c in schema.columns]

    if kinds.count("target") != 1:
        errors.append(f"Schema must have exactly one target column, found {kinds.count('target')}")
    if kinds.count("sensitive") != 1:
        errors.append(f"Schema must have exactly one sensitive column, found {kinds.count('sensitive')}")

    names = schema.names
    if len(set(names)) != len(names):
        errors.append("Column names must be unique")

    for spec in schema.columns:
        if spec.kind == "continuous":
            continue
        if not spec.vocabulary:
            errors.append(f"Column {spec.name}: vocabulary must not be empty")
        if schema.missing_marker in spec.vocabulary:
            errors.append(f"Column {spec.name}: vocabulary contains the missing marker")
        if len(set(spec.vocabulary)) != len(spec.vocabulary):
            errors.append(f"Column {spec.name}: duplicate vocabulary levels")

    if kinds.count("target") == 1 and schema.positive_target not in schema.target_column.vocabulary:
        errors.append("Positive target level is not in the target vocabulary")
    if kinds.count("sensitive") == 1 and schema.sensitive_positive not in schema.sensitive_column.vocabulary:
        errors.append("Sensitive positive level is not in the sensitive vocabulary")

    return len(errors) == 0, errors


def validate_encoded_table(
    table: EncodedTable, split: SplitIndex | None = None
) -> Tuple[bool, List[str]]:
    """Validate encoding invariants of an EncodedTable"""
    errors = []
    n = table.n_rows

    for name, values in (("y", table.y), ("s", table.s), ("ids", table.ids)):
        if len(values) != n:
            errors.append(f"{name} has {len(values)} rows, X has {n}")
    if len(np.unique(table.ids)) != len(table.ids):
        errors.append("Row ids must be unique")
    if not np.isfinite(table.X).all():
        errors.append("X contains non-finite values")

    # sensitive column must contribute nothing to X
    sensitive = table.schema.sensitive_column.name
    if sensitive in table.blocks:
        errors.append(f"Sensitive column {sensitive} has a block in X")
    if any(name.split("=")[0] == sensitive for name in table.feature_names):
        errors.append(f"Sensitive column {sensitive} appears in feature names")
    expected_width = sum(
        len(c.vocabulary) if c.kind == "categorical" else 1
        for c in table.schema.feature_columns
    )
    if table.width != expected_width:
        errors.append(f"X width {table.width} does not match schema width {expected_width}")

    for spec in table.schema.categorical_columns:
        start, stop = table.blocks[spec.name]
        sums = table.X[:, start:stop].sum(axis=1)
        if n and not np.allclose(sums, 1.0):
            errors.append(f"One-hot block {spec.name} does not sum to 1 on every row")

    if split is not None and n:
        fit_rows = table.positions(split.train_ids[np.isin(split.train_ids, table.ids)])
        for spec in table.schema.continuous_columns:
            start, _ = table.blocks[spec.name]
            column = table.X[fit_rows, start]
            if column.std() < STANDARDIZATION_TOL:
                continue
            if abs(column.mean()) > STANDARDIZATION_TOL or abs(column.std() - 1.0) > STANDARDIZATION_TOL:
                errors.append(f"Continuous column {spec.name} is not standardized on train rows")

    for name, values in (("y", table.y), ("s", table.s)):
        if not np.isin(values, (0, 1)).all():
            errors.append(f"{name} must be binary")

    return len(errors) == 0, errors


def validate_split(split: SplitIndex, ids: np.ndarray) -> Tuple[bool, List[str]]:
    """Validate that a split partitions the given row ids"""
    errors = []
    train, test = set(split.train_ids.tolist()), set(split.test_ids.tolist())

    if train & test:
        errors.append(f"Train and test share {len(train & test)} ids")
    if (train | test) != set(np.asarray(ids).tolist()):
        errors.append("Split does not cover exactly the table's rows")
    expected = len(ids) * split.test_frac
    if len(ids) >= 2 and abs(len(test) - expected) > 1.0:
        errors.append(f"Test size {len(test)} is not within one row of {expected:.1f}")

    return len(errors) == 0, errors


def run_comprehensive_validation(
    table: EncodedTable, split: SplitIndex | None = None
) -> Dict[str, Any]:
    """Run every validator and collect a summary"""
    results: Dict[str, Any] = {
        "overall_status": "PASS",
        "tests_run": 0,
        "tests_passed": 0,
        "errors": [],
    }

    checks = [("Schema", validate_schema(table.schema)), ("Table", validate_encoded_table(table, split))]
    if split is not None:
        checks.append(("Split", validate_split(split, table.ids)))

    for label, (is_valid, errors) in checks:
        results["tests_run"] += 1
        if is_valid:
            results["tests_passed"] += 1
        else:
            results["errors"].extend([f"{label}: {err}" for err in errors])

    if results["errors"]:
        results["overall_status"] = "FAIL"
    return results
