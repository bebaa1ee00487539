"""
Feature schemas for tabular income data
Declares column kinds, categorical vocabularies and normalisation statistics
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Literal

ColumnKind = Literal["categorical", "continuous", "sensitive", "target"]

MISSING_MARKER = "?"


@dataclass(frozen=True)
class ColumnSpec:
    """One column of a raw table"""

    name: str
    kind: ColumnKind
    vocabulary: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "vocabulary": list(self.vocabulary)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ColumnSpec:
        return cls(data["name"], data["kind"], tuple(data.get("vocabulary", ())))


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout plus the conventions used to encode it.

    `stats` maps each continuous column to the (mean, std) pair used for
    z-scoring; it is empty until a table has been encoded with it.
    """

    columns: tuple[ColumnSpec, ...]
    positive_target: str
    sensitive_positive: str
    missing_marker: str = MISSING_MARKER
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> ColumnSpec:
        for spec in self.columns:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def _of_kind(self, kind: ColumnKind) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == kind]

    @property
    def categorical_columns(self) -> list[ColumnSpec]:
        return self._of_kind("categorical")

    @property
    def continuous_columns(self) -> list[ColumnSpec]:
        return self._of_kind("continuous")

    @property
    def feature_columns(self) -> list[ColumnSpec]:
        """Columns that may enter a model, in file order (sensitive and target excluded)"""
        return [c for c in self.columns if c.kind in ("categorical", "continuous")]

    @property
    def sensitive_column(self) -> ColumnSpec:
        return self._of_kind("sensitive")[0]

    @property
    def target_column(self) -> ColumnSpec:
        return self._of_kind("target")[0]

    def with_stats(self, stats: dict[str, tuple[float, float]]) -> FeatureSchema:
        return replace(self, stats=dict(stats))

    def to_dict(self) -> dict[str, Any]:
        return {
            "columns": [c.to_dict() for c in self.columns],
            "positive_target": self.positive_target,
            "sensitive_positive": self.sensitive_positive,
            "missing_marker": self.missing_marker,
            "stats": {k: [float(m), float(s)] for k, (m, s) in sorted(self.stats.items())},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FeatureSchema:
        return cls(
            columns=tuple(ColumnSpec.from_dict(c) for c in data["columns"]),
            positive_target=data["positive_target"],
            sensitive_positive=data["sensitive_positive"],
            missing_marker=data.get("missing_marker", MISSING_MARKER),
            stats={k: (float(v[0]), float(v[1])) for k, v in data.get("stats", {}).items()},
        )


# UCI Adult census income, column order of adult.data / adult.test
ADULT_SCHEMA = FeatureSchema(
    columns=(
        ColumnSpec("age", "continuous"),
        ColumnSpec("workclass", "categorical", (
            "Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
            "Local-gov", "State-gov", "Without-pay", "Never-worked",
        )),
        ColumnSpec("fnlwgt", "continuous"),
        ColumnSpec("education", "categorical", (
            "Bachelors", "Some-college", "11th", "HS-grad", "Prof-school",
            "Assoc-acdm", "Assoc-voc", "9th", "7th-8th", "12th", "Masters",
            "1st-4th", "10th", "Doctorate", "5th-6th", "Preschool",
        )),
        ColumnSpec("education-num", "continuous"),
        ColumnSpec("marital-status", "categorical", (
            "Married-civ-spouse", "Divorced", "Never-married", "Separated",
            "Widowed", "Married-spouse-absent", "Married-AF-spouse",
        )),
        ColumnSpec("occupation", "categorical", (
            "Tech-support", "Craft-repair", "Other-service", "Sales",
            "Exec-managerial", "Prof-specialty", "Handlers-cleaners",
            "Machine-op-inspct", "Adm-clerical", "Farming-fishing",
            "Transport-moving", "Priv-house-serv", "Protective-serv",
            "Armed-Forces",
        )),
        ColumnSpec("relationship", "categorical", (
            "Wife", "Own-child", "Husband", "Not-in-family", "Other-relative",
            "Unmarried",
        )),
        ColumnSpec("race", "categorical", (
            "White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black",
        )),
        ColumnSpec("gender", "sensitive", ("Female", "Male")),
        ColumnSpec("capital-gain", "continuous"),
        ColumnSpec("capital-loss", "continuous"),
        ColumnSpec("hours-per-week", "continuous"),
        ColumnSpec("native-country", "categorical", (
            "United-States", "Cambodia", "England", "Puerto-Rico", "Canada",
            "Germany", "Outlying-US(Guam-USVI-etc)", "India", "Japan", "Greece",
            "South", "China", "Cuba", "Iran", "Honduras", "Philippines", "Italy",
            "Poland", "Jamaica", "Vietnam", "Mexico", "Portugal", "Ireland",
            "France", "Dominican-Republic", "Laos", "Ecuador", "Taiwan", "Haiti",
            "Columbia", "Hungary", "Guatemala", "Nicaragua", "Scotland",
            "Thailand", "Yugoslavia", "El-Salvador", "Trinadad&Tobago", "Peru",
            "Hong", "Holand-Netherlands",
        )),
        ColumnSpec("income", "target", ("<=50K", ">50K")),
    ),
    positive_target=">50K",
    sensitive_positive="Female",
)
