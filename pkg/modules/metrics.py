"""
Classification and group-fairness metrics
SPD, equalised-odds gaps and average precision over hard labels / scores, a
JSON-serialisable FairnessReport, and markdown emitters for the result tables.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from modules.errors import GroupError, ShapeError
from modules.mitigation import ClassifierModel, hard_labels, predict

logger = logging.getLogger(__name__)

METRIC_KEYS = ("ap", "spd", "eod")


@dataclass
class PredictionSet:
    y_hard: np.ndarray
    y_score: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self) -> None:
        self.y_hard = np.asarray(self.y_hard, dtype=np.int64)
        self.y_score = np.asarray(self.y_score, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        n = len(self.y)
        for name in ("y_hard", "y_score", "s"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{name} has {len(getattr(self, name))} rows, y has {n}")
        for name in ("y_hard", "y", "s"):
            if not np.isin(getattr(self, name), (0, 1)).all():
                raise ValueError(f"{name} must be binary")

    @classmethod
    def from_scores(cls, scores: np.ndarray, y: np.ndarray, s: np.ndarray,
                    threshold: float = 0.5) -> PredictionSet:
        return cls(hard_labels(scores, threshold), scores, y, s)


def _rate(values: np.ndarray, what: str) -> float:
    if not len(values):
        raise GroupError(f"{what} is undefined: no rows")
    return float(values.mean())


def group_positive_rates(ps: PredictionSet) -> tuple[float, float]:
    """P(Y_hat = 1 | S = g) for g = 0, 1"""
    return tuple(  # type: ignore[return-value]
        _rate(ps.y_hard[ps.s == g], f"positive rate of group S={g}") for g in (0, 1)
    )


def spd(ps: PredictionSet) -> float:
    """|P(Y_hat=1 | S=0) - P(Y_hat=1 | S=1)|"""
    r0, r1 = group_positive_rates(ps)
    return abs(r0 - r1)


def eod(ps: PredictionSet) -> tuple[float, float, float]:
    """(dFPR, dFNR, EOD) with EOD their mean"""
    fpr, fnr = [], []
    for g in (0, 1):
        in_group = ps.s == g
        fpr.append(_rate(ps.y_hard[in_group & (ps.y == 0)] == 1, f"FPR of group S={g} (no negative rows)"))
        fnr.append(_rate(ps.y_hard[in_group & (ps.y == 1)] == 0, f"FNR of group S={g} (no positive rows)"))
    dfpr, dfnr = abs(fpr[0] - fpr[1]), abs(fnr[0] - fnr[1])
    return dfpr, dfnr, (dfpr + dfnr) / 2.0


def average_precision(scores: np.ndarray, y: np.ndarray) -> float:
    """Mean precision at each positive in score-descending order; ties keep input order"""
    scores, y = np.asarray(scores, dtype=np.float64), np.asarray(y, dtype=np.int64)
    if scores.shape != y.shape:
        raise ShapeError(f"{len(scores)} scores for {len(y)} labels")
    if not (y == 1).any():
        raise ValueError("average precision needs at least one positive")
    ranked = y[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    positions = np.flatnonzero(ranked == 1)
    return float(np.mean(hits[positions] / (positions + 1)))


def confusion_by_group(ps: PredictionSet) -> dict[str, dict[str, int]]:
    out = {}
    for g in (0, 1):
        yh, yt = ps.y_hard[ps.s == g], ps.y[ps.s == g]
        out[str(g)] = {
            "tp": int(((yh == 1) & (yt == 1)).sum()),
            "fp": int(((yh == 1) & (yt == 0)).sum()),
            "tn": int(((yh == 0) & (yt == 0)).sum()),
            "fn": int(((yh == 0) & (yt == 1)).sum()),
        }
    return out


@dataclass
class FairnessReport:
    ap: float
    spd: float
    dfpr: float
    dfnr: float
    eod: float
    group_sizes: dict[str, int]
    confusion: dict[str, dict[str, int]]
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ap": self.ap,
            "spd": self.spd,
            "dfpr": self.dfpr,
            "dfnr": self.dfnr,
            "eod": self.eod,
            "group_sizes": dict(self.group_sizes),
            "confusion": {g: dict(c) for g, c in self.confusion.items()},
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FairnessReport:
        return cls(**{k: data[k] for k in
                      ("ap", "spd", "dfpr", "dfnr", "eod", "group_sizes", "confusion", "provenance")})


def report_from_predictions(ps: PredictionSet, provenance: Mapping[str, Any] | None = None) -> FairnessReport:
    dfpr, dfnr, eod_value = eod(ps)
    return FairnessReport(
        ap=average_precision(ps.y_score, ps.y),
        spd=spd(ps),
        dfpr=dfpr,
        dfnr=dfnr,
        eod=eod_value,
        group_sizes={str(g): int((ps.s == g).sum()) for g in (0, 1)},
        confusion=confusion_by_group(ps),
        provenance=dict(provenance or {}),
    )


def evaluate(model: ClassifierModel, X: np.ndarray, y: np.ndarray, s: np.ndarray,
             extra_provenance: Mapping[str, Any] | None = None) -> FairnessReport:
    """Score the test rows and audit against the true sensitive labels"""
    scores = predict(model, X)
    ps = PredictionSet.from_scores(scores, y, s, model.config.threshold)
    provenance = {
        "algorithm": model.config.algorithm,
        "group_signal": model.provenance,
        "seed": model.config.seed,
        **(extra_provenance or {}),
    }
    report = report_from_predictions(ps, provenance)
    logger.info("Evaluated %s (%s): AP %.3f SPD %.3f EOD %.3f",
                model.config.algorithm, model.provenance, report.ap, report.spd, report.eod)
    return report


# ---------------------------------------------------------------- tables

def summarize(reports: Sequence[FairnessReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std of AP / SPD / EOD over seeds"""
    if not reports:
        raise ValueError("cannot summarize an empty list of reports")
    return {
        key: (float(np.mean([getattr(r, key) for r in reports])),
              float(np.std([getattr(r, key) for r in reports])))
        for key in METRIC_KEYS
    }


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def render_markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


TABLE1_ROWS = (("erm", "w/o Bias Mitigation"), ("fairmixup", "Fair Mixup"), ("advdeb", "Adversarial Debiasing"))
TABLE2_GROUPS = (("fairmixup", "Fair Mixup"), ("advdeb", "Adversarial Debiasing"))
EMBEDDER_NAMES = {"ae": "Autoencoder", "transformer": "Transformer"}
CLUSTERER_NAMES = {"kmeans": "K-means", "hierarchical": "Hierarchical", "birch": "BIRCH"}


def render_table1(cells: Mapping[str, Mapping[str, tuple[float, float]]]) -> str:
    """Rows ERM / Fair Mixup / Adversarial Debiasing; columns AP, SPD, EOD"""
    rows = [
        [label] + [format_cell(*cells[key][m]) for m in METRIC_KEYS]
        for key, label in TABLE1_ROWS if key in cells
    ]
    return render_markdown_table(["Method", "AP", "SPD", "EOD"], rows)


def render_table2(cells: Mapping[tuple[str, str], Mapping[str, Mapping[str, tuple[float, float]]]]) -> str:
    """Rows embedder x clusterer; column groups per mitigator, each AP / SPD / EOD"""
    header = ["Embedding", "Clustering"] + [
        f"{label} {m.upper()}" for _, label in TABLE2_GROUPS for m in METRIC_KEYS
    ]
    rows = []
    for (embedder, clusterer), by_mitigator in cells.items():
        row = [EMBEDDER_NAMES.get(embedder, embedder), CLUSTERER_NAMES.get(clusterer, clusterer)]
        for key, _ in TABLE2_GROUPS:
            stats = by_mitigator.get(key)
            row += [format_cell(*stats[m]) if stats else "-" for m in METRIC_KEYS]
        rows.append(row)
    return render_markdown_table(header, rows)
