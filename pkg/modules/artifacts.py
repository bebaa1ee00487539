"""
Artifact persistence with atomic writes and manifest chaining
Every stage writes its outputs next to a manifest.json recording the stage's
config hash and the hashes of the upstream manifests it consumed.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from data.schema import FeatureSchema
from data.tables import EncodedTable, SplitIndex
from modules.errors import ArtifactError, MissingArtifactError, StaleArtifactError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# ---------------------------------------------------------------- atomic io

def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_json(path: str | Path, data: Any) -> Path:
    return atomic_write_text(path, dumps_json(data))


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- manifests

def write_manifest(
    directory: Path,
    stage: str,
    config_hash: str,
    upstream: dict[str, str] | None = None,
    payload: dict[str, Any] | None = None,
) -> dict[str, Any]:
    manifest = {
        "stage": stage,
        "config_hash": config_hash,
        "upstream": dict(upstream or {}),
        **(payload or {}),
    }
    write_json(directory / MANIFEST, manifest)
    return manifest


def require_manifest(directory: Path, stage: str, expected_hash: str | None = None) -> dict[str, Any]:
    """Load an upstream manifest, failing loudly when absent or stale"""
    path = directory / MANIFEST
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    manifest = read_json(path)
    if manifest.get("stage") != stage:
        raise ArtifactError(f"{path} belongs to stage '{manifest.get('stage')}', expected '{stage}'")
    if expected_hash is not None and manifest.get("config_hash") != expected_hash:
        raise StaleArtifactError(stage, expected_hash, str(manifest.get("config_hash")))
    return manifest


class ArtifactStore:
    """Directory layout of one artifact root"""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def encoded_dir(self) -> Path:
        return self.root / "encoded"

    def embedding_dir(self, embedder: str) -> Path:
        return self.root / "embeddings" / embedder

    def proxy_dir(self, embedder: str, clusterer: str) -> Path:
        return self.root / "proxy" / f"{embedder}-{clusterer}"

    def model_dir(self, run_name: str) -> Path:
        return self.root / "models" / run_name

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"


# ---------------------------------------------------------------- encoded tables

def save_encoded(directory: Path, table: EncodedTable, split: SplitIndex | None) -> None:
    buffer = io.BytesIO()
    np.savez(buffer, X=table.X, y=table.y, s=table.s, ids=table.ids)
    atomic_write_bytes(directory / "table.npz", buffer.getvalue())
    atomic_write_text(directory / "frame.csv", table.frame.to_csv(index=True))
    sidecar = {
        "schema": table.schema.to_dict(),
        "feature_names": list(table.feature_names),
        "blocks": {k: list(v) for k, v in table.blocks.items()},
        "dropped_rows": table.dropped_rows,
        "n_rows": table.n_rows,
        "metadata": table.metadata,
        "split": split.to_dict() if split is not None else None,
    }
    write_json(directory / "table.json", sidecar)


def load_encoded(directory: Path) -> tuple[EncodedTable, SplitIndex | None]:
    if not (directory / "table.npz").exists():
        raise MissingArtifactError("ingest", str(directory / "table.npz"))
    sidecar = read_json(directory / "table.json")
    schema = FeatureSchema.from_dict(sidecar["schema"])
    categorical = {c.name: str for c in schema.categorical_columns}
    frame = pd.read_csv(directory / "frame.csv", index_col="id", dtype=categorical, float_precision="round_trip")
    with np.load(directory / "table.npz") as archive:
        arrays = {k: archive[k] for k in archive.files}
    table = EncodedTable(
        X=arrays["X"],
        y=arrays["y"],
        s=arrays["s"],
        ids=arrays["ids"],
        feature_names=tuple(sidecar["feature_names"]),
        blocks={k: (int(v[0]), int(v[1])) for k, v in sidecar["blocks"].items()},
        schema=schema,
        frame=frame,
        dropped_rows=int(sidecar["dropped_rows"]),
        metadata=dict(sidecar.get("metadata") or {}),
    )
    split = SplitIndex.from_dict(sidecar["split"]) if sidecar.get("split") else None
    return table, split


# ---------------------------------------------------------------- embeddings / proxies

def save_matrix_csv(path: Path, ids: np.ndarray, matrix: np.ndarray, prefix: str = "e") -> None:
    frame = pd.DataFrame(matrix, columns=[f"{prefix}{j}" for j in range(matrix.shape[1])])
    frame.insert(0, "id", np.asarray(ids, dtype=np.int64))
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))


def load_matrix_csv(path: Path, stage: str) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    frame = pd.read_csv(path, float_precision="round_trip")
    return frame["id"].to_numpy(dtype=np.int64), frame.drop(columns="id").to_numpy(dtype=np.float64)


def save_labels_csv(path: Path, ids: np.ndarray, labels: np.ndarray, column: str) -> None:
    frame = pd.DataFrame({"id": np.asarray(ids, dtype=np.int64), column: np.asarray(labels, dtype=np.int64)})
    atomic_write_text(path, frame.to_csv(index=False))


def load_labels_csv(path: Path, column: str, stage: str) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    frame = pd.read_csv(path)
    return frame["id"].to_numpy(dtype=np.int64), frame[column].to_numpy(dtype=np.int64)
