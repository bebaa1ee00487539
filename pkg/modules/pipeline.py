"""
Pipeline stages over the artifact store
ingest -> embed -> cluster -> mitigate -> evaluate, plus probe and the table
reproduction grids. Each stage reads only declared upstream artifacts,
checks their manifests and writes its own manifest with chained hashes.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from typing import Any

import numpy as np

from data.adult import clean_and_encode, complete_rows, ingest_adult, split
from data.synthetic import make_synthetic_raw
from data.tables import EncodedTable, SplitIndex
from data.validation import run_comprehensive_validation
from modules.artifacts import (
    ArtifactStore,
    atomic_write_text,
    load_encoded,
    load_labels_csv,
    require_manifest,
    save_encoded,
    save_labels_csv,
    write_json,
    write_manifest,
)
from modules.autoencoder import AutoencoderConfig, train_autoencoder
from modules.clustering import METHODS, ProxyLabels, agreement, assign_proxy, cluster_embeddings
from modules.config import EMBEDDERS, RunConfig, config_hash
from modules.embedding import EmbeddingMatrix, extract_embeddings, load_embeddings, save_embeddings
from modules.errors import ArtifactError, SchemaError
from modules.metrics import (
    FairnessReport,
    evaluate,
    render_table1,
    render_table2,
    summarize,
)
from modules.mitigation import (
    ClassifierModel,
    TrainSet,
    load_model,
    save_model,
    train_mitigator,
)
from modules.nncore import save_checkpoint
from modules.probe import SimilarityReport, analyze
from modules.transformer import build_corpus, fit_tokenizer, train_transformer_mlm

logger = logging.getLogger(__name__)

TABLES = ("table1", "table2")
TABLE2_MITIGATORS = ("fairmixup", "advdeb")
# left out of the reproduction hash
RUNTIME_KEYS = ("artifact_dir", "workers")


# ---------------------------------------------------------------- hashes

def ingest_hash(config: RunConfig) -> str:
    return config_hash(config.data, {"seed": config.seed})


def embed_hash(config: RunConfig, embedder: str) -> str:
    return config_hash(ingest_hash(config), embedder, config.embedder_config(embedder))


def proxy_hash(config: RunConfig, embedder: str, clusterer: str) -> str:
    return config_hash(embed_hash(config, embedder), clusterer, config.clustering, {"seed": config.seed})


def run_name(algorithm: str, variant: str, signal: str, seed: int,
             embedder: str | None = None, clusterer: str | None = None) -> str:
    parts = [algorithm]
    if algorithm == "fairmixup":
        parts.append(variant)
    if algorithm != "erm":
        parts.append(signal)
        if signal == "proxy":
            parts += [embedder or "", clusterer or ""]
    parts.append(f"s{seed}")
    return "-".join(parts)


# ---------------------------------------------------------------- ingest

def cmd_ingest(config: RunConfig) -> tuple[EncodedTable, SplitIndex]:
    """Parse, clean, split and encode; continuous statistics come from train rows only"""
    store = ArtifactStore(config.artifact_dir)
    data = config.data
    if data.source == "adult":
        raw = ingest_adult(list(data.paths))
    else:
        raw = make_synthetic_raw(data.synthetic_rows, data.corr_strength, config.seed, data.label_bias)

    retained = raw.frame.index[complete_rows(raw).to_numpy()].to_numpy(dtype=np.int64)
    index = split(retained, data.test_frac, config.seed)
    table = clean_and_encode(raw, split=index)
    table.metadata.update({"source": data.source, "sources": list(raw.sources)})

    results = run_comprehensive_validation(table, index)
    if results["overall_status"] != "PASS":
        raise SchemaError("; ".join(results["errors"]))

    save_encoded(store.encoded_dir, table, index)
    write_manifest(
        store.encoded_dir, "ingest", ingest_hash(config),
        payload={"n_rows": table.n_rows, "dropped_rows": table.dropped_rows,
                 "n_train": len(index.train_ids), "n_test": len(index.test_ids),
                 "width": table.width, "source": data.source},
    )
    logger.info("Encoded %d rows (%d dropped) into %d features; %d train / %d test",
                table.n_rows, table.dropped_rows, table.width, len(index.train_ids), len(index.test_ids))
    return table, index


def load_ingested(config: RunConfig) -> tuple[EncodedTable, SplitIndex]:
    store = ArtifactStore(config.artifact_dir)
    require_manifest(store.encoded_dir, "ingest", ingest_hash(config))
    table, index = load_encoded(store.encoded_dir)
    if index is None:
        raise ArtifactError(f"{store.encoded_dir} has no train/test split")
    return table, index


# ---------------------------------------------------------------- embed

def cmd_embed(config: RunConfig, embedder: str | None = None) -> EmbeddingMatrix:
    """Train the embedder on every row and embed every row; quantile bins come from train rows"""
    embedder = embedder or config.embedder
    store = ArtifactStore(config.artifact_dir)
    table, index = load_ingested(config)
    section = config.embedder_config(embedder)

    if isinstance(section, AutoencoderConfig):
        model = train_autoencoder(table.X, section, table.y)
        matrix = extract_embeddings(model, table.X, table.ids)
    else:
        tokenizer = fit_tokenizer(table.frame, table.schema, index.train_ids, section.n_bins)
        corpus = build_corpus(table.frame, tokenizer)
        model = train_transformer_mlm(corpus, section, table.y)
        matrix = extract_embeddings(model, corpus)

    directory = store.embedding_dir(embedder)
    digest = embed_hash(config, embedder)
    matrix.config_hash = digest
    save_embeddings(directory / "embeddings.csv", matrix)
    save_checkpoint(directory / "model", model.named_parameters(), section.seed, section)
    write_manifest(
        directory, "embed", digest,
        upstream={"ingest": ingest_hash(config)},
        payload={"generator": embedder, "config": asdict(section), "seed": section.seed,
                 "loss_curve": model.loss_curve, "dim": matrix.dim, "n_rows": len(matrix.ids)},
    )
    return matrix


def load_embedding_stage(config: RunConfig, embedder: str) -> EmbeddingMatrix:
    directory = ArtifactStore(config.artifact_dir).embedding_dir(embedder)
    digest = embed_hash(config, embedder)
    require_manifest(directory, "embed", digest)
    return load_embeddings(directory / "embeddings.csv", embedder, digest)


# ---------------------------------------------------------------- cluster

def cmd_cluster(config: RunConfig, embedder: str | None = None, clusterer: str | None = None) -> ProxyLabels:
    embedder = embedder or config.embedder
    clusterer = clusterer or config.clusterer
    matrix = load_embedding_stage(config, embedder)
    result = cluster_embeddings(matrix.h, clusterer, config.clustering, config.seed, matrix.ids)
    proxy = assign_proxy(result)

    table, _ = load_ingested(config)
    diagnostics = agreement(proxy.proxy, table.s[table.positions(proxy.ids)])
    logger.info("%s/%s proxy sizes %s, balanced accuracy vs true S %.3f",
                embedder, clusterer, proxy.sizes, diagnostics["balanced_accuracy"])

    directory = ArtifactStore(config.artifact_dir).proxy_dir(embedder, clusterer)
    save_labels_csv(directory / "proxy.csv", proxy.ids, proxy.proxy, "proxy")
    write_manifest(
        directory, "cluster", proxy_hash(config, embedder, clusterer),
        upstream={"embed": embed_hash(config, embedder)},
        payload={"method": clusterer, "params": result.params, "sizes": list(proxy.sizes),
                 "inertia": result.inertia, "agreement": diagnostics, "seed": config.seed},
    )
    return proxy


def load_proxy_stage(config: RunConfig, embedder: str, clusterer: str) -> ProxyLabels:
    directory = ArtifactStore(config.artifact_dir).proxy_dir(embedder, clusterer)
    manifest = require_manifest(directory, "cluster", proxy_hash(config, embedder, clusterer))
    ids, labels = load_labels_csv(directory / "proxy.csv", "proxy", "cluster")
    return ProxyLabels(ids, labels, tuple(manifest["sizes"]), clusterer)  # type: ignore[arg-type]


# ---------------------------------------------------------------- mitigate / evaluate

def _mitigation_hash(config: RunConfig, algorithm: str, seed: int, variant: str,
                     signal: str, embedder: str, clusterer: str) -> tuple[str, dict[str, str]]:
    upstream = {"ingest": ingest_hash(config)}
    if algorithm != "erm" and signal == "proxy":
        upstream["cluster"] = proxy_hash(config, embedder, clusterer)
    section = config.mitigation_config(algorithm, seed, variant)
    return config_hash(section, signal if algorithm != "erm" else "none", upstream), upstream


def cmd_mitigate(
    config: RunConfig,
    algorithm: str | None = None,
    seed: int | None = None,
    variant: str | None = None,
    signal: str | None = None,
    embedder: str | None = None,
    clusterer: str | None = None,
) -> ClassifierModel:
    """Train one downstream classifier; the group signal is true S or a proxy artifact"""
    algorithm = algorithm or config.mitigator
    seed = config.mitigation.seed if seed is None else seed
    variant = variant or config.mitigation.variant
    signal = signal or config.group_signal
    embedder = embedder or config.embedder
    clusterer = clusterer or config.clusterer

    table, index = load_ingested(config)
    train = table.subset(index.train_ids)
    train_set = TrainSet(train.X, train.y, train.ids)
    groups = None
    provenance = "none"
    if algorithm != "erm":
        provenance = signal
        if signal == "true":
            groups = train.s.copy()
        else:
            groups = load_proxy_stage(config, embedder, clusterer).aligned(train.ids)

    section = config.mitigation_config(algorithm, seed, variant)
    model = train_mitigator(train_set, groups, section, provenance)
    name = run_name(algorithm, variant, signal, seed, embedder, clusterer)
    digest, upstream = _mitigation_hash(config, algorithm, seed, variant, signal, embedder, clusterer)
    directory = ArtifactStore(config.artifact_dir).model_dir(name)
    save_model(directory / "model", model, {"run": name})
    write_manifest(directory, "mitigate", digest, upstream=upstream,
                   payload={"run": name, "algorithm": algorithm, "group_signal": provenance})
    return model


def cmd_evaluate(
    config: RunConfig,
    algorithm: str | None = None,
    seed: int | None = None,
    variant: str | None = None,
    signal: str | None = None,
    embedder: str | None = None,
    clusterer: str | None = None,
) -> FairnessReport:
    """Score the test split against the true sensitive labels"""
    algorithm = algorithm or config.mitigator
    seed = config.mitigation.seed if seed is None else seed
    variant = variant or config.mitigation.variant
    signal = signal or config.group_signal
    embedder = embedder or config.embedder
    clusterer = clusterer or config.clusterer

    name = run_name(algorithm, variant, signal, seed, embedder, clusterer)
    store = ArtifactStore(config.artifact_dir)
    directory = store.model_dir(name)
    digest, _ = _mitigation_hash(config, algorithm, seed, variant, signal, embedder, clusterer)
    require_manifest(directory, "mitigate", digest)
    model = load_model(directory / "model")

    table, index = load_ingested(config)
    test = table.subset(index.test_ids)
    extra: dict[str, Any] = {"run": name}
    if algorithm == "fairmixup":
        extra.update({"variant": variant, "lambda": model.config.lam})
    if algorithm == "advdeb":
        extra["alpha"] = model.config.alpha
    if algorithm != "erm" and signal == "proxy":
        extra.update({"embedder": embedder, "clusterer": clusterer})
    report = evaluate(model, test.X, test.y, test.s, extra)

    payload = {**report.to_dict(), "upstream": {"mitigate": digest}}
    write_json(store.reports_dir / f"{name}.json", payload)
    return report


def run_cell(config: RunConfig, algorithm: str, seed: int, variant: str, signal: str,
             embedder: str, clusterer: str) -> dict[str, Any]:
    """mitigate + evaluate for one grid cell and seed; module-level so worker processes can pickle it"""
    cmd_mitigate(config, algorithm, seed, variant, signal, embedder, clusterer)
    return cmd_evaluate(config, algorithm, seed, variant, signal, embedder, clusterer).to_dict()


def _run_tasks(tasks: Sequence[tuple[Any, ...]], workers: int) -> list[dict[str, Any]]:
    """Results come back in task order regardless of the worker count"""
    if workers <= 1:
        return [run_cell(*task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, *zip(*tasks)))


# ---------------------------------------------------------------- probe

def cmd_probe(config: RunConfig, embedder: str | None = None, clusterer: str | None = None) -> SimilarityReport:
    embedder = embedder or config.embedder
    clusterer = clusterer or config.clusterer
    matrix = load_embedding_stage(config, embedder)
    proxy = load_proxy_stage(config, embedder, clusterer)
    table, _ = load_ingested(config)
    pos = table.positions(matrix.ids)
    report = analyze(matrix.h, proxy.aligned(matrix.ids), table.s[pos], table.y[pos], config.probe)

    store = ArtifactStore(config.artifact_dir)
    write_json(
        store.reports_dir / f"probe-{embedder}-{clusterer}.json",
        {**report.to_dict(), "embedder": embedder, "clusterer": clusterer,
         "upstream": {"cluster": proxy_hash(config, embedder, clusterer)}},
    )
    return report


# ---------------------------------------------------------------- reproduction

def _ensure_proxy(config: RunConfig, embedder: str, clusterer: str) -> None:
    store = ArtifactStore(config.artifact_dir)
    try:
        require_manifest(store.embedding_dir(embedder), "embed", embed_hash(config, embedder))
    except ArtifactError:
        cmd_embed(config, embedder)
    try:
        require_manifest(store.proxy_dir(embedder, clusterer), "cluster", proxy_hash(config, embedder, clusterer))
    except ArtifactError:
        cmd_cluster(config, embedder, clusterer)


def _entry(runs: dict[str, list[dict[str, Any]]], algorithm: str, base: dict[str, Any]) -> dict[str, Any]:
    """Ledger entry; fair mixup takes AP and SPD from its dp runs and EOD from its eo runs"""
    as_reports = {k: [FairnessReport.from_dict(r) for r in v] for k, v in runs.items()}
    if algorithm == "fairmixup":
        dp, eo = summarize(as_reports["dp"]), summarize(as_reports["eo"])
        summary = {"ap": dp["ap"], "spd": dp["spd"], "eod": eo["eod"]}
    else:
        summary = summarize(as_reports["main"])
    return {**base, "algorithm": algorithm, "runs": runs,
            "summary": {k: list(v) for k, v in summary.items()}}


def _grid(config: RunConfig, cells: list[tuple[str, str, str, str]]) -> list[dict[str, Any]]:
    """cells: (algorithm, signal, embedder, clusterer); expands seeds and fair-mixup variants"""
    tasks, keys = [], []
    for c, (algorithm, signal, embedder, clusterer) in enumerate(cells):
        variants = ("dp", "eo") if algorithm == "fairmixup" else (config.mitigation.variant,)
        for variant in variants:
            for seed in config.mitigation.seeds:
                tasks.append((config, algorithm, seed, variant, signal, embedder, clusterer))
                keys.append((c, variant if algorithm == "fairmixup" else "main"))
    results = _run_tasks(tasks, config.workers)

    entries = []
    for c, (algorithm, signal, embedder, clusterer) in enumerate(cells):
        runs: dict[str, list[dict[str, Any]]] = {}
        for (cell, key), result in zip(keys, results):
            if cell == c:
                runs.setdefault(key, []).append(result)
        base = {"group_signal": signal, "seeds": list(config.mitigation.seeds)}
        if signal == "proxy":
            base.update({"embedder": embedder, "clusterer": clusterer})
        if algorithm == "advdeb":
            base["alpha"] = config.mitigation.alpha
        if algorithm == "fairmixup":
            base["lambda"] = {"dp": config.mitigation.lambda_dp, "eo": config.mitigation.lambda_eo}
        entries.append(_entry(runs, algorithm, base))
    return entries


def cmd_reproduce(config: RunConfig, table: str = "table1") -> dict[str, Any]:
    """Run a result grid over all mitigation seeds and write JSON + markdown (+ figures and PDF)"""
    if table not in TABLES:
        raise ValueError(f"table must be one of {TABLES}, got {table}")
    load_ingested(config)
    store = ArtifactStore(config.artifact_dir)

    probes: list[dict[str, Any]] = []
    if table == "table1":
        cells = [("erm", "true", "", ""), ("fairmixup", "true", "", ""), ("advdeb", "true", "", "")]
        ledger = _grid(config, cells)
        markdown = render_table1({e["algorithm"]: {k: tuple(v) for k, v in e["summary"].items()} for e in ledger})
    else:
        pairs = [(e, c) for e in EMBEDDERS for c in METHODS]
        for embedder, clusterer in pairs:
            _ensure_proxy(config, embedder, clusterer)
        cells = [(m, "proxy", e, c) for e, c in pairs for m in TABLE2_MITIGATORS]
        ledger = _grid(config, cells)
        grid: dict[tuple[str, str], dict[str, dict[str, tuple[float, float]]]] = {}
        for entry in ledger:
            grid.setdefault((entry["embedder"], entry["clusterer"]), {})[entry["algorithm"]] = {
                k: tuple(v) for k, v in entry["summary"].items()
            }
        markdown = render_table2(grid)
        for embedder, clusterer in pairs:
            probe = cmd_probe(config, embedder, clusterer)
            probes.append({"embedder": embedder, "clusterer": clusterer, **probe.to_dict()})

    result = {
        "table": table,
        "config_hash": config_hash({k: v for k, v in config.to_dict().items() if k not in RUNTIME_KEYS}),
        "ledger": ledger,
        "probes": probes,
        "markdown": markdown,
    }
    write_json(store.reports_dir / f"{table}.json", result)
    atomic_write_text(store.reports_dir / f"{table}.md", markdown)

    from modules.report_generator import write_reproduction_outputs

    write_reproduction_outputs(store.reports_dir, result, config)
    logger.info("Wrote %s with %d ledger entries to %s", table, len(ledger), store.reports_dir)
    return result

