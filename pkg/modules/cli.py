"""
Command-line interface
Subcommands ingest, embed, cluster, mitigate, evaluate, probe and reproduce
share the --config / --seed / --artifact-dir flags. Pipeline errors exit 2
with the failing stage named.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from typing import Any

import yaml

from modules import pipeline
from modules.clustering import METHODS
from modules.config import EMBEDDERS, GROUP_SIGNALS, SOURCES, RunConfig, dump_config, load_config
from modules.errors import ConfigError, ProxyPipelineError
from modules.mitigation import ALGORITHMS, VARIANTS

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbosity: int = 0) -> None:
    level = logging.INFO
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)


def _parse_assignment(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got '{text}'")
    return key.strip(), yaml.safe_load(value)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run configuration YAML")
    common.add_argument("--seed", type=int, help="Global seed (split, embedding, clustering)")
    common.add_argument("--artifact-dir", help="Artifact root directory")
    common.add_argument("--workers", type=int, help="Worker processes for reproduction grids")
    common.add_argument(
        "--set", dest="assignments", action="append", default=[], type=_parse_assignment,
        metavar="KEY=VALUE", help="Dotted config override, e.g. mitigation.alpha=0.5 (repeatable)",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_const", const=1, dest="verbosity", default=0)
    verbosity.add_argument("-q", "--quiet", action="store_const", const=-1, dest="verbosity")
    return common


def _add_generator_flags(parser: argparse.ArgumentParser, clusterer: bool = True) -> None:
    parser.add_argument("--embedder", choices=EMBEDDERS)
    if clusterer:
        parser.add_argument("--clusterer", choices=METHODS)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--algorithm", choices=ALGORITHMS, help="Mitigator (default: config mitigator)")
    parser.add_argument("--mitigation-seed", type=int, help="Classifier seed")
    parser.add_argument("--variant", choices=VARIANTS, help="Fair mixup variant")
    parser.add_argument("--group-signal", choices=GROUP_SIGNALS)
    _add_generator_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="proxyfair",
        description="Fairness without sensitive attributes via generated proxy labels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", parents=[common], help="Parse, clean, split and encode the dataset")
    ingest.add_argument("--source", choices=SOURCES)
    ingest.add_argument("--data", nargs="+", metavar="PATH", help="Adult data files (train then test)")
    ingest.add_argument("--test-frac", type=float)

    embed = sub.add_parser("embed", parents=[common], help="Train an embedder and embed every row")
    _add_generator_flags(embed, clusterer=False)

    cluster = sub.add_parser("cluster", parents=[common], help="Cluster embeddings into proxy labels")
    _add_generator_flags(cluster)

    mitigate = sub.add_parser("mitigate", parents=[common], help="Train a downstream classifier")
    _add_run_flags(mitigate)

    evaluate = sub.add_parser("evaluate", parents=[common], help="Score a trained classifier on the test split")
    _add_run_flags(evaluate)

    probe = sub.add_parser("probe", parents=[common], help="Linear probes over frozen embeddings")
    _add_generator_flags(probe)

    reproduce = sub.add_parser("reproduce", parents=[common], help="Run a result table over all seeds")
    reproduce.add_argument("table", choices=pipeline.TABLES)

    sub.add_parser("show-config", parents=[common], help="Print the resolved configuration")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = dict(args.assignments)
    overrides.update({
        "seed": args.seed,
        "artifact_dir": args.artifact_dir,
        "workers": args.workers,
        "data.source": getattr(args, "source", None),
        "data.paths": getattr(args, "data", None),
        "data.test_frac": getattr(args, "test_frac", None),
        "embedder": getattr(args, "embedder", None),
        "clusterer": getattr(args, "clusterer", None),
        "mitigator": getattr(args, "algorithm", None),
        "group_signal": getattr(args, "group_signal", None),
        "mitigation.seed": getattr(args, "mitigation_seed", None),
        "mitigation.variant": getattr(args, "variant", None),
    })
    return overrides


def _dispatch(command: str, config: RunConfig, args: argparse.Namespace) -> None:
    if command == "ingest":
        pipeline.cmd_ingest(config)
    elif command == "embed":
        pipeline.cmd_embed(config)
    elif command == "cluster":
        pipeline.cmd_cluster(config)
    elif command == "mitigate":
        pipeline.cmd_mitigate(config)
    elif command == "evaluate":
        report = pipeline.cmd_evaluate(config)
        print(f"AP {report.ap:.4f}  SPD {report.spd:.4f}  EOD {report.eod:.4f}")
    elif command == "probe":
        probe = pipeline.cmd_probe(config)
        print(f"cos(proxy, S) {probe.cos_proxy_true:.4f}  cos(proxy, Y) {probe.cos_proxy_downstream:.4f}")
    elif command == "reproduce":
        result = pipeline.cmd_reproduce(config, args.table)
        print(result["markdown"], end="")
    else:
        print(dump_config(config), end="")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbosity)
    try:
        config = load_config(args.config, _overrides(args))
        _dispatch(args.command, config, args)
    except ConfigError as exc:
        logger.error("config failed: %s", exc)
        return 2
    except (ProxyPipelineError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
