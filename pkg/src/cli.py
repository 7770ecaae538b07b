"""
Command-line interface for the FAQ anchoring and matching pipeline.

Subcommands: build-kg, anchor, train, train-ntd, eval, eval-disamb, ablate,
match and generate. Command output goes to stdout, logs and errors to stderr.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from src import config
from src.anchoring import anchor, anchor_coverage
from src.checkpoint import CheckpointError
from src.kg_store import (KGLoadError, UnknownEntityError, bootstrap_triples, kg_stats, load_kg,
                          load_patterns, save_kg)
from src.matchers import MatcherError, MultiChannelMatcher
from src.ntd_model import load_ntd_model
from src.rule_scorer import RuleWeightsError, get_rule_scorer
from src.train_eval import (AnchorProvider, ConfigError, DatasetError, MetricError, NtdTrainConfig, TrainConfig,
                            TrainingDivergedError, accuracy_breakdown, compare_architectures,
                            disambiguation_report, evaluate_accuracy, evaluate_runs, format_report,
                            load_disamb_dataset, load_match_dataset, predict_examples,
                            run_ablation, select_complicated_queries, split_dataset, train_matcher, train_ntd)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class UsageError(Exception):
    """Raised for invalid command lines."""


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_kg_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--entities", default=config.KG_ENTITIES_PATH, help="Entities JSONL file")
    parser.add_argument("--triples", default=config.KG_TRIPLES_PATH, help="Triples JSONL file")


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(prog="faq_qa", description="Knowledge-anchored FAQ query matching")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (overrides the config file)")
    parser.add_argument("--config", default=None, help="JSON run configuration")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    verbosity.add_argument("--verbose", action="store_true", help="Log debug detail")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("build-kg", help="Validate the knowledge graph and optionally bootstrap triples")
    _add_kg_arguments(p)
    p.add_argument("--corpus", help="Text corpus for triple bootstrapping, one sentence per line")
    p.add_argument("--patterns", default=None, help="Bootstrap patterns JSONL")
    p.add_argument("--min-count", type=int, default=1, help="Minimum support of a bootstrapped triple")
    p.add_argument("--output-dir", help="Write the normalized KG files here")

    p = sub.add_parser("anchor", help="Print anchor JSON for texts")
    _add_kg_arguments(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--text", help="A single text")
    source.add_argument("--input", help="File with one text per line")
    p.add_argument("--ntd", default=config.NTD_MODEL_PATH, help="NTD model file")
    p.add_argument("--threshold", type=float, default=config.ANCHOR_THRESHOLD)
    p.add_argument("--explain", action="store_true", help="Add every candidate with its score breakdown")
    p.add_argument("--stats", action="store_true", help="Print coverage statistics instead of anchors")

    p = sub.add_parser("train", help="Train a matcher")
    _add_kg_arguments(p)
    p.add_argument("--data", help="Matching TSV (query, title, label)")
    p.add_argument("--ntd", default=config.NTD_MODEL_PATH)
    p.add_argument("--checkpoint", default=config.MATCHER_CHECKPOINT_PATH, help="Output checkpoint")
    p.add_argument("--cache", default=config.ANCHOR_CACHE_PATH, help="Anchor cache sidecar")

    p = sub.add_parser("train-ntd", help="Train the neural triple disambiguator")
    _add_kg_arguments(p)
    p.add_argument("--data", required=True, help="Disambiguation TSV")
    p.add_argument("--output", default=config.NTD_MODEL_PATH)

    p = sub.add_parser("eval", help="Evaluate matcher accuracy")
    _add_kg_arguments(p)
    p.add_argument("--data", required=True, help="Matching TSV to evaluate on")
    p.add_argument("--checkpoint", default=config.MATCHER_CHECKPOINT_PATH)
    p.add_argument("--ntd", default=config.NTD_MODEL_PATH)
    p.add_argument("--runs", type=int, default=1, help="Train and test N seeds from --config instead")
    p.add_argument("--workers", type=int, default=config.EVAL_WORKERS)
    p.add_argument("--predictions", help="Write per-example label probabilities as JSONL")

    p = sub.add_parser("eval-disamb", help="Report accuracy and AUC of RB, RB+KR and RB+KR+NTD")
    _add_kg_arguments(p)
    p.add_argument("--data", required=True, help="Disambiguation TSV")
    p.add_argument("--ntd", default=config.NTD_MODEL_PATH)
    p.add_argument("--all-queries", action="store_true",
                   help="Keep queries with fewer than two operation candidates")
    p.add_argument("--output", help="Write the TSV report here as well")

    p = sub.add_parser("ablate", help="Channel ablation (or architecture comparison) report")
    _add_kg_arguments(p)
    p.add_argument("--data", help="Matching TSV")
    p.add_argument("--ntd", default=config.NTD_MODEL_PATH)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--compare", action="store_true", help="Compare architectures with and without anchors")
    p.add_argument("--cache", default=config.ANCHOR_CACHE_PATH)
    p.add_argument("--output", help="Write the TSV report here as well")

    p = sub.add_parser("match", help="Interactive FAQ matching")
    _add_kg_arguments(p)
    p.add_argument("--checkpoint", default=config.MATCHER_CHECKPOINT_PATH)
    p.add_argument("--index", default=config.FAQ_INDEX_PATH, help="FAQ index TSV (title[, answer id])")
    p.add_argument("--ntd", default=config.NTD_MODEL_PATH)
    p.add_argument("--k", type=int, default=config.REPL_TOP_K, help="Number of titles per query")

    p = sub.add_parser("generate", help="Write a synthetic corpus from the knowledge graph")
    _add_kg_arguments(p)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--match", type=int, default=3000, help="Number of matching pairs")
    p.add_argument("--disamb", type=int, default=1500, help="Number of disambiguation queries")
    return parser


def _train_config(args: argparse.Namespace) -> TrainConfig:
    train_config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        train_config.seed = args.seed
    return train_config


def _dataset_path(args: argparse.Namespace, train_config: TrainConfig) -> str:
    path = args.data or train_config.dataset
    if not path:
        raise UsageError("a dataset is required (--data or \"dataset\" in the config)")
    return path


def _emit_report(text: str, output: Optional[str]) -> None:
    sys.stdout.write(text)
    if output:
        directory = os.path.dirname(output)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(output, "w", encoding="utf-8") as f:
            f.write(text)


def cmd_build_kg(args: argparse.Namespace) -> int:
    kg = load_kg(args.entities, args.triples)
    bootstrapped = 0
    if args.corpus:
        with open(args.corpus, "r", encoding="utf-8") as f:
            corpus = [line.strip() for line in f if line.strip()]
        results = [r for r in bootstrap_triples(corpus, load_patterns(args.patterns or config.KG_PATTERNS_PATH), kg)
                   if r.count >= args.min_count]
        new = [r.triple for r in results if not kg.has_triple(r.triple.head, r.triple.relation, r.triple.tail)]
        kg = kg.with_triples(new)
        bootstrapped = len(new)
        logger.info(f"Added {bootstrapped} bootstrapped triples")
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        save_kg(kg, os.path.join(args.output_dir, "entities.jsonl"), os.path.join(args.output_dir, "triples.jsonl"))
    print(json.dumps(kg_stats(kg, bootstrapped), sort_keys=True))
    return EXIT_OK


def _read_texts(args: argparse.Namespace) -> List[str]:
    if args.text is not None:
        return [args.text]
    with open(args.input, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def cmd_anchor(args: argparse.Namespace) -> int:
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError(f"--threshold must be in [0, 1], got {args.threshold}")
    kg = load_kg(args.entities, args.triples)
    ntd = load_ntd_model(args.ntd)
    scorer = get_rule_scorer()
    results = []
    for text in _read_texts(args):
        anchors = anchor(text, kg, ntd, args.threshold, scorer)
        if args.stats:
            results.append(anchors)
        else:
            print(json.dumps(anchors.to_dict(explain=args.explain, kg=kg if args.explain else None),
                             ensure_ascii=False))
    if args.stats:
        print(json.dumps(anchor_coverage(results), sort_keys=True))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    train_config = _train_config(args)
    examples = load_match_dataset(_dataset_path(args, train_config))
    kg = load_kg(args.entities, args.triples)
    ntd = load_ntd_model(args.ntd)
    provider = AnchorProvider(kg, ntd, train_config.threshold, cache_path=args.cache)
    splits = split_dataset(examples, train_config.seed)
    result = train_matcher(train_config, splits, kg, ntd, provider)
    result.matcher.save(args.checkpoint, train_config.to_dict())
    if splits.test:
        accuracy = evaluate_accuracy(result.matcher, splits.test, provider)
        print(f"{accuracy:.4f}")
    return EXIT_OK


def cmd_train_ntd(args: argparse.Namespace) -> int:
    ntd_config = NtdTrainConfig.from_file(args.config) if args.config else NtdTrainConfig()
    if args.seed is not None:
        ntd_config.seed = args.seed
    kg = load_kg(args.entities, args.triples)
    model = train_ntd(load_disamb_dataset(args.data), ntd_config, kg)
    model.save(args.output)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    kg = load_kg(args.entities, args.triples)
    ntd = load_ntd_model(args.ntd)
    examples = load_match_dataset(args.data)
    if args.runs > 1:
        if not args.config:
            raise UsageError("--runs needs --config to train one model per seed")
        train_config = _train_config(args)
        provider = AnchorProvider(kg, ntd, train_config.threshold)
        accuracy = evaluate_runs(train_config, split_dataset(examples, train_config.seed), kg, ntd, args.runs,
                                 provider)
        print(f"{accuracy:.4f}")
        return EXIT_OK
    matcher = MultiChannelMatcher.load(args.checkpoint)
    provider = AnchorProvider(kg, ntd)
    accuracy = evaluate_accuracy(matcher, examples, provider, workers=args.workers)
    breakdown = accuracy_breakdown(matcher, examples, provider)
    if breakdown["multi_candidate"] is not None:
        logger.info(f"Accuracy on {breakdown['multi_candidate_examples']} queries with several triple "
                    f"candidates: {breakdown['multi_candidate']:.4f}")
    if args.predictions:
        with open(args.predictions, "w", encoding="utf-8") as f:
            for example, prediction in zip(examples, predict_examples(matcher, examples, provider)):
                f.write(json.dumps({"query": example.query, "title": example.title,
                                    "s": [float(p) for p in prediction.s], "label": prediction.label},
                                   ensure_ascii=False) + "\n")
    print(f"{accuracy:.4f}")
    return EXIT_OK


def cmd_eval_disamb(args: argparse.Namespace) -> int:
    kg = load_kg(args.entities, args.triples)
    ntd = load_ntd_model(args.ntd)
    examples = load_disamb_dataset(args.data)
    if not args.all_queries:
        examples = select_complicated_queries(examples, kg)
    _emit_report(format_report(disambiguation_report(examples, kg, ntd)), args.output)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    train_config = _train_config(args)
    examples = load_match_dataset(_dataset_path(args, train_config))
    kg = load_kg(args.entities, args.triples)
    ntd = load_ntd_model(args.ntd)
    provider = AnchorProvider(kg, ntd, train_config.threshold, cache_path=args.cache)
    splits = split_dataset(examples, train_config.seed)
    if args.compare:
        rows = compare_architectures(train_config, splits, kg, ntd, args.runs, provider=provider)
    else:
        rows = run_ablation(train_config, splits, kg, ntd, args.runs, provider=provider)
    _emit_report(format_report(rows), args.output)
    return EXIT_OK


def cmd_match(args: argparse.Namespace) -> int:
    from src.faq_service import get_faq_ranker, run_repl

    if args.k < 1:
        raise UsageError("--k must be at least 1")
    ranker = get_faq_ranker((args.entities, args.triples), args.checkpoint, args.index, args.ntd)
    run_repl(ranker, args.k)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    from src.synthetic_data import get_synthetic_generator

    kg = load_kg(args.entities, args.triples)
    generator = get_synthetic_generator(kg, args.seed)
    paths = generator.write_corpus(args.output_dir, args.match, args.disamb)
    print(json.dumps(paths, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "build-kg": cmd_build_kg,
    "anchor": cmd_anchor,
    "train": cmd_train,
    "train-ntd": cmd_train_ntd,
    "eval": cmd_eval,
    "eval-disamb": cmd_eval_disamb,
    "ablate": cmd_ablate,
    "match": cmd_match,
    "generate": cmd_generate,
}

DATA_ERRORS = (KGLoadError, UnknownEntityError, DatasetError, CheckpointError, MetricError, RuleWeightsError,
               MatcherError, OSError)


def _configure_logging(args: Optional[argparse.Namespace]) -> None:
    level = getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    if args is not None and args.quiet:
        level = logging.WARNING
    elif args is not None and args.verbose:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _fail(message: str, code: int) -> int:
    logger.debug("command failed", exc_info=True)
    sys.stderr.write(f"error: {message}\n")
    return code


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    Args:
        argv: Arguments without the program name, defaults to sys.argv[1:]

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(str(e), EXIT_USAGE)
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    _configure_logging(args)

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        return _fail(str(e), EXIT_USAGE)
    except TrainingDivergedError as e:
        return _fail(str(e), EXIT_TRAINING)
    except DATA_ERRORS as e:
        return _fail(str(e), EXIT_DATA)
    except KeyboardInterrupt:
        return _fail("interrupted", EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
