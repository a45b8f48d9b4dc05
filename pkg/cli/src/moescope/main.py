#!/usr/bin/env python3

"""
moescope trains small mixture-of-experts transformers and looks at how they
route tokens.

Introduction:
moescope is used in four steps, one subcommand each. `corpus-gen` writes a
synthetic corpus file for one domain (plain text, code, several toy
languages, chat-style instructions, or a two-symbol repeat corpus for sanity
checks). `train` reads a JSON run configuration (see runconfig.py and
configs/) naming the model shape, the router, the optimizer schedule, the
objective mixture and the corpora, and trains a model on it, writing
metrics.csv, checkpoints and the fully resolved effective-config.json into
its output directory. `trace` runs a trained checkpoint over a corpus and
records, for every token, which experts one MoE layer chose and whether the
capacity limit let the token through. Finally `analyze` turns traces into
reports: expert ratios per domain / language / token / position, routing
concentration, favourite tokens of each expert, drop rates along the
sequence, and the agreement of two checkpoints. For details on adding your
own report, check out "analysis_functions.py"!

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime errors
(unreadable or corrupt files, violated preconditions) and 4 when training
stops because a loss is no longer finite.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis_functions import (
    analysis_method_functions,
    analysis_method_trace_counts,
    analysis_methods_supported_short,
)
from .checkpoint import load_model
from .config import (
    DEFAULT_DROP_BUCKET_SIZE,
    DEFAULT_TOP_TOKENS,
    EFFECTIVE_CONFIG_FILE_NAME,
    ENV_OUT_DIR,
    ENV_THREADS,
    EXIT_CONFIG_ERROR,
    EXIT_NUMERIC_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    LOG_FORMAT,
)
from .corpus import read_corpus, write_corpus
from .corpus_generators import (
    corpus_generators_supported_short,
    generate_corpus,
)
from .errors import ConfigError, MoescopeError, NumericError
from .model import MoETransformer
from .routing_analysis import GROUP_KEYS
from .routing_trace import RoutingTrace, capture_trace
from .runconfig import RunConfig
from .training import AdamOptimizer, train

log = logging.getLogger(__name__)


def corpus_gen(domain, num_docs, seed, out):
    """
    Generate a synthetic corpus file.

      :param domain: generator short name (see corpus_generators.py)
      :param num_docs: number of documents
      :param seed: seed of the generator
      :param out: corpus file to write
    """
    if num_docs < 0:
        raise ConfigError("--docs must not be negative")
    corpus = generate_corpus(domain, num_docs, np.random.default_rng(seed))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, corpus)
    log.info("A file was saved at %s (%d documents)", out, num_docs)


def env_threads():
    value = os.environ.get(ENV_THREADS)
    if value is None:
        return 1
    try:
        threads = int(value)
    except ValueError as err:
        raise ConfigError(f"{ENV_THREADS} must be an integer") from err
    if threads < 1:
        raise ConfigError(f"{ENV_THREADS} must be positive")
    return threads


def resolve_out_dir(out_dir):
    out_dir = out_dir or os.environ.get(ENV_OUT_DIR)
    if not out_dir:
        raise ConfigError(f"give --out-dir or set {ENV_OUT_DIR}")
    return out_dir


def train_run(config_path, out_dir=None, resume=None, progress=True):
    """
    Train a model from a run configuration.

      :param config_path: JSON run configuration
      :param out_dir: directory for metrics, checkpoints and the effective
          configuration (MOESCOPE_OUT_DIR when None)
      :param resume: checkpoint to continue from
      :returns: list of StepMetrics of the steps trained
    """
    run = RunConfig.load(config_path)
    out_dir = resolve_out_dir(out_dir)
    Path(out_dir).mkdir(parents=True, exist_ok=True)

    optimizer, start_step = None, 0
    if resume:
        model, checkpoint = load_model(resume)
        if model.config != run.model:
            raise ConfigError(
                f"{resume} was trained with a different model configuration"
            )
        optimizer = AdamOptimizer(model.params)
        optimizer.load_state(checkpoint)
        start_step = checkpoint.step
        log.info("resuming from %s at step %d", resume, start_step)
    else:
        model = MoETransformer.init(run.model, seed=run.train.seed)
    log.info(
        "model has %d parameters in %d layers (MoE layers: %s)",
        model.parameter_count(),
        run.model.num_layers,
        ", ".join(str(i) for i in model.moe_layer_indices()),
    )

    run.write_effective(Path(out_dir) / EFFECTIVE_CONFIG_FILE_NAME)
    return train(
        model,
        run.load_corpora(),
        run.mixture,
        run.train,
        out_dir,
        config_record={"run": run.to_dict()},
        optimizer=optimizer,
        start_step=start_step,
        eval_corpora=run.load_eval_corpora(),
        progress=progress,
    )


def trace(
    checkpoint,
    corpus_path,
    out,
    layer=None,
    seq_len=None,
    batch_size=8,
    progress=True,
):
    """
    Record the routing of one MoE layer of a checkpoint over a corpus.

      :returns: the RoutingTrace written to out
    """
    model, _ = load_model(checkpoint)
    routing = capture_trace(
        model,
        read_corpus(corpus_path),
        layer=layer,
        seq_len=seq_len,
        batch_size=batch_size,
        threads=env_threads(),
        progress=progress,
    )
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    routing.write_csv(out)
    log.info("A file was saved at %s (%d rows)", out, len(routing))
    return routing


def analyze(report, trace_paths, out, corpus_paths=None, **options):
    """
    Run one report over traces (or corpora, for token-stats).

      :param report: report short name (see analysis_functions.py)
      :param trace_paths: list of trace CSV paths
      :param out: CSV path of the report
      :param options: analysis options passed on to the report function
      :returns: list of paths written
    """
    trace_paths = trace_paths or []
    expected = analysis_method_trace_counts[report]
    if len(trace_paths) != expected:
        raise ConfigError(
            f"the {report} report needs exactly {expected} --trace"
            f" argument(s), got {len(trace_paths)}"
        )
    num_experts = options.pop("num_experts", None)
    traces = [
        RoutingTrace.read_csv(path, num_experts=num_experts)
        for path in trace_paths
    ]
    configs = dict(options)
    configs["out"] = out
    configs["trace_names"] = [Path(path).stem for path in trace_paths]
    configs["corpora"] = [
        (Path(path).name, read_corpus(path)) for path in corpus_paths or []
    ]
    log.info("Generating %s", report)
    return analysis_method_functions[report](traces, configs)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moescope",
        description="Train small mixture-of-experts transformers and"
        " analyze their routing",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Log debug messages",
    )
    parser.add_argument(
        "-q",
        "--quiet",
        action="store_true",
        help="Only log warnings and errors",
    )
    parser.add_argument(
        "--no-progress",
        action="store_true",
        help="Do not show progress bars",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("corpus-gen", help="Write a synthetic corpus")
    gen.add_argument(
        "--domain",
        required=True,
        choices=corpus_generators_supported_short,
        help="Corpus domain to generate. Pick one of"
        f" {{{', '.join(corpus_generators_supported_short)}}}.",
    )
    gen.add_argument("--docs", type=int, required=True, metavar="<N>")
    gen.add_argument("--seed", type=int, default=0, metavar="<N>")
    gen.add_argument("--out", required=True, metavar="<file>")

    trainer = commands.add_parser("train", help="Train a model")
    trainer.add_argument("--config", required=True, metavar="<file>")
    trainer.add_argument(
        "--out-dir",
        metavar="<dir>",
        help="Directory to write metrics and checkpoints in. Defaults to"
        f" ${ENV_OUT_DIR}.",
    )
    trainer.add_argument(
        "--resume",
        metavar="<checkpoint>",
        help="Continue training from a checkpoint of the same run",
    )

    tracer = commands.add_parser(
        "trace", help="Record the routing decisions of a checkpoint"
    )
    tracer.add_argument("--checkpoint", required=True, metavar="<file>")
    tracer.add_argument("--corpus", required=True, metavar="<file>")
    tracer.add_argument(
        "--layer",
        type=int,
        metavar="<N>",
        help="MoE layer to trace (0-based). If unspecified, the third MoE"
        " layer (or the last one when there are fewer).",
    )
    tracer.add_argument("--out", required=True, metavar="<file>")
    tracer.add_argument(
        "--seq-len",
        type=int,
        metavar="<N>",
        help="Tokens per sequence (defaults to the model's max_seq_len)",
    )
    tracer.add_argument("--batch-size", type=int, default=8, metavar="<N>")

    analyzer = commands.add_parser(
        "analyze", help="Compute a routing report from traces"
    )
    analyzer.add_argument(
        "--report",
        required=True,
        choices=analysis_methods_supported_short,
        help="Report to compute. Pick one of"
        f" {{{', '.join(analysis_methods_supported_short)}}}.",
    )
    analyzer.add_argument(
        "--trace",
        action="append",
        metavar="<file>",
        help="Trace CSV; repeat for reports comparing traces (overlap)",
    )
    analyzer.add_argument(
        "--corpus",
        action="append",
        metavar="<file>",
        help="Corpus file for the token-stats report; may be repeated",
    )
    analyzer.add_argument("--out", required=True, metavar="<file>")
    analyzer.add_argument(
        "--group-by",
        choices=list(GROUP_KEYS),
        help="Grouping of the ratios and std reports (defaults: domain for"
        " ratios, token_id for std)",
    )
    analyzer.add_argument("--layer", type=int, metavar="<N>")
    analyzer.add_argument(
        "--expert",
        type=int,
        metavar="<N>",
        help="Expert of the top-tokens report (all experts if unspecified)",
    )
    analyzer.add_argument(
        "--n",
        type=int,
        default=DEFAULT_TOP_TOKENS,
        metavar="<N>",
        help="Number of tokens per expert in the top-tokens report",
    )
    analyzer.add_argument(
        "--bucket-size",
        type=int,
        default=DEFAULT_DROP_BUCKET_SIZE,
        metavar="<N>",
    )
    analyzer.add_argument(
        "--min-support",
        type=int,
        metavar="<N>",
        help="Smallest group support kept by the std and overlap reports",
    )
    analyzer.add_argument(
        "--num-experts",
        type=int,
        metavar="<N>",
        help="Number of experts of the traced model, when the largest expert"
        " id in a trace does not tell",
    )
    analyzer.add_argument("--include-dropped", action="store_true")
    analyzer.add_argument("--all-choices", action="store_true")
    analyzer.add_argument(
        "--svg", action="store_true", help="Also draw the report as SVG"
    )
    return parser


def run_command(args):
    progress = not args.no_progress
    if args.command == "corpus-gen":
        corpus_gen(args.domain, args.docs, args.seed, args.out)
    elif args.command == "train":
        train_run(args.config, args.out_dir, args.resume, progress=progress)
    elif args.command == "trace":
        trace(
            args.checkpoint,
            args.corpus,
            args.out,
            layer=args.layer,
            seq_len=args.seq_len,
            batch_size=args.batch_size,
            progress=progress,
        )
    else:
        analyze(
            args.report,
            args.trace,
            args.out,
            corpus_paths=args.corpus,
            group_by=args.group_by,
            layer=args.layer,
            expert=args.expert,
            n=args.n,
            bucket_size=args.bucket_size,
            min_support=args.min_support,
            num_experts=args.num_experts,
            include_dropped=args.include_dropped,
            all_choices=args.all_choices,
            svg=args.svg,
        )


def main(argv=None):
    """
    main function responsible for parsing commandline args

    :returns: process exit code

    """
    args = build_parser().parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)

    try:
        run_command(args)
    except ConfigError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG_ERROR
    except NumericError as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC_ERROR
    except (MoescopeError, OSError) as err:
        log.error("%s", err)
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
