"""
Trains the toy configuration for a few seeds and checks the routing
phenomena a trained model should show:

 - experts specialize on token ids rather than on positions: the mean
   routing std over token ids exceeds the one over position ids;
 - routing is learned early: the preferred experts at the halfway
   checkpoint agree with the final ones well above chance (3 / E);
 - tokens are dropped towards the end of a sequence: on out-of-domain data
   the last third of the drop curve is at least its first third, and
   in-domain data is dropped less than out-of-domain data.

Every seed trains with its own copy of the run configuration under
<work_dir>/seed-<N>/, with the capacity factor capped at 1.0 so that drops
happen at all.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import load_model
from .config import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, LOG_FORMAT
from .corpus import Corpus, read_corpus
from .errors import ConfigError, ContractError, MoescopeError
from .main import corpus_gen, train_run
from .routing_analysis import (
    drop_curve,
    expert_ratios,
    mean_routing_std,
    routing_overlap,
    routing_std,
    third_means,
)
from .routing_trace import capture_trace
from .training import TrainConfig, checkpoint_path

log = logging.getLogger(__name__)

# (domain, number of documents, generator seed) of the generated corpora
CORPUS_PLAN = [
    ("text", 2000, 0),
    ("code", 2000, 1),
    ("multilingual", 2000, 2),
    ("instruct", 500, 3),
]
IN_DOMAIN = ["text", "code", "multilingual"]
OUT_OF_DOMAIN = "instruct"
MAX_CAPACITY_FACTOR = 1.0
OVERLAP_MULTIPLE = 3.0


def write_corpora(data_dir, scale=1.0):
    """
    Generates the corpora of CORPUS_PLAN into data_dir, skipping files that
    already exist.

    :param scale: multiplies every document count
    :returns: dict domain -> corpus path

    """
    paths = {}
    for domain, num_docs, seed in CORPUS_PLAN:
        path = Path(data_dir) / f"{domain}.txt"
        if not path.exists():
            corpus_gen(domain, max(1, int(num_docs * scale)), seed, path)
        paths[domain] = str(path.resolve())
    return paths


def seed_config(values, seed, corpus_paths, steps=None):
    """
    A copy of a parsed run configuration for one seed: train.seed set,
    capacity factor capped, corpus paths pointed at corpus_paths. Giving
    steps rescales warmup, eval interval and switch points with it; the
    checkpoint interval becomes steps // 2 so that the halfway model is
    saved.

    :param values: parsed run configuration (not modified)
    :param corpus_paths: dict domain -> absolute corpus path
    :returns: the new configuration dict

    """
    values = json.loads(json.dumps(values))
    train = values.setdefault("train", {})
    train["seed"] = seed
    router = values["router"]
    router["capacity_factor"] = min(
        router.get("capacity_factor", MAX_CAPACITY_FACTOR),
        MAX_CAPACITY_FACTOR,
    )
    for section in ("corpora", "eval_corpora"):
        values[section] = {
            tag: corpus_paths[tag] for tag in values.get(section, {})
        }

    if steps is not None:
        if steps < 4 or steps % 2:
            raise ConfigError("steps must be even and at least 4")
        scale = steps / train.get("steps", TrainConfig.steps)
        train["steps"] = steps
        warmup = train.get("warmup_steps", TrainConfig.warmup_steps)
        train["warmup_steps"] = min(max(1, int(warmup * scale)), steps - 1)
        if "eval_every" in train:
            train["eval_every"] = max(1, int(train["eval_every"] * scale))
        for point in values["mixture"].get("switch_points", []):
            point["step"] = int(point["step"] * scale)
    train.setdefault("steps", TrainConfig.steps)
    if train["steps"] % 2:
        raise ConfigError("steps must be even")
    train["checkpoint_every"] = train["steps"] // 2
    return values


def mixed_corpus(corpus_paths, docs_per_domain):
    """
    The first docs_per_domain documents of every in-domain corpus in one
    Corpus, each document keeping its own domain tag.
    """
    documents, tags = [], []
    for domain in IN_DOMAIN:
        corpus = read_corpus(corpus_paths[domain])
        documents += corpus.documents[:docs_per_domain]
        tags += corpus.doc_tags[:docs_per_domain]
    return Corpus("mixed", documents, tags)


@dataclass
class SeedResult:
    """
    Measurements of one trained seed; None where a measurement had too
    little data (the reason is in errors).
    """

    seed: int
    num_experts: int
    token_std: float = None
    position_std: float = None
    overlap: float = None
    ood_thirds: tuple = None
    in_domain_drop: float = None
    ood_drop: float = None
    errors: list = field(default_factory=list)

    def failures(self):
        """Descriptions of the properties this seed does not show"""
        failed = list(self.errors)
        if None not in (self.token_std, self.position_std):
            if self.token_std <= self.position_std:
                failed.append(
                    f"token std {self.token_std:.4f} does not exceed"
                    f" position std {self.position_std:.4f}"
                )
        if self.overlap is not None:
            floor = OVERLAP_MULTIPLE / self.num_experts
            if self.overlap < floor:
                failed.append(
                    f"overlap {self.overlap:.3f} is below {floor:.3f}"
                )
        if self.ood_thirds is not None:
            first, _, last = self.ood_thirds
            if last < first:
                failed.append(
                    f"out-of-domain drops fall along the sequence"
                    f" ({first:.3f} -> {last:.3f})"
                )
        if None not in (self.in_domain_drop, self.ood_drop):
            if self.in_domain_drop >= self.ood_drop:
                failed.append(
                    f"in-domain drop rate {self.in_domain_drop:.3f} is not"
                    f" below the out-of-domain one {self.ood_drop:.3f}"
                )
        return failed


def _pooled_drop(curves):
    dropped = sum(sum(curve.dropped) for curve in curves)
    total = sum(sum(curve.total) for curve in curves)
    return dropped / total


def measure_run(seed, out_dir, corpus_paths, docs_per_domain, progress):
    """
    Traces the halfway and final checkpoints of a finished run and
    measures the three properties.

    :returns: SeedResult
    """
    with open(Path(out_dir) / "run.json", encoding="utf-8") as handle:
        steps = json.load(handle)["train"]["steps"]
    final, _ = load_model(checkpoint_path(out_dir, steps))
    halfway, _ = load_model(checkpoint_path(out_dir, steps // 2))
    mixed = mixed_corpus(corpus_paths, docs_per_domain)
    ood = read_corpus(corpus_paths[OUT_OF_DOMAIN])

    final_trace = capture_trace(final, mixed, progress=progress)
    result = SeedResult(seed, final.config.router.num_experts)
    try:
        result.token_std = mean_routing_std(
            routing_std(expert_ratios(final_trace, group_by="token_id"))
        )
        result.position_std = mean_routing_std(
            routing_std(expert_ratios(final_trace, group_by="position_id"))
        )
    except ContractError as err:
        result.errors.append(f"routing std: {err}")

    try:
        result.overlap = routing_overlap(
            capture_trace(halfway, mixed, progress=progress), final_trace
        )
    except ContractError as err:
        result.errors.append(f"overlap: {err}")

    in_domain = drop_curve(final_trace)
    ood_curve = drop_curve(capture_trace(final, ood, progress=progress))[
        OUT_OF_DOMAIN
    ]
    result.in_domain_drop = _pooled_drop(in_domain.values())
    result.ood_drop = _pooled_drop([ood_curve])
    try:
        result.ood_thirds = third_means(ood_curve.ratios)
    except ContractError as err:
        result.errors.append(f"drop curve: {err}")

    log.info(
        "seed %d: token std %s, position std %s, overlap %s,"
        " drop thirds %s, drop in/out of domain %.4f/%.4f",
        seed,
        result.token_std,
        result.position_std,
        result.overlap,
        result.ood_thirds,
        result.in_domain_drop,
        result.ood_drop,
    )
    return result


def run_acceptance(
    config_path,
    work_dir,
    seeds=(0, 1, 2),
    steps=None,
    corpus_scale=1.0,
    docs_per_domain=200,
    progress=True,
):
    """
    Generates the corpora, trains config_path once per seed and measures
    every run.

    :param config_path: JSON run configuration (configs/toy.json)
    :param work_dir: directory for data/ and one seed-<N>/ per seed
    :param steps: training steps, when the configured ones take too long
    :param corpus_scale: multiplies the generated document counts
    :param docs_per_domain: in-domain documents traced per domain
    :returns: list of SeedResult, in seed order

    """
    with open(config_path, encoding="utf-8") as handle:
        values = json.load(handle)
    corpus_paths = write_corpora(Path(work_dir) / "data", corpus_scale)
    results = []
    for seed in seeds:
        out_dir = Path(work_dir) / f"seed-{seed}"
        out_dir.mkdir(parents=True, exist_ok=True)
        run_path = out_dir / "run.json"
        with open(run_path, "w", encoding="utf-8") as handle:
            json.dump(
                seed_config(values, seed, corpus_paths, steps),
                handle,
                indent=2,
            )
        log.info("training seed %d into %s", seed, out_dir)
        train_run(str(run_path), str(out_dir), progress=progress)
        results.append(
            measure_run(
                seed, out_dir, corpus_paths, docs_per_domain, progress
            )
        )
    return results


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="moescope-acceptance",
        description="Train a configuration for several seeds and check"
        " the routing properties of the trained models",
    )
    parser.add_argument("--config", default="configs/toy.json")
    parser.add_argument("--work-dir", required=True, metavar="<dir>")
    parser.add_argument(
        "--seeds", type=int, nargs="+", default=[0, 1, 2], metavar="<N>"
    )
    parser.add_argument(
        "--steps",
        type=int,
        metavar="<N>",
        help="Training steps (even); schedule points are rescaled",
    )
    parser.add_argument("--no-progress", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format=LOG_FORMAT, stream=sys.stderr
    )

    try:
        results = run_acceptance(
            args.config,
            args.work_dir,
            seeds=args.seeds,
            steps=args.steps,
            progress=not args.no_progress,
        )
    except ConfigError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG_ERROR
    except (MoescopeError, OSError) as err:
        log.error("%s", err)
        return EXIT_RUNTIME_ERROR
    failed = False
    for result in results:
        for failure in result.failures():
            failed = True
            log.error("seed %d: %s", result.seed, failure)
    if not failed:
        log.info("all %d seeds show every property", len(results))
    return 1 if failed else 0
