"""
Routing analyses over a RoutingTrace: how often each expert is chosen per
domain, language, token id or position; how concentrated those choices are;
which tokens an expert prefers; where in a sequence tokens get dropped; and
how much two checkpoints agree on token-to-expert preferences.

Every result is keyed by a SortedDict, so reports always come out in the
same order however the trace rows were produced.
"""

import logging
from dataclasses import dataclass

import numpy as np
from sortedcontainers import SortedDict

from .config import (
    DEFAULT_DROP_BUCKET_SIZE,
    DEFAULT_OVERLAP_MIN_SUPPORT,
    DEFAULT_STD_MIN_SUPPORT,
    DEFAULT_TOP_TOKENS,
)
from .corpus import dataset_tag, domain_language
from .errors import ConfigError, ContractError
from .tokenizer import tokenizer

log = logging.getLogger(__name__)

GROUP_KEYS = {
    "domain": lambda row: row.domain,
    "token_id": lambda row: row.token_id,
    "position_id": lambda row: row.position,
    "language": lambda row: domain_language(row.domain),
}


@dataclass
class SpecializationReport:
    """
    Per-group expert ratio vectors. ratios[key][i] is the share of the
    group's counted assignments that went to expert i; support[key] is the
    number of assignments counted for the group.
    """

    group_by: str
    layer: int
    num_experts: int
    ratios: SortedDict
    support: SortedDict


@dataclass
class DropCurve:
    """Drop statistics of one dataset, one entry per position bucket"""

    bucket_size: int
    bucket_starts: list
    dropped: list
    total: list

    @property
    def ratios(self):
        return [d / t for d, t in zip(self.dropped, self.total)]


def _layer_rows(trace, layer):
    if layer is None:
        layer = trace.default_layer()
    rows = trace.for_layer(layer)
    if not rows:
        raise ContractError(
            f"the trace has no rows for layer {layer}; it holds layers"
            f" {', '.join(str(i) for i in trace.layers())}"
        )
    return layer, rows


def _counted_choices(row, include_dropped, all_choices):
    """Expert ids of a row that count towards ratio vectors"""
    ranks = range(len(row.experts)) if all_choices else range(1)
    return [
        row.experts[rank]
        for rank in ranks
        if include_dropped or row.kept[rank]
    ]


def expert_ratios(
    trace,
    group_by="domain",
    layer=None,
    include_dropped=False,
    all_choices=False,
):
    """
    Share of assignments per expert for every group of tokens. By default
    each token counts once, for its first choice, and only if that choice
    was kept.

    :param trace: RoutingTrace
    :param group_by: domain, token_id, position_id or language
    :param layer: trace layer (trace.default_layer() when omitted)
    :param include_dropped: count choices that were dropped as well
    :param all_choices: count every ranked choice, not just the first
    :returns: SpecializationReport; groups without any counted assignment
        are left out with a warning

    """
    if group_by not in GROUP_KEYS:
        raise ConfigError(
            f"cannot group by {group_by!r}; expected one of"
            f" {', '.join(GROUP_KEYS)}"
        )
    layer, rows = _layer_rows(trace, layer)
    key_of = GROUP_KEYS[group_by]
    num_experts = trace.num_experts

    counts = SortedDict()
    for row in rows:
        key = key_of(row)
        if key is None:
            continue
        if key not in counts:
            counts[key] = np.zeros(num_experts, dtype=np.int64)
        for expert in _counted_choices(row, include_dropped, all_choices):
            counts[key][expert] += 1

    ratios, support = SortedDict(), SortedDict()
    empty = []
    for key, tally in counts.items():
        total = int(tally.sum())
        if total == 0:
            empty.append(key)
            continue
        ratios[key] = tally / total
        support[key] = total
    if empty:
        log.warning(
            "%d %s group(s) had no counted assignments and were omitted",
            len(empty),
            group_by,
        )
    return SpecializationReport(
        group_by=group_by,
        layer=layer,
        num_experts=num_experts,
        ratios=ratios,
        support=support,
    )


def routing_std(report, min_support=DEFAULT_STD_MIN_SUPPORT):
    """
    Population standard deviation of each group's ratio vector, for groups
    with at least min_support counted assignments. A one-hot vector gives
    the largest value, a uniform vector gives 0.

    :returns: SortedDict group key -> std

    """
    stds = SortedDict(
        (key, float(np.std(ratio)))
        for key, ratio in report.ratios.items()
        if report.support[key] >= min_support
    )
    if not stds:
        log.warning(
            "no %s group reaches the support threshold %d",
            report.group_by,
            min_support,
        )
    return stds


def mean_routing_std(stds):
    if not stds:
        raise ContractError("no groups to average")
    return float(np.mean(list(stds.values())))


def top_tokens(
    trace, expert_id, n=DEFAULT_TOP_TOKENS, layer=None, include_dropped=False
):
    """
    The n token ids most often assigned to an expert (any rank), most
    frequent first, ties broken by ascending token id.

    :returns: list of (token_id, count)

    """
    _, rows = _layer_rows(trace, layer)
    counts = {}
    for row in rows:
        for expert in _counted_choices(row, include_dropped, True):
            if expert == expert_id:
                counts[row.token_id] = counts.get(row.token_id, 0) + 1
    if not counts:
        log.warning("expert %d received no assignments", expert_id)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:n]


def drop_curve(trace, bucket_size=DEFAULT_DROP_BUCKET_SIZE, layer=None):
    """
    Fraction of dropped assignments per position bucket, separately for
    every dataset. Bucket b covers positions [b * bucket_size,
    (b + 1) * bucket_size). Language-tagged rows count towards their
    dataset, so all of multilingual:lang0 .. lang3 form one multilingual
    curve.

    :returns: SortedDict dataset tag -> DropCurve

    """
    if bucket_size < 1:
        raise ConfigError("bucket_size must be positive")
    _, rows = _layer_rows(trace, layer)
    tallies = SortedDict()
    for row in rows:
        buckets = tallies.setdefault(dataset_tag(row.domain), SortedDict())
        bucket = row.position // bucket_size
        dropped, total = buckets.get(bucket, (0, 0))
        buckets[bucket] = (
            dropped + sum(1 for kept in row.kept if not kept),
            total + len(row.kept),
        )
    return SortedDict(
        (
            domain,
            DropCurve(
                bucket_size=bucket_size,
                bucket_starts=[b * bucket_size for b in buckets.keys()],
                dropped=[d for d, _ in buckets.values()],
                total=[t for _, t in buckets.values()],
            ),
        )
        for domain, buckets in tallies.items()
    )


def third_means(values):
    """Means of the first, middle and last third of a sequence of values"""
    values = list(values)
    if len(values) < 3:
        raise ContractError("need at least three values to split in thirds")
    edges = np.linspace(0, len(values), 4).round().astype(int)
    return tuple(
        float(np.mean(values[edges[i] : edges[i + 1]])) for i in range(3)
    )


def preferred_experts(
    trace, layer=None, min_support=DEFAULT_OVERLAP_MIN_SUPPORT
):
    """
    Argmax expert of every token id with at least min_support occurrences,
    from first choices whether or not they were kept (the router's
    preference, not the capacity outcome). Ties go to the lowest expert id.
    """
    report = expert_ratios(
        trace, group_by="token_id", layer=layer, include_dropped=True
    )
    return SortedDict(
        (token, int(np.argmax(ratio)))
        for token, ratio in report.ratios.items()
        if report.support[token] >= min_support
    )


def routing_overlap(
    trace_a,
    trace_b,
    min_support=DEFAULT_OVERLAP_MIN_SUPPORT,
    layer_a=None,
    layer_b=None,
):
    """
    Fraction of shared token ids whose preferred expert is the same in both
    traces. Symmetric, and 1.0 for a trace compared with itself.

    :raises ContractError: when no token id is supported in both traces

    """
    first = preferred_experts(trace_a, layer_a, min_support)
    second = preferred_experts(trace_b, layer_b, min_support)
    shared = [token for token in first if token in second]
    if not shared:
        raise ContractError(
            "the traces share no token id with enough support"
            f" (min_support={min_support})"
        )
    agree = sum(1 for token in shared if first[token] == second[token])
    return agree / len(shared)


def corpus_token_stats(corpus, tok=tokenizer):
    """
    (number of tokens, number of distinct token ids) over all documents of
    a corpus; no eos tokens are added.

    :param corpus: Corpus or iterable of documents

    """
    documents = getattr(corpus, "documents", corpus)
    total = 0
    seen = set()
    for doc in documents:
        ids = tok.tokenize(doc)
        total += len(ids)
        seen.update(ids)
    return total, len(seen)


def token_frequencies(corpus, tok=tokenizer):
    """Token ids of a corpus with their counts, most frequent first"""
    counts = {}
    for doc in getattr(corpus, "documents", corpus):
        for token in tok.tokenize(doc):
            counts[token] = counts.get(token, 0) + 1
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))
