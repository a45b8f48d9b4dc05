"""
Training objectives and batch sampling.

Every objective turns a token window into a TrainingExample whose labels are
aligned with its ids: labels[i] is either ids[i] (the model must predict it
from ids[:i]) or IGNORE_INDEX. collate() performs the usual one-token shift
into model inputs and next-token targets.

  causal_lm:     every token after the first is predicted
  prefix_lm:     the first ceil((1 - r) * n) tokens are context only
  span_corrupt:  random spans are replaced by sentinels; the model reads
                 the corrupted sequence and then predicts each sentinel
                 followed by the tokens it replaced

A MixtureConfig says which domains to draw windows from and which
denoisers to apply, and may switch to a different mixture at given steps.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .config import (
    CAUSAL_LM_DENOISERS,
    IGNORE_INDEX,
    NUM_SENTINELS,
    PAD_ID,
    UL2_DENOISERS,
)
from .errors import ConfigError, SkipExample
from .tokenizer import tokenizer

log = logging.getLogger(__name__)

DENOISER_KINDS = ("causal_lm", "prefix_lm", "span_corrupt")
MAX_SAMPLE_ATTEMPTS = 100


@dataclass
class DenoiserSpec:
    kind: str
    mean_span: float = None
    mask_ratio: float = None
    mix_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in DENOISER_KINDS:
            raise ConfigError(
                f"unknown denoiser kind {self.kind!r}; expected one of"
                f" {', '.join(DENOISER_KINDS)}"
            )
        if self.kind == "prefix_lm" and self.mask_ratio is None:
            self.mask_ratio = 0.5
        if self.kind == "span_corrupt":
            if self.mean_span is None or self.mean_span <= 0:
                raise ConfigError("span_corrupt needs a positive mean_span")
            if self.mask_ratio is None:
                raise ConfigError("span_corrupt needs a mask_ratio")
        if self.mask_ratio is not None and not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if not 0 <= self.mix_weight <= 1:
            raise ConfigError("mix_weight must lie in [0, 1]")

    @property
    def tag(self):
        if self.kind == "span_corrupt":
            return (
                f"span_corrupt(mu={self.mean_span:g},r={self.mask_ratio:g})"
            )
        if self.kind == "prefix_lm":
            return f"prefix_lm(r={self.mask_ratio:g})"
        return self.kind


def ul2_denoisers():
    """The UL2 mixture: half PrefixLM, half five SpanCorrupt settings"""
    return [DenoiserSpec(*row) for row in UL2_DENOISERS]


def causal_lm_denoisers():
    return [DenoiserSpec(*row) for row in CAUSAL_LM_DENOISERS]


@dataclass
class TrainingExample:
    input_ids: list
    target_ids: list  # aligned with input_ids; IGNORE_INDEX where unused
    domain_tag: str = ""
    objective_tag: str = ""
    prefix_length: int = 0

    @property
    def num_supervised(self):
        # Position 0 has nothing to be predicted from.
        return sum(1 for label in self.target_ids[1:] if label != IGNORE_INDEX)


def _check_weights(pairs, what):
    if not pairs:
        raise ConfigError(f"{what} must not be empty")
    total = sum(weight for _, weight in pairs)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"{what} weights sum to {total}, not 1")
    if any(weight < 0 for _, weight in pairs):
        raise ConfigError(f"{what} weights must not be negative")


@dataclass
class MixtureConfig:
    """
    Sampling ratios per domain plus the denoiser mix. switch_points holds
    (step, MixtureConfig) pairs: from that step on (inclusive) the given
    mixture replaces both the domain ratios and the denoiser mix.
    """

    domains: list  # (domain_tag, sampling_ratio)
    denoisers: List[DenoiserSpec] = field(default_factory=ul2_denoisers)
    switch_points: list = field(default_factory=list)

    def __post_init__(self):
        self.domains = [(tag, float(ratio)) for tag, ratio in self.domains]
        _check_weights(self.domains, "domain sampling ratio")
        _check_weights(
            [(d.tag, d.mix_weight) for d in self.denoisers], "denoiser mix"
        )
        self.switch_points = sorted(self.switch_points, key=lambda p: p[0])
        steps = [step for step, _ in self.switch_points]
        if len(set(steps)) != len(steps) or any(s < 0 for s in steps):
            raise ConfigError("switch points need distinct non-negative steps")

    def at_step(self, step):
        """The mixture in force at a training step"""
        current = self
        for switch_step, mixture in self.switch_points:
            if step >= switch_step:
                current = mixture
        return current

    def domain_tags(self):
        tags = {tag for tag, _ in self.domains}
        for _, mixture in self.switch_points:
            tags |= mixture.domain_tags()
        return tags


def _clamp(value, low, high):
    return max(low, min(high, value))


def span_count(length, mean_span, mask_ratio):
    """
    (number of masked tokens, number of spans) used for a sequence of the
    given length. Both are deterministic, which makes the realized mask
    fraction round(r * n) / n.
    """
    num_masked = _clamp(int(round(mask_ratio * length)), 1, length - 1)
    # Spans longer than half the sequence cannot fit; clamp the mean.
    mean_span = min(mean_span, length / 2)
    num_spans = max(1, int(round(num_masked / mean_span)))
    # Spans need distinct sentinels and at least one unmasked token between
    # neighbours.
    num_spans = min(
        num_spans, num_masked, length - num_masked + 1, NUM_SENTINELS
    )
    return num_masked, num_spans


def _random_segmentation(num_items, num_segments, rng):
    """Splits num_items into num_segments positive parts, uniformly"""
    cuts = np.sort(
        rng.choice(np.arange(1, num_items), num_segments - 1, replace=False)
    )
    return np.diff(np.concatenate([[0], cuts, [num_items]]))


def random_span_mask(length, mean_span, mask_ratio, rng):
    """
    Boolean mask of the positions to corrupt. The masked tokens form
    num_spans non-adjacent spans; span lengths are a uniformly random
    segmentation of the masked count, as are the gaps between them (the
    leading and trailing gaps may be empty).

    :param length: sequence length n >= 2
    :param mean_span: mean span length mu
    :param mask_ratio: fraction r of tokens to mask

    """
    if length < 2:
        raise SkipExample(f"cannot corrupt spans of a length-{length} input")
    num_masked, num_spans = span_count(length, mean_span, mask_ratio)
    span_lengths = _random_segmentation(num_masked, num_spans, rng)

    # num_spans + 1 gaps: inner gaps need one token, the rest is spread
    # uniformly (stars and bars) over all gaps.
    free = length - num_masked - (num_spans - 1)
    bars = np.sort(
        rng.choice(free + num_spans, num_spans, replace=False)
    ) - np.arange(num_spans)
    gaps = np.diff(np.concatenate([[0], bars, [free]]))
    gaps[1:-1] += 1

    mask = np.zeros(length, dtype=bool)
    position = 0
    for gap, span in zip(gaps[:-1], span_lengths):
        position += int(gap)
        mask[position : position + int(span)] = True
        position += int(span)
    return mask


def span_corrupt(tokens, mean_span, mask_ratio, rng, domain_tag=""):
    """
    UL2/T5 span corruption. Each masked span is replaced by one sentinel
    (highest sentinel id first) in the corrupted input; the targets list
    every sentinel followed by the tokens it hid. The example is the
    corrupted input followed by the targets, and only the targets are
    supervised.

    :param tokens: list of token ids
    :raises SkipExample: when the sequence is too short for the mask ratio

    """
    tokens = list(tokens)
    if len(tokens) < 2 or mask_ratio * len(tokens) < 1:
        raise SkipExample(
            f"sequence of length {len(tokens)} is too short to mask"
            f" a fraction {mask_ratio}"
        )
    mask = random_span_mask(len(tokens), mean_span, mask_ratio, rng)

    corrupted, targets = [], []
    sentinel = -1
    for position, token in enumerate(tokens):
        if not mask[position]:
            corrupted.append(token)
            continue
        if position == 0 or not mask[position - 1]:
            sentinel += 1
            corrupted.append(tokenizer.sentinel_id(sentinel))
            targets.append(tokenizer.sentinel_id(sentinel))
        targets.append(token)

    return TrainingExample(
        input_ids=corrupted + targets,
        target_ids=[IGNORE_INDEX] * len(corrupted) + targets,
        domain_tag=domain_tag,
        objective_tag=DenoiserSpec(
            "span_corrupt", mean_span, mask_ratio
        ).tag,
    )


def splice_spans(corrupted, targets):
    """
    Inverse of span corruption: puts every sentinel's tokens back in place
    of the sentinel in the corrupted input.

    :param corrupted: corrupted input ids
    :param targets: sentinel-delimited target ids

    """
    spans = {}
    current = None
    for token in targets:
        if tokenizer.is_sentinel(token):
            current = token
            spans[current] = []
        else:
            spans[current].append(token)
    out = []
    for token in corrupted:
        if tokenizer.is_sentinel(token):
            out.extend(spans[token])
        else:
            out.append(token)
    return out


def split_span_example(example):
    """(corrupted input, targets) of a span_corrupt TrainingExample"""
    labels = example.target_ids
    split = next(i for i, label in enumerate(labels) if label != IGNORE_INDEX)
    return example.input_ids[:split], example.input_ids[split:]


def prefix_split(length, mask_ratio):
    """Number of prefix tokens: ceil((1 - r) * n), kept within [1, n - 1]"""
    # Rounding first stops e.g. 0.7 * 10 = 7.000000000000001 becoming 8
    split = math.ceil(round((1 - mask_ratio) * length, 9))
    return _clamp(split, 1, length - 1)


def prefix_lm(tokens, mask_ratio=0.5, rng=None, domain_tag=""):
    """
    PrefixLM: the prefix is context only, the suffix is predicted.
    rng is unused; the split is deterministic.
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        raise SkipExample("prefix_lm needs at least two tokens")
    split = prefix_split(len(tokens), mask_ratio)
    return TrainingExample(
        input_ids=tokens,
        target_ids=[IGNORE_INDEX] * split + tokens[split:],
        domain_tag=domain_tag,
        objective_tag=DenoiserSpec("prefix_lm", None, mask_ratio).tag,
        prefix_length=split,
    )


def causal_lm(tokens, rng=None, domain_tag=""):
    tokens = list(tokens)
    if len(tokens) < 2:
        raise SkipExample("causal_lm needs at least two tokens")
    return TrainingExample(
        input_ids=tokens,
        target_ids=list(tokens),
        domain_tag=domain_tag,
        objective_tag="causal_lm",
    )


def window_length(denoiser, seq_len):
    """
    Longest token window whose example still fits seq_len model positions
    (an example of n ids gives n - 1 positions after the shift).
    """
    budget = seq_len + 1
    if denoiser.kind != "span_corrupt":
        return budget
    length = budget
    while length > 2:
        _, num_spans = span_count(
            length, denoiser.mean_span, denoiser.mask_ratio
        )
        if length + 2 * num_spans <= budget:
            return length
        length -= 1
    return length


def make_example(tokens, denoiser, rng, domain_tag=""):
    if denoiser.kind == "span_corrupt":
        return span_corrupt(
            tokens, denoiser.mean_span, denoiser.mask_ratio, rng, domain_tag
        )
    if denoiser.kind == "prefix_lm":
        return prefix_lm(tokens, denoiser.mask_ratio, rng, domain_tag)
    return causal_lm(tokens, rng, domain_tag)


def draw_domains(mixture, count, rng):
    """Domain tags drawn i.i.d. by sampling ratio"""
    tags = [tag for tag, _ in mixture.domains]
    ratios = np.asarray([ratio for _, ratio in mixture.domains])
    return [tags[i] for i in rng.choice(len(tags), size=count, p=ratios)]


def draw_denoisers(mixture, count, rng):
    """Denoisers drawn i.i.d. by mix weight"""
    weights = np.asarray([d.mix_weight for d in mixture.denoisers])
    picks = rng.choice(len(mixture.denoisers), size=count, p=weights)
    return [mixture.denoisers[i] for i in picks]


def sample_batch(corpora, mixture, step, rng, batch_size, seq_len):
    """
    Draws batch_size training examples for a step: the mixture in force at
    that step picks a domain and a denoiser for every example, then a random
    window of that domain's token stream is turned into an example.
    Sequences too short for their objective are redrawn.

    :param corpora: dict domain_tag -> Corpus
    :param mixture: MixtureConfig
    :param step: training step (selects the switch-point phase)
    :param rng: numpy.random.Generator
    :param seq_len: model positions per example

    """
    phase = mixture.at_step(step)
    for tag, _ in phase.domains:
        if tag not in corpora:
            raise ConfigError(f"no corpus for domain tag {tag!r}")

    batch = []
    for tag, denoiser in zip(
        draw_domains(phase, batch_size, rng),
        draw_denoisers(phase, batch_size, rng),
    ):
        for _ in range(MAX_SAMPLE_ATTEMPTS):
            tokens, doc_tag = corpora[tag].sample_window(
                window_length(denoiser, seq_len), rng
            )
            try:
                batch.append(make_example(tokens, denoiser, rng, doc_tag))
                break
            except SkipExample as skip:
                log.debug("redrawing example: %s", skip)
        else:
            raise ConfigError(
                f"corpus {tag!r} yields no sequence long enough for"
                f" {denoiser.tag}"
            )
    return batch


@dataclass
class Batch:
    inputs: np.ndarray  # B x T token ids, PAD_ID padding at the end
    targets: np.ndarray  # B x T next-token ids, IGNORE_INDEX where unused
    lengths: np.ndarray  # real (non-padding) positions per row
    prefix_lengths: np.ndarray
    domains: list
    objectives: list

    @property
    def num_supervised(self):
        return int((self.targets != IGNORE_INDEX).sum())


def collate(examples, seq_len=None):
    """
    Shifts and pads examples into model arrays: inputs are ids[:-1], targets
    are labels[1:].

    :param examples: list of TrainingExample
    :param seq_len: pad to this many positions (longest example otherwise)

    """
    if not examples:
        raise ConfigError("cannot collate an empty batch")
    lengths = np.asarray([len(e.input_ids) - 1 for e in examples])
    width = int(lengths.max()) if seq_len is None else seq_len
    if lengths.max() > width:
        raise ConfigError(
            f"example of {lengths.max()} positions exceeds seq_len={width}"
        )
    inputs = np.full((len(examples), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(examples), width), IGNORE_INDEX, dtype=np.int64)
    for row, example in enumerate(examples):
        count = lengths[row]
        inputs[row, :count] = example.input_ids[:-1]
        targets[row, :count] = example.target_ids[1:]
    return Batch(
        inputs=inputs,
        targets=targets,
        lengths=lengths,
        prefix_lengths=np.asarray([e.prefix_length for e in examples]),
        domains=[e.domain_tag for e in examples],
        objectives=[e.objective_tag for e in examples],
    )
