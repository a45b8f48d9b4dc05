"""
Defines RoutingTrace, the record of routing decisions that every routing
analysis reads, and capture_trace(), which records one by running a trained
model over a corpus.

One row is one token at one MoE layer: which sequence and position it came
from, its token id and domain tag, the experts it chose (best first) and
whether each choice survived the capacity limit. On disk a trace is a CSV
file with the columns

    seq_id,position,token_id,domain,layer,rank0_expert,rank0_kept,
    rank1_expert,rank1_kept

plus rank<j>_expert/rank<j>_kept columns for every further choice when
K > 2 (and only rank0 columns when K = 1). Kept flags are written as 0/1.
"""

import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
from tqdm import tqdm

from .config import DEFAULT_TRACE_MOE_ORDINAL, EOS_ID
from .errors import ConfigError, ContractError, DecodeError
from .tokenizer import tokenizer

log = logging.getLogger(__name__)

BASE_COLUMNS = ["seq_id", "position", "token_id", "domain", "layer"]


class TraceRow(NamedTuple):
    seq_id: int
    position: int
    token_id: int
    domain: str
    layer: int
    experts: tuple  # ranked expert ids
    kept: tuple  # one bool per ranked choice


def trace_columns(top_k):
    columns = list(BASE_COLUMNS)
    for rank in range(top_k):
        columns += [f"rank{rank}_expert", f"rank{rank}_kept"]
    return columns


class RoutingTrace:
    """
    Append-only list of TraceRow with a fixed number K of ranked choices.
    num_experts is the width of every ratio vector computed from the trace;
    when unknown it is taken to be one more than the largest expert id seen.
    """

    def __init__(self, top_k, num_experts=None, rows=None):
        if top_k < 1:
            raise ContractError("a trace needs at least one choice per row")
        self.top_k = top_k
        self._num_experts = num_experts
        self.rows = []
        for row in rows or []:
            self.append(row)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def num_experts(self):
        if self._num_experts is not None:
            return self._num_experts
        if not self.rows:
            return 0
        return 1 + max(max(row.experts) for row in self.rows)

    def append(self, row):
        if len(row.experts) != self.top_k or len(row.kept) != self.top_k:
            raise ContractError(
                f"trace rows need {self.top_k} ranked choices, got"
                f" {len(row.experts)}"
            )
        if min(row.experts) < 0 or (
            self._num_experts is not None
            and max(row.experts) >= self._num_experts
        ):
            raise ContractError(f"expert id out of range in {row}")
        self.rows.append(row)

    def layers(self):
        return sorted({row.layer for row in self.rows})

    def for_layer(self, layer):
        return [row for row in self.rows if row.layer == layer]

    def default_layer(self):
        """
        Layer analyses use when none is named: the only layer of a
        single-layer trace, otherwise the third layer present (the last one
        when there are fewer than three).
        """
        layers = self.layers()
        if not layers:
            raise ContractError("the trace is empty")
        return layers[min(DEFAULT_TRACE_MOE_ORDINAL, len(layers)) - 1]

    def check_positions(self):
        """Positions must increase strictly within a (sequence, layer)"""
        last = {}
        for row in self.rows:
            key = (row.seq_id, row.layer)
            if key in last and row.position <= last[key]:
                raise DecodeError(
                    f"positions of sequence {row.seq_id} are not increasing"
                )
            last[key] = row.position

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(trace_columns(self.top_k))
            for row in self.rows:
                record = [
                    row.seq_id,
                    row.position,
                    row.token_id,
                    row.domain,
                    row.layer,
                ]
                for expert, kept in zip(row.experts, row.kept):
                    record += [expert, int(kept)]
                writer.writerow(record)

    @classmethod
    def read_csv(cls, path, num_experts=None):
        """
        :raises DecodeError: on a malformed header or row

        """
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
                raise DecodeError(f"{path}: not a routing trace file")
            top_k = (len(header) - len(BASE_COLUMNS)) // 2
            if top_k < 1 or header != trace_columns(top_k):
                raise DecodeError(f"{path}: unexpected trace columns")
            trace = cls(top_k, num_experts)
            for line_no, record in enumerate(reader, start=2):
                if len(record) != len(header):
                    raise DecodeError(f"{path}:{line_no}: wrong column count")
                try:
                    choices = [int(value) for value in record[5:]]
                    row = TraceRow(
                        seq_id=int(record[0]),
                        position=int(record[1]),
                        token_id=int(record[2]),
                        domain=record[3],
                        layer=int(record[4]),
                        experts=tuple(choices[0::2]),
                        kept=tuple(bool(flag) for flag in choices[1::2]),
                    )
                    trace.append(row)
                except (ValueError, ContractError) as err:
                    raise DecodeError(f"{path}:{line_no}: {err}") from err
        trace.check_positions()
        if num_experts is None and len(trace):
            log.warning(
                "%s: number of experts not given, assuming %d from the"
                " largest expert id; ratio vectors are shorter if the last"
                " experts were never chosen (pass --num-experts)",
                path,
                trace.num_experts,
            )
        log.debug("read %d trace rows from %s", len(trace), path)
        return trace


def resolve_trace_layer(model_config, layer=None):
    """
    Validates a requested trace layer, or picks the default: the third MoE
    layer, or the last MoE layer when the model has fewer than three.
    """
    moe_layers = model_config.moe_layer_indices()
    if not moe_layers:
        raise ConfigError("the model has no MoE layers to trace")
    if layer is None:
        return moe_layers[min(DEFAULT_TRACE_MOE_ORDINAL, len(moe_layers)) - 1]
    if layer not in moe_layers:
        raise ConfigError(
            f"layer {layer} is not an MoE layer; valid layers are"
            f" {', '.join(str(i) for i in moe_layers)}"
        )
    return layer


def split_sequences(corpus, seq_len):
    """
    Cuts every document (plus its eos) into consecutive sequences of at most
    seq_len tokens.

    :returns: list of (token id list, domain tag)

    """
    sequences = []
    for doc, tag in zip(corpus.documents, corpus.doc_tags):
        ids = tokenizer.tokenize(doc) + [EOS_ID]
        for start in range(0, len(ids), seq_len):
            sequences.append((ids[start : start + seq_len], tag))
    return sequences


def _trace_batch(model, layer, batch):
    """Routing rows for one batch of (seq_id, ids, domain) at one layer"""
    seq_len = max(len(ids) for _, ids, _ in batch)
    inputs = np.zeros((len(batch), seq_len), dtype=np.int64)
    for row, (_, ids, _) in enumerate(batch):
        inputs[row, : len(ids)] = ids
    lengths = np.asarray([len(ids) for _, ids, _ in batch])
    out = model.forward(inputs, lengths=lengths)
    routing = next(r for r in out.routing if r.layer == layer)

    rows = []
    # token_rows are b-major, i.e. already ordered by sequence then position
    for flat, experts, kept in zip(
        routing.token_rows, routing.topk_idx, routing.kept
    ):
        b, t = divmod(int(flat), seq_len)
        seq_id, ids, domain = batch[b]
        rows.append(
            TraceRow(
                seq_id=seq_id,
                position=t,
                token_id=int(ids[t]),
                domain=domain,
                layer=layer,
                experts=tuple(int(e) for e in experts),
                kept=tuple(bool(k) for k in kept),
            )
        )
    return rows


def capture_trace(
    model,
    corpus,
    layer=None,
    seq_len=None,
    batch_size=8,
    threads=1,
    progress=True,
):
    """
    Runs the model over a corpus and records the routing of one MoE layer.
    Sequences are routed batch_size at a time (one routing group per batch,
    so capacity and drops behave as in training). Rows come out ordered by
    sequence then position whatever the number of threads.

    :param model: MoETransformer
    :param corpus: Corpus
    :param layer: MoE layer index; defaults as in resolve_trace_layer
    :param seq_len: tokens per sequence (model.config.max_seq_len by default)
    :param threads: worker threads running batches concurrently
    :returns: RoutingTrace with one row per token processed

    """
    layer = resolve_trace_layer(model.config, layer)
    seq_len = seq_len or model.config.max_seq_len
    if seq_len > model.config.max_seq_len:
        raise ConfigError(
            f"seq_len={seq_len} exceeds max_seq_len"
            f" {model.config.max_seq_len}"
        )
    sequences = split_sequences(corpus, seq_len)
    numbered = [
        (seq_id, ids, tag) for seq_id, (ids, tag) in enumerate(sequences)
    ]
    batches = [
        numbered[start : start + batch_size]
        for start in range(0, len(numbered), batch_size)
    ]
    log.info(
        "tracing layer %d over %d sequences with %d thread(s)",
        layer,
        len(numbered),
        threads,
    )

    router = model.config.router
    trace = RoutingTrace(router.top_k, router.num_experts)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        # map() yields results in submission order
        results = pool.map(lambda b: _trace_batch(model, layer, b), batches)
        for rows in tqdm(
            results,
            total=len(batches),
            desc="tracing",
            file=sys.stderr,
            disable=not progress,
        ):
            for row in rows:
                trace.append(row)
    return trace
