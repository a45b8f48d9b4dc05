"""
This module is dedicated to the analysis reports: each report function reads
routing traces (or corpora), runs one routing analysis and saves the result
as a CSV file, plus an SVG chart when asked to.

Every report function is called as

    report_function(traces, configs)

where traces is a list of RoutingTrace and configs is a dictionary holding
"out" (the CSV path to write) and whichever analysis options the report
uses. It returns the list of paths it wrote.
"""

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .colors import blue, domain_color, to_mpl  # noqa: E402
from .config import (  # noqa: E402
    DEFAULT_DROP_BUCKET_SIZE,
    DEFAULT_OVERLAP_MIN_SUPPORT,
    DEFAULT_STD_MIN_SUPPORT,
    DEFAULT_TOP_TOKENS,
)
from .errors import ConfigError  # noqa: E402
from .routing_analysis import (  # noqa: E402
    corpus_token_stats,
    drop_curve,
    expert_ratios,
    mean_routing_std,
    routing_overlap,
    routing_std,
    top_tokens,
)
from .tokenizer import tokenizer  # noqa: E402

log = logging.getLogger(__name__)

# Above this many groups a ratio chart is drawn as a heat map
MAX_BAR_GROUPS = 12


def _expect_traces(traces, count, report):
    if len(traces) != count:
        raise ConfigError(
            f"the {report} report needs exactly {count} trace(s),"
            f" got {len(traces)}"
        )


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(header)
        writer.writerows(rows)
    log.info("A file was saved at %s", path)
    return str(path)


def _svg_path(out):
    return Path(out).with_suffix(".svg")


def _save_figure(fig, out):
    path = _svg_path(out)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    log.info("A chart was saved at %s", path)
    return str(path)


def group_label(group_by, key):
    if group_by == "token_id":
        return tokenizer.decode_token(key)
    return str(key)


def ratios_report(traces, configs):
    """
    Expert assignment ratios per group; CSV columns group, label, support,
    expert_0 .. expert_<E-1>.
    """
    _expect_traces(traces, 1, "ratios")
    group_by = configs.get("group_by") or "domain"
    report = expert_ratios(
        traces[0],
        group_by=group_by,
        layer=configs.get("layer"),
        include_dropped=configs.get("include_dropped", False),
        all_choices=configs.get("all_choices", False),
    )
    header = ["group", "label", "support"] + [
        f"expert_{i}" for i in range(report.num_experts)
    ]
    rows = [
        [key, group_label(group_by, key), report.support[key]]
        + [float(value) for value in ratio]
        for key, ratio in report.ratios.items()
    ]
    paths = [_write_rows(configs["out"], header, rows)]
    if configs.get("svg") and rows:
        paths.append(_ratios_chart(report, configs["out"]))
    return paths


def _ratios_chart(report, out):
    keys = list(report.ratios.keys())
    experts = range(report.num_experts)
    fig, ax = plt.subplots(figsize=(max(6, report.num_experts * 0.5), 4))
    if len(keys) <= MAX_BAR_GROUPS:
        width = 0.8 / len(keys)
        for index, key in enumerate(keys):
            ax.bar(
                [e + index * width for e in experts],
                report.ratios[key],
                width=width,
                label=group_label(report.group_by, key),
                color=domain_color(key, index)
                if report.group_by in ("domain", "language")
                else None,
            )
        ax.legend(fontsize="small")
        ax.set_ylabel("ratio")
    else:
        image = ax.imshow(
            [report.ratios[key] for key in keys],
            aspect="auto",
            interpolation="nearest",
        )
        fig.colorbar(image, ax=ax, label="ratio")
        ax.set_ylabel(report.group_by)
    ax.set_xlabel("expert")
    ax.set_title(f"Expert ratios by {report.group_by} (layer {report.layer})")
    return _save_figure(fig, out)


def std_report(traces, configs):
    """
    Standard deviation of the ratio vector of every sufficiently supported
    group; CSV columns group, label, support, std.
    """
    _expect_traces(traces, 1, "std")
    group_by = configs.get("group_by") or "token_id"
    min_support = configs.get("min_support") or DEFAULT_STD_MIN_SUPPORT
    report = expert_ratios(
        traces[0],
        group_by=group_by,
        layer=configs.get("layer"),
        include_dropped=configs.get("include_dropped", False),
        all_choices=configs.get("all_choices", False),
    )
    stds = routing_std(report, min_support=min_support)
    rows = [
        [key, group_label(group_by, key), report.support[key], value]
        for key, value in stds.items()
    ]
    if stds:
        log.info(
            "mean routing std over %d %s groups: %.6f",
            len(stds),
            group_by,
            mean_routing_std(stds),
        )
    paths = [
        _write_rows(
            configs["out"], ["group", "label", "support", "std"], rows
        )
    ]
    if configs.get("svg") and rows:
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar(range(len(rows)), [row[3] for row in rows], color=to_mpl(blue))
        ax.set_xlabel(group_by)
        ax.set_ylabel("routing std")
        ax.set_title(f"Routing std by {group_by} (layer {report.layer})")
        paths.append(_save_figure(fig, configs["out"]))
    return paths


def top_tokens_report(traces, configs):
    """
    Most frequent tokens of one expert, or of every expert when none is
    named; CSV columns expert, rank, token_id, token, count.
    """
    _expect_traces(traces, 1, "top-tokens")
    trace = traces[0]
    n = configs.get("n") or DEFAULT_TOP_TOKENS
    expert = configs.get("expert")
    if expert is not None and not 0 <= expert < trace.num_experts:
        raise ConfigError(
            f"expert {expert} is out of range for {trace.num_experts}"
            " experts"
        )
    experts = [expert] if expert is not None else range(trace.num_experts)
    rows = []
    for expert_id in experts:
        ranked = top_tokens(
            trace,
            expert_id,
            n=n,
            layer=configs.get("layer"),
            include_dropped=configs.get("include_dropped", False),
        )
        for rank, (token, count) in enumerate(ranked):
            rows.append(
                [expert_id, rank, token, tokenizer.decode_token(token), count]
            )
    return [
        _write_rows(
            configs["out"],
            ["expert", "rank", "token_id", "token", "count"],
            rows,
        )
    ]


def drop_curve_report(traces, configs):
    """
    Dropped share of assignments per position bucket and dataset (the
    domain column holds the tag without its language); CSV columns domain,
    bucket_start, dropped, total, ratio.
    """
    _expect_traces(traces, 1, "drop-curve")
    bucket_size = configs.get("bucket_size") or DEFAULT_DROP_BUCKET_SIZE
    curves = drop_curve(
        traces[0], bucket_size=bucket_size, layer=configs.get("layer")
    )
    rows = []
    for domain, curve in curves.items():
        for start, dropped, total, ratio in zip(
            curve.bucket_starts, curve.dropped, curve.total, curve.ratios
        ):
            rows.append([domain, start, dropped, total, ratio])
    paths = [
        _write_rows(
            configs["out"],
            ["domain", "bucket_start", "dropped", "total", "ratio"],
            rows,
        )
    ]
    if configs.get("svg") and rows:
        fig, ax = plt.subplots(figsize=(8, 4))
        for index, (domain, curve) in enumerate(curves.items()):
            ax.plot(
                curve.bucket_starts,
                curve.ratios,
                marker="o",
                label=domain,
                color=domain_color(domain, index),
            )
        ax.set_xlabel("position")
        ax.set_ylabel("drop ratio")
        ax.set_ylim(bottom=0)
        ax.legend(fontsize="small")
        ax.set_title("Dropped tokens by position")
        paths.append(_save_figure(fig, configs["out"]))
    return paths


def overlap_report(traces, configs):
    """Agreement of preferred experts between two traces"""
    _expect_traces(traces, 2, "overlap")
    min_support = configs.get("min_support") or DEFAULT_OVERLAP_MIN_SUPPORT
    overlap = routing_overlap(
        traces[0],
        traces[1],
        min_support=min_support,
        layer_a=configs.get("layer"),
        layer_b=configs.get("layer"),
    )
    names = configs.get("trace_names") or ["a", "b"]
    return [
        _write_rows(
            configs["out"],
            ["trace_a", "trace_b", "min_support", "overlap"],
            [[names[0], names[1], min_support, overlap]],
        )
    ]


def token_stats_report(traces, configs):
    """
    Token counts of corpora; CSV columns corpus, domain, num_tokens,
    distinct_tokens.
    """
    _expect_traces(traces, 0, "token-stats")
    corpora = configs.get("corpora") or []
    if not corpora:
        raise ConfigError("the token-stats report needs at least one corpus")
    rows = []
    for name, corpus in corpora:
        total, distinct = corpus_token_stats(corpus)
        rows.append([name, corpus.domain, total, distinct])
    return [
        _write_rows(
            configs["out"],
            ["corpus", "domain", "num_tokens", "distinct_tokens"],
            rows,
        )
    ]
