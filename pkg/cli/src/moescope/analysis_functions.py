"""
This file is responsible for managing all the analysis reports that moescope
supports. If you want to develop and incorporate your own routing analysis
into moescope, this is the file to edit!

The way any report works in moescope is as follows. `moescope analyze` will
call the report function like this:

report_function(traces, configs)

where traces is the list of RoutingTrace objects read from the --trace
arguments (in the order given), and configs is a dictionary holding the
output path under "out" together with the analysis options of the command
line (group_by, layer, expert, n, bucket_size, min_support,
include_dropped, all_choices, svg, corpora, trace_names). Options the user
did not give are None or False; the report picks its own defaults.

Upon getting the above input, a report is free to do with the traces as it
pleases, but it should save its results under configs["out"] (and next to
it, for charts) and return the list of paths it wrote. A report that needs
a different number of traces should raise ConfigError.

If a report function follows the contract above, the below lines
should be edited to incorporate it into moescope!
"""

# First, import the function from wherever it is defined:
from .reports import (
    drop_curve_report,
    overlap_report,
    ratios_report,
    std_report,
    token_stats_report,
    top_tokens_report,
)

# Give your report a short name:
analysis_methods_supported_short = [
    "ratios",
    "std",
    "top-tokens",
    "drop-curve",
    "overlap",
    "token-stats",
]

# Give your report a long name:
analysis_methods_supported_long = [
    "Expert assignment ratios per group",
    "Routing std per group",
    "Top tokens per expert",
    "Drop curve of tokens by position",
    "Preferred-expert overlap between two traces",
    "Corpus token stats",
]

# Map your short name to the variable imported above that corresponds to your
# function!
analysis_method_functions = {
    "ratios": ratios_report,
    "std": std_report,
    "top-tokens": top_tokens_report,
    "drop-curve": drop_curve_report,
    "overlap": overlap_report,
    "token-stats": token_stats_report,
}

# Number of --trace arguments each report reads
analysis_method_trace_counts = {
    "ratios": 1,
    "std": 1,
    "top-tokens": 1,
    "drop-curve": 1,
    "overlap": 2,
    "token-stats": 0,
}
