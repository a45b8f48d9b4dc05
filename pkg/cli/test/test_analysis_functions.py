"""
Tests the analysis report registry and the report functions.

"""
import csv
import inspect
import os
import tempfile
import unittest

from src.moescope.analysis_functions import (
    analysis_method_functions,
    analysis_method_trace_counts,
    analysis_methods_supported_long,
    analysis_methods_supported_short,
)
from src.moescope.corpus import Corpus
from src.moescope.errors import ConfigError
from src.moescope.reports import (
    drop_curve_report,
    group_label,
    overlap_report,
    ratios_report,
    std_report,
    token_stats_report,
    top_tokens_report,
)
from src.moescope.routing_analysis import expert_ratios
from src.moescope.routing_trace import RoutingTrace, TraceRow


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


def sample_trace():
    """Two domains; text prefers expert 0, code prefers expert 2"""
    rows = []
    for seq_id, (domain, expert) in enumerate([("text", 0), ("code", 2)]):
        for position in range(6):
            token = 131 + position % 3
            kept = position < 4
            rows.append(
                TraceRow(
                    seq_id,
                    position,
                    token,
                    domain,
                    1,
                    (expert, (expert + 1) % 4),
                    (kept, kept),
                )
            )
    return RoutingTrace(2, 4, rows)


class TestAnalysisMethods(unittest.TestCase):
    """
    Tests to ensure that the analysis method related variables are properly
    set up.

    """

    def test_equal_number_of_methods(self):
        """
        Checks that the number of report functions are equal across
        variables describing them.

        """
        self.assertEqual(
            len(analysis_methods_supported_short),
            len(analysis_methods_supported_long),
        )
        self.assertEqual(
            len(analysis_method_functions),
            len(analysis_methods_supported_short),
        )
        self.assertEqual(
            set(analysis_method_trace_counts),
            set(analysis_methods_supported_short),
        )

    def test_appropriate_name(self):
        """
        Checks that the reports are given appropriate 'short' names.
        """
        for short_name, long_name in zip(
            analysis_methods_supported_short, analysis_methods_supported_long
        ):
            for token in short_name.split("-"):
                self.assertIn(token.lower(), long_name.lower())

    def test_method_dict_keys(self):
        for method in analysis_methods_supported_short:
            self.assertIn(method, analysis_method_functions)

    def test_appropriate_method_type(self):
        """
        Checks that every report function takes (traces, configs)
        """
        for method in analysis_method_functions.values():
            self.assertEqual(
                list(inspect.signature(method).parameters),
                ["traces", "configs"],
            )


class TestReports(unittest.TestCase):
    """
    Check the files written by the report functions
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.tmp.name, "reports", "out.csv")
        self.trace = sample_trace()

    def tearDown(self):
        self.tmp.cleanup()

    def test_ratios_match_the_library(self):
        paths = ratios_report([self.trace], {"out": self.out})
        self.assertEqual(paths, [self.out])
        rows = read_rows(self.out)
        self.assertEqual(
            rows[0],
            ["group", "label", "support"]
            + [f"expert_{i}" for i in range(4)],
        )
        report = expert_ratios(self.trace)
        for row, (key, ratio) in zip(rows[1:], report.ratios.items()):
            self.assertEqual(row[0], key)
            self.assertEqual(int(row[2]), report.support[key])
            self.assertEqual([float(v) for v in row[3:]], list(ratio))
        self.assertEqual(rows[1][:3], ["code", "code", "4"])

    def test_ratios_chart(self):
        paths = ratios_report(
            [self.trace], {"out": self.out, "svg": True, "group_by": "domain"}
        )
        self.assertEqual(len(paths), 2)
        self.assertTrue(paths[1].endswith("out.svg"))
        with open(paths[1], encoding="utf-8") as handle:
            self.assertIn("<svg", handle.read())

    def test_ratios_by_token_use_readable_labels(self):
        ratios_report(
            [self.trace],
            {"out": self.out, "group_by": "token_id", "include_dropped": True},
        )
        rows = read_rows(self.out)
        self.assertEqual([row[1] for row in rows[1:]], ["a", "b", "c"])
        self.assertEqual(group_label("token_id", 44), "\\n")

    def test_std(self):
        std_report(
            [self.trace],
            {"out": self.out, "min_support": 2, "svg": True},
        )
        rows = read_rows(self.out)
        self.assertEqual(rows[0], ["group", "label", "support", "std"])
        # every token is split evenly between experts 0 and 2
        self.assertEqual([row[2] for row in rows[1:]], ["4", "2", "2"])
        self.assertAlmostEqual(float(rows[1][3]), 0.25)
        self.assertTrue(os.path.exists(self.out[:-4] + ".svg"))

    def test_top_tokens(self):
        top_tokens_report([self.trace], {"out": self.out, "expert": 1})
        rows = read_rows(self.out)
        self.assertEqual(
            rows[0], ["expert", "rank", "token_id", "token", "count"]
        )
        self.assertEqual(rows[1], ["1", "0", "131", "a", "2"])
        top_tokens_report([self.trace], {"out": self.out, "n": 1})
        experts = [row[0] for row in read_rows(self.out)[1:]]
        self.assertEqual(experts, list("0123"))
        with self.assertRaises(ConfigError):
            top_tokens_report([self.trace], {"out": self.out, "expert": 4})

    def test_drop_curve(self):
        paths = drop_curve_report(
            [self.trace], {"out": self.out, "bucket_size": 2, "svg": True}
        )
        self.assertEqual(len(paths), 2)
        rows = read_rows(self.out)
        self.assertEqual(
            rows[0], ["domain", "bucket_start", "dropped", "total", "ratio"]
        )
        text = [row for row in rows[1:] if row[0] == "text"]
        self.assertEqual([row[1] for row in text], ["0", "2", "4"])
        self.assertEqual([float(row[4]) for row in text], [0.0, 0.0, 1.0])

    def test_overlap(self):
        overlap_report(
            [self.trace, self.trace],
            {"out": self.out, "min_support": 2, "trace_names": ["x", "y"]},
        )
        self.assertEqual(read_rows(self.out)[1], ["x", "y", "2", "1.0"])

    def test_wrong_number_of_traces(self):
        with self.assertRaises(ConfigError):
            ratios_report([], {"out": self.out})
        with self.assertRaises(ConfigError):
            overlap_report([self.trace], {"out": self.out})
        with self.assertRaises(ConfigError):
            token_stats_report([self.trace], {"out": self.out})

    def test_token_stats(self):
        corpora = [("a.txt", Corpus("text", ["aaaa", "ab"]))]
        token_stats_report([], {"out": self.out, "corpora": corpora})
        self.assertEqual(read_rows(self.out)[1], ["a.txt", "text", "6", "2"])
        with self.assertRaises(ConfigError):
            token_stats_report([], {"out": self.out})


if __name__ == "__main__":
    unittest.main()
