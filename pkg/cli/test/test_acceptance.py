"""
Tests the multi-seed check of the routing properties: per-seed run
configurations, the pass/fail verdict and a short end-to-end run. The full
toy-configuration run takes hours and only runs when MOESCOPE_SLOW_TESTS is
set.

"""
import json
import os
import tempfile
import unittest
from pathlib import Path

from src.moescope.acceptance import (
    SeedResult,
    mixed_corpus,
    run_acceptance,
    seed_config,
    write_corpora,
)
from src.moescope.corpus import read_corpus
from src.moescope.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def load_config(name):
    with open(CONFIG_DIR / name, encoding="utf-8") as handle:
        return json.load(handle)


def corpus_paths():
    return {
        domain: f"/data/{domain}.txt"
        for domain in ("text", "code", "multilingual", "instruct")
    }


class TestSeedConfig(unittest.TestCase):
    """
    Check the per-seed copies of a run configuration
    """

    def setUp(self):
        self.values = load_config("toy.json")

    def test_configured_schedule(self):
        values = seed_config(self.values, 2, corpus_paths())
        self.assertEqual(values["train"]["seed"], 2)
        self.assertEqual(values["train"]["steps"], 5000)
        self.assertEqual(values["train"]["warmup_steps"], 500)
        self.assertEqual(values["train"]["checkpoint_every"], 2500)
        self.assertEqual(values["router"]["capacity_factor"], 1.0)
        self.assertEqual(values["corpora"]["code"], "/data/code.txt")
        self.assertEqual(
            values["eval_corpora"], {"instruct": "/data/instruct.txt"}
        )
        # the parsed configuration is left alone
        self.assertEqual(self.values["train"]["seed"], 0)
        self.assertEqual(self.values["router"]["capacity_factor"], 1.25)

    def test_rescaled_schedule(self):
        values = seed_config(self.values, 1, corpus_paths(), steps=100)
        train = values["train"]
        self.assertEqual(train["steps"], 100)
        self.assertEqual(train["warmup_steps"], 10)
        self.assertEqual(train["eval_every"], 5)
        self.assertEqual(train["checkpoint_every"], 50)
        self.assertEqual(values["mixture"]["switch_points"][0]["step"], 80)

    def test_smaller_capacity_factor_is_kept(self):
        self.values["router"]["capacity_factor"] = 0.5
        values = seed_config(self.values, 0, corpus_paths())
        self.assertEqual(values["router"]["capacity_factor"], 0.5)

    def test_bad_steps(self):
        for steps in (2, 7):
            with self.assertRaises(ConfigError):
                seed_config(self.values, 0, corpus_paths(), steps=steps)


class TestVerdict(unittest.TestCase):
    """
    Check which measurements count as failures
    """

    def test_all_properties_hold(self):
        result = SeedResult(
            seed=0,
            num_experts=8,
            token_std=0.2,
            position_std=0.05,
            overlap=0.375,
            ood_thirds=(0.1, 0.2, 0.1),
            in_domain_drop=0.05,
            ood_drop=0.2,
        )
        self.assertEqual(result.failures(), [])

    def test_every_property_fails(self):
        result = SeedResult(
            seed=1,
            num_experts=8,
            token_std=0.05,
            position_std=0.05,
            overlap=0.25,
            ood_thirds=(0.3, 0.2, 0.1),
            in_domain_drop=0.2,
            ood_drop=0.2,
        )
        failures = result.failures()
        self.assertEqual(len(failures), 4)
        self.assertIn("0.375", failures[1])

    def test_missing_measurements_fail(self):
        result = SeedResult(seed=2, num_experts=4, errors=["overlap: none"])
        self.assertEqual(result.failures(), ["overlap: none"])


class TestRun(unittest.TestCase):
    """
    Check corpora, mixing and a short run of the smoke configuration
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.work_dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_corpora_and_mixing(self):
        paths = write_corpora(self.work_dir / "data", scale=0.005)
        self.assertEqual(len(read_corpus(paths["text"])), 10)
        self.assertEqual(len(read_corpus(paths["instruct"])), 2)
        mixed = mixed_corpus(paths, 3)
        self.assertEqual(len(mixed), 9)
        self.assertEqual(mixed.doc_tags[:3], ["text"] * 3)
        self.assertTrue(
            all(tag.startswith("multilingual:") for tag in mixed.doc_tags[6:])
        )
        # existing files are kept
        before = Path(paths["code"]).read_bytes()
        write_corpora(self.work_dir / "data", scale=0.01)
        self.assertEqual(Path(paths["code"]).read_bytes(), before)

    def test_short_run(self):
        results = run_acceptance(
            CONFIG_DIR / "smoke.json",
            self.work_dir,
            seeds=(0,),
            steps=4,
            corpus_scale=0.01,
            docs_per_domain=5,
            progress=False,
        )
        self.assertEqual(len(results), 1)
        result = results[0]
        self.assertEqual(result.seed, 0)
        self.assertEqual(result.num_experts, 4)
        for step in (2, 4):
            self.assertTrue(
                (self.work_dir / "seed-0" / f"step-{step:06d}.omoe").exists()
            )
        self.assertTrue(0.0 <= result.in_domain_drop <= 1.0)
        self.assertTrue(0.0 <= result.ood_drop <= 1.0)
        self.assertIsInstance(result.failures(), list)


@unittest.skipUnless(
    os.environ.get("MOESCOPE_SLOW_TESTS"), "set MOESCOPE_SLOW_TESTS to run"
)
class TestToyRouting(unittest.TestCase):
    """
    Train the toy configuration for three seeds and check every property
    """

    def test_three_seeds(self):
        with tempfile.TemporaryDirectory() as work_dir:
            results = run_acceptance(
                CONFIG_DIR / "toy.json", work_dir, progress=False
            )
        for result in results:
            self.assertEqual(result.failures(), [], f"seed {result.seed}")


if __name__ == "__main__":
    unittest.main()
