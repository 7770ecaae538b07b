"""
Tests for the command-line interface.
"""
import io
import json
import os
import sys
import tempfile
import unittest
from unittest.mock import Mock, patch

# Get the project root directory
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# Add the project root to the Python path
sys.path.insert(0, project_root)

from src.cli import EXIT_DATA, EXIT_OK, EXIT_TRAINING, EXIT_USAGE, main
from src.train_eval import TrainingDivergedError
from tests.kg_fixtures import ENTITY_RECORDS, TRIPLE_RECORDS, write_jsonl


def run_cli(*argv):
    """Run main() and capture (exit code, stdout, stderr)."""
    stdout, stderr = io.StringIO(), io.StringIO()
    with patch("sys.stdout", stdout), patch("sys.stderr", stderr):
        code = main(list(argv))
    return code, stdout.getvalue(), stderr.getvalue()


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.entities = self.path("entities.jsonl")
        self.triples = self.path("triples.jsonl")
        write_jsonl(self.entities, ENTITY_RECORDS)
        write_jsonl(self.triples, TRIPLE_RECORDS)
        self.kg_args = ["--entities", self.entities, "--triples", self.triples]
        self.no_ntd = self.path("no_ntd.joblib")

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)


class TestUsage(CliTestCase):
    """Argument handling and exit codes."""

    def test_missing_command(self):
        """No subcommand is a usage error."""
        code, _, stderr = run_cli()
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("error:", stderr)

    def test_unknown_flag(self):
        """Unknown flags are usage errors, not argparse exits."""
        self.assertEqual(run_cli("anchor", "--text", "x", "--colour", "red")[0], EXIT_USAGE)

    def test_threshold_out_of_range(self):
        """--threshold outside [0, 1] is rejected."""
        code, _, _ = run_cli("anchor", *self.kg_args, "--text", "friend", "--threshold", "1.5")
        self.assertEqual(code, EXIT_USAGE)

    def test_invalid_config(self):
        """An invalid run config exits with the usage code and lists the problems."""
        config_path = self.path("bad.json")
        with open(config_path, "w") as f:
            json.dump({"epochs": 0, "architecture": "bert"}, f)
        code, _, stderr = run_cli("--config", config_path, "train", *self.kg_args, "--data", self.path("m.tsv"))
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("epochs", stderr)
        self.assertIn("architecture", stderr)

    def test_training_failure_exit_code(self):
        """A diverged run maps to the training exit code."""
        failing = Mock(side_effect=TrainingDivergedError("loss became nan"))
        with patch.dict("src.cli.COMMANDS", {"train-ntd": failing}):
            code, _, stderr = run_cli("train-ntd", "--data", self.path("d.tsv"))
        self.assertEqual(code, EXIT_TRAINING)
        self.assertIn("nan", stderr)


class TestKgAndAnchorCommands(CliTestCase):
    """build-kg and anchor."""

    def test_build_kg_stats(self):
        """Stats JSON counts entities, triples and relations."""
        code, stdout, _ = run_cli("build-kg", *self.kg_args)
        self.assertEqual(code, EXIT_OK)
        stats = json.loads(stdout)
        self.assertEqual(stats["entities"], len(ENTITY_RECORDS))
        self.assertEqual(stats["triples"], len(TRIPLE_RECORDS))
        self.assertEqual(stats["normalized_entities"], len(ENTITY_RECORDS) - 2)
        self.assertEqual(stats["relations"]["has_operation"], 6)

    def test_build_kg_bootstrap_and_output(self):
        """Bootstrapped triples are added and the graph written out."""
        corpus = self.path("corpus.txt")
        with open(corpus, "w") as f:
            f.write("you can recover the chat log\n")
        out_dir = self.path("out")
        code, stdout, _ = run_cli("build-kg", *self.kg_args, "--corpus", corpus, "--output-dir", out_dir)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(out_dir, "triples.jsonl")))
        self.assertIn("bootstrapped", json.loads(stdout))

    def test_component_cycle_is_a_data_error(self):
        """A cyclic graph exits with the data code and names the line."""
        write_jsonl(self.triples, [{"head": 10, "relation": "component_of", "tail": 1},
                                   {"head": 1, "relation": "component_of", "tail": 10}])
        code, _, stderr = run_cli("build-kg", *self.kg_args)
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("cycle", stderr)

    def test_anchor_empty_text(self):
        """An empty line anchors to empty lists."""
        code, stdout, _ = run_cli("anchor", *self.kg_args, "--ntd", self.no_ntd, "--text", "")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(stdout.strip(), '{"entities": [], "triples": []}')

    def test_anchor_file_with_explain_and_stats(self):
        """One JSON line per input line, or a coverage summary with --stats."""
        texts = self.path("texts.txt")
        with open(texts, "w") as f:
            f.write("how to recover WeChat friend if she has deleted me\nhello\n")
        code, stdout, _ = run_cli("anchor", *self.kg_args, "--ntd", self.no_ntd, "--input", texts, "--explain")
        self.assertEqual(code, EXIT_OK)
        lines = [json.loads(line) for line in stdout.splitlines()]
        self.assertEqual(len(lines), 2)
        self.assertEqual(len(lines[0]["triples"]), 2)
        self.assertEqual(len(lines[0]["candidates"]), 5)
        code, stdout, _ = run_cli("anchor", *self.kg_args, "--ntd", self.no_ntd, "--input", texts, "--stats")
        self.assertEqual(json.loads(stdout)["texts"], 2)

    def test_missing_dataset_is_a_data_error(self):
        """A missing TSV exits with the data code."""
        code, _, stderr = run_cli("eval-disamb", *self.kg_args, "--ntd", self.no_ntd,
                                  "--data", self.path("absent.tsv"))
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("not found", stderr)

    def test_truncated_ntd_model_is_a_data_error(self):
        """A damaged NTD file exits with the data code instead of a traceback."""
        bad_ntd = self.path("ntd.joblib")
        with open(bad_ntd, "wb") as f:
            f.write(b"\x80\x04\x95")
        code, _, stderr = run_cli("anchor", *self.kg_args, "--ntd", bad_ntd, "--text", "friend")
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("NTD model", stderr)
        self.assertNotIn("Traceback", stderr)


class TestPipelineCommands(unittest.TestCase):
    """generate, train, eval and eval-disamb on a small synthetic corpus."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.no_ntd = os.path.join(self.tmp.name, "no_ntd.joblib")

    def tearDown(self):
        self.tmp.cleanup()

    def test_generate_train_and_evaluate(self):
        """A tiny end-to-end run prints accuracies with four decimals."""
        corpus = os.path.join(self.tmp.name, "corpus")
        code, stdout, _ = run_cli("--seed", "3", "generate", "--output-dir", corpus, "--match", "40",
                                  "--disamb", "10")
        self.assertEqual(code, EXIT_OK)
        paths = json.loads(stdout)

        config_path = os.path.join(self.tmp.name, "tiny.json")
        with open(config_path, "w") as f:
            json.dump({"name": "tiny", "epochs": 1, "batch_size": 8, "max_tokens": 16, "max_entities": 6,
                       "max_triples": 3, "dims": {"embedding": 4, "filters": 3, "fusion_hidden": 4}}, f)
        checkpoint = os.path.join(self.tmp.name, "matcher.ckpt")
        cache = os.path.join(self.tmp.name, "cache.jsonl")
        with open(cache, "w") as f:
            f.write("{not json\n")
        code, stdout, stderr = run_cli("--config", config_path, "train", "--data", paths["match"], "--ntd",
                                       self.no_ntd, "--checkpoint", checkpoint, "--cache", cache)
        self.assertEqual(code, EXIT_OK)
        self.assertRegex(stdout.strip(), r"^\d\.\d{4}$")
        self.assertIn("unreadable", stderr)
        with open(cache) as f:
            self.assertIn("fingerprint", json.loads(f.readline()))

        predictions = os.path.join(self.tmp.name, "predictions.jsonl")
        code, stdout, _ = run_cli("eval", "--data", paths["match"], "--checkpoint", checkpoint, "--ntd", self.no_ntd,
                                  "--predictions", predictions)
        self.assertEqual(code, EXIT_OK)
        self.assertRegex(stdout.strip(), r"^\d\.\d{4}$")
        with open(predictions) as f:
            records = [json.loads(line) for line in f]
        self.assertEqual(len(records), 40)
        for record in records:
            self.assertEqual(sorted(record), ["label", "query", "s", "title"])
            self.assertEqual(len(record["s"]), 3)
            self.assertAlmostEqual(sum(record["s"]), 1.0)
            self.assertEqual(record["label"], max(range(3), key=lambda i: record["s"][i]))

        code, stdout, _ = run_cli("eval-disamb", "--data", paths["disamb"], "--ntd", self.no_ntd, "--all-queries")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual([line.split("\t")[0] for line in stdout.splitlines()], ["RB", "RB+KR"])


if __name__ == '__main__':
    unittest.main()
