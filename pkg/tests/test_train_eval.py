"""
Tests for datasets, training loops and evaluation protocols.
"""
import json
import os
import sys
import tempfile
import unittest
from dataclasses import replace
from unittest.mock import patch

import numpy as np

# Get the project root directory
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
# Add the project root to the Python path
sys.path.insert(0, project_root)

from src import config
from src.anchoring import anchor, ntd_features
from src.kg_store import RelationKind
from src.ntd_model import NtdModel
from src.rule_scorer import get_rule_scorer
from src.synthetic_data import get_synthetic_generator
from src.train_eval import (AnchorProvider, ConfigError, DatasetError, DatasetSplits, DisambExample,
                            MatchExample, MetricError, NtdTrainConfig, ReportRow, TrainConfig, auc_score,
                            channel_subset_name, compare_architectures, disambiguation_report,
                            evaluate_accuracy, evaluate_disambiguation, format_report, load_disamb_dataset,
                            load_match_dataset, locate_candidates, predict_examples, run_ablation,
                            save_disamb_dataset, select_complicated_queries, split_dataset, train_matcher,
                            train_ntd)
from tests.kg_fixtures import FRIEND, RECOVER, WECHAT, WECHAT_FRIEND_QUERY, shipped_kg, toy_kg

SMALL_DIMS = {"embedding": 4, "filters": 3, "lstm_hidden": 2, "mlp_hidden": 3, "fusion_hidden": 4,
              "pyramid_filters": [2, 2]}


def wechat_friend_examples():
    """Every candidate of the WeChat friend query, labeled with the intended reading."""
    has_op, comp = RelationKind.HAS_OPERATION, RelationKind.COMPONENT_OF
    return [
        DisambExample(WECHAT_FRIEND_QUERY, "friend", has_op, "recover", 1),
        DisambExample(WECHAT_FRIEND_QUERY, "friend", has_op, "deleted", 0),
        DisambExample(WECHAT_FRIEND_QUERY, "WeChat", has_op, "recover", 0),
        DisambExample(WECHAT_FRIEND_QUERY, "WeChat", has_op, "deleted", 0),
        DisambExample(WECHAT_FRIEND_QUERY, "friend", comp, "WeChat", 1),
    ]


class TestSplitAndDatasets(unittest.TestCase):
    """Splitting and TSV readers."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_split_sizes(self):
        """Train gets floor(0.8 n), valid floor(0.1 n), test the rest."""
        splits = split_dataset(list(range(100)), seed=1)
        self.assertEqual([len(s) for s in splits], [80, 10, 10])
        self.assertEqual(sorted(splits.train + splits.valid + splits.test), list(range(100)))
        large = split_dataset(list(range(29134)), seed=1)
        self.assertEqual([len(s) for s in large], [23307, 2913, 2914])

    def test_split_is_seeded(self):
        """The same seed gives the same split, another seed a different one."""
        data = list(range(50))
        self.assertEqual(split_dataset(data, 3), split_dataset(data, 3))
        self.assertNotEqual(split_dataset(data, 3).train, split_dataset(data, 4).train)

    def test_split_needs_ten_examples(self):
        """Tiny datasets cannot be split."""
        with self.assertRaises(DatasetError):
            split_dataset(list(range(9)), seed=0)

    def test_match_dataset(self):
        """Rows load into examples."""
        path = self.write("match.tsv", "how to recover friend\tHow to recover WeChat friend\t2\n"
                                       "delete chat log\tHow to pin QQ group chat\t0\n")
        examples = load_match_dataset(path)
        self.assertEqual(examples[0], MatchExample("how to recover friend", "How to recover WeChat friend", 2))
        self.assertEqual(examples[1].label, 0)

    def test_bad_label_reports_line(self):
        """Malformed labels name the file and line."""
        path = self.write("match.tsv", "a\tb\t1\nc\td\t7\n")
        with self.assertRaisesRegex(DatasetError, r"match\.tsv:2"):
            load_match_dataset(path)

    def test_extra_fields_and_missing_file(self):
        """Too many fields and a missing file are dataset errors."""
        path = self.write("match.tsv", "a\tb\t1\nc\td\t2\textra\n")
        with self.assertRaises(DatasetError):
            load_match_dataset(path)
        with self.assertRaises(DatasetError):
            load_match_dataset(os.path.join(self.tmp.name, "absent.tsv"))

    def test_disamb_dataset(self):
        """Disambiguation rows keep relation and label, bad relations are rejected."""
        path = os.path.join(self.tmp.name, "disamb.tsv")
        save_disamb_dataset(wechat_friend_examples(), path)
        self.assertEqual(load_disamb_dataset(path), wechat_friend_examples())
        bad = self.write("bad.tsv", "q\tfriend\thypernym_hyponym\tsocial contact\t1\n")
        with self.assertRaisesRegex(DatasetError, r"bad\.tsv:1"):
            load_disamb_dataset(bad)

    def test_example_validation(self):
        """Examples check labels and texts."""
        with self.assertRaises(DatasetError):
            MatchExample("q", "t", 3)
        with self.assertRaises(DatasetError):
            MatchExample(" ", "t", 1)


class TestConfigs(unittest.TestCase):
    """Config validation."""

    def test_every_problem_is_listed(self):
        """All violations are reported together."""
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig.from_dict({"architecture": "bert", "epochs": 0, "channels": ["token", "token"],
                                   "colour": "blue"})
        problems = ctx.exception.problems
        self.assertEqual(len(problems), 4)
        self.assertTrue(any("colour" in p for p in problems))
        self.assertTrue(any(p.startswith("architecture") for p in problems))

    def test_valid_config(self):
        """A valid dict builds a spec with the overridden dims."""
        train_config = TrainConfig.from_dict({"architecture": "matchpyramid", "channels": ["token", "triple"],
                                              "dims": {"embedding": 8}, "epochs": 2})
        spec = train_config.matcher_spec()
        self.assertEqual(spec.channels, ("token", "triple"))
        self.assertEqual(spec.dims.embedding, 8)
        self.assertNotIn("dataset", train_config.to_dict())

    def test_shipped_configs_are_valid(self):
        """The example configs under configs/ load."""
        for name in ("arc1", "matchpyramid", "iwan"):
            self.assertEqual(TrainConfig.from_file(os.path.join(project_root, "configs", f"{name}.json")).architecture,
                             name)
        NtdTrainConfig.from_file(os.path.join(project_root, "configs", "ntd.json"))

    def test_unreadable_config(self):
        """Broken JSON is a config error."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "broken.json")
            with open(path, "w") as f:
                f.write("{not json")
            with self.assertRaises(ConfigError):
                TrainConfig.from_file(path)

    def test_ntd_config(self):
        """NTD configs are validated the same way."""
        with self.assertRaises(ConfigError) as ctx:
            NtdTrainConfig.from_dict({"valid_fraction": 1.0, "dim": 0})
        self.assertEqual(len(ctx.exception.problems), 2)


class TestMetricsAndReports(unittest.TestCase):
    """AUC, accuracy and report formatting."""

    def test_auc_matches_pair_counting(self):
        """AUC equals the fraction of correctly ordered positive/negative pairs, ties half."""
        rng = np.random.RandomState(4)
        labels = rng.randint(2, size=40)
        scores = np.round(rng.rand(40), 1)
        positives = scores[labels == 1]
        negatives = scores[labels == 0]
        pairs = [(p > n) + 0.5 * (p == n) for p in positives for n in negatives]
        self.assertAlmostEqual(auc_score(labels, scores), float(np.mean(pairs)))

    def test_auc_needs_both_classes(self):
        """Single-class labels have no AUC."""
        with self.assertRaises(MetricError):
            auc_score([1, 1, 1], [0.2, 0.5, 0.9])

    def test_format_report(self):
        """Rows are tab separated with four decimals and no header."""
        rows = [ReportRow("token", 0.5), ReportRow("token+entity", 0.61237)]
        self.assertEqual(format_report(rows), "token\t0.5000\ntoken+entity\t0.6124\n")
        with_auc = format_report([ReportRow("RB", 0.8, 0.75)])
        self.assertEqual(with_auc, "RB\t0.8000\t0.7500\n")

    def test_channel_subset_names(self):
        """Names follow the canonical channel order."""
        self.assertEqual(channel_subset_name(("triple", "token")), "token+triple")

    def test_accuracy_of_nothing(self):
        """Accuracy of an empty set is undefined."""
        with self.assertRaises(MetricError):
            evaluate_accuracy(None, [], None)


class TestDisambiguation(unittest.TestCase):
    """Candidate location and RB / RB+KR / RB+KR+NTD evaluation."""

    def setUp(self):
        self.kg = toy_kg()

    def test_locate_candidates(self):
        """Surface forms resolve to the query's candidates."""
        instances = locate_candidates(wechat_friend_examples(), self.kg)
        self.assertTrue(all(i.candidate is not None for i in instances))
        self.assertFalse(instances[2].candidate.kr_pass)
        with self.assertLogs("src.train_eval", level="WARNING"):
            missing = locate_candidates([DisambExample("friend", "friend", RelationKind.HAS_OPERATION,
                                                       "recover", 1)], self.kg)
        self.assertIsNone(missing[0].candidate)

    def test_rb_kr_separates_the_wechat_friend_query(self):
        """KR removes the app-level readings and RB ranks the rest correctly."""
        report = evaluate_disambiguation("rb_kr", wechat_friend_examples(), self.kg)
        self.assertEqual((report.accuracy, report.auc, report.examples), (1.0, 1.0, 5))

    def test_callable_scorer(self):
        """Any callable over located instances can be evaluated."""
        report = evaluate_disambiguation(
            lambda i: 1.0 if i.candidate.relation is RelationKind.COMPONENT_OF else 0.0, wechat_friend_examples(), self.kg)
        self.assertAlmostEqual(report.auc, 0.75)
        self.assertAlmostEqual(report.accuracy, 0.8)

    def test_ntd_mode_needs_model(self):
        """The ensemble mode cannot run without an NTD model."""
        with self.assertRaises(ValueError):
            evaluate_disambiguation("rb_kr_ntd", wechat_friend_examples(), self.kg)

    def test_report_rows(self):
        """Rows depend on whether an NTD model is available."""
        self.assertEqual([r.name for r in disambiguation_report(wechat_friend_examples(), self.kg, None)], ["RB", "RB+KR"])
        rows = disambiguation_report(wechat_friend_examples(), self.kg, NtdModel.zeros(64, 4))
        self.assertEqual([r.name for r in rows], ["RB", "RB+KR", "RB+KR+NTD"])

    def test_select_complicated_queries(self):
        """Only operation examples with two or more operation candidates are kept."""
        single = DisambExample("delete friend on QQ", "friend", RelationKind.HAS_OPERATION, "delete", 1)
        kept = select_complicated_queries(wechat_friend_examples() + [single], self.kg)
        self.assertEqual(kept, wechat_friend_examples()[:4])

    def test_ntd_training_is_label_flip_symmetric(self):
        """Flipping every label mirrors the learned scores around 0.5."""
        kg = shipped_kg()
        examples = get_synthetic_generator(kg, seed=2).disamb_examples(30)
        flipped = [replace(e, label=1 - e.label) for e in examples]
        ntd_config = NtdTrainConfig(epochs=3, batch_size=16, n_buckets=256, dim=8, seed=1)
        model = train_ntd(examples, ntd_config, kg)
        mirror = train_ntd(flipped, ntd_config, kg)
        for instance in locate_candidates(examples[:10], kg):
            features = ntd_features(instance.candidate, instance.tokens, instance.candidates).feature_strings()
            self.assertAlmostEqual(model.score(features) + mirror.score(features), 1.0, places=6)

    def test_ntd_training_needs_both_classes(self):
        """A single-class dataset cannot train the disambiguator."""
        positives = [e for e in wechat_friend_examples() if e.label == 1]
        with self.assertRaises(DatasetError):
            train_ntd(positives, NtdTrainConfig(epochs=1), self.kg)


class TestMatcherTraining(unittest.TestCase):
    """A short training run on synthetic data."""

    @classmethod
    def setUpClass(cls):
        cls.kg = shipped_kg()
        cls.examples = get_synthetic_generator(cls.kg, seed=3).match_examples(40)
        cls.train_config = TrainConfig(name="unit", architecture="arc1", epochs=2, batch_size=8,
                                       dims=dict(SMALL_DIMS), max_tokens=16, max_entities=6, max_triples=3)

    def test_train_and_evaluate(self):
        """Training records history and the result can be evaluated in parallel."""
        splits = split_dataset(self.examples, self.train_config.seed)
        provider = AnchorProvider(self.kg)
        result = train_matcher(self.train_config, splits, self.kg, provider=provider)
        self.assertEqual(len(result.history), 2)
        self.assertIn(result.best_epoch, (1, 2))
        accuracy = evaluate_accuracy(result.matcher, splits.test, provider, workers=2)
        self.assertGreaterEqual(accuracy, 0.0)
        self.assertLessEqual(accuracy, 1.0)
        self.assertEqual(accuracy, evaluate_accuracy(result.matcher, splits.test, provider, workers=1))
        predictions = predict_examples(result.matcher, splits.test, provider)
        self.assertEqual(len(predictions), len(splits.test))

    def test_same_seed_gives_identical_checkpoints(self):
        """Two runs with the same config write byte-identical checkpoints."""
        splits = split_dataset(self.examples, self.train_config.seed)
        run_config = replace(self.train_config, epochs=1)
        contents = []
        with tempfile.TemporaryDirectory() as tmp:
            for run in range(2):
                path = os.path.join(tmp, f"run{run}.ckpt")
                train_matcher(run_config, splits, self.kg).matcher.save(path, run_config.to_dict())
                with open(path, "rb") as f:
                    contents.append(f.read())
        self.assertEqual(contents[0], contents[1])

    def test_empty_valid_split_uses_train_accuracy(self):
        """Without valid examples selection falls back to train accuracy."""
        splits = DatasetSplits(self.examples[:12], [], self.examples[12:16])
        result = train_matcher(replace(self.train_config, epochs=1), splits, self.kg)
        self.assertTrue(np.isnan(result.history[0].valid_accuracy))
        self.assertGreaterEqual(result.best_valid_accuracy, 0.0)

    def test_nan_loss_stops_training(self):
        """A non-finite loss raises instead of continuing."""
        from src.train_eval import TrainingDivergedError
        with patch("src.train_eval.matcher_loss") as fake_loss:
            fake_loss.return_value.item.return_value = float("nan")
            with self.assertRaises(TrainingDivergedError):
                train_matcher(replace(self.train_config, epochs=1), self.examples, self.kg)


class TestAnchorProvider(unittest.TestCase):
    """Anchor memoization and the JSONL sidecar."""

    def test_cache_is_reused(self):
        """A fresh provider with the same fingerprint serves anchors from disk."""
        kg = toy_kg()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "anchors.jsonl")
            first = AnchorProvider(kg, cache_path=path)
            first.precompute([WECHAT_FRIEND_QUERY, "delete friend"])
            with open(path) as f:
                self.assertIn("fingerprint", json.loads(f.readline()))
            with patch("src.train_eval.anchor") as fake_anchor:
                second = AnchorProvider(kg, cache_path=path)
                self.assertEqual(second.get(WECHAT_FRIEND_QUERY).to_dict(), first.get(WECHAT_FRIEND_QUERY).to_dict())
                fake_anchor.assert_not_called()

    def test_stale_cache_is_ignored(self):
        """Changing the threshold invalidates the sidecar."""
        kg = toy_kg()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "anchors.jsonl")
            AnchorProvider(kg, threshold=0.5, cache_path=path).precompute([WECHAT_FRIEND_QUERY])
            with self.assertLogs("src.train_eval", level="WARNING"):
                AnchorProvider(kg, threshold=0.6, cache_path=path)

    def test_corrupt_cache_is_recomputed(self):
        """Broken JSON or a record without anchors is discarded with a warning."""
        kg = toy_kg()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "anchors.jsonl")
            fingerprint = AnchorProvider(kg).fingerprint
            for body in ("{not json\n", json.dumps({"fingerprint": fingerprint}) + '\n{"text": "friend"}\n'):
                with open(path, "w") as f:
                    f.write(body)
                with self.assertLogs("src.train_eval", level="WARNING"):
                    provider = AnchorProvider(kg, cache_path=path)
                self.assertEqual(provider.get("friend").entity_ids(), [FRIEND])


@unittest.skipUnless(config.RUN_SLOW_TESTS, "set RUN_SLOW_TESTS=true to run the experiment protocols")
class TestExperimentProtocols(unittest.TestCase):
    """Ablation and architecture comparison on a small synthetic corpus."""

    @classmethod
    def setUpClass(cls):
        cls.kg = shipped_kg()
        examples = get_synthetic_generator(cls.kg, seed=5).match_examples(120)
        cls.splits = split_dataset(examples, seed=5)
        cls.train_config = TrainConfig(name="slow", epochs=2, batch_size=16, dims=dict(SMALL_DIMS),
                                       max_tokens=16, max_entities=6, max_triples=3)

    def test_ablation_rows(self):
        """One row per channel subset."""
        rows = run_ablation(self.train_config, self.splits, self.kg, None)
        self.assertEqual([r.name for r in rows],
                         ["token", "token+entity", "token+triple", "token+entity+triple"])

    def test_architecture_rows(self):
        """Baseline and anchored variants of every architecture."""
        rows = compare_architectures(self.train_config, self.splits, self.kg, None)
        self.assertEqual([r.name for r in rows], ["arc1", "arc1+anchors", "matchpyramid", "matchpyramid+anchors",
                                                  "iwan", "iwan+anchors"])


@unittest.skipUnless(config.RUN_SLOW_TESTS, "set RUN_SLOW_TESTS=true to run the experiment protocols")
class TestDisambiguationQuality(unittest.TestCase):
    """Scorer ordering on the complicated queries of a held-out synthetic set."""

    @classmethod
    def setUpClass(cls):
        cls.kg = shipped_kg()
        train = get_synthetic_generator(cls.kg, seed=config.DEFAULT_SEED).disamb_examples(400)
        held_out = get_synthetic_generator(cls.kg, seed=config.DEFAULT_SEED + 1).disamb_examples(200)
        cls.ntd = train_ntd(train, NtdTrainConfig(), cls.kg)
        cls.complicated = select_complicated_queries(held_out, cls.kg)

    def test_each_stage_improves(self):
        """RB < RB+KR < RB+KR+NTD on accuracy and AUC, and the full scorer is strong."""
        rows = disambiguation_report(self.complicated, self.kg, self.ntd)
        self.assertEqual([r.name for r in rows], ["RB", "RB+KR", "RB+KR+NTD"])
        rb, rb_kr, full = rows
        self.assertLess(rb.accuracy, rb_kr.accuracy)
        self.assertLess(rb_kr.accuracy, full.accuracy)
        self.assertLess(rb.auc, rb_kr.auc)
        self.assertLess(rb_kr.auc, full.auc)
        self.assertGreaterEqual(full.accuracy, 0.85)
        self.assertGreaterEqual(full.auc, 0.90)

    def test_wechat_friend_query_with_trained_ntd(self):
        """The trained ensemble accepts exactly the near operation and the app membership."""
        anchors = anchor(WECHAT_FRIEND_QUERY, self.kg, self.ntd, config.ANCHOR_THRESHOLD, get_rule_scorer())
        self.assertEqual(sorted(t.key for t in anchors.triples),
                         [(FRIEND, "component_of", WECHAT), (FRIEND, "has_operation", RECOVER)])


@unittest.skipUnless(config.RUN_SLOW_TESTS, "set RUN_SLOW_TESTS=true to run the experiment protocols")
class TestMatcherQuality(unittest.TestCase):
    """Capacity of each architecture and the value of the anchor channels."""

    @classmethod
    def setUpClass(cls):
        cls.kg = shipped_kg()
        cls.provider = AnchorProvider(cls.kg)

    def test_every_architecture_fits_its_training_set(self):
        """200 examples are fitted to at least 0.95 accuracy within 30 epochs."""
        examples = get_synthetic_generator(self.kg, seed=config.DEFAULT_SEED).match_examples(200)
        fit_only = DatasetSplits(examples, [], [])
        for architecture in ("arc1", "matchpyramid", "iwan"):
            with self.subTest(architecture=architecture):
                train_config = TrainConfig(name=f"fit:{architecture}", architecture=architecture, epochs=30)
                result = train_matcher(train_config, fit_only, self.kg, provider=self.provider)
                self.assertGreaterEqual(evaluate_accuracy(result.matcher, examples, self.provider), 0.95)

    def test_anchor_channels_beat_tokens_alone(self):
        """The full channel set beats the token channel by a clear margin."""
        examples = get_synthetic_generator(self.kg, seed=config.DEFAULT_SEED).match_examples(1000)
        splits = split_dataset(examples, config.DEFAULT_SEED)
        rows = {r.name: r.accuracy for r in run_ablation(TrainConfig(name="ablation", epochs=10), splits,
                                                        self.kg, None, provider=self.provider)}
        self.assertGreaterEqual(rows["token+entity+triple"] - rows["token"], 0.05)


if __name__ == '__main__':
    unittest.main()
