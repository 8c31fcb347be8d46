"""
Tests for the metric networks, their gates and the evaluation protocol.
"""
import csv
from unittest.mock import MagicMock

import pytest
import torch

from core.exceptions import ConfigurationError, MetricGateError, StateError
from core.models import EvalReport
from evalkit.evaluate import (EVAL_PROMPTS, build_cases, compare_reports, evaluate, load_report,
                              metric_hash, summarize, write_report)
from evalkit.networks import (IdentityEmbedder, IdentityGate, MetricConfig, StyleClassifier,
                              check_identity_gate, check_style_gate, identity_similarity,
                              style_accuracy, train_identity_embedder, train_style_classifier,
                              verify_identity_embedder)
from personalization.prompts import STYLES, VOCAB


@pytest.fixture
def metric_config():
    return MetricConfig(embed_dim=8, hidden_channels=4, iterations=3, batch_size=4)


@pytest.fixture
def embedder(metric_config):
    torch.manual_seed(0)
    return IdentityEmbedder(3, metric_config).freeze()


@pytest.fixture
def classifier(metric_config):
    torch.manual_seed(0)
    return StyleClassifier(STYLES, metric_config).freeze()


def _report(run, sim=0.5, acc=0.5, metric='m1'):
    return EvalReport(run=run, mean_identity_similarity=sim, style_accuracy=acc, sample_count=4,
                      config_hash='c', metric_hash=metric, seed=0)


class TestMetricNetworks:
    """Tests for the identity embedder and style classifier."""

    def test_self_similarity_is_one(self, embedder, images):
        emb = embedder.embed(images)
        assert torch.allclose(identity_similarity(emb, emb), torch.ones(4), atol=1e-6)
        assert torch.allclose(emb.norm(dim=-1), torch.ones(4), atol=1e-5)

    def test_margin_logits(self, embedder):
        emb = torch.nn.functional.normalize(torch.randn(2, 8), dim=-1)
        labels = torch.tensor([0, 2])
        logits = embedder.margin_logits(emb, labels)
        plain = 30.0 * emb @ torch.nn.functional.normalize(embedder.class_weight, dim=-1).t()
        margin = 30.0 * 0.35 * torch.nn.functional.one_hot(labels, 3).float()
        assert torch.allclose(plain - logits, margin, atol=1e-5)

    def test_training_returns_frozen_networks(self, images, metric_config, make_generator):
        embedder = train_identity_embedder(images, [0, 0, 1, 1], metric_config, make_generator(0))
        classifier = train_style_classifier(images, ['photo', 'oil', 'photo', 'oil'],
                                            ['photo', 'oil'], metric_config, make_generator(0))
        assert embedder.frozen and classifier.frozen
        assert set(classifier.predict(images)) <= {'photo', 'oil'}

    def test_content_hash_tracks_weights(self, embedder, metric_config):
        torch.manual_seed(0)
        same = IdentityEmbedder(3, metric_config).freeze()
        assert same.content_hash() == embedder.content_hash()
        with torch.no_grad():
            same.project.weight.add_(1.0)
        assert same.content_hash() != embedder.content_hash()

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            MetricConfig(margin=1.5)


class TestGates:
    """Tests for the quality gates."""

    def test_verification_statistics(self, embedder, images):
        gate = verify_identity_embedder(embedder, torch.cat([images, images]),
                                        [0, 1, 2, 0, 0, 1, 2, 1])
        assert 0.0 <= gate.auc <= 1.0
        separation = gate.same_identity_mean - gate.cross_identity_mean
        assert gate.to_dict()['separation'] == pytest.approx(separation)

    def test_verification_needs_positive_pairs(self, embedder, images):
        with pytest.raises(MetricGateError):
            verify_identity_embedder(embedder, images, [0, 1, 2, 3])

    def test_verification_needs_two_identities(self, embedder, images):
        with pytest.raises(MetricGateError) as exc:
            verify_identity_embedder(embedder, images, [7, 7, 7, 7])
        assert "1 identities over 4 images" in str(exc.value)

    def test_identity_gate(self, metric_config):
        passing = IdentityGate(auc=0.95, same_identity_mean=0.8, cross_identity_mean=0.1)
        check_identity_gate(passing, metric_config)
        low_auc = IdentityGate(auc=0.8, same_identity_mean=0.8, cross_identity_mean=0.1)
        with pytest.raises(MetricGateError):
            check_identity_gate(low_auc, metric_config)
        low_separation = IdentityGate(auc=0.95, same_identity_mean=0.3, cross_identity_mean=0.2)
        with pytest.raises(MetricGateError):
            check_identity_gate(low_separation, metric_config)

    def test_style_gate(self, metric_config, classifier, images):
        check_style_gate(0.99, metric_config)
        with pytest.raises(MetricGateError):
            check_style_gate(0.5, metric_config)
        assert 0.0 <= style_accuracy(classifier, images, ['photo'] * 4) <= 1.0


class TestBuildCases:
    """Tests for the evaluation case list."""

    RECORDS = [
        {'identity_id': 0, 'style': 'oil'},
        {'identity_id': 0, 'style': 'photo'},
        {'identity_id': 1, 'style': 'sketch'},
        {'identity_id': 1, 'style': 'comic'},
    ]

    def test_prompt_grid(self):
        assert len(EVAL_PROMPTS) == 18
        assert {VOCAB[p[0]] for p in EVAL_PROMPTS} == set(STYLES)

    def test_one_prompt_per_identity(self, images):
        cases = build_cases(images, self.RECORDS, seed=0)
        assert [c.identity_id for c in cases] == [0, 1]
        assert torch.equal(cases[0].conditioning_image, images[1])
        assert torch.equal(cases[1].conditioning_image, images[2])

    def test_all_prompts(self, images):
        cases = build_cases(images, self.RECORDS, seed=0, all_prompts=True, max_identities=1)
        assert len(cases) == 18
        assert {c.style for c in cases} == set(STYLES)

    def test_seeded(self, images):
        a = [c.prompt for c in build_cases(images, self.RECORDS, seed=3)]
        b = [c.prompt for c in build_cases(images, self.RECORDS, seed=3)]
        assert a == b


class TestEvaluate:
    """Tests for evaluate and the report helpers."""

    def test_reconstruction_scores_full_similarity(self, embedder, classifier, images,
                                                   make_generator, tmp_path):
        generator = MagicMock()
        generator.images.side_effect = lambda cond, prompts, gen: cond.clone()
        cases = build_cases(images, TestBuildCases.RECORDS, seed=0)
        report = evaluate(generator, cases, embedder, classifier, make_generator(0), run='echo',
                          config_hash='abc', seed=0, batch_size=1, grid_path=tmp_path / "grid.png")
        assert report.mean_identity_similarity == pytest.approx(1.0, abs=1e-5)
        assert report.sample_count == 2
        assert report.metric_hash == metric_hash(embedder, classifier)
        assert generator.images.call_count == 2
        assert (tmp_path / "grid.png").exists()

    def test_missing_metric_networks(self, images, make_generator):
        with pytest.raises(StateError) as exc:
            evaluate(MagicMock(), [], None, None, make_generator(0), run='x', config_hash='c',
                     seed=0)
        assert "metric networks missing; run train-metrics" in str(exc.value)

    def test_summarize_per_style(self):
        report = summarize('r', [1.0, 0.5, 0.0], [True, False, True], ['oil', 'oil', 'photo'],
                           'c', 'm', 0)
        assert report.mean_identity_similarity == pytest.approx(0.5)
        assert report.per_style['oil'].style_accuracy == pytest.approx(0.5)
        assert report.per_style['photo'].sample_count == 1

    def test_write_and_load(self, tmp_path):
        report = summarize('run1', [0.2, 0.4], [True, True], ['oil', 'sketch'], 'c', 'm', 5)
        json_path, csv_path = write_report(report, tmp_path)
        assert load_report(json_path).to_dict() == report.to_dict()
        with open(csv_path, newline='') as f:
            rows = list(csv.DictReader(f))
        assert [r['style'] for r in rows] == ['all', 'oil', 'sketch']

    def test_load_missing_report(self, tmp_path):
        with pytest.raises(StateError):
            load_report(tmp_path / "none.json")

    def test_compare_reports(self):
        rows = compare_reports([_report('a', 0.3), _report('b', 0.6)])
        assert [r['run'] for r in rows] == ['a', 'b']
        assert rows[1]['ID'] == 0.6

    def test_compare_rejects_mixed_metric_networks(self):
        with pytest.raises(StateError):
            compare_reports([_report('a'), _report('b', metric='m2')])

    def test_report_bounds(self):
        with pytest.raises(ConfigurationError):
            _report('bad', sim=1.5)
