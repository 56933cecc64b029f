"""
Tests for head importance estimation, grouping and importance files
"""

import logging

import numpy as np
import pytest

from service.errors import DataError, ParseError, UsageError
from service.importance import (
    IMPORTANCE_HEADER,
    ImportanceReport,
    check_report_matches,
    contraction_scores,
    distribution_stats,
    estimate_importance,
    gate_gradients,
    partition_groups,
    read_importance_csv,
    resolve_mask_count,
    top_n_heads,
    write_importance_csv,
)
from service.model import MaskSet, ModelConfig
from service.tasks import BOS_ID, Batch, collate


def _report(values, layers, heads):
    return ImportanceReport.from_array(values, layers, heads)


# Estimation


def test_scores_are_non_negative_and_cover_every_head(tiny_model, tiny_corpus):
    report = estimate_importance(tiny_model, [collate(tiny_corpus.dev[:5])])
    assert report.total_heads == tiny_model.config.total_heads
    assert np.all(report.as_array() >= 0)
    assert report.num_samples == 5


def test_all_padding_targets_give_zero_importance(tiny_model, tiny_corpus):
    src = collate(tiny_corpus.dev[:1])
    batch = Batch(src.src_ids, np.array([[BOS_ID, 0]]), np.zeros((1, 2), dtype=np.int64),
                  src.src_mask, np.zeros((1, 2), dtype=bool))
    report = estimate_importance(tiny_model, [batch])
    np.testing.assert_array_equal(report.as_array(), 0.0)


def test_duplicating_the_data_leaves_scores_unchanged(tiny_model64, tiny_corpus):
    batch = collate(tiny_corpus.dev[:4])
    once = estimate_importance(tiny_model64, [batch])
    twice = estimate_importance(tiny_model64, [batch, batch])
    np.testing.assert_allclose(once.as_array(), twice.as_array(), rtol=1e-12)


def test_importance_matches_finite_differences_on_the_gate(tiny_model64, tiny_corpus):
    model = tiny_model64
    batch = collate(tiny_corpus.dev[:1])
    report = estimate_importance(model, [batch])
    eps = 1e-5
    for head in model.config.all_heads():
        gates = model.make_gates()
        gates[head].data[()] = 1.0 + eps
        plus = model.forward_with_gates(batch, gates).loss.item()
        gates[head].data[()] = 1.0 - eps
        minus = model.forward_with_gates(batch, gates).loss.item()
        numeric = abs(plus - minus) / (2 * eps)
        assert abs(report.scores[head] - numeric) <= 5e-2 * max(numeric, 1e-6)


def test_gate_gradient_equals_head_output_contraction(tiny_model64, tiny_corpus):
    batch = collate(tiny_corpus.dev[:4])
    grads, _ = gate_gradients(tiny_model64, batch)
    contracted = contraction_scores(tiny_model64, batch)
    for head, grad in grads.items():
        np.testing.assert_allclose(grad, contracted[head], atol=1e-5)


def test_gate_gradients_clear_parameter_gradients(tiny_model, tiny_corpus):
    gate_gradients(tiny_model, collate(tiny_corpus.dev[:2]))
    assert all(p.grad is None for p in tiny_model.parameters())


def test_scaling_the_loss_scales_importance(tiny_model64, tiny_corpus):
    batches = [collate(tiny_corpus.dev[:4])]
    base = estimate_importance(tiny_model64, batches)
    scaled = estimate_importance(tiny_model64, batches, loss_scale=3.0)
    np.testing.assert_allclose(scaled.as_array(), 3.0 * base.as_array(), rtol=1e-9)
    assert partition_groups(base, 3).groups == partition_groups(scaled, 3).groups


def test_closed_heads_can_be_held_while_measuring(tiny_model, tiny_corpus):
    mask = MaskSet.from_flat_ids([0, 1], tiny_model.config)
    report = estimate_importance(tiny_model, [collate(tiny_corpus.dev[:3])], mask_context=mask)
    assert report.total_heads == tiny_model.config.total_heads


def test_mean_sentence_loss_is_logged(tiny_model, tiny_corpus, caplog):
    batches = [collate(tiny_corpus.dev[:3]), collate(tiny_corpus.dev[3:5])]
    total = sum(gate_gradients(tiny_model, batch)[1] for batch in batches)
    with caplog.at_level(logging.INFO, logger="service.importance"):
        estimate_importance(tiny_model, batches)
    assert f"loss/example={total / 5:.4f}" in caplog.text


def test_no_batches_is_a_usage_error(tiny_model):
    with pytest.raises(UsageError):
        estimate_importance(tiny_model, [])


# Reports, grouping and ranking


def test_report_must_cover_every_head():
    with pytest.raises(UsageError):
        _report([1.0] * 5, 1, 2)


def test_report_rejects_negative_scores():
    with pytest.raises(UsageError):
        _report([1.0, -0.5, 1.0], 1, 1)


def test_equal_scores_group_by_flat_id():
    groups = partition_groups(_report([1.0] * 24, 2, 4), 8)
    assert groups.group_size == 3
    flats = [[h.flat_index(2, 4) for h in g] for g in groups.groups]
    assert flats == [[3 * i, 3 * i + 1, 3 * i + 2] for i in range(8)]


def test_first_group_is_the_top_ranked_heads():
    values = np.random.default_rng(3).random(24)
    report = _report(values, 2, 4)
    groups = partition_groups(report, 8)
    expected = list(np.argsort(-values)[:3])
    assert [report.flat_index(h) for h in groups.groups[0]] == expected
    assert sorted(report.flat_index(h) for h in groups.all_heads()) == list(range(24))


def test_six_layer_partition_has_eighteen_heads_per_group():
    groups = partition_groups(_report(np.random.default_rng(0).random(144), 6, 8), 8)
    assert [len(g) for g in groups.groups] == [18] * 8


def test_uneven_partition_gives_remainder_to_early_groups():
    groups = partition_groups(_report(np.arange(24.0), 2, 4), 5)
    assert [len(g) for g in groups.groups] == [5, 5, 5, 5, 4]


@pytest.mark.parametrize("num_groups", [0, 25])
def test_partition_rejects_bad_group_counts(num_groups):
    with pytest.raises(UsageError):
        partition_groups(_report([1.0] * 24, 2, 4), num_groups)


def test_distribution_stats():
    assert distribution_stats(_report([1.0, 2.0, 3.0], 1, 1)) == pytest.approx((2.0, 2.0 / 3.0))
    assert distribution_stats(_report([0.7] * 6, 1, 2))[1] == pytest.approx(0.0)


def test_top_n_heads():
    report = _report([3.0, 1.0, 2.0], 1, 1)
    assert [report.flat_index(h) for h in top_n_heads(report, 1)] == [0]
    assert [report.flat_index(h) for h in top_n_heads(report, 3)] == [0, 2, 1]
    ties = _report([5.0, 5.0, 1.0], 1, 1)
    assert [ties.flat_index(h) for h in top_n_heads(ties, 2)] == [0, 1]
    with pytest.raises(UsageError):
        top_n_heads(report, 4)


@pytest.mark.parametrize("mask_n,total,expected", [
    ("12.5%", 24, 3),
    ("25%", 24, 6),
    ("12.5%", 144, 18),
    ("10%", 24, 3),
    (3, 24, 3),
    ("0", 24, 0),
])
def test_resolve_mask_count(mask_n, total, expected):
    assert resolve_mask_count(mask_n, total) == expected


@pytest.mark.parametrize("mask_n", [25, -1, "abc", "x%"])
def test_resolve_mask_count_rejects_bad_values(mask_n):
    with pytest.raises(UsageError):
        resolve_mask_count(mask_n, 24)


# Files


def test_importance_csv_reads_back(tmp_path):
    report = ImportanceReport.from_array(np.random.default_rng(1).random(24), 2, 4,
                                         num_samples=10, dataset_tag="dev", step=7)
    path = write_importance_csv(report, tmp_path / "importance.csv")
    assert path.read_text().splitlines()[0] == ",".join(IMPORTANCE_HEADER)
    loaded = read_importance_csv(path)
    np.testing.assert_allclose(loaded.as_array(), report.as_array(), rtol=1e-8)
    assert (loaded.layers, loaded.heads_per_layer, loaded.step, loaded.dataset_tag) == (2, 4, 7, "dev")


def test_importance_csv_with_wrong_header_is_a_parse_error(tmp_path):
    path = tmp_path / "importance.csv"
    path.write_text("head,score\n0,1.0\n")
    with pytest.raises(ParseError):
        read_importance_csv(path)


def test_report_for_another_layout_is_rejected():
    config = ModelConfig(layers=2, heads_per_layer=2, d_model=8, vocab_src=10, vocab_tgt=10)
    with pytest.raises(DataError):
        check_report_matches(_report([1.0] * 24, 2, 4), config)
