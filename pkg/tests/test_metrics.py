import math

import numpy as np
import pytest

from slmrec.checkpoint import save_checkpoint
from slmrec.data import generate_synthetic, build_dataset, sample_negatives
from slmrec.errors import EvaluationError
from slmrec.metrics import (
    MetricsReport,
    aggregate_ranks,
    evaluate_model,
    hr_at_k,
    mrr_of_rank,
    ndcg_at_k,
    rank_candidates,
    select_best_checkpoint,
)
from slmrec.model import DecoderModel, ModelConfig


# -- single-list ranking ------------------------------------------------------


def test_strict_max_is_rank_one():
    scores = np.array([5.0, 1.0, 2.0, 3.0])
    assert rank_candidates(scores, 0).positive_rank == 1


def test_tie_with_three_negatives_is_rank_four():
    scores = np.array([7.0, 7.0, 7.0, 7.0, 1.0])
    assert rank_candidates(scores, 0).positive_rank == 4


def test_all_equal_is_worst_case():
    scores = np.zeros(1000)
    assert rank_candidates(scores, 0).positive_rank == 1000


def test_order_puts_positive_after_tied_negatives():
    scores = np.array([3.0, 5.0, 3.0])
    ranked = rank_candidates(scores, 0)
    assert ranked.order.tolist() == [1, 2, 0]


def test_non_finite_score_rejected():
    with pytest.raises(EvaluationError):
        rank_candidates(np.array([1.0, np.nan]), 0)


def test_pointwise_metric_closed_forms():
    assert (hr_at_k(1, 5), ndcg_at_k(1, 5), mrr_of_rank(1)) == (1.0, 1.0, 1.0)
    assert ndcg_at_k(3, 5) == pytest.approx(0.5)
    assert mrr_of_rank(3) == pytest.approx(1 / 3)
    assert hr_at_k(11, 10) == 0.0
    assert ndcg_at_k(11, 10) == 0.0
    assert mrr_of_rank(11) == pytest.approx(1 / 11)


# -- brute-force oracle over random score vectors --------------------------------


def brute_force_metrics(scores, positive_index):
    """Independent reimplementation: explicit sort with pessimistic ties."""
    order = sorted(
        range(len(scores)),
        key=lambda i: (-scores[i], 1 if i == positive_index else 0),
    )
    rank = order.index(positive_index) + 1
    return {
        "rank": rank,
        "hr1": 1.0 if rank <= 1 else 0.0,
        "hr5": 1.0 if rank <= 5 else 0.0,
        "hr10": 1.0 if rank <= 10 else 0.0,
        "ndcg5": 1.0 / math.log2(rank + 1) if rank <= 5 else 0.0,
        "ndcg10": 1.0 / math.log2(rank + 1) if rank <= 10 else 0.0,
        "mrr": 1.0 / rank,
    }


def test_metrics_match_brute_force_on_1000_random_vectors():
    rng = np.random.default_rng(77)
    ranks = []
    expected = []
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        scores = rng.normal(size=n)
        if rng.uniform() < 0.3:  # force ties sometimes
            scores = np.round(scores, 1)
        pos = int(rng.integers(0, n))
        got = rank_candidates(scores, pos)
        oracle = brute_force_metrics(scores.tolist(), pos)
        assert got.positive_rank == oracle["rank"]
        ranks.append(got.positive_rank)
        expected.append(oracle)
    report = aggregate_ranks(ranks, seed=0)
    for key, attr in (("hr1", "hr1"), ("hr5", "hr5"), ("hr10", "hr10"),
                      ("ndcg5", "ndcg5"), ("ndcg10", "ndcg10"), ("mrr", "mrr")):
        mean = float(np.mean([e[key] for e in expected]))
        assert getattr(report, attr) == pytest.approx(mean, abs=1e-12)


def test_report_ordering_invariants_hold():
    rng = np.random.default_rng(3)
    ranks = rng.integers(1, 1001, size=400).tolist()
    report = aggregate_ranks(ranks, seed=0)
    assert report.hr1 <= report.hr5 <= report.hr10
    assert report.ndcg5 <= report.hr5
    assert report.ndcg10 <= report.hr10
    report.validate()


def test_constructed_rank_two_gives_half_mrr():
    report = aggregate_ranks([2] * 50, seed=0)
    assert report.mrr == pytest.approx(0.5)
    assert report.hr1 == 0.0
    assert report.hr5 == 1.0


def test_metrics_invariant_to_candidate_order():
    rng = np.random.default_rng(9)
    scores = rng.normal(size=30)
    base = rank_candidates(scores, 4).positive_rank
    perm = rng.permutation(30)
    inverse_pos = int(np.where(perm == 4)[0][0])
    permuted = rank_candidates(scores[perm], inverse_pos).positive_rank
    assert base == permuted


# -- model-level evaluation ---------------------------------------------------------


@pytest.fixture(scope="module")
def wide_split():
    # enough items that a full 999-negative protocol also works where needed
    records = generate_synthetic(n_users=120, n_items=200, seed=21,
                                 min_len=6, max_len=12)
    return build_dataset(records)


def test_evaluate_model_deterministic(wide_split):
    cfg = ModelConfig(n_items=wide_split.n_items, n_layers=1, hidden=16, heads=2,
                      id_dim=8, prefix_len=1, seq_len=8)
    model = DecoderModel.init(cfg, seed=0)
    a = evaluate_model(model, wide_split, "valid", seed=5, negatives=50)
    b = evaluate_model(model, wide_split, "valid", seed=5, negatives=50)
    assert a.to_dict() == b.to_dict()
    c = evaluate_model(model, wide_split, "valid", seed=6, negatives=50)
    assert a.mrr != c.mrr  # different candidate draws


def test_evaluate_model_counts_every_user(wide_split):
    cfg = ModelConfig(n_items=wide_split.n_items, n_layers=1, hidden=16, heads=2,
                      id_dim=8, prefix_len=1, seq_len=8)
    model = DecoderModel.init(cfg, seed=0)
    report = evaluate_model(model, wide_split, "test", seed=5, negatives=50)
    assert report.n_users == wide_split.n_users


def test_candidates_give_exact_mrr_for_planted_scores(wide_split):
    # plant scores so the positive is always second: MRR must be exactly 0.5
    ranks = []
    for u in range(wide_split.n_users):
        cands = sample_negatives(wide_split, u, wide_split.test[u], k=20, seed=1)
        scores = np.full(len(cands), 0.0)
        scores[0] = 5.0
        scores[5] = 9.0
        ranks.append(rank_candidates(scores, 0).positive_rank)
    report = aggregate_ranks(ranks, seed=1)
    assert report.mrr == pytest.approx(0.5)


# -- checkpoint selection -------------------------------------------------------------


def test_select_best_checkpoint(tmp_path, wide_split):
    cfg = ModelConfig(n_items=wide_split.n_items, n_layers=1, hidden=16, heads=2,
                      id_dim=8, prefix_len=1, seq_len=8)
    mrrs = {}
    for step, seed in ((100, 0), (200, 1), (300, 2)):
        model = DecoderModel.init(cfg, seed=seed)
        save_checkpoint(tmp_path / f"model_step{step}.ckpt", cfg.to_dict(),
                        model.to_arrays())
        mrrs[step] = evaluate_model(model, wide_split, "valid", seed=17,
                                    negatives=50).mrr
    best_step = max(sorted(mrrs), key=lambda s: (mrrs[s], s))
    path, mrr = select_best_checkpoint(tmp_path, wide_split, seed=17, negatives=50)
    assert path.name == f"model_step{best_step}.ckpt"
    assert mrr == pytest.approx(mrrs[best_step])


def test_select_best_skips_corrupt(tmp_path, wide_split, caplog):
    cfg = ModelConfig(n_items=wide_split.n_items, n_layers=1, hidden=16, heads=2,
                      id_dim=8, prefix_len=1, seq_len=8)
    model = DecoderModel.init(cfg, seed=0)
    save_checkpoint(tmp_path / "model_step100.ckpt", cfg.to_dict(), model.to_arrays())
    (tmp_path / "model_step200.ckpt").write_bytes(b"garbage")
    path, _ = select_best_checkpoint(tmp_path, wide_split, seed=17, negatives=50)
    assert path.name == "model_step100.ckpt"


def test_select_single_checkpoint(tmp_path, wide_split):
    cfg = ModelConfig(n_items=wide_split.n_items, n_layers=1, hidden=16, heads=2,
                      id_dim=8, prefix_len=1, seq_len=8)
    model = DecoderModel.init(cfg, seed=0)
    save_checkpoint(tmp_path / "model_step50.ckpt", cfg.to_dict(), model.to_arrays())
    path, _ = select_best_checkpoint(tmp_path, wide_split, seed=17, negatives=50)
    assert path.name == "model_step50.ckpt"
