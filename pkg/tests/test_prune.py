import numpy as np
import pytest

from slmrec.errors import ConfigError
from slmrec.metrics import evaluate_model
from slmrec.model import DecoderModel, ModelConfig, parameter_count
from slmrec.prune import (
    SWEEP_COLUMNS,
    SweepSpec,
    direct_layer_inference,
    run_sweep,
    train_truncated,
)
from slmrec.training import TrainSettings


@pytest.fixture(scope="module")
def trained_teacher(tiny_split):
    from slmrec.training import train_model

    cfg = ModelConfig(n_items=tiny_split.n_items, n_layers=4, hidden=16, heads=2,
                      id_dim=8, prefix_len=1, seq_len=8)
    model = DecoderModel.init(cfg, seed=0)
    train_model(model, tiny_split,
                TrainSettings(batch_size=16, max_steps=60, lr=3e-3, warmup_steps=6,
                              eval_steps=60, eval_negatives=20))
    return model


def test_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec(layers=[0, 2], mode="truncated_training")
    with pytest.raises(ConfigError):
        SweepSpec(layers=[1], mode="bogus")
    with pytest.raises(ConfigError):
        SweepSpec(layers=[1], mode="direct_inference")  # needs checkpoint


def test_direct_inference_at_top_layer_reproduces_standard_eval(trained_teacher, tiny_split):
    probe = direct_layer_inference(trained_teacher, tiny_split, 4, which="test",
                                   seed=17, negatives=20)
    standard = evaluate_model(trained_teacher, tiny_split, "test", seed=17,
                              negatives=20)
    # layer L is the default prediction representation: bit-identical metrics
    for key in ("HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "MRR"):
        assert probe.to_dict()[key] == standard.to_dict()[key]


def test_direct_inference_deterministic(trained_teacher, tiny_split):
    a = direct_layer_inference(trained_teacher, tiny_split, 2, seed=17, negatives=20)
    b = direct_layer_inference(trained_teacher, tiny_split, 2, seed=17, negatives=20)
    assert a.to_dict() == b.to_dict()


def test_direct_inference_never_mutates_weights(trained_teacher, tiny_split):
    before = {k: v.data.copy() for k, v in trained_teacher.params.items()}
    direct_layer_inference(trained_teacher, tiny_split, 1, seed=17, negatives=20)
    for name, arr in before.items():
        np.testing.assert_array_equal(arr, trained_teacher.params[name].data)


def test_direct_inference_layer_bounds(trained_teacher, tiny_split):
    with pytest.raises(ConfigError):
        direct_layer_inference(trained_teacher, tiny_split, 5)
    with pytest.raises(ConfigError):
        direct_layer_inference(trained_teacher, tiny_split, 0)


def test_train_truncated_params_increase_with_depth(tiny_split):
    base = ModelConfig(n_items=tiny_split.n_items, n_layers=4, hidden=16, heads=2,
                       id_dim=8, prefix_len=1, seq_len=8)
    counts = [parameter_count(base.with_layers(l)) for l in (1, 2, 4)]
    assert counts[0] < counts[1] < counts[2]


def test_run_sweep_rows(tiny_split):
    base = ModelConfig(n_items=tiny_split.n_items, n_layers=4, hidden=16, heads=2,
                       id_dim=8, prefix_len=1, seq_len=8)
    settings = TrainSettings(batch_size=16, max_steps=30, lr=3e-3, warmup_steps=3,
                             eval_steps=30, eval_negatives=20)
    pre = TrainSettings(batch_size=16, max_steps=30, lr=3e-3, warmup_steps=3,
                        eval_steps=30, eval_negatives=20)
    spec = SweepSpec(layers=[1, 2], mode="truncated_training")
    rows = run_sweep(spec, tiny_split, base, settings, pretrain_settings=pre,
                     pretrain_layers=1, pretrain_heads=2)
    assert len(rows) == 3  # baseline + 2 depths
    assert rows[0]["mode"] == "baseline"
    assert [r["l"] for r in rows[1:]] == [1, 2]
    for row in rows:
        assert set(row) == set(SWEEP_COLUMNS)
        assert 0.0 <= row["MRR"] <= 1.0
    assert rows[1]["params"] < rows[2]["params"]
    assert rows[1]["params"] == parameter_count(base.with_layers(1))


def test_run_sweep_direct_mode(trained_teacher, tiny_split):
    base = trained_teacher.config
    settings = TrainSettings(batch_size=16, max_steps=10, eval_steps=10,
                             eval_negatives=20)
    pre = TrainSettings(batch_size=16, max_steps=20, lr=3e-3, warmup_steps=2,
                        eval_steps=20, eval_negatives=20)
    spec = SweepSpec(layers=[1, 2, 4], mode="direct_inference", teacher_ckpt="unused")
    rows = run_sweep(spec, tiny_split, base, settings, pretrain_settings=pre,
                     pretrain_layers=1, pretrain_heads=2, teacher=trained_teacher)
    modes = [r["mode"] for r in rows]
    assert modes == ["baseline", "direct_inference", "direct_inference",
                     "direct_inference"]
    assert all(r["train_hours"] == 0.0 for r in rows[1:])
