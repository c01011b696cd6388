"""Split arithmetic, training loop, grid search, and the row protocol."""

import numpy as np
import pytest

from cellwatch.augment import AugmentConfig, upsample_and_augment
from cellwatch.dataset import Dataset, Sample
from cellwatch.errors import DivergedError
from cellwatch.models import ModelSpec, build_model
from cellwatch.trainer import (
    EXPERIMENT_MATRIX,
    TrainConfig,
    apply_combo,
    augmented_inputs,
    check_family_input,
    enumerate_grid,
    grid_search,
    measure_inference_ms,
    predict_scores,
    run_experiment,
    split_dataset,
    train,
)


def _dummy_dataset(n, size=4):
    samples = [
        Sample(
            sample_id=f"d-{i:04d}",
            optical=np.zeros((3, size, size), dtype=np.float32),
            infrared=np.full((size, size), 22.0, dtype=np.float32),
            label=i % 2,
        )
        for i in range(n)
    ]
    return Dataset(samples=samples, image_size=size)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def test_split_sizes_832():
    split = split_dataset(_dummy_dataset(832), seed=3)
    assert (len(split.train_ids), len(split.val_ids), len(split.test_ids)) == (582, 124, 126)


def test_split_sizes_20():
    split = split_dataset(_dummy_dataset(20), seed=3)
    assert (len(split.train_ids), len(split.val_ids), len(split.test_ids)) == (14, 3, 3)


def test_split_disjoint_exhaustive_reproducible():
    ds = _dummy_dataset(101)
    a = split_dataset(ds, seed=7)
    b = split_dataset(ds, seed=7)
    c = split_dataset(ds, seed=8)
    assert a.train_ids == b.train_ids and a.val_ids == b.val_ids and a.test_ids == b.test_ids
    assert a.train_ids != c.train_ids
    all_ids = a.train_ids + a.val_ids + a.test_ids
    assert len(all_ids) == 101 and len(set(all_ids)) == 101
    assert set(all_ids) == {s.sample_id for s in ds.samples}
    tags = a.tag_of()
    assert tags[a.train_ids[0]] == "train" and tags[a.test_ids[-1]] == "test"
    assert len(tags) == 101


def test_split_fraction_validation():
    ds = _dummy_dataset(10)
    with pytest.raises(ValueError):
        split_dataset(ds, fractions=(0.5, 0.2, 0.2), seed=0)
    split = split_dataset(ds, fractions=(0.5, 0.25, 0.25), seed=0)
    assert (len(split.train_ids), len(split.val_ids), len(split.test_ids)) == (5, 2, 3)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _tiny_cnn(seed=0):
    return build_model(
        ModelSpec(family="cnn", image_size=16, conv_widths=(2, 3), fc_hidden=4, init_seed=seed)
    )


def test_zero_lr_training_is_identity(toy_inputs):
    x, labels = toy_inputs
    model = _tiny_cnn()
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    losses = train(model, TrainConfig(epochs=2, batch_size=4, optimizer="sgd", lr=0.0, seed=1), x, labels)
    assert len(losses) == 2
    for n, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[n])


def test_training_reduces_loss_and_is_deterministic(toy_inputs):
    x, labels = toy_inputs
    cfg = TrainConfig(epochs=6, batch_size=4, optimizer="adam", lr=1e-2, seed=2)
    m1, m2 = _tiny_cnn(seed=1), _tiny_cnn(seed=1)
    l1 = train(m1, cfg, x, labels)
    l2 = train(m2, cfg, x, labels)
    assert l1 == l2
    assert l1[-1] < l1[0]
    for (n, p), q in zip(m1.named_parameters().items(), m2.parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    m3 = _tiny_cnn(seed=1)
    l3 = train(m3, TrainConfig(epochs=6, batch_size=4, optimizer="adam", lr=1e-2, seed=5), x, labels)
    assert l3 != l1  # different shuffling stream


def test_divergence_raises_with_step(toy_inputs):
    x, labels = toy_inputs
    model = _tiny_cnn()
    with pytest.raises(DivergedError) as exc:
        train(model, TrainConfig(epochs=8, batch_size=4, optimizer="sgd", lr=1e20, seed=0), x, labels)
    assert isinstance(exc.value.step, int) and exc.value.step >= 0


def test_train_rejects_empty_inputs():
    model = _tiny_cnn()
    with pytest.raises(ValueError):
        train(model, TrainConfig(), np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, np.int64))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs").validate()
    with pytest.raises(ValueError):
        TrainConfig(variant="double").validate()
    with pytest.raises(ValueError):
        TrainConfig(input_type="radar").validate()
    with pytest.raises(ValueError):
        TrainConfig(upsample_factor=0).validate()


def test_predict_scores_is_softmax_prob_and_batch_invariant(toy_inputs):
    x, labels = toy_inputs
    model = _tiny_cnn(seed=2)
    scores = predict_scores(model, x, batch_size=64)
    from cellwatch.tensor import Tensor, no_grad

    with no_grad():
        z = model(Tensor(x)).logits.data
    e = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_allclose(scores, e[:, 1] / e.sum(axis=1), atol=1e-7)
    assert (scores > 0).all() and (scores < 1).all()
    np.testing.assert_array_equal(scores, predict_scores(model, x, batch_size=3))


def test_check_family_input_gate():
    with pytest.raises(ValueError, match="fusion unsupported"):
        check_family_input("vit", "fusion")
    for family, input_type, _ in EXPERIMENT_MATRIX:
        check_family_input(family, input_type)


def test_experiment_matrix_shape():
    assert len(EXPERIMENT_MATRIX) == 11
    assert EXPERIMENT_MATRIX.count(("vit", "fusion", "upaug")) == 0
    cnn_rows = [r for r in EXPERIMENT_MATRIX if r[0] == "cnn"]
    assert len(cnn_rows) == 6  # 3 inputs x 2 variants


# ---------------------------------------------------------------------------
# grid mechanics
# ---------------------------------------------------------------------------


def test_enumerate_grid_canonical_and_order_invariant():
    a = enumerate_grid({"lr": [0.01, 0.001], "optimizer": ["adam", "sgd"]})
    b = enumerate_grid({"optimizer": ["sgd", "adam"], "lr": [0.001, 0.01]})
    assert a == b
    assert len(a) == 4
    with pytest.raises(ValueError):
        enumerate_grid({})
    with pytest.raises(ValueError):
        enumerate_grid({"lr": []})


def test_apply_combo_routes_fields():
    spec = ModelSpec(family="cnn", image_size=16)
    config = TrainConfig()
    s2, c2 = apply_combo(spec, config, {"lr": 0.5, "conv_widths": [4, 8], "batch_size": 2})
    assert c2.lr == 0.5 and c2.batch_size == 2
    assert s2.conv_widths == (4, 8)
    assert spec.conv_widths == (8, 16) and config.lr == 1e-3  # originals untouched
    with pytest.raises(ValueError):
        apply_combo(spec, config, {"temperature": 1.0})


def _toy_grid_setup(toy_inputs):
    x, labels = toy_inputs
    spec = ModelSpec(family="cnn", image_size=16, conv_widths=(2, 3), fc_hidden=4, init_seed=1)
    config = TrainConfig(epochs=3, batch_size=4, optimizer="adam", lr=1e-2, seed=4, input_type="optical")
    return spec, config, x[:12], labels[:12], x[12:], labels[12:]


def test_grid_search_picks_survivor_over_diverged(toy_inputs):
    spec, config, tx, ty, vx, vy = _toy_grid_setup(toy_inputs)
    grid = {"lr": [1e20, 1e-2], "optimizer": ["sgd"]}
    best_spec, best_config, best_combo, results = grid_search(spec, config, grid, tx, ty, vx, vy)
    assert best_combo == {"lr": 1e-2, "optimizer": "sgd"}
    assert best_config.lr == 1e-2 and best_spec.family == "cnn"
    by_status = {r["status"] for r in results}
    assert by_status == {"ok", "diverged"}
    diverged = next(r for r in results if r["status"] == "diverged")
    assert diverged["roc_auc"] == 0.0 and "diverged_step" in diverged


def test_grid_search_skips_invalid_combo(toy_inputs):
    _, config, tx, ty, vx, vy = _toy_grid_setup(toy_inputs)
    spec = ModelSpec(family="vit", image_size=16, patch_size=4, embed_dim=8, depth=1, heads=2, mlp_hidden=8, init_seed=1)
    grid = {"patch_size": [5, 4]}  # 5 does not divide 16
    _, _, best_combo, results = grid_search(spec, config, grid, tx, ty, vx, vy)
    assert best_combo == {"patch_size": 4}
    skipped = next(r for r in results if r["status"] == "skipped")
    assert "divide" in skipped["reason"]
    with pytest.raises(ValueError, match="skipped"):
        grid_search(spec, config, {"patch_size": [5, 7]}, tx, ty, vx, vy)


def test_grid_search_deterministic(toy_inputs):
    spec, config, tx, ty, vx, vy = _toy_grid_setup(toy_inputs)
    grid = {"lr": [1e-2, 1e-3]}
    r1 = grid_search(spec, config, grid, tx, ty, vx, vy)
    r2 = grid_search(spec, config, grid, tx, ty, vx, vy)
    assert r1[2] == r2[2]
    assert r1[3] == r2[3]


# ---------------------------------------------------------------------------
# full per-row protocol on a small rendered dataset
# ---------------------------------------------------------------------------


def _row_kwargs(variant="raw"):
    return dict(
        grid={"lr": [1e-2]},
        spec=ModelSpec(family="cnn", image_size=64, conv_widths=(2, 3), fc_hidden=4, init_seed=3),
        config=TrainConfig(epochs=2, batch_size=8, seed=6),
        aug_config=AugmentConfig(seed=5),
        split_seed=11,
    )


def test_run_experiment_row_structure(small_dataset):
    row, model, details = run_experiment(small_dataset, "cnn", "optical", "raw", **_row_kwargs())
    for key in (
        "family", "model", "input_type", "upsampled", "augmented",
        "roc_auc", "pr_auc", "roc_curve", "pr_curve", "loss_curve", "test_size",
    ):
        assert key in row, key
    assert row["model"] == "ShallowCnn" and row["input_type"] == "optical"
    assert row["upsampled"] is False and row["augmented"] is False
    assert row["test_size"] == 6
    assert details["split_sizes"] == [28, 6, 6]
    assert details["best_params"] == {"lr": 1e-2}
    assert 0.0 <= row["roc_auc"] <= 1.0
    assert details["timing"]["train_seconds"] > 0
    assert model.spec.family == "cnn"


def test_run_experiment_deterministic(small_dataset):
    row1, _, _ = run_experiment(small_dataset, "cnn", "infrared", "upaug", **_row_kwargs())
    row2, _, _ = run_experiment(small_dataset, "cnn", "infrared", "upaug", **_row_kwargs())
    assert row1 == row2
    assert row1["upsampled"] is True and row1["augmented"] is True


def test_run_experiment_rejects_vit_fusion(small_dataset):
    with pytest.raises(ValueError, match="fusion unsupported"):
        run_experiment(small_dataset, "vit", "fusion", "upaug", **_row_kwargs())


def test_upsampling_never_touches_test_ids(small_dataset):
    split = split_dataset(small_dataset, seed=11)
    train_set = small_dataset.subset(split.train_ids)
    aug = upsample_and_augment(train_set, 2, AugmentConfig(seed=5))
    sources = {s.provenance["source_id"] for s in aug.samples}
    assert sources <= set(split.train_ids)
    assert sources.isdisjoint(split.test_ids)
    assert sources.isdisjoint(split.val_ids)


def test_augmented_inputs_shapes_and_balance(small_dataset):
    split = split_dataset(small_dataset, seed=11)
    sub = small_dataset.subset(split.train_ids)
    inputs, labels = augmented_inputs(sub, 2, AugmentConfig(seed=5), "fusion")
    assert inputs.shape == (2 * len(split.train_ids), 6, 64, 64)
    assert inputs.dtype == np.float32
    assert set(np.unique(labels)) <= {0, 1}


def test_measure_inference_returns_positive():
    model = _tiny_cnn()
    x = np.zeros((3, 16, 16), dtype=np.float32)
    ms = measure_inference_ms(model, x)
    assert ms > 0.0
