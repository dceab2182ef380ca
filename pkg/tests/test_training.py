"""Loss pieces, the balanced sampler, Adam, the fit loop, and grad checks."""

import numpy as np
import pytest

from oracles import fd_gradient

from emergencynet.model import ConvBnAct, GlobalAvgPool, ModelGraph, build_emergencynet
from emergencynet.ops import ConvKernel
from emergencynet.training import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    balanced_batch,
    cosine_lr,
    cross_entropy,
    evaluate,
    fit,
    fit_index,
    grad_check,
    l2_penalty,
    smooth_labels,
)


def linear_probe_model(num_classes=3, hw=(8, 8), seed=0):
    # 1x1 biased conv straight into global pooling: logits are an affine
    # map of per-channel means, so the whole graph is linear in its params
    rng = np.random.default_rng(seed)
    k = ConvKernel.he_init(rng, num_classes, 3, 1, 1, with_bias=True)
    return ModelGraph([ConvBnAct("head", k), GlobalAvgPool("gap", num_classes)],
                      num_classes, hw)


def channel_mean_dataset(per_class, num_classes=3, hw=(8, 8), seed=0):
    # class c = channel c noticeably brighter; separable by channel means
    rng = np.random.default_rng(seed)
    n = per_class * num_classes
    y = np.repeat(np.arange(num_classes), per_class)
    x = rng.uniform(0.0, 60.0, size=(n, 3, hw[0], hw[1])).astype(np.float32)
    for i in range(n):
        x[i, y[i] % 3] += 120.0
    order = rng.permutation(n)
    return x[order], y[order]


# ---------------------------------------------------------------- schedule


def test_cosine_lr_endpoints():
    assert abs(cosine_lr(0, 300, 0.1) - 0.1) < 1e-12
    assert abs(cosine_lr(150, 300, 0.1) - 0.05) < 1e-12
    assert abs(cosine_lr(300, 300, 0.1) - 0.0) < 1e-12


def test_cosine_lr_monotone_non_increasing():
    values = [cosine_lr(t, 120, 0.3) for t in range(121)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_lr_range_validation():
    with pytest.raises(ValueError):
        cosine_lr(-1, 300, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(301, 300, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)


# ------------------------------------------------------------------- loss


def test_smooth_labels_example():
    q = smooth_labels([0], 5, 0.1)
    np.testing.assert_allclose(q[0], [0.92, 0.02, 0.02, 0.02, 0.02], atol=1e-15)


def test_smooth_labels_zero_eps_is_one_hot():
    q = smooth_labels([2, 0], 4, 0.0)
    np.testing.assert_array_equal(q, [[0, 0, 1, 0], [1, 0, 0, 0]])


def test_smooth_labels_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for eps in (0.0, 0.1, 0.5, 0.99):
        q = smooth_labels(rng.integers(0, 7, size=40), 7, eps)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


def test_smooth_labels_validation():
    with pytest.raises(ValueError):
        smooth_labels([5], 5, 0.1)
    with pytest.raises(ValueError):
        smooth_labels([0], 5, 1.0)


def test_cross_entropy_hand_value():
    logits = np.array([[2.0, 0.0, -1.0]])
    targets = smooth_labels([0], 3, 0.0)
    loss, _ = cross_entropy(logits, targets)
    z = logits[0] - logits[0].max()
    expected = -(z[0] - np.log(np.exp(z).sum()))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((6, 5))
    targets = smooth_labels(rng.integers(0, 5, size=6), 5, 0.1)
    _, grad = cross_entropy(logits, targets)
    fd = fd_gradient(lambda z: cross_entropy(z, targets)[0], logits)
    np.testing.assert_allclose(grad, fd, atol=1e-8)


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 5)), np.zeros((3, 5)))


def test_l2_penalty_touches_conv_weights_only():
    params = {
        "stem.w": np.array([2.0]),
        "head.b": np.array([3.0]),
        "stem.bn.gamma": np.array([4.0]),
    }
    assert l2_penalty(params, 0.1) == pytest.approx(0.5 * 0.1 * 4.0)
    assert l2_penalty(params, 0.0) == 0.0


# ---------------------------------------------------------------- sampler


def test_balanced_batch_counts_64_over_5():
    rng = np.random.default_rng(0)
    pools = [np.arange(i * 100, i * 100 + 30) for i in range(5)]
    for _ in range(50):
        idx = balanced_batch(rng, pools, 64)
        assert idx.size == 64
        counts = sorted(np.bincount(idx // 100, minlength=5))
        assert counts == [12, 13, 13, 13, 13]


def test_balanced_batch_divisible_case():
    rng = np.random.default_rng(1)
    pools = [np.arange(i * 100, i * 100 + 20) for i in range(5)]
    idx = balanced_batch(rng, pools, 60)
    assert list(np.bincount(idx // 100, minlength=5)) == [12] * 5


def test_balanced_batch_long_run_frequency():
    rng = np.random.default_rng(2)
    pools = [np.arange(i * 1000, i * 1000 + n) for i, n in enumerate([5, 50, 500, 50, 5])]
    totals = np.zeros(5, dtype=np.int64)
    batches = 3000
    for _ in range(batches):
        totals += np.bincount(balanced_batch(rng, pools, 64) // 1000, minlength=5)
    freq = totals / (64 * batches)
    assert np.all(np.abs(freq - 0.2) < 0.01)


def test_balanced_batch_oversamples_small_pools():
    rng = np.random.default_rng(3)
    pools = [np.array([7]), np.arange(100, 150)]
    idx = balanced_batch(rng, pools, 10)
    assert (idx == 7).sum() == 5


def test_balanced_batch_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        balanced_batch(rng, [], 8)
    with pytest.raises(ValueError):
        balanced_batch(rng, [np.arange(3), np.array([])], 8)


# -------------------------------------------------------------- optimizer


def test_adam_first_step_magnitude():
    p = {"a.w": np.array([1.0, -2.0])}
    opt = Adam(p)
    g = np.array([0.5, -0.25])
    opt.step({"a.w": g.copy()}, lr=0.01)
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    np.testing.assert_allclose(p["a.w"], [1.0 - 0.01, -2.0 + 0.01], atol=1e-6)


def test_adam_zero_gradient_is_a_fixed_point():
    p = {"a.w": np.array([3.0]), "a.b": np.array([-1.0])}
    opt = Adam(p, l2=0.0)
    for _ in range(3):
        opt.step({"a.w": np.zeros(1), "a.b": np.zeros(1)}, lr=0.1)
    np.testing.assert_array_equal(p["a.w"], [3.0])
    np.testing.assert_array_equal(p["a.b"], [-1.0])


def test_adam_l2_decays_conv_weights_only():
    p = {"a.w": np.array([3.0]), "a.b": np.array([-1.0])}
    opt = Adam(p, l2=0.01)
    opt.step({"a.w": np.zeros(1), "a.b": np.zeros(1)}, lr=0.1)
    assert p["a.w"][0] < 3.0      # weight decays toward zero
    assert p["a.b"][0] == -1.0    # bias exempt


# ------------------------------------------------------------ fit/evaluate


def test_evaluate_perfect_model():
    model = linear_probe_model()
    w = model.trainable_params()
    w["head.w"][:] = 0.0
    for c in range(3):
        w["head.w"][c, c, 0, 0] = 1.0
    w["head.b"][:] = 0.0
    x, y = channel_mean_dataset(10)
    out = evaluate(model, x, y, batch_size=8)
    assert out["accuracy"] == 1.0
    assert out["mean_f1"] == 1.0
    assert np.isfinite(out["loss"])


def test_fit_learns_separable_toy_problem():
    model = linear_probe_model(seed=5)
    x, y = channel_mean_dataset(40, seed=5)
    vx, vy = channel_mean_dataset(15, seed=6)
    cfg = TrainConfig(epochs=5, batch_size=15, iters_per_epoch=8, lr0=0.05,
                      seed=1, l2=1e-4)
    history, best_state = fit(model, x, y, vx, vy, cfg)
    assert len(history["epoch"]) == 5
    assert max(history["val_f1"]) >= 0.95
    assert history["best_val_f1"] == max(history["val_f1"])
    assert set(best_state) == set(model.state_dict())


def test_fit_is_deterministic_for_fixed_seed():
    cfg = TrainConfig(epochs=2, batch_size=12, iters_per_epoch=5, lr0=0.02, seed=9)
    runs = []
    for _ in range(2):
        model = linear_probe_model(seed=3)
        x, y = channel_mean_dataset(20, seed=2)
        history, _ = fit(model, x, y, x, y, cfg)
        runs.append((history["train_loss"], history["val_f1"]))
    assert runs[0] == runs[1]


def test_fit_zero_lr_keeps_weights():
    model = linear_probe_model(seed=1)
    before = {k: v.copy() for k, v in model.trainable_params().items()}
    x, y = channel_mean_dataset(10, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=9, iters_per_epoch=4, lr0=0.0, seed=0)
    fit(model, x, y, x, y, cfg)
    for k, v in model.trainable_params().items():
        np.testing.assert_array_equal(v, before[k])


def test_fit_divergence_aborts_with_history():
    model = linear_probe_model(seed=1)
    x, y = channel_mean_dataset(10, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=9, iters_per_epoch=4, lr0=0.01,
                      seed=0, divergence_loss=1e-9)
    with pytest.raises(TrainingDiverged) as exc:
        fit(model, x, y, x, y, cfg)
    assert hasattr(exc.value, "history")


def test_fit_requires_every_class():
    model = linear_probe_model()
    x, y = channel_mean_dataset(6)
    y = np.zeros_like(y)  # classes 1 and 2 vanish
    with pytest.raises(ValueError):
        fit(model, x, y, x, y, TrainConfig(epochs=1, batch_size=6, iters_per_epoch=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr0=-0.1)
    assert TrainConfig(lr_total_epochs=500).cosine_horizon == 500
    assert TrainConfig(epochs=30).cosine_horizon == 30


def _tiny_image_tree(root, seed=0):
    from PIL import Image

    rng = np.random.default_rng(seed)
    for c, name in enumerate(["burning", "normal"]):
        d = root / name
        d.mkdir()
        for i in range(8):
            arr = (rng.random((20, 20, 3)) * 255).astype(np.uint8)
            arr[..., c] = 220  # give each class a dominant channel
            Image.fromarray(arr).save(d / f"{i}.png")


def test_fit_index_matches_in_memory_fit(tmp_path):
    from emergencynet.data import index_dataset, load_arrays

    _tiny_image_tree(tmp_path)
    index = index_dataset(str(tmp_path), ratios=(0.5, 0.5, 0.0), seed=0)
    cfg = TrainConfig(epochs=2, batch_size=8, iters_per_epoch=3, lr0=0.01, seed=5)

    lazy = build_emergencynet(num_classes=2, input_hw=(16, 16), seed=9)
    hist_lazy, state_lazy = fit_index(lazy, index, cfg)

    tx, ty = load_arrays(index, index.split_ids("train"), target=(16, 16))
    vx, vy = load_arrays(index, index.split_ids("val"), target=(16, 16))
    eager = build_emergencynet(num_classes=2, input_hw=(16, 16), seed=9)
    hist_eager, state_eager = fit(eager, tx, ty, vx, vy, cfg)

    assert hist_lazy == hist_eager  # same batches, same arithmetic
    for k in state_eager:
        assert np.array_equal(state_lazy[k], state_eager[k]), k


def test_fit_index_rejects_class_count_mismatch(tmp_path):
    from emergencynet.data import index_dataset

    _tiny_image_tree(tmp_path)
    index = index_dataset(str(tmp_path), seed=0)
    net = build_emergencynet(num_classes=5, input_hw=(16, 16), seed=0)
    with pytest.raises(ValueError, match="classes"):
        fit_index(net, index, TrainConfig(epochs=1, batch_size=4, iters_per_epoch=1))


# -------------------------------------------------------------- grad check


def test_grad_check_purely_linear_graph_is_exact():
    # the chord of a linear map equals its derivative at any step size,
    # so a large step only suppresses roundoff
    model = linear_probe_model(seed=2)
    x = np.random.default_rng(2).random((4, 3, 8, 8))
    report = grad_check(model, x, n_probes=100, h=1e-2, seed=0)
    assert report["probes"] == 100
    assert report["max_rel_error"] < 1e-7


def test_grad_check_max_fusion_graph():
    net = build_emergencynet(input_hw=(16, 16), fusion="max", seed=3)
    x = np.random.default_rng(3).random((2, 3, 16, 16))
    report = grad_check(net, x, n_probes=40, seed=3)
    assert report["probes"] >= 25
    assert report["max_rel_error"] < 1e-3, report["worst"]
