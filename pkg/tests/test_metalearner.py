"""Weight-generation checks: conditioning layout, degeneracy, gradients, io."""

import numpy as np
import pytest

from persage.estimator import class_scores_batch
from persage.losses import LossConfig, batch_loss
from persage.mathcore import grad_check
from persage.metalearner import (
    CheckpointError,
    Dims,
    build_residual_input,
    generate_class_weight,
    generate_weights,
    generate_weights_backward,
    generate_weights_batch,
    init_params,
    load_params,
    one_hot,
    save_params,
)


def small_dims():
    return Dims(n_classes=5, age_dim=8, id_dim=6, hidden_dim=16)


def test_one_hot_hand_cases():
    assert np.array_equal(one_hot(0, 3), [1.0, 0.0, 0.0])
    assert np.array_equal(one_hot(2, 3), [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        one_hot(5, 3)
    with pytest.raises(ValueError):
        one_hot(-1, 3)


def test_build_residual_input_hand_case():
    out = build_residual_input(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 1, 2)
    assert np.array_equal(out, [1.0, 2.0, 3.0, 4.0, 0.0, 1.0])


def test_build_residual_input_length_at_reference_dims():
    # 2048 identity + 4096 weight + 101 classes = 6245 conditioning inputs
    out = build_residual_input(np.zeros(2048), np.zeros(4096), 7, 101)
    assert out.shape == (6245,)
    assert out[2048 + 4096 + 7] == 1.0


def test_init_params_seeded():
    dims = small_dims()
    a = init_params(dims, 42)
    b = init_params(dims, 42)
    c = init_params(dims, 43)
    assert np.array_equal(a.w_common, b.w_common)
    assert np.array_equal(a.output.weight, b.output.weight)
    assert not np.array_equal(a.w_common, c.w_common)
    assert np.array_equal(a.hidden.bias, np.zeros(dims.hidden_dim))
    with pytest.raises(ValueError):
        Dims(n_classes=0, age_dim=1, id_dim=1, hidden_dim=1)


def test_init_params_accepts_reference_scale():
    # large-model dims must construct; memory ~1.4 GB, touch nothing heavy after
    dims = Dims(n_classes=101, age_dim=4096, id_dim=2048, hidden_dim=8192)
    params = init_params(dims, 0)
    assert params.hidden.weight.shape == (8192, 6245)
    del params


def test_zero_residual_degenerates_to_common_table():
    dims = small_dims()
    params = init_params(dims, 7)
    params.output.weight[:] = 0.0
    params.output.bias[:] = 0.0
    rng = np.random.default_rng(0)
    for _ in range(10):
        h = rng.normal(size=dims.id_dim)
        w = generate_weights(params, h, mode="eval")
        assert np.array_equal(w, params.w_common)


def test_distinct_identities_yield_distinct_weights():
    dims = small_dims()
    params = init_params(dims, 7)
    rng = np.random.default_rng(1)
    for _ in range(10):
        h1 = rng.normal(size=dims.id_dim)
        h2 = rng.normal(size=dims.id_dim)
        w1 = generate_weights(params, h1, mode="eval")
        w2 = generate_weights(params, h2, mode="eval")
        assert not np.allclose(w1, w2)
        # identical input is bitwise reproducible
        assert np.array_equal(w1, generate_weights(params, h1, mode="eval"))


def test_residual_depends_only_on_conditioning():
    # the per-row residual never sees age features, so rows match across ops
    dims = small_dims()
    params = init_params(dims, 3)
    rng = np.random.default_rng(2)
    h = rng.normal(size=dims.id_dim)
    full = generate_weights(params, h, mode="eval")
    for i in range(dims.n_classes):
        row = generate_class_weight(params, h, i, mode="eval")
        assert np.abs(row - full[i]).max() < 1e-12


def test_batch_matches_per_sample_eval():
    dims = small_dims()
    params = init_params(dims, 11)
    rng = np.random.default_rng(4)
    ids = rng.normal(size=(6, dims.id_dim))
    batch, _ = generate_weights_batch(params, ids, mode="eval")
    for b in range(6):
        single = generate_weights(params, ids[b], mode="eval")
        assert np.abs(batch[b] - single).max() < 1e-12
    # B=1 is bitwise the per-sample op
    one, _ = generate_weights_batch(params, ids[:1], mode="eval")
    assert np.array_equal(one[0], generate_weights(params, ids[0], mode="eval"))


def test_eval_batch_permutation_equivariant():
    dims = small_dims()
    params = init_params(dims, 11)
    rng = np.random.default_rng(5)
    ids = rng.normal(size=(5, dims.id_dim))
    perm = rng.permutation(5)
    full, _ = generate_weights_batch(params, ids, mode="eval")
    permuted, _ = generate_weights_batch(params, ids[perm], mode="eval")
    assert np.array_equal(full[perm], permuted)


def test_train_mode_updates_running_stats():
    dims = small_dims()
    params = init_params(dims, 11)
    rng = np.random.default_rng(6)
    ids = rng.normal(size=(3, dims.id_dim))
    before = params.bn.running_mean.copy()
    generate_weights_batch(params, ids, mode="train")
    assert not np.array_equal(params.bn.running_mean, before)


def test_full_pipeline_gradients():
    # Through weight generation, scores, and the joint loss, in train mode.
    # Two degeneracies make a finite-difference check meaningless and are
    # screened out per seed before any comparison:
    #   - a hinge sitting within 1e-3 of its kink (two-sided step straddles it)
    #   - a coordinate whose analytic gradient is an exact zero (a hidden unit
    #     ReLU-active across all of a sample's class rows shifts that sample's
    #     scores uniformly, which both loss terms ignore); relative comparison
    #     of an exact zero only measures difference noise.
    dims = small_dims()
    config = LossConfig(lam=0.2, delta=2.0)
    checked = 0
    for seed in range(40):
        if checked >= 10:
            break
        rng = np.random.default_rng(seed)
        params = init_params(dims, seed)
        ids = rng.normal(scale=0.5, size=(3, dims.id_dim))
        age = rng.normal(size=(3, dims.age_dim))
        labels = rng.integers(0, dims.n_classes, size=3).astype(np.float64)

        def loss_fn():
            w, _ = generate_weights_batch(params, ids, mode="train")
            scores = class_scores_batch(w, age)
            return batch_loss(scores, labels, None, config)[0]

        w, cache = generate_weights_batch(params, ids, mode="train")
        scores = class_scores_batch(w, age)
        _, grad_scores = batch_loss(scores, labels, None, config)
        params.zero_grad()
        grad_w = np.einsum("bk,bd->bkd", grad_scores, age)
        generate_weights_backward(params, grad_w, cache)
        names = {name: pg[0] for name, pg in params.trainable().items()}
        grads = {name: pg[1] for name, pg in params.trainable().items()}
        gaps = scores[:, 1:] - scores[:, :-1]
        margin_dist = np.minimum(np.abs(config.delta - gaps),
                                 np.abs(config.delta + gaps)).min()
        if margin_dist < 1e-3 or min(np.abs(g).min() for g in grads.values()) < 1e-7:
            continue
        report = grad_check(loss_fn, names, grads)
        assert report.passed, f"seed {seed}: {report}"
        checked += 1
    assert checked >= 10, f"only {checked} well-conditioned seeds in range"


def test_checkpoint_round_trip(tmp_path):
    dims = small_dims()
    params = init_params(dims, 99)
    params.bn.running_mean[:] = np.random.default_rng(1).normal(size=dims.hidden_dim)
    params.bn.running_var[:] = np.random.default_rng(2).uniform(0.5, 2.0,
                                                                size=dims.hidden_dim)
    path = tmp_path / "params.mapc"
    save_params(path, params)
    loaded = load_params(path)
    for name in ("w_common",):
        assert np.array_equal(getattr(loaded, name), getattr(params, name))
    assert np.array_equal(loaded.hidden.weight, params.hidden.weight)
    assert np.array_equal(loaded.bn.running_var, params.bn.running_var)
    assert np.array_equal(loaded.output.bias, params.output.bias)
    # byte-identical when re-saved
    save_params(tmp_path / "again.mapc", loaded)
    assert (tmp_path / "params.mapc").read_bytes() == (tmp_path / "again.mapc").read_bytes()


def test_checkpoint_corruption_reports_offsets(tmp_path):
    dims = small_dims()
    params = init_params(dims, 99)
    path = tmp_path / "params.mapc"
    save_params(path, params)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.mapc"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="offset 0"):
        load_params(bad_magic)

    bad_version = tmp_path / "version.mapc"
    bad_version.write_bytes(bytes(raw[:4]) + b"\x09" + bytes(raw[5:]))
    with pytest.raises(CheckpointError, match="offset 4"):
        load_params(bad_version)

    truncated = tmp_path / "trunc.mapc"
    truncated.write_bytes(bytes(raw[:100]))
    with pytest.raises(CheckpointError, match="offset"):
        load_params(truncated)

    trailing = tmp_path / "trail.mapc"
    trailing.write_bytes(bytes(raw) + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_params(trailing)

    nan_block = tmp_path / "nan.mapc"
    corrupt = bytearray(raw)
    corrupt[21:29] = np.float64(np.nan).tobytes()
    nan_block.write_bytes(bytes(corrupt))
    with pytest.raises(CheckpointError, match="offset 21"):
        load_params(nan_block)
