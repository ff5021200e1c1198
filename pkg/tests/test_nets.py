import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dastkit.engine import ConfigurationError, Tape, Tensor, ops
from dastkit.nets import (
    LatentBatch,
    build_classifier,
    build_generator,
    predict,
    sample_latent,
)


@pytest.mark.parametrize("tag,depth", [("small", 3), ("medium", 4), ("large", 5)])
def test_classifier_depth_counts(tag, depth):
    model = build_classifier(tag, (1, 12, 12), 10, seed=0)
    assert model.conv_layer_count() == depth
    out = model.forward(Tensor(np.zeros((2, 1, 12, 12), dtype=np.float32)))
    assert out.shape == (2, 10)


def test_classifier_large_on_28x28():
    model = build_classifier("large", (1, 28, 28), 10, seed=0)
    assert model.conv_layer_count() == 5
    out = model.forward(Tensor(np.zeros((1, 1, 28, 28), dtype=np.float32)))
    assert out.shape == (1, 10)


def test_classifier_build_deterministic():
    a = build_classifier("medium", (1, 12, 12), 4, seed=123)
    b = build_classifier("medium", (1, 12, 12), 4, seed=123)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert_array_equal(pa.data, pb.data)
    c = build_classifier("medium", (1, 12, 12), 4, seed=124)
    assert any((pa.data != pc.data).any()
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_classifier_unknown_tag():
    with pytest.raises(ConfigurationError, match="tag"):
        build_classifier("huge", (1, 12, 12), 10)


def test_classifier_input_too_small():
    with pytest.raises(ConfigurationError, match=">= 8"):
        build_classifier("small", (1, 6, 6), 10)


def test_generator_branch_counts_and_parameter_split():
    gen = build_generator(10, 64, (1, 12, 12), seed=0)
    assert gen.num_classes == 10
    branch = gen.branches[0].num_parameters()
    shared = gen.shared.num_parameters()
    assert gen.num_parameters() == 10 * branch + shared

    # analytic count for the declared layer dims
    c0, c1, h0, w0 = 64, 32, 3, 3
    expect_branch = (64 * c0 * h0 * w0 + c0 * h0 * w0) \
        + (c0 * c1 * 16 + c1) + (c1 * c1 * 16 + c1)
    expect_shared = (c1 * c1 * 9 + c1) + (c1 * 1 * 9 + 1)
    assert branch == expect_branch
    assert shared == expect_shared


def test_generator_two_class_case():
    gen = build_generator(2, 8, (1, 8, 8), seed=1, base_channels=4)
    assert len(gen.branches) == 2


def test_generator_rejects_bad_geometry():
    with pytest.raises(ConfigurationError, match="stride"):
        build_generator(3, 8, (1, 10, 10))
    with pytest.raises(ConfigurationError):
        build_generator(1, 8, (1, 8, 8))


def test_generator_output_range_closed_interval():
    gen = build_generator(3, 8, (1, 8, 8), seed=2, base_channels=4)
    rng = np.random.default_rng(0)
    batch = sample_latent(rng, 1000, 8, 3)
    out = gen.generate(batch).data
    lo, hi = gen.output_range
    assert out.shape == (1000, 1, 8, 8)
    assert out.min() >= lo and out.max() <= hi


def test_generator_deterministic_forward():
    gen = build_generator(3, 8, (1, 8, 8), seed=2, base_channels=4)
    batch = sample_latent(np.random.default_rng(5), 6, 8, 3)
    a = gen.generate(batch).data
    b = gen.generate(LatentBatch(Tensor(batch.z.data.copy()), batch.labels.copy())).data
    assert_array_equal(a, b)


def test_generator_same_noise_different_label_differs():
    gen = build_generator(4, 8, (1, 8, 8), seed=3, base_channels=4)
    rng = np.random.default_rng(1)
    for trial in range(100):
        z = rng.standard_normal((1, 8)).astype(np.float32)
        pair = LatentBatch(Tensor(np.vstack([z, z])), np.array([trial % 4, (trial + 1) % 4]))
        out = gen.generate(pair).data
        assert (out[0] != out[1]).any()


def test_generator_label_out_of_range():
    gen = build_generator(3, 8, (1, 8, 8), seed=0, base_channels=4)
    batch = LatentBatch(Tensor(np.zeros((2, 8), dtype=np.float32)), np.array([0, 3]))
    with pytest.raises(IndexError):
        gen.generate(batch)


def test_generator_output_order_matches_batch_order():
    gen = build_generator(3, 8, (1, 8, 8), seed=4, base_channels=4)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((5, 8)).astype(np.float32)
    labels = np.array([2, 0, 1, 0, 2])
    full = gen.generate(LatentBatch(Tensor(z), labels)).data
    for i in range(5):
        single = gen.generate(
            LatentBatch(Tensor(z[i:i + 1]), labels[i:i + 1])).data
        assert_allclose(full[i], single[0], atol=1e-6)


def test_branch_perturbation_touches_only_its_samples():
    gen = build_generator(3, 8, (1, 8, 8), seed=5, base_channels=4)
    batch = sample_latent(np.random.default_rng(3), 9, 8, 3)
    before = gen.generate(batch).data.copy()
    k = 1
    for p in gen.branches[k].parameters():
        p.data += 0.5
    after = gen.generate(batch).data
    for i, n in enumerate(batch.labels):
        if n == k:
            assert (before[i] != after[i]).any()
        else:
            assert_array_equal(before[i], after[i])


def test_branch_gradient_isolation():
    # loss over a batch missing class 2 must leave branch 2 untouched
    gen = build_generator(3, 8, (1, 8, 8), seed=6, base_channels=4)
    batch = LatentBatch(
        Tensor(np.random.default_rng(4).standard_normal((4, 8)).astype(np.float32)),
        np.array([0, 0, 1, 1]))
    gen.zero_grad()
    with Tape() as tape:
        loss = ops.sum_all(gen.generate(batch))
    tape.backward(loss)
    assert all(p.grad_populated for p in gen.branches[0].parameters())
    assert all(p.grad_populated for p in gen.branches[1].parameters())
    assert not any(p.grad_populated for p in gen.branches[2].parameters())
    assert all((p.grad == 0).all() for p in gen.branches[2].parameters())
    assert all(p.grad_populated for p in gen.shared.parameters())


def test_predict_tie_break_and_order():
    model = build_classifier("small", (1, 12, 12), 3, seed=0)
    logits = Tensor(np.array([[0.0, 0.0, 0.0], [1.0, 3.0, 2.0]], dtype=np.float32))
    assert_array_equal(ops.argmax_rows(logits), [0, 1])

    x = Tensor(np.random.default_rng(0).random((4, 1, 12, 12), dtype=np.float32))
    logits_t, probs, labels = predict(model, x)
    assert_allclose(probs.data.sum(axis=1), np.ones(4), atol=1e-6)
    assert_array_equal(labels, np.argmax(logits_t.data, axis=1))


def test_argmax_invariant_under_row_shift():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((6, 5))
    shifted = logits + rng.standard_normal((6, 1))
    assert_array_equal(np.argmax(logits, axis=1), np.argmax(shifted, axis=1))


def test_load_arrays_shape_mismatch():
    a = build_classifier("small", (1, 12, 12), 3, seed=0)
    b = build_classifier("small", (1, 12, 12), 4, seed=0)
    arrays = [arr.copy() for _, arr in b.named_arrays()]
    with pytest.raises(ConfigurationError, match="shape mismatch"):
        a.load_arrays(arrays)


def test_load_arrays_roundtrip():
    a = build_classifier("small", (1, 12, 12), 3, seed=1)
    b = build_classifier("small", (1, 12, 12), 3, seed=2)
    b.load_arrays([arr.copy() for _, arr in a.named_arrays()])
    for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
        assert_array_equal(x, y)
