import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zslab import tensor as T
from zslab.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy_loss,
    dropout,
    embedding_gather,
    forward_op,
    layer_norm,
    matmul,
    max_pool,
    mean_pool,
    relu,
    scale,
    softmax,
)

from helpers import fd_gradient, grads_close


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    out = matmul(a, eye)
    assert np.array_equal(out.data, a.data)


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_layer_norm_matches_direct_formula():
    x = np.array([2.0, 4.0, 6.0])
    eps = 1e-5
    expected = (x - x.mean()) / np.sqrt(x.var() + eps)  # direct formula oracle
    out = layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=eps)
    assert np.allclose(out.data, expected, atol=1e-12)
    assert abs(out.data.mean()) < 1e-12
    assert abs(out.data.var() - 1.0) < 1e-4  # eps shrinks variance slightly


def test_cross_entropy_uniform_logits_ln_vocab():
    v = 7
    logits = Tensor(np.zeros((3, v)))
    loss = cross_entropy_loss(logits, [0, 3, 6])
    assert abs(loss.item() - math.log(v)) < 1e-12


def test_cross_entropy_large_margin_goes_to_zero():
    logits = np.full((1, 5), -50.0)
    logits[0, 2] = 50.0
    loss = cross_entropy_loss(Tensor(logits), [2])
    assert loss.item() < 1e-10


def test_cross_entropy_matches_bruteforce_softmax():
    # Independent enumeration oracle: explicit softmax + picked log prob.
    logits = np.array([[0.5, -1.2, 2.0], [1.0, 1.0, -0.5]])
    targets = [2, 0]
    expected = 0.0
    for row, t in zip(logits, targets):
        p = np.exp(row) / np.exp(row).sum()
        expected += -math.log(p[t])
    expected /= 2
    loss = cross_entropy_loss(Tensor(logits), targets)
    assert abs(loss.item() - expected) < 1e-12


def test_cross_entropy_ignores_marked_positions():
    logits = np.array([[0.5, -1.2, 2.0], [100.0, 0.0, 0.0]])
    full = cross_entropy_loss(Tensor(logits[:1]), [2]).item()
    with_ignored = cross_entropy_loss(Tensor(logits), [2, -1]).item()
    assert abs(full - with_ignored) < 1e-12


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ValueError, match="empty loss"):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [-1, -1])


def test_backward_sum_gives_ones():
    with Tape() as tape:
        x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
        loss = matmul(x, Tensor(np.ones((3, 1))))
        backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((1, 3)))


def test_backward_dot_product():
    with Tape() as tape:
        x = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
        y = Tensor(np.array([[4.0], [5.0], [6.0]]), requires_grad=True)
        loss = matmul(x, y)
        backward(tape, loss)
    assert np.array_equal(x.grad, y.data.T)
    assert np.array_equal(y.grad, x.data.T)


def test_backward_unreached_tensor_gets_zero_grad():
    with Tape() as tape:
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        unused = Tensor(np.array([[5.0, 5.0]]), requires_grad=True)
        tape.watch(unused)
        loss = matmul(x, Tensor(np.ones((2, 1))))
        backward(tape, loss)
    assert np.array_equal(unused.grad, np.zeros((1, 2)))


def test_backward_rejects_non_scalar():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        out = relu(x)
        with pytest.raises(ShapeError):
            backward(tape, out)


# ---------------------------------------------------------------------------
# Per-kind gradient checks against the finite-difference oracle. For each op
# we probe the vector-Jacobian product with a fixed random cotangent g:
# d/dx <f(x), g> must match the analytic backward rule.
# ---------------------------------------------------------------------------


def _vjp_case(kind, arrays, attrs, rng):
    saved = {}
    out = T._FORWARD[kind]([a for a in arrays], dict(attrs), saved)
    g = rng.normal(size=out.shape)

    def scalar():
        s = {}
        if "mask" in saved and kind == "dropout":
            s["mask"] = saved["mask"]
        val = T._FORWARD[kind]([a for a in arrays], dict(attrs), s)
        return float((val * g).sum())

    numeric = fd_gradient(scalar, arrays)
    analytic = T._BACKWARD[kind]([a for a in arrays], g, dict(attrs), saved)
    return analytic, numeric


def _op_cases(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 5)
    m = rng.integers(2, 5)
    k = rng.integers(2, 5)
    b = rng.integers(1, 4)
    cases = [
        ("matmul", [rng.normal(size=(m, k)), rng.normal(size=(k, n))], {}),
        (
            "matmul",
            [rng.normal(size=(b, m, k)), rng.normal(size=(k, n))],
            {},
        ),
        (
            "matmul",
            [rng.normal(size=(b, m, k)), rng.normal(size=(b, n, k))],
            {"transpose_b": True},
        ),
        ("add", [rng.normal(size=(m, n)), rng.normal(size=(m, n))], {}),
        ("add", [rng.normal(size=(b, m, n)), rng.normal(size=n)], {}),
        ("scale", [rng.normal(size=(m, n))], {"factor": 1.7}),
        ("softmax", [rng.normal(size=(b, m, n))], {"axis": -1}),
        (
            "layer_norm",
            [rng.normal(size=(m, n)), rng.normal(size=n), rng.normal(size=n)],
            {"eps": 1e-5},
        ),
        ("relu", [rng.normal(size=(m, n)) + 0.05], {}),
        (
            "embedding_gather",
            [rng.normal(size=(6, n))],
            {"ids": rng.integers(0, 6, size=(b, m))},
        ),
        (
            "concat",
            [rng.normal(size=(m, n)), rng.normal(size=(m, k))],
            {"axis": -1},
        ),
        ("mean_pool", [rng.normal(size=(b, m, n))], {"mask": None}),
        ("max_pool", [rng.normal(size=(b, m, n))], {"mask": None}),
        (
            "mean_pool",
            [rng.normal(size=(2, 3, n))],
            {"mask": np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)},
        ),
        (
            "max_pool",
            [rng.normal(size=(2, 3, n))],
            {"mask": np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)},
        ),
        (
            "dropout",
            [rng.normal(size=(m, n))],
            {"rate": 0.4, "rng": np.random.default_rng(seed + 1)},
        ),
        (
            "cross_entropy",
            [rng.normal(size=(m, 5))],
            {"targets": rng.integers(0, 5, size=m)},
        ),
    ]
    return rng, cases


@pytest.mark.parametrize("seed", range(20))
def test_all_op_kinds_match_finite_differences(seed):
    rng, cases = _op_cases(seed)
    for kind, arrays, attrs in cases:
        analytic, numeric = _vjp_case(kind, arrays, attrs, rng)
        for a, nmr in zip(analytic, numeric):
            assert grads_close(a, nmr), f"gradient mismatch for op '{kind}'"


# ---------------------------------------------------------------------------
# Tape semantics
# ---------------------------------------------------------------------------


def test_replay_is_bitwise_identical_including_dropout():
    rng = np.random.default_rng(3)
    with Tape() as tape:
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        h = relu(matmul(x, w))
        h = dropout(h, 0.5, rng=np.random.default_rng(11))
        y = softmax(h)
    originals = {e.output_id: tape.tensors[e.output_id].data.copy() for e in tape.entries}
    replayed = tape.replay()
    for tid, arr in originals.items():
        assert np.array_equal(replayed[tid], arr)


def test_dropout_rate_zero_and_scale_one_are_exact_identities():
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.array_equal(dropout(Tensor(x), 0.0).data, x)
    assert np.array_equal(scale(Tensor(x), 1.0).data, x)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(min_value=-30, max_value=30), min_size=3, max_size=3),
        min_size=1,
        max_size=6,
    )
)
def test_softmax_rows_sum_to_one(rows):
    out = softmax(Tensor(np.array(rows)))
    assert (out.data >= 0).all()
    assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-12


def test_shape_mismatch_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 3\)"):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


def test_non_finite_output_names_op_kind():
    big = Tensor(np.full((2, 2), 1e300))
    with pytest.raises(NonFiniteError, match="matmul"):
        matmul(big, big)


def test_forward_op_generic_dispatch_and_unknown_kind():
    out = forward_op("relu", [Tensor([-1.0, 2.0])])
    assert np.array_equal(out.data, [0.0, 2.0])
    with pytest.raises(ValueError, match="unknown op kind"):
        forward_op("conv2d", [Tensor([0.0])])


def test_embedding_gather_rejects_out_of_range():
    with pytest.raises(ShapeError, match="out of range"):
        embedding_gather(Tensor(np.zeros((3, 2))), [0, 3])


def test_pool_mask_rejects_empty_rows():
    x = Tensor(np.zeros((1, 2, 3)))
    with pytest.raises(ShapeError, match="no kept positions"):
        max_pool(x, mask=np.array([[False, False]]))


def test_concat_then_backward_splits_gradient():
    with Tape() as tape:
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        merged = concat([a, b], axis=-1)
        loss = matmul(merged, Tensor(np.arange(5.0).reshape(5, 1)))
        backward(tape, loss)
    assert np.array_equal(a.grad, [[0.0, 1.0]])
    assert np.array_equal(b.grad, [[2.0, 3.0, 4.0]])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    params = {
        "enc.layer0.w": Tensor(rng.normal(size=(4, 4))),
        "enc.emb.token": Tensor(rng.normal(size=(10, 4))),
        "bias": Tensor(rng.normal(size=4)),
    }
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, params)
    loaded = T.load_checkpoint(path)
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name].data, params[name].data)
        assert loaded[name].data.dtype == np.float64
    # manifest carries name/shape/checksum per entry
    import zipfile

    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("MANIFEST.txt").decode()
    assert "enc.emb.token\t10,4\t" in manifest


def test_checkpoint_detects_corruption(tmp_path):
    params = {"w": Tensor(np.ones((2, 2)))}
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, params)
    import zipfile

    with zipfile.ZipFile(path) as zf:
        names = {n: zf.read(n) for n in zf.namelist()}
    names["w.bin"] = b"\x00" * len(names["w.bin"])
    with zipfile.ZipFile(path, "w") as zf:
        for n, blob in names.items():
            zf.writestr(n, blob)
    with pytest.raises(ValueError, match="checksum mismatch"):
        T.load_checkpoint(path)
