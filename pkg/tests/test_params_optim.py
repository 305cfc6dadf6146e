import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraug.optim import OptimizerState, optimizer_step
from fraug.params import CheckpointError, ParameterSet, StructureError
from fraug.tensor import Tensor


def make_set(rng, dtype=np.float32):
    return ParameterSet(
        [
            ("f.w", Tensor(rng.normal(size=(3, 2)).astype(dtype), requires_grad=True), "extractor"),
            ("f.bn0.gamma", Tensor(np.ones(2, dtype=dtype), requires_grad=True), "batchnorm"),
            ("f.bn0.running_mean", Tensor(np.zeros(2, dtype=dtype)), "batchnorm"),
            ("h.weight", Tensor(rng.normal(size=(2, 4)).astype(dtype), requires_grad=True), "head"),
        ]
    )


def set_grads(params, value=0.5):
    for _, t, _ in params.items():
        if t.requires_grad:
            t.grad = np.full(t.shape, value, dtype=t.dtype)


def test_insertion_order_and_roles(rng):
    p = make_set(rng)
    assert p.names() == ["f.w", "f.bn0.gamma", "f.bn0.running_mean", "h.weight"]
    assert p.roles() == {"extractor", "batchnorm", "head"}
    assert p.numel() == 6 + 2 + 2 + 8
    assert p.numel({"head"}) == 8
    assert p.numel({"generator"}) == 0


def test_duplicate_names_and_bad_roles_rejected():
    p = ParameterSet([("a", Tensor(np.zeros(1)), "head")])
    with pytest.raises(KeyError):
        p.add("a", Tensor(np.zeros(1)), "head")
    with pytest.raises(ValueError):
        p.add("b", Tensor(np.zeros(1)), "decoder")


def test_select_and_subset_share_tensors(rng):
    p = make_set(rng)
    head = p.select(roles={"head"})
    assert head.names() == ["h.weight"]
    assert head["h.weight"] is p["h.weight"]
    assert p.select(exclude={"batchnorm"}).names() == ["f.w", "h.weight"]
    assert "f.bn0.running_mean" not in p.select(trainable_only=True)
    assert p.subset(["h.weight", "f.w"]).names() == ["h.weight", "f.w"]


def test_compatibility_names_first_mismatch(rng):
    a = make_set(rng)
    b = ParameterSet([(n, t.copy(), r) for n, t, r in a.items()])
    a.check_compatible(b)
    c = ParameterSet(list(a.items())[:2] + [("other", Tensor(np.zeros(2)), "batchnorm")])
    with pytest.raises(StructureError, match="f.bn0.running_mean"):
        a.check_compatible(c)


def test_load_values_skips_roles(rng):
    a, b = make_set(rng), make_set(np.random.default_rng(9))
    before = a["f.bn0.gamma"].data.copy()
    a.load_values(b, skip_roles={"batchnorm"})
    np.testing.assert_array_equal(a["f.w"].data, b["f.w"].data)
    np.testing.assert_array_equal(a["f.bn0.gamma"].data, before)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_roundtrip_bit_exact(rng, dtype, tmp_path):
    p = make_set(rng, dtype)
    q = ParameterSet.from_bytes(p.to_bytes())
    assert q.signature() == p.signature()
    for (n, t, r), (_, u, _) in zip(p.items(), q.items()):
        assert t.data.tobytes() == u.data.tobytes()
        assert t.requires_grad == u.requires_grad
    p.save(tmp_path / "x.fraug")
    assert ParameterSet.load(tmp_path / "x.fraug").to_bytes() == p.to_bytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 3)), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_checkpoint_roundtrip_property(shapes, seed):
    rng = np.random.default_rng(seed)
    p = ParameterSet((f"p{i}", Tensor(rng.normal(size=s)), "head") for i, s in enumerate(shapes))
    assert ParameterSet.from_bytes(p.to_bytes()).to_bytes() == p.to_bytes()


def test_checkpoint_corruption_detected(rng):
    blob = make_set(rng).to_bytes()
    with pytest.raises(CheckpointError):
        ParameterSet.from_bytes(b"NOTFRAUG" + blob[8:])
    with pytest.raises(CheckpointError):
        ParameterSet.from_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        ParameterSet.from_bytes(blob + b"\0")


def test_sgd_hand_value():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([0.5])
    optimizer_step(ParameterSet([("w", w, "head")]), OptimizerState(kind="sgd", learning_rate=0.1))
    assert w.data[0] == pytest.approx(0.95, abs=1e-15)


def test_momentum_accumulates():
    w = Tensor(np.array([0.0]), requires_grad=True)
    p = ParameterSet([("w", w, "head")])
    st_ = OptimizerState(kind="sgd-momentum", learning_rate=1.0, momentum=0.9)
    for _ in range(2):
        w.grad = np.array([1.0])
        optimizer_step(p, st_)
    assert w.data[0] == pytest.approx(-(1.0 + 1.9))
    assert st_.step_count == 2


@pytest.mark.parametrize("kind", ["sgd", "sgd-momentum", "adam"])
def test_zero_learning_rate_is_identity(rng, kind):
    p = make_set(rng)
    snap = p.snapshot()
    set_grads(p)
    optimizer_step(p, OptimizerState(kind=kind, learning_rate=0.0))
    for n, v in snap.items():
        np.testing.assert_array_equal(p[n].data, v)


def test_role_filter_and_buffers(rng):
    p = make_set(rng)
    snap = p.snapshot()
    set_grads(p)
    st_ = OptimizerState(kind="sgd", learning_rate=0.1)
    optimizer_step(p, st_, role_filter={"head"})
    np.testing.assert_array_equal(p["f.w"].data, snap["f.w"])
    np.testing.assert_array_equal(p["f.bn0.gamma"].data, snap["f.bn0.gamma"])
    assert not np.array_equal(p["h.weight"].data, snap["h.weight"])
    optimizer_step(p, st_)
    np.testing.assert_array_equal(p["f.bn0.running_mean"].data, snap["f.bn0.running_mean"])
    with pytest.raises(ValueError):
        optimizer_step(p, st_, role_filter={"generator"})


def test_adam_buffers_match_shapes(rng):
    p = make_set(rng)
    set_grads(p)
    st_ = OptimizerState(kind="adam", learning_rate=1e-3)
    optimizer_step(p, st_)
    for name, bufs in st_.buffers.items():
        assert bufs[0].shape == p[name].shape and bufs[1].shape == p[name].shape


def test_global_norm_clipping():
    w = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    w.grad = np.array([3.0, 4.0])
    optimizer_step(ParameterSet([("w", w, "head")]), OptimizerState(kind="sgd", learning_rate=1.0, max_grad_norm=1.0))
    np.testing.assert_allclose(w.data, [-0.6, -0.8])


def test_weight_decay():
    w = Tensor(np.array([2.0]), requires_grad=True)
    w.grad = np.array([0.0])
    optimizer_step(ParameterSet([("w", w, "head")]), OptimizerState(kind="sgd", learning_rate=0.5, weight_decay=0.1))
    assert w.data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        OptimizerState(kind="rmsprop")
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=-1.0)
