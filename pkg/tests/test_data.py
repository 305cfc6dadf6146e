import numpy as np
import pytest

from fraug.data import (
    DataError,
    ShiftSpec,
    TabularSchema,
    domain_transform,
    generate_synthetic,
    join_splits,
    load_tabular,
    merge_domains,
    save_tabular,
    scarcity_subsample,
)
from fraug.objectives import KernelSpec, mmd
from fraug.tensor import Tensor


def domain_probe_accuracy(datasets, steps=500, lr=0.5):
    """Multinomial logistic regression on raw features predicting the domain id."""
    x = np.concatenate([d.x_train for d in datasets])
    y = np.concatenate([np.full(d.y_train.size, k) for k, d in enumerate(datasets)])
    xt = np.concatenate([d.x_test for d in datasets])
    yt = np.concatenate([np.full(d.y_test.size, k) for k, d in enumerate(datasets)])
    mu, sd = x.mean(0), x.std(0) + 1e-12
    x, xt = (x - mu) / sd, (xt - mu) / sd
    k = len(datasets)
    w, b = np.zeros((x.shape[1], k)), np.zeros(k)
    for _ in range(steps):
        logits = x @ w + b
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(y.size), y] -= 1
        w -= lr * x.T @ p / y.size
        b -= lr * p.mean(0)
    return float((np.argmax(xt @ w + b, 1) == yt).mean())


def test_default_benchmark_has_measurable_shift():
    from fraug.config import ExperimentConfig
    from fraug.federation import load_datasets

    assert domain_probe_accuracy(load_datasets(ExperimentConfig())) > 0.9


def test_identity_transforms_remove_shift():
    spec = ShiftSpec(identity=True, dim=5)
    a, b = generate_synthetic(spec, n_train=100, n_test=100)[:2]
    kernel = KernelSpec()
    cross = mmd(Tensor(a.x[:100]), Tensor(b.x[:100]), kernel).item()
    # permutation null: the same statistic on shuffled pools
    pool = np.concatenate([a.x[:100], b.x[:100]])
    rng = np.random.default_rng(0)
    null = []
    for _ in range(50):
        p = rng.permutation(200)
        null.append(mmd(Tensor(pool[p[:100]]), Tensor(pool[p[100:]]), kernel).item())
    assert np.mean(np.array(null) >= cross) > 0.01
    np.testing.assert_array_equal(domain_transform(spec, 3, 0)[0], np.eye(5))


def test_shifted_domains_separate_under_mmd():
    a, b = generate_synthetic(ShiftSpec(dim=5), n_train=100, n_test=100)[:2]
    same = generate_synthetic(ShiftSpec(dim=5), n_train=100, n_test=100, seed=1)[0]
    k = KernelSpec()
    assert mmd(Tensor(a.x_train), Tensor(b.x_train), k).item() > 3 * mmd(Tensor(a.x_train), Tensor(a.x_test), k).item()
    assert same.x.shape == a.x.shape


def test_generation_is_deterministic():
    spec = ShiftSpec()
    one, two = generate_synthetic(spec, seed=3), generate_synthetic(spec, seed=3)
    for a, b in zip(one, two):
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert generate_synthetic(spec, seed=4)[0].x.tobytes() != one[0].x.tobytes()


def test_label_marginals_uniform_and_splits():
    for ds in generate_synthetic(ShiftSpec(num_classes=3), n_train=200, n_test=101):
        counts = ds.class_counts(3)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 200
        test_counts = ds.class_counts(3, "test")
        assert test_counts.max() - test_counts.min() <= 1 and test_counts.sum() == 101
        assert ds.x_train.shape[0] + ds.x_test.shape[0] == ds.x.shape[0]


def test_transforms_preserve_class_means():
    spec = ShiftSpec(dim=4, noise_std=0.1)
    ds = generate_synthetic(spec, n_train=2000, n_test=5)[1]
    from fraug.data import class_means

    a, b = domain_transform(spec, 1, 0)
    expected = class_means(spec, 0) @ a.T + b
    for c in range(spec.num_classes):
        got = ds.x_train[ds.y_train == c].mean(0)
        np.testing.assert_allclose(got, expected[c], atol=0.05)


def test_transforms_invertible():
    for k in range(8):
        a, _ = domain_transform(ShiftSpec(), k, 0)
        assert abs(np.linalg.det(a)) > 1e-8


def test_concept_shift_moves_class_means():
    base = generate_synthetic(ShiftSpec(identity=True), n_train=50, n_test=5)
    moved = generate_synthetic(ShiftSpec(identity=True, concept_shift=1.0), n_train=50, n_test=5)
    assert base[0].y.tobytes() == moved[0].y.tobytes()
    assert not np.allclose(base[0].x, moved[0].x)


def test_spec_errors():
    with pytest.raises(DataError):
        ShiftSpec(scale_range=(0.0, 1.0))
    with pytest.raises(DataError):
        ShiftSpec(num_classes=1)
    with pytest.raises(DataError):
        generate_synthetic(ShiftSpec(), n_train=3, n_test=3)


def test_scarcity_counts():
    ds = generate_synthetic(ShiftSpec(), n_train=1000, n_test=50)[0]
    small = scarcity_subsample(ds, 0.1, seed=0)
    assert small.y_train.size == 100
    np.testing.assert_array_equal(small.class_counts(5), [20] * 5)
    assert small.x_test.tobytes() == ds.x_test.tobytes()
    assert scarcity_subsample(ds, 1.0, 0) is ds
    assert scarcity_subsample(ds, 0.1, 0).x.tobytes() == small.x.tobytes()
    # the kept rows are genuine training rows
    rows = {r.tobytes() for r in ds.x_train}
    assert all(r.tobytes() in rows for r in small.x_train)


def test_scarcity_errors():
    ds = generate_synthetic(ShiftSpec(), n_train=20, n_test=5)[0]
    with pytest.raises(DataError, match="empty"):
        scarcity_subsample(ds, 0.01, 0)
    with pytest.raises(DataError):
        scarcity_subsample(ds, 0.0, 0)
    with pytest.raises(DataError):
        scarcity_subsample(ds, 1.5, 0)


def test_tabular_roundtrip(tmp_path):
    ds = generate_synthetic(ShiftSpec(dim=3), n_train=10, n_test=5)[0]
    save_tabular(ds, tmp_path / "tr.csv", "train")
    save_tabular(ds, tmp_path / "te.csv", "test")
    tr = load_tabular(tmp_path / "tr.csv", TabularSchema(num_classes=5))
    te = load_tabular(tmp_path / "te.csv", TabularSchema(num_classes=5, split="test"))
    joined = join_splits(tr, te)
    np.testing.assert_array_equal(joined.x_train, ds.x_train)
    np.testing.assert_array_equal(joined.y_test, ds.y_test)
    assert tr.provenance.startswith("file sha256=")


def test_tabular_three_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("# a,b,label\n1,2,0\n3,4,1\n\n5,6,0\n")
    ds = load_tabular(p)
    assert ds.x.shape == (3, 2) and ds.y.tolist() == [0, 1, 0]


@pytest.mark.parametrize(
    "body,match",
    [
        ("1,2,0\n1,x,1\n", "2: column 2 is not numeric"),
        ("1,2,0\n1,nan,1\n", "2: column 2 is not finite"),
        ("1,2,0\n1,2\n", "2: expected 3 columns"),
        ("1,2,0\n1,2,7\n", "2: unknown label value 7"),
        ("1,2,a\n", "label column 3"),
        ("# only a header\n", "no data rows"),
    ],
)
def test_tabular_errors(tmp_path, body, match):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=match):
        load_tabular(p, TabularSchema(num_classes=3))


def test_tabular_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tabular(tmp_path / "nope.csv")


def test_merge_domains():
    parts = generate_synthetic(ShiftSpec(num_domains=3), n_train=10, n_test=5)
    merged = merge_domains(parts)
    assert merged.y_train.size == 30 and merged.y_test.size == 15
