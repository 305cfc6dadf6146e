"""Feature-shift datasets: a seeded synthetic benchmark and tabular ingestion.

Each domain shares ``C`` Gaussian class clusters in a latent space and maps
them through its own invertible affine transform (covariate shift). An
optional per-domain, per-class mean perturbation adds concept shift.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fraug.rng import stream


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    domain: int
    x: np.ndarray
    y: np.ndarray
    train_mask: np.ndarray
    name: str = ""
    provenance: str = ""

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],) or self.train_mask.shape != self.y.shape:
            raise DataError("features, labels and split mask disagree in length")

    @property
    def x_train(self) -> np.ndarray:
        return self.x[self.train_mask]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_mask]

    @property
    def x_test(self) -> np.ndarray:
        return self.x[~self.train_mask]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[~self.train_mask]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def class_counts(self, num_classes: int, split: str = "train") -> np.ndarray:
        y = self.y_train if split == "train" else self.y_test
        return np.bincount(y, minlength=num_classes)


@dataclass(frozen=True)
class ShiftSpec:
    num_domains: int = 4
    num_classes: int = 5
    dim: int = 20
    class_sep: float = 1.0
    noise_std: float = 1.0
    rotate: bool = True
    scale_range: tuple[float, float] = (0.5, 2.0)
    translation_range: float = 2.0
    concept_shift: float = 0.0
    identity: bool = False

    def __post_init__(self):
        if self.num_domains < 1 or self.num_classes < 2 or self.dim < 1:
            raise DataError("shift spec needs >= 1 domain, >= 2 classes and dim >= 1")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise DataError(f"scale range must be positive and ordered, got {self.scale_range}")


def domain_transform(spec: ShiftSpec, domain: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` such that a latent point ``z`` maps to ``A @ z + b``."""
    d = spec.dim
    if spec.identity:
        return np.eye(d), np.zeros(d)
    rng = stream(seed, "domain-transform", domain)
    if spec.rotate:
        q, r = np.linalg.qr(rng.normal(size=(d, d)))
        q = q * np.sign(np.diag(r))
    else:
        q = np.eye(d)
    scales = rng.uniform(*spec.scale_range, size=d)
    a = q * scales
    b = rng.uniform(-spec.translation_range, spec.translation_range, size=d)
    if abs(np.linalg.det(a)) < 1e-8:
        raise DataError(f"degenerate transform for domain {domain}")
    return a, b


def class_means(spec: ShiftSpec, seed: int) -> np.ndarray:
    return stream(seed, "class-means").normal(scale=spec.class_sep, size=(spec.num_classes, spec.dim))


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def generate_synthetic(spec: ShiftSpec, n_train: int = 200, n_test: int = 500, seed: int = 0) -> list[DomainDataset]:
    """One dataset per domain; identical arguments give bit-identical arrays."""
    c = spec.num_classes
    if n_train < c or n_test < c or n_train + n_test < 2 * c:
        raise DataError(f"need at least {c} train and {c} test samples per domain")
    means = class_means(spec, seed)
    out = []
    for k in range(spec.num_domains):
        rng = stream(seed, "domain-samples", k)
        a, b = domain_transform(spec, k, seed)
        dom_means = means
        if spec.concept_shift > 0:
            dom_means = means + stream(seed, "concept-shift", k).normal(scale=spec.concept_shift, size=means.shape)
        y = np.concatenate([_balanced_labels(n_train, c, rng), _balanced_labels(n_test, c, rng)])
        z = dom_means[y] + rng.normal(scale=spec.noise_std, size=(y.size, spec.dim))
        x = z @ a.T + b
        mask = np.zeros(y.size, dtype=bool)
        mask[:n_train] = True
        out.append(
            DomainDataset(
                domain=k,
                x=x,
                y=y.astype(np.int64),
                train_mask=mask,
                name=f"D{k}",
                provenance=f"synthetic seed={seed}",
            )
        )
    return out


def scarcity_subsample(dataset: DomainDataset, fraction: float, seed: int) -> DomainDataset:
    """Class-stratified subsample of the train split; the test split is kept."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return dataset
    rng = stream(seed, "scarcity", dataset.domain)
    train_idx = np.flatnonzero(dataset.train_mask)
    keep = []
    for c in np.unique(dataset.y[train_idx]):
        members = train_idx[dataset.y[train_idx] == c]
        n_keep = int(math.floor(fraction * members.size + 0.5))
        if n_keep < 1:
            raise DataError(f"fraction {fraction} leaves class {int(c)} of domain {dataset.domain} empty")
        keep.append(np.sort(rng.choice(members, size=n_keep, replace=False)))
    rows = np.concatenate(keep + [np.flatnonzero(~dataset.train_mask)])
    rows.sort(kind="stable")
    return replace(
        dataset,
        x=dataset.x[rows],
        y=dataset.y[rows],
        train_mask=dataset.train_mask[rows],
        provenance=f"{dataset.provenance}; scarcity {fraction} seed={seed}",
    )


def merge_domains(datasets: list[DomainDataset]) -> DomainDataset:
    """Pool several domains into one dataset (the centralized baseline)."""
    return DomainDataset(
        domain=-1,
        x=np.concatenate([d.x for d in datasets]),
        y=np.concatenate([d.y for d in datasets]),
        train_mask=np.concatenate([d.train_mask for d in datasets]),
        name="all",
        provenance="merged",
    )


# ---------------------------------------------------------------- tabular IO
@dataclass(frozen=True)
class TabularSchema:
    num_features: int | None = None
    num_classes: int | None = None
    delimiter: str = ","
    split: str = "train"
    domain: int = 0


def load_tabular(path, schema: TabularSchema | None = None) -> DomainDataset:
    """Read ``d`` feature columns plus an integer label column per line."""
    schema = schema or TabularSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"tabular file not found: {path}")
    raw = path.read_bytes()
    rows, labels = [], []
    width = schema.num_features
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split(schema.delimiter)
        if width is None:
            width = len(cells) - 1
        if len(cells) != width + 1:
            raise DataError(f"{path}:{lineno}: expected {width + 1} columns, found {len(cells)}")
        feats = []
        for col, cell in enumerate(cells[:-1], start=1):
            try:
                val = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {col} is not numeric: {cell.strip()!r}") from None
            if not math.isfinite(val):
                raise DataError(f"{path}:{lineno}: column {col} is not finite: {cell.strip()!r}")
            feats.append(val)
        try:
            label = int(cells[-1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: label column {width + 1} is not an integer: {cells[-1].strip()!r}") from None
        if label < 0 or (schema.num_classes is not None and label >= schema.num_classes):
            raise DataError(f"{path}:{lineno}: unknown label value {label}")
        rows.append(feats)
        labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    return DomainDataset(
        domain=schema.domain,
        x=np.asarray(rows, dtype=np.float64),
        y=y,
        train_mask=np.full(y.size, schema.split == "train"),
        name=path.stem,
        provenance=f"file sha256={hashlib.sha256(raw).hexdigest()}",
    )


def join_splits(train: DomainDataset, test: DomainDataset) -> DomainDataset:
    if train.dim != test.dim:
        raise DataError(f"train/test feature widths differ: {train.dim} vs {test.dim}")
    return DomainDataset(
        domain=train.domain,
        x=np.concatenate([train.x, test.x]),
        y=np.concatenate([train.y, test.y]),
        train_mask=np.concatenate([np.ones(train.y.size, bool), np.zeros(test.y.size, bool)]),
        name=train.name,
        provenance=f"{train.provenance}; test {test.provenance}",
    )


def save_tabular(dataset: DomainDataset, path, split: str = "train") -> None:
    if split == "train":
        x, y = dataset.x_train, dataset.y_train
    elif split == "test":
        x, y = dataset.x_test, dataset.y_test
    else:
        x, y = dataset.x, dataset.y
    header = ",".join([f"x{i}" for i in range(x.shape[1])] + ["label"])
    lines = [f"# {header}"]
    lines += [",".join([repr(float(v)) for v in row] + [str(int(lab))]) for row, lab in zip(x, y)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
