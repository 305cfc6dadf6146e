"""Feature extractor, prediction head, class-conditional generator and RTNet.

All networks are MLPs whose parameters live in role-tagged
:class:`ParameterSet` objects, so forward functions are plain functions of
``(spec, params, inputs)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fraug.params import ParameterSet
from fraug.tensor import DimensionError, Tensor, batchnorm, concat, dense, matmul, one_hot, relu


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int = 20
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 64
    num_classes: int = 5
    batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim <= 0 or self.input_dim <= 0:
            raise ValueError("classifier dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("a classifier needs at least 2 classes")
        if self.bn_eps <= 0:
            raise ValueError("bn_eps must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int = 16
    num_classes: int = 5
    hidden: int = 16
    output_dim: int = 64
    conditioning: str = "one-hot"
    label_embed_dim: int = 8

    def __post_init__(self):
        if self.conditioning not in ("one-hot", "embedding"):
            raise ValueError(f"unknown conditioning mode {self.conditioning!r}")

    @property
    def label_dim(self) -> int:
        return self.num_classes if self.conditioning == "one-hot" else self.label_embed_dim


@dataclass(frozen=True)
class RTNetSpec:
    dim: int = 64
    hidden: int = 16
    zero_init: bool = True


def _uniform_dense(params, prefix, fan_in, fan_out, role, rng, dtype, zero=False):
    bound = 1.0 / np.sqrt(fan_in)
    if zero:
        w = np.zeros((fan_in, fan_out))
        b = np.zeros(fan_out)
    else:
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
    params.add(f"{prefix}.weight", Tensor(w.astype(dtype), requires_grad=True), role)
    params.add(f"{prefix}.bias", Tensor(b.astype(dtype), requires_grad=True), role)


def init_classifier(spec: ClassifierSpec, rng: np.random.Generator, dtype=np.float32) -> ParameterSet:
    params = ParameterSet()
    width = spec.input_dim
    for i, h in enumerate(spec.hidden):
        _uniform_dense(params, f"f.dense{i}", width, h, "extractor", rng, dtype)
        if spec.batchnorm:
            params.add(f"f.bn{i}.gamma", Tensor(np.ones(h, dtype=dtype), requires_grad=True), "batchnorm")
            params.add(f"f.bn{i}.beta", Tensor(np.zeros(h, dtype=dtype), requires_grad=True), "batchnorm")
            params.add(f"f.bn{i}.running_mean", Tensor(np.zeros(h, dtype=dtype)), "batchnorm")
            params.add(f"f.bn{i}.running_var", Tensor(np.ones(h, dtype=dtype)), "batchnorm")
        width = h
    _uniform_dense(params, "f.proj", width, spec.embed_dim, "extractor", rng, dtype)
    _uniform_dense(params, "h", spec.embed_dim, spec.num_classes, "head", rng, dtype)
    return params


def init_generator(spec: GeneratorSpec, rng: np.random.Generator, dtype=np.float32) -> ParameterSet:
    params = ParameterSet()
    if spec.conditioning == "embedding":
        table = rng.normal(size=(spec.num_classes, spec.label_embed_dim)).astype(dtype)
        params.add("g.label_table", Tensor(table, requires_grad=True), "generator")
    _uniform_dense(params, "g.dense0", spec.noise_dim + spec.label_dim, spec.hidden, "generator", rng, dtype)
    _uniform_dense(params, "g.dense1", spec.hidden, spec.output_dim, "generator", rng, dtype)
    return params


def init_rtnet(spec: RTNetSpec, rng: np.random.Generator, dtype=np.float32, zero_output: bool | None = None) -> ParameterSet:
    params = ParameterSet()
    _uniform_dense(params, "m.dense0", spec.dim, spec.hidden, "rtnet", rng, dtype)
    zero = spec.zero_init if zero_output is None else zero_output
    _uniform_dense(params, "m.dense1", spec.hidden, spec.dim, "rtnet", rng, dtype, zero=zero)
    return params


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def extractor_forward(spec: ClassifierSpec, params: ParameterSet, x, train: bool) -> Tensor:
    dtype = params["f.proj.weight"].dtype
    out = _as_input(x, dtype)
    if out.data.ndim != 2 or out.shape[1] != spec.input_dim:
        raise DimensionError(f"classifier expects [B x {spec.input_dim}] input, got {out.shape}")
    for i in range(len(spec.hidden)):
        out = dense(out, params[f"f.dense{i}.weight"], params[f"f.dense{i}.bias"])
        if spec.batchnorm:
            out = batchnorm(
                out,
                params[f"f.bn{i}.gamma"],
                params[f"f.bn{i}.beta"],
                params[f"f.bn{i}.running_mean"],
                params[f"f.bn{i}.running_var"],
                train=train,
                momentum=spec.bn_momentum,
                eps=spec.bn_eps,
            )
        out = relu(out)
    return dense(out, params["f.proj.weight"], params["f.proj.bias"])


def head_forward(params: ParameterSet, u: Tensor) -> Tensor:
    return dense(u, params["h.weight"], params["h.bias"])


def classifier_forward(spec: ClassifierSpec, params: ParameterSet, x, train: bool = True) -> tuple[Tensor, Tensor]:
    """Return ``(embeddings, logits)``; both are needed by the augmentation losses."""
    u = extractor_forward(spec, params, x, train)
    return u, head_forward(params, u)


def generator_forward(spec: GeneratorSpec, params: ParameterSet, z, labels) -> Tensor:
    dtype = params["g.dense0.weight"].dtype
    z = _as_input(z, dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if z.data.ndim != 2 or z.shape[1] != spec.noise_dim or labels.shape != (z.shape[0],):
        raise DimensionError(f"generator expects z [B x {spec.noise_dim}] and B labels, got {z.shape} and {labels.shape}")
    cond = Tensor(one_hot(labels, spec.num_classes, dtype=dtype))
    if spec.conditioning == "embedding":
        cond = matmul(cond, params["g.label_table"])
    hidden = relu(dense(concat([z, cond], axis=1), params["g.dense0.weight"], params["g.dense0.bias"]))
    return dense(hidden, params["g.dense1.weight"], params["g.dense1.bias"])


def rtnet_forward(spec: RTNetSpec, params: ParameterSet, v: Tensor) -> Tensor:
    if v.data.ndim != 2 or v.shape[1] != spec.dim:
        raise DimensionError(f"RTNet expects [B x {spec.dim}] input, got {v.shape}")
    hidden = relu(dense(v, params["m.dense0.weight"], params["m.dense0.bias"]))
    return dense(hidden, params["m.dense1.weight"], params["m.dense1.bias"])


def count_parameters(params: ParameterSet, role_filter=None) -> int:
    return params.numel(role_filter)


def classifier_macs(spec: ClassifierSpec) -> int:
    """Multiply-accumulates per sample for one classifier forward pass."""
    dims = [spec.input_dim, *spec.hidden, spec.embed_dim, spec.num_classes]
    return sum(a * b for a, b in zip(dims[:-1], dims[1:]))


def generator_macs(spec: GeneratorSpec) -> int:
    return (spec.noise_dim + spec.label_dim) * spec.hidden + spec.hidden * spec.output_dim


def rtnet_macs(spec: RTNetSpec) -> int:
    return 2 * spec.dim * spec.hidden


@dataclass(frozen=True)
class NetworkSpecs:
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    rtnet: RTNetSpec = field(default_factory=RTNetSpec)
