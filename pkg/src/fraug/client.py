"""Local client update: classifier step with real and synthetic embeddings,
then generator and RTNet steps.

The same code path serves the baselines; :class:`LocalPlan` switches the
synthetic losses, the second stage, the proximal term and noise
augmentation on or off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fraug.data import DomainDataset
from fraug.nets import (
    NetworkSpecs,
    classifier_forward,
    generator_forward,
    head_forward,
    init_rtnet,
    rtnet_forward,
)
from fraug.objectives import KernelSpec, cross_entropy, entropy, mmd, proximal_penalty
from fraug.optim import OptimizerState, optimizer_step
from fraug.params import ParameterSet
from fraug.tensor import DimensionError, NonFiniteError, Tensor, add, mul, stack_scalars, take_row


class StageError(RuntimeError):
    """A local step failed; carries the client, round and loss term."""


def ramp_value(t: int, ramp_steps: int, v_max: float) -> float:
    """Exponential ramp-up ``v_max * exp(-5 (1 - min(t/T, 1))^2)``."""
    if ramp_steps <= 0:
        raise ValueError(f"ramp length must be >= 1, got {ramp_steps}")
    progress = min(t / ramp_steps, 1.0)
    return v_max * math.exp(-5.0 * (1.0 - progress) ** 2)


@dataclass
class PrototypeBank:
    """Per-class running means of real embeddings."""

    num_classes: int
    dim: int
    ramp_steps: int
    lambda_max: float = 0.5
    eps: float = 1e-8
    literal: bool = False
    dtype: np.dtype = np.dtype(np.float32)
    means: np.ndarray = None
    initialized: np.ndarray = None
    clock: int = 0

    def __post_init__(self):
        if self.means is None:
            self.means = np.zeros((self.num_classes, self.dim), dtype=self.dtype)
        if self.initialized is None:
            self.initialized = np.zeros(self.num_classes, dtype=bool)

    @property
    def rate(self) -> float:
        return ramp_value(self.clock, self.ramp_steps, self.lambda_max)

    def classes(self) -> np.ndarray:
        return np.flatnonzero(self.initialized)


def update_prototypes(bank: PrototypeBank, u: np.ndarray, y: np.ndarray, rate: float | None = None) -> PrototypeBank:
    """EMA update of the class means from one batch of real embeddings.

    ``rate`` overrides the ramped value (the ramp clock still advances).
    """
    u = np.asarray(u)
    if u.ndim != 2 or u.shape[1] != bank.dim:
        raise DimensionError(f"prototype bank holds dim {bank.dim}, got embeddings {u.shape}")
    lam = bank.rate if rate is None else rate
    keep = 1 - lam
    present = np.zeros(bank.num_classes, dtype=bool)
    for c in np.unique(y):
        mask = y == c
        batch_mean = u[mask].sum(axis=0) / (int(mask.sum()) + bank.eps)
        if bank.initialized[c]:
            bank.means[c] = keep * bank.means[c] + lam * batch_mean
        else:
            bank.means[c] = batch_mean
            bank.initialized[c] = True
        present[c] = True
    if bank.literal:
        # absent classes: the batch term is 0 / (0 + eps)
        for c in np.flatnonzero(bank.initialized & ~present):
            bank.means[c] = keep * bank.means[c]
    bank.clock += 1
    return bank


@dataclass
class ScheduleState:
    lambda_max: float
    ramp_steps: int
    clock: int = 0

    @property
    def value(self) -> float:
        return ramp_value(self.clock, self.ramp_steps, self.lambda_max)


@dataclass(frozen=True)
class LocalPlan:
    """What one client does per local step."""

    specs: NetworkSpecs
    batch_size: int = 32
    synthetic: bool = False
    stage2: bool = False
    use_uhat: bool = True
    use_uhat_c: bool = True
    sequential_stage1: bool = False
    mmd_prose_variant: bool = False
    alpha: float = 1.0
    beta: float = 1.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    real_weight: float = 1.0
    prox_mu: float | None = None
    noise: str | None = None
    gamma: float = 0.0
    keep_roles: frozenset = frozenset()

    @property
    def uses_rtnet(self) -> bool:
        return self.use_uhat or self.use_uhat_c

    @property
    def needs_noise_vectors(self) -> bool:
        return self.synthetic or self.stage2


@dataclass
class ClientState:
    cid: int
    dataset: DomainDataset
    theta: ParameterSet
    omega: ParameterSet | None
    phi: ParameterSet | None
    bank: PrototypeBank
    schedule: ScheduleState
    opt_theta: OptimizerState
    opt_omega: OptimizerState
    opt_phi: OptimizerState
    data_rng: np.random.Generator
    noise_rng: np.random.Generator
    init_rng: np.random.Generator
    x_train: np.ndarray = None
    y_train: np.ndarray = None

    def __post_init__(self):
        dtype = self.theta["f.proj.weight"].dtype
        if self.x_train is None:
            self.x_train = np.ascontiguousarray(self.dataset.x_train, dtype=dtype)
            self.y_train = np.ascontiguousarray(self.dataset.y_train, dtype=np.int64)


@dataclass
class Synthetic:
    uhat: Tensor
    vhat: Tensor
    classes: np.ndarray
    uhat_c: Tensor | None
    vhat_c: Tensor | None


def make_synthetic(
    u: Tensor,
    y: np.ndarray,
    bank: PrototypeBank,
    specs: NetworkSpecs,
    omega: ParameterSet,
    phi: ParameterSet | None,
    lambda_syn: float,
    z: np.ndarray,
    z_c: np.ndarray,
) -> Synthetic:
    """Synthetic embeddings ``u + lambda * m(g(z, y))`` and, per initialized
    class ``c``, ``proto_c + lambda * m(g(z'_c, c))``.

    ``z_c`` has one row per class; rows of uninitialized classes are unused.
    Gradients flow to whichever of ``omega``/``phi`` hold live tensors.
    """
    if lambda_syn < 0:
        raise ValueError("lambda_syn must be >= 0")
    vhat = generator_forward(specs.generator, omega, z, y)
    if phi is not None:
        uhat = add(u, mul(rtnet_forward(specs.rtnet, phi, vhat), lambda_syn))
    else:
        uhat = u
    classes = bank.classes()
    uhat_c = vhat_c = None
    if classes.size:
        vhat_c = generator_forward(specs.generator, omega, z_c[classes], classes)
        protos = Tensor(bank.means[classes])
        uhat_c = add(protos, mul(rtnet_forward(specs.rtnet, phi, vhat_c), lambda_syn)) if phi is not None else protos
    return Synthetic(uhat, vhat, classes, uhat_c, vhat_c)


def _sample_noise(rng: np.random.Generator, kind: str, gamma: float, shape, dtype) -> np.ndarray:
    """Zero-mean noise with standard deviation ``gamma``."""
    if kind == "gauss":
        out = rng.standard_normal(shape) * gamma
    elif kind == "uniform":
        half = gamma * math.sqrt(3.0)
        out = rng.uniform(-half, half, size=shape)
    elif kind == "laplace":
        p = rng.uniform(-0.5, 0.5, size=shape)
        out = -(gamma / math.sqrt(2.0)) * np.sign(p) * np.log1p(-2.0 * np.abs(p))
    else:
        raise ValueError(f"unknown noise distribution {kind!r}")
    return out.astype(dtype)


def stage1_classifier_step(
    state: ClientState,
    plan: LocalPlan,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray | None = None,
    z_c: np.ndarray | None = None,
    prox_ref: ParameterSet | None = None,
) -> tuple[dict[str, float], Tensor | None, Synthetic | None]:
    """One optimizer step on the classifier.

    The real-data loss reaches extractor and head; synthetic and
    noise-augmented losses are computed on detached embeddings, so only the
    head receives their gradients. Generator and RTNet enter as constants.
    Returns the losses, the detached batch embeddings and the synthetic batch.
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    spec = plan.specs.classifier
    theta = state.theta
    theta.zero_grad()
    stats = None
    if not plan.real_weight and plan.prox_mu is None:
        # the extractor is only read, so its running statistics stay put too
        stats = {n: t.data.copy() for n, t, _ in theta.items() if not t.requires_grad}
    u, logits = classifier_forward(spec, theta, x, train=True)
    if stats is not None:
        for n, v in stats.items():
            theta[n].data[...] = v
    loss_real = cross_entropy(logits, y)
    losses = {"loss_real": loss_real.item()}
    real_terms = []
    if plan.real_weight:
        real_terms.append(loss_real if plan.real_weight == 1 else mul(loss_real, plan.real_weight))
    if plan.prox_mu is not None and prox_ref is not None:
        prox = proximal_penalty(theta.subset(prox_ref.names()), prox_ref, plan.prox_mu)
        losses["loss_prox"] = prox.item()
        real_terms.append(prox)

    u_const = u.detach()
    head_terms = []
    syn = None
    if plan.synthetic:
        update_prototypes(state.bank, u_const.data, y)
        syn = make_synthetic(
            u_const,
            y,
            state.bank,
            plan.specs,
            state.omega.detached(),
            state.phi.detached() if (plan.uses_rtnet and state.phi is not None) else None,
            state.schedule.value,
            z,
            z_c,
        )
        head_terms = synthetic_head_losses(theta, plan, syn, y)
        losses["loss_syn"] = stack_scalars(head_terms).item() if head_terms else 0.0
    if plan.noise is not None and plan.gamma > 0:
        delta = _sample_noise(state.noise_rng, plan.noise, plan.gamma, u_const.shape, u_const.dtype)
        loss_noise = cross_entropy(head_forward(theta, Tensor(u_const.data + delta)), y)
        losses["loss_noise"] = loss_noise.item()
        head_terms.append(loss_noise)

    only_head = not real_terms
    if plan.sequential_stage1 and real_terms and head_terms:
        stack_scalars(real_terms).backward()
        optimizer_step(theta, state.opt_theta)
        theta.zero_grad()
        # recompute the head losses with the updated head
        if syn is not None:
            head_terms = synthetic_head_losses(theta, plan, syn, y)
        else:
            head_terms = [cross_entropy(head_forward(theta, Tensor(u_const.data + delta)), y)]
        stack_scalars(head_terms).backward()
        optimizer_step(theta, state.opt_theta, role_filter={"head"})
    else:
        terms = real_terms + head_terms
        if terms:
            stack_scalars(terms).backward()
        optimizer_step(theta, state.opt_theta, role_filter={"head"} if only_head else None)
    return losses, u_const, syn


def synthetic_head_losses(theta: ParameterSet, plan: LocalPlan, syn: Synthetic, y) -> list[Tensor]:
    """Head losses on synthetic embeddings; without the batch RTNet term the
    client-agnostic ``v`` stands in for ``u_hat``."""
    terms = []
    batch = syn.uhat if plan.use_uhat else syn.vhat
    terms.append(cross_entropy(head_forward(theta, Tensor(batch.data)), y))
    if plan.use_uhat_c and syn.uhat_c is not None:
        terms.append(cross_entropy(head_forward(theta, Tensor(syn.uhat_c.data)), syn.classes, reduction="sum"))
    return terms


def generator_objective(
    plan: LocalPlan,
    omega: ParameterSet,
    head: ParameterSet,
    u: Tensor,
    y: np.ndarray,
    z: np.ndarray,
    phi: ParameterSet | None = None,
    lambda_syn: float = 0.0,
) -> Tensor:
    """``CE(h(v), y) - alpha * MMD(v, u)`` with ``v = g(z, y)``.

    Under the prose variant the repelled sample is ``u + lambda * m(v)``.
    """
    specs = plan.specs
    vhat = generator_forward(specs.generator, omega, z, y)
    loss = cross_entropy(head_forward(head, vhat), y)
    if not plan.alpha:
        return loss
    if plan.mmd_prose_variant and phi is not None:
        away = add(u, mul(rtnet_forward(specs.rtnet, phi, vhat), lambda_syn))
    else:
        away = vhat
    return add(loss, mul(mmd(away, u, plan.kernel), -plan.alpha))


def rtnet_objective(
    plan: LocalPlan,
    phi: ParameterSet,
    omega: ParameterSet,
    head: ParameterSet,
    bank: PrototypeBank,
    u: Tensor,
    y: np.ndarray,
    z: np.ndarray,
    z_c: np.ndarray,
    lambda_syn: float,
) -> Tensor | None:
    """Negative prediction entropy of the synthetic embeddings plus ``beta``
    times their MMD to the real batch and to the (constant) prototypes."""
    syn = make_synthetic(u, y, bank, plan.specs, omega, phi, lambda_syn, z, z_c)
    ent_terms, mmd_terms = [], []
    if plan.use_uhat:
        ent_terms.append(entropy(head_forward(head, syn.uhat)))
        if plan.beta:
            mmd_terms.append(mmd(syn.uhat, u, plan.kernel))
    if plan.use_uhat_c and syn.uhat_c is not None:
        ent_terms.append(entropy(head_forward(head, syn.uhat_c), reduction="sum"))
        if plan.beta:
            protos = bank.means
            # a one-point-vs-one-point median bandwidth is the pair's own
            # distance, which makes the term flat with a 1/d gradient; take
            # the scale from the real batch and the prototypes instead
            kernel_c = plan.kernel.frozen(u.data, protos[syn.classes])
            for i, c in enumerate(syn.classes):
                row = take_row(syn.uhat_c, i)
                mmd_terms.append(mmd(row, Tensor(protos[c : c + 1]), kernel_c))
    loss = mul(stack_scalars(ent_terms), -1.0) if ent_terms else None
    if mmd_terms:
        reg = mul(stack_scalars(mmd_terms), plan.beta)
        loss = reg if loss is None else add(loss, reg)
    return loss


def stage2_gen_rtnet_step(
    state: ClientState,
    plan: LocalPlan,
    u: Tensor,
    y: np.ndarray,
    z: np.ndarray,
    z_c: np.ndarray,
) -> dict[str, float]:
    """Generator step on its loss, then RTNet step on its loss.

    The classifier enters as constants; synthetic quantities are recomputed
    here so each loss reaches only its own network.
    """
    head = state.theta.select(roles={"head"}).detached()
    lam = state.schedule.value
    u = u.detach()
    losses = {}

    omega = state.omega
    omega.zero_grad()
    phi_const = state.phi.detached() if (plan.uses_rtnet and state.phi is not None) else None
    loss_gen = generator_objective(plan, omega, head, u, y, z, phi_const, lam)
    loss_gen.backward()
    optimizer_step(omega, state.opt_omega)
    losses["loss_gen"] = loss_gen.item()

    if plan.uses_rtnet:
        phi = state.phi
        phi.zero_grad()
        loss_rt = rtnet_objective(plan, phi, omega.detached(), head, state.bank, u, y, z, z_c, lam)
        if loss_rt is not None and loss_rt.requires_grad:
            loss_rt.backward()
            optimizer_step(phi, state.opt_phi)
            losses["loss_rt"] = loss_rt.item()
    return losses


def ensure_rtnet(state: ClientState, plan: LocalPlan) -> None:
    if state.phi is None and plan.uses_rtnet and (plan.synthetic or plan.stage2):
        dtype = state.theta["f.proj.weight"].dtype
        state.phi = init_rtnet(plan.specs.rtnet, state.init_rng, dtype)


def client_update(
    state: ClientState,
    plan: LocalPlan,
    theta: ParameterSet | None,
    omega: ParameterSet | None,
    steps: int,
    round_index: int,
) -> tuple[ParameterSet, ParameterSet | None, dict[str, float]]:
    """Receive the broadcast, run ``steps`` local steps, return ``(theta, omega, metrics)``.

    Roles in ``plan.keep_roles`` (batch normalization under the local-BN
    policy) keep their local values. The RTNet is created on first use and
    stays on the client.
    """
    if round_index < 1:
        raise ValueError("rounds are numbered from 1")
    ensure_rtnet(state, plan)
    if theta is not None:
        state.theta.load_values(theta, skip_roles=plan.keep_roles)
    if omega is not None and state.omega is not None:
        state.omega.load_values(omega)
    prox_ref = None
    if plan.prox_mu is not None and theta is not None:
        prox_ref = theta.select(exclude=plan.keep_roles, trainable_only=True).copy()

    n = state.y_train.size
    if n < 2:
        raise ValueError(f"client {state.cid} has fewer than 2 training samples")
    b = min(plan.batch_size, n)
    totals: dict[str, float] = {}
    dz = plan.specs.generator.noise_dim
    ncls = plan.specs.classifier.num_classes
    for _ in range(steps):
        idx = state.data_rng.choice(n, size=b, replace=False)
        x, y = state.x_train[idx], state.y_train[idx]
        z = z_c = None
        if plan.needs_noise_vectors:
            dtype = state.x_train.dtype
            z = state.noise_rng.standard_normal((b, dz)).astype(dtype)
            z_c = state.noise_rng.standard_normal((ncls, dz)).astype(dtype)
        try:
            losses, u, _ = stage1_classifier_step(state, plan, x, y, z, z_c, prox_ref)
            if plan.stage2:
                losses.update(stage2_gen_rtnet_step(state, plan, u, y, z, z_c))
        except NonFiniteError as exc:
            raise StageError(f"round {round_index}, client {state.cid}: {exc}") from exc
        if plan.synthetic or plan.stage2:
            losses["lambda_syn"] = state.schedule.value
            losses["lambda_proto"] = state.bank.rate
        state.schedule.clock += 1
        for key, val in losses.items():
            if not math.isfinite(val):
                raise StageError(f"round {round_index}, client {state.cid}: non-finite {key}")
            totals[key] = totals.get(key, 0.0) + val
    metrics = {k: v / steps for k, v in totals.items()} if steps else {}
    return state.theta, state.omega, metrics


def evaluate(specs: NetworkSpecs, theta: ParameterSet, x: np.ndarray, y: np.ndarray) -> float:
    """Test accuracy in percent (eval-mode batch normalization)."""
    dtype = theta["f.proj.weight"].dtype
    _, logits = classifier_forward(specs.classifier, theta, np.asarray(x, dtype=dtype), train=False)
    return 100.0 * float((logits.data.argmax(axis=1) == y).mean())
