"""Finite-difference verification of every differentiable piece, in float64.

Each component is a scalar-valued closure over leaf tensors. The analytic
gradient from ``backward`` is compared with central differences; the error
reported is ``max |analytic - numeric| / max(max |analytic|, max |numeric|)``
over all leaves of the component (0 when both are identically zero).
Kernel bandwidths are frozen at the unperturbed inputs so that the
difference quotient sees the same function the backward pass does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fraug.client import LocalPlan, PrototypeBank, generator_objective, rtnet_objective, synthetic_head_losses, make_synthetic
from fraug.nets import (
    ClassifierSpec,
    GeneratorSpec,
    NetworkSpecs,
    RTNetSpec,
    classifier_forward,
    generator_forward,
    init_classifier,
    init_generator,
    init_rtnet,
    rtnet_forward,
)
from fraug.objectives import KernelSpec, cross_entropy, entropy, mmd, proximal_penalty
from fraug.params import ParameterSet
from fraug.rng import stream
from fraug.tensor import (
    Tensor,
    add,
    batchnorm,
    concat,
    dense,
    log_softmax,
    matmul,
    mul,
    relu,
    softmax,
    square,
    stack_scalars,
    take_row,
    tmean,
    tsum,
)

TOLERANCE = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    leaves: int
    scalars: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def check(component: str, fn, leaves: dict[str, Tensor], corrupt: bool = False, step: float = STEP) -> CheckResult:
    """Compare ``backward`` of ``fn()`` against central differences."""
    for t in leaves.values():
        t.requires_grad = True
        t.zero_grad()
    out = fn()
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    if corrupt:
        first = next(iter(analytic))
        analytic[first] = analytic[first] * 1.05 + 1e-3
    num_err, scale, count = 0.0, 0.0, 0
    for key, t in leaves.items():
        flat = t.data.reshape(-1)
        a = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            n = (up - down) / (2 * step)
            num_err = max(num_err, abs(a[i] - n))
            scale = max(scale, abs(a[i]), abs(n))
            count += 1
    rel = 0.0 if scale == 0 else num_err / scale
    return CheckResult(component, rel, len(leaves), count)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _param_leaves(params: ParameterSet) -> dict[str, Tensor]:
    return {n: t for n, t, _ in params.items() if t.requires_grad}


def _tiny_specs() -> NetworkSpecs:
    cls = ClassifierSpec(input_dim=4, hidden=(6,), embed_dim=3, num_classes=3, batchnorm=True)
    gen = GeneratorSpec(noise_dim=2, num_classes=3, hidden=5, output_dim=3)
    return NetworkSpecs(cls, gen, RTNetSpec(dim=3, hidden=4, zero_init=False))


def components(seed: int = 0) -> list[tuple[str, object, dict[str, Tensor]]]:
    """All checked components as ``(name, closure, leaves)``."""
    rng = stream(seed, "gradcheck")
    out = []
    b, d = 6, 4

    x, w, bias = _leaf(rng, b, d), _leaf(rng, d, 3), _leaf(rng, 3)
    out.append(("layer/dense", lambda: tsum(square(dense(x, w, bias))), {"x": x, "w": w, "b": bias}))
    a, m = _leaf(rng, b, d), _leaf(rng, d, 2)
    out.append(("layer/matmul", lambda: tsum(square(matmul(a, m))), {"a": a, "m": m}))

    xb, gamma, beta = _leaf(rng, b, d), _leaf(rng, d), _leaf(rng, d)
    rm, rv = np.zeros(d), np.ones(d)
    weights = rng.normal(size=(b, d))
    out.append(
        (
            "layer/batchnorm",
            lambda: tsum(mul(batchnorm(xb, gamma, beta, Tensor(rm.copy()), Tensor(rv.copy()), train=True), weights)),
            {"x": xb, "gamma": gamma, "beta": beta},
        )
    )
    # shift away from the kink so the difference quotient is clean
    xr = Tensor(rng.normal(size=(b, d)) + np.sign(rng.normal(size=(b, d))) * 0.1, requires_grad=True)
    out.append(("layer/relu", lambda: tsum(mul(relu(xr), weights)), {"x": xr}))
    xs = _leaf(rng, b, 3)
    w3 = rng.normal(size=(b, 3))
    out.append(("layer/softmax", lambda: tsum(mul(softmax(xs), w3)), {"x": xs}))
    out.append(("layer/log_softmax", lambda: tsum(mul(log_softmax(xs), w3)), {"x": xs}))
    c1, c2 = _leaf(rng, b, 2), _leaf(rng, b, 3)
    out.append(("layer/concat", lambda: tsum(square(concat([c1, c2]))), {"a": c1, "b": c2}))
    tr = _leaf(rng, b, 3)
    out.append(("layer/take_row", lambda: tsum(square(take_row(tr, 2))), {"x": tr}))
    ma = _leaf(rng, 5)
    out.append(("layer/mean", lambda: tmean(square(ma)), {"x": ma}))

    logits, labels = _leaf(rng, b, 3), rng.integers(0, 3, size=b)
    out.append(("loss/cross_entropy", lambda: cross_entropy(logits, labels), {"logits": logits}))
    out.append(("loss/cross_entropy_sum", lambda: cross_entropy(logits, labels, reduction="sum"), {"logits": logits}))
    out.append(("loss/entropy", lambda: entropy(logits), {"logits": logits}))

    mx, my = _leaf(rng, 7, 3), Tensor(rng.normal(loc=0.5, size=(5, 3)))
    kern = KernelSpec().frozen(mx.data, my.data)
    out.append(("loss/mmd[x]", lambda: mmd(mx, my, kern), {"x": mx}))
    nx, ny = Tensor(rng.normal(size=(7, 3))), _leaf(rng, 5, 3)
    kern2 = KernelSpec().frozen(nx.data, ny.data)
    out.append(("loss/mmd[y]", lambda: mmd(nx, ny, kern2), {"y": ny}))
    kern3 = KernelSpec().frozen(mx.data, ny.data)
    out.append(("loss/mmd[x,y]", lambda: mmd(mx, ny, kern3), {"x": mx, "y": ny}))

    local = ParameterSet([("p", _leaf(rng, 3, 2), "extractor"), ("q", _leaf(rng, 2), "head")])
    ref = ParameterSet([("p", Tensor(rng.normal(size=(3, 2))), "extractor"), ("q", Tensor(rng.normal(size=2)), "head")])
    out.append(("loss/proximal", lambda: proximal_penalty(local, ref, 0.3), _param_leaves(local)))

    out.extend(_network_components(seed))
    return out


def _network_components(seed: int):
    specs = _tiny_specs()
    dtype = np.float64
    rng = stream(seed, "gradcheck", "nets")
    theta = init_classifier(specs.classifier, rng, dtype)
    omega = init_generator(specs.generator, rng, dtype)
    phi = init_rtnet(specs.rtnet, rng, dtype)
    b = 6
    x = rng.normal(size=(b, specs.classifier.input_dim))
    y = np.arange(b) % specs.classifier.num_classes
    z = rng.normal(size=(b, specs.generator.noise_dim))
    z_c = rng.normal(size=(specs.classifier.num_classes, specs.generator.noise_dim))
    out = []

    def real_loss():
        _, logits = classifier_forward(specs.classifier, theta, x, train=True)
        return cross_entropy(logits, y)

    out.append(("net/classifier_real", real_loss, _param_leaves(theta)))
    out.append(
        ("net/generator", lambda: tsum(square(generator_forward(specs.generator, omega, z, y))), _param_leaves(omega))
    )
    v = Tensor(rng.normal(size=(b, specs.rtnet.dim)))
    out.append(("net/rtnet", lambda: tsum(rtnet_forward(specs.rtnet, phi, v)), _param_leaves(phi)))

    # stop-gradient embeddings and prototypes, as in the local step
    u_const, _ = classifier_forward(specs.classifier, theta.detached(), x, train=False)
    u_const = u_const.detach()
    bank = PrototypeBank(num_classes=3, dim=3, ramp_steps=10, lambda_max=0.5)
    bank.means[:] = rng.normal(size=(3, 3))
    bank.initialized[:] = True
    plan = LocalPlan(specs=specs, synthetic=True, stage2=True)
    lam = 0.7
    head = theta.select(roles={"head"})

    def syn_loss():
        syn = make_synthetic(u_const, y, bank, specs, omega.detached(), phi.detached(), lam, z, z_c)
        return stack_scalars(synthetic_head_losses(theta, plan, syn, y))

    out.append(("objective/L_syn[head]", syn_loss, _param_leaves(head)))

    kern = KernelSpec()
    # bandwidths frozen at the unperturbed generator output
    v0 = generator_forward(specs.generator, omega.detached(), z, y).data
    plan_gen = LocalPlan(specs=specs, synthetic=True, stage2=True, kernel=kern.frozen(v0, u_const.data))

    def gen_loss_frozen():
        return generator_objective(plan_gen, omega, head.detached(), u_const, y, z)

    out.append(("objective/L_gen[generator]", gen_loss_frozen, _param_leaves(omega)))

    uh0 = make_synthetic(u_const, y, bank, specs, omega.detached(), phi.detached(), lam, z, z_c).uhat.data
    plan_rt = LocalPlan(specs=specs, synthetic=True, stage2=True, kernel=kern.frozen(uh0, u_const.data))

    def rt_loss():
        return rtnet_objective(plan_rt, phi, omega.detached(), head.detached(), bank, u_const, y, z, z_c, lam)

    out.append(("objective/L_rt[rtnet]", rt_loss, _param_leaves(phi)))

    # the detached embeddings are constants of the objective, so they are
    # taken once at the unperturbed point rather than inside the closure
    u_train, _ = classifier_forward(specs.classifier, theta.detached(), x, train=True)
    syn0 = make_synthetic(u_train.detach(), y, bank, specs, omega.detached(), phi.detached(), lam, z, z_c)

    def full_stage1():
        _, logits = classifier_forward(specs.classifier, theta, x, train=True)
        return add(cross_entropy(logits, y), stack_scalars(synthetic_head_losses(theta, plan, syn0, y)))

    out.append(("objective/L_cls+L_syn[classifier]", full_stage1, _param_leaves(theta)))
    return out


def run_gradcheck(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    comps = components(seed)
    names = [c[0] for c in comps]
    if corrupt is not None and corrupt not in names:
        raise KeyError(f"unknown component {corrupt!r}")
    return [check(name, fn, leaves, corrupt=(name == corrupt)) for name, fn, leaves in comps]


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.component) for r in results)
    lines = [f"{'component':<{width}}  {'max rel err':>12}  scalars  status"]
    for r in results:
        lines.append(f"{r.component:<{width}}  {r.max_rel_error:12.3e}  {r.scalars:7d}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
