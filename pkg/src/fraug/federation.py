"""Server loop, aggregation, baseline strategies and communication accounting."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fraug.client import ClientState, LocalPlan, PrototypeBank, ScheduleState, client_update, evaluate
from fraug.config import ConfigError, ExperimentConfig
from fraug.data import (
    DomainDataset,
    ShiftSpec,
    TabularSchema,
    generate_synthetic,
    join_splits,
    load_tabular,
    merge_domains,
    scarcity_subsample,
)
from fraug.nets import (
    ClassifierSpec,
    GeneratorSpec,
    NetworkSpecs,
    RTNetSpec,
    classifier_macs,
    generator_macs,
    init_classifier,
    init_generator,
    init_rtnet,
    rtnet_macs,
)
from fraug.objectives import KernelSpec
from fraug.optim import OptimizerState
from fraug.params import ParameterSet
from fraug.rng import stream
from fraug.tensor import resolve_dtype

NOISE_KINDS = {"noise-uniform": "uniform", "noise-laplace": "laplace", "noise-gauss": "gauss"}

# Parameter counts (millions) and MACs (G) of the full-scale reference models.
REFERENCE_OVERHEAD = (
    ("ResNet18", 11.18, "1.84"),
    ("CNN for Digits", 18.15, "0.08"),
    ("Generator", 0.39, "<<0.01"),
    ("RTNet", 0.26, "<<0.01"),
)


@dataclass(frozen=True)
class Strategy:
    name: str
    mu: float = 0.01
    gamma: float = 0.1
    use_localbn: bool = True

    @property
    def federated(self) -> bool:
        return self.name not in ("single", "all")

    @property
    def shares_generator(self) -> bool:
        return self.name == "fraug"

    @property
    def exclude_roles(self) -> frozenset:
        """Roles kept out of every payload (rtnet never enters one)."""
        if self.name == "fedbn" or (self.name == "fraug" and self.use_localbn):
            return frozenset({"batchnorm", "rtnet"})
        return frozenset({"rtnet"})


@dataclass
class RoundRecord:
    round: int
    clients: list[dict] = field(default_factory=list)
    duration: float = 0.0

    def mean_accuracy(self) -> float:
        return float(np.mean([c["accuracy"] for c in self.clients]))


@dataclass
class ServerState:
    theta: ParameterSet
    omega: ParameterSet | None
    round: int = 0


def aggregate(client_params: list[ParameterSet], exclude_roles=(), weights=None) -> ParameterSet:
    """Elementwise mean over clients of every entry whose role is not excluded.

    Values are summed in ascending order per element (in float64) so the
    result does not depend on client order; elements on which every client
    agrees are returned unchanged.
    """
    if not client_params:
        raise ValueError("aggregate needs at least one client")
    first = client_params[0]
    for other in client_params[1:]:
        first.check_compatible(other)
    exclude_roles = set(exclude_roles)
    k = len(client_params)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (k,) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("aggregation weights must be k non-negative numbers with a positive sum")
        weights = weights / weights.sum()
    out = ParameterSet()
    for name, t, role in first.items():
        if role in exclude_roles:
            continue
        stack = np.stack([p[name].data for p in client_params]).astype(np.float64)
        if weights is None:
            mean = np.sort(stack, axis=0).sum(axis=0) / k
        else:
            order = np.argsort(stack, axis=0, kind="stable")
            w = np.broadcast_to(weights.reshape((k,) + (1,) * t.data.ndim), stack.shape)
            mean = (np.take_along_axis(stack, order, 0) * np.take_along_axis(w, order, 0)).sum(axis=0)
        agree = (stack == stack[0]).all(axis=0)
        mean = np.where(agree, stack[0], mean).astype(t.dtype)
        out.add(name, type(t)(mean, requires_grad=t.requires_grad), role)
    return out


def transmit(payload: ParameterSet) -> tuple[ParameterSet, int]:
    """Send a payload through the checkpoint wire format; returns (copy, bytes)."""
    blob = payload.to_bytes()
    return ParameterSet.from_bytes(blob), len(blob)


# ------------------------------------------------------------------ set-up
def network_specs(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> NetworkSpecs:
    nc = cfg.network
    cls = ClassifierSpec(
        input_dim=input_dim,
        hidden=nc.classifier.hidden,
        embed_dim=nc.classifier.embed_dim,
        num_classes=num_classes,
        batchnorm=nc.classifier.batchnorm,
        bn_momentum=nc.classifier.bn_momentum,
    )
    gen = GeneratorSpec(
        noise_dim=nc.generator.noise_dim,
        num_classes=num_classes,
        hidden=nc.generator.hidden,
        output_dim=cls.embed_dim,
        conditioning=nc.generator.conditioning,
    )
    return NetworkSpecs(cls, gen, RTNetSpec(dim=cls.embed_dim, hidden=nc.rtnet.hidden, zero_init=nc.rtnet.zero_init))


def shift_spec(cfg: ExperimentConfig) -> ShiftSpec:
    d = cfg.data
    return ShiftSpec(
        num_domains=d.num_domains,
        num_classes=d.num_classes,
        dim=d.dim,
        class_sep=d.class_sep,
        noise_std=d.noise_std,
        rotate=d.rotate,
        scale_range=tuple(d.scale_range),
        translation_range=d.translation_range,
        concept_shift=d.concept_shift,
        identity=d.identity,
    )


def load_datasets(cfg: ExperimentConfig, apply_scarcity: bool = True) -> list[DomainDataset]:
    d = cfg.data
    if d.source == "synthetic":
        datasets = generate_synthetic(shift_spec(cfg), d.n_train, d.n_test, seed=d.seed)
    else:
        if not d.train_files or len(d.train_files) != len(d.test_files):
            raise ConfigError("data.train_files and data.test_files must list one file per domain")
        datasets = []
        for k, (tr, te) in enumerate(zip(d.train_files, d.test_files)):
            train = load_tabular(tr, TabularSchema(num_classes=d.num_classes, split="train", domain=k))
            test = load_tabular(te, TabularSchema(num_classes=d.num_classes, split="test", domain=k))
            datasets.append(join_splits(train, test))
    if apply_scarcity and d.fraction < 1:
        datasets = [scarcity_subsample(ds, d.fraction, d.seed) for ds in datasets]
    return datasets


def make_plan(cfg: ExperimentConfig, specs: NetworkSpecs, strategy: Strategy) -> LocalPlan:
    s, tg = cfg.strategy, cfg.toggles
    common = dict(specs=specs, batch_size=cfg.train.batch_size)
    name = strategy.name
    if name == "fraug":
        return LocalPlan(
            **common,
            synthetic=tg.use_synthetic,
            stage2=tg.use_stage2,
            use_uhat=tg.use_uhat,
            use_uhat_c=tg.use_uhat_c,
            sequential_stage1=tg.sequential_stage1,
            mmd_prose_variant=tg.mmd_prose_variant,
            alpha=s.alpha,
            beta=s.beta,
            kernel=KernelSpec("median", tuple(s.kernel_multipliers)),
            keep_roles=strategy.exclude_roles - {"rtnet"},
        )
    if name == "fedbn":
        return LocalPlan(**common, keep_roles=frozenset({"batchnorm"}))
    if name == "fedprox":
        return LocalPlan(**common, prox_mu=s.mu)
    if name in NOISE_KINDS:
        return LocalPlan(**common, noise=NOISE_KINDS[name], gamma=s.gamma)
    return LocalPlan(**common)


def _optimizer(
    cfg: ExperimentConfig, lr: float, weight_decay: float, clip: float | None = None, kind: str | None = None
) -> OptimizerState:
    return OptimizerState(
        kind=kind or cfg.train.optimizer,
        learning_rate=lr,
        momentum=cfg.train.momentum,
        weight_decay=weight_decay,
        max_grad_norm=clip,
    )


def make_client(
    cfg: ExperimentConfig,
    specs: NetworkSpecs,
    cid: int,
    dataset: DomainDataset,
    theta: ParameterSet,
    omega: ParameterSet | None,
    seed: int,
) -> ClientState:
    dtype = theta["f.proj.weight"].dtype
    total_steps = max(1, cfg.train.rounds * cfg.train.local_steps)
    default_ramp = max(1, int(round(cfg.strategy.ramp_fraction * total_steps)))
    s, t = cfg.strategy, cfg.train
    return ClientState(
        cid=cid,
        dataset=dataset,
        theta=theta,
        omega=omega,
        phi=None,
        bank=PrototypeBank(
            num_classes=specs.classifier.num_classes,
            dim=specs.classifier.embed_dim,
            ramp_steps=s.ramp_proto_steps or default_ramp,
            lambda_max=s.lambda_proto_max,
            eps=s.proto_eps,
            literal=cfg.toggles.literal_prototype_update,
            dtype=dtype,
        ),
        schedule=ScheduleState(lambda_max=s.lambda_syn_max, ramp_steps=s.ramp_syn_steps or default_ramp),
        opt_theta=_optimizer(cfg, cfg.train.lr, cfg.train.weight_decay),
        opt_omega=_optimizer(
            cfg, t.lr_generator, t.weight_decay_generator, t.clip_generator, t.optimizer_generator
        ),
        opt_phi=_optimizer(cfg, t.lr_rtnet, t.weight_decay_rtnet, t.clip_rtnet, t.optimizer_rtnet),
        data_rng=stream(seed, "client", cid, "data"),
        noise_rng=stream(seed, "client", cid, "noise"),
        init_rng=stream(seed, "client", cid, "init"),
    )


@dataclass
class Federation:
    """Everything one seeded run needs: server, clients, plan and strategy."""

    cfg: ExperimentConfig
    seed: int
    strategy: Strategy
    specs: NetworkSpecs
    plan: LocalPlan
    server: ServerState
    clients: list[ClientState]
    eval_sets: list[DomainDataset]


def setup(cfg: ExperimentConfig, seed: int, datasets: list[DomainDataset] | None = None) -> Federation:
    datasets = load_datasets(cfg) if datasets is None else datasets
    if not datasets:
        raise ConfigError("zero clients")
    num_classes = cfg.data.num_classes
    specs = network_specs(cfg, datasets[0].dim, num_classes)
    dtype = resolve_dtype(cfg.run.precision)
    strategy = Strategy(cfg.strategy.name, cfg.strategy.mu, cfg.strategy.gamma, cfg.toggles.use_localbn)
    theta0 = init_classifier(specs.classifier, stream(seed, "init", "theta"), dtype)
    omega0 = init_generator(specs.generator, stream(seed, "init", "omega"), dtype) if strategy.shares_generator else None
    train_sets = [merge_domains(datasets)] if strategy.name == "all" else datasets
    clients = [
        make_client(cfg, specs, k, ds, theta0.copy(), omega0.copy() if omega0 is not None else None, seed)
        for k, ds in enumerate(train_sets)
    ]
    plan = make_plan(cfg, specs, strategy)
    server = ServerState(theta0.copy(), omega0.copy() if omega0 is not None else None)
    return Federation(cfg, seed, strategy, specs, plan, server, clients, datasets)


# ------------------------------------------------------------------ rounds
def run_round(fed: Federation, r: int, workers: int = 1) -> RoundRecord:
    """Broadcast, local updates (optionally on worker threads), aggregate, evaluate."""
    if r < 1:
        raise ValueError("rounds are numbered from 1")
    if not fed.clients:
        raise ConfigError("zero clients")
    start = time.perf_counter()
    strategy, plan = fed.strategy, fed.plan
    steps = fed.cfg.train.local_steps
    if strategy.name == "all":
        steps *= len(fed.eval_sets)

    down_theta = down_omega = None
    bytes_down = 0
    if strategy.federated:
        down_theta, nb = transmit(fed.server.theta.select(exclude=strategy.exclude_roles))
        bytes_down += nb
        if strategy.shares_generator:
            down_omega, nb = transmit(fed.server.omega)
            bytes_down += nb

    def work(client):
        theta_b = down_theta.copy() if down_theta is not None else None
        omega_b = down_omega.copy() if down_omega is not None else None
        return client_update(client, plan, theta_b, omega_b, steps, r)

    if workers > 1 and len(fed.clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, fed.clients))
    else:
        results = [work(c) for c in fed.clients]

    uploads, bytes_up = [], []
    for theta_k, omega_k, _ in results:
        nb = 0
        if strategy.federated:
            up_theta, n1 = transmit(theta_k.select(exclude=strategy.exclude_roles))
            up_omega = None
            nb += n1
            if strategy.shares_generator:
                up_omega, n2 = transmit(omega_k)
                nb += n2
            uploads.append((up_theta, up_omega))
        bytes_up.append(nb)

    if strategy.federated:
        weights = None
        if fed.cfg.toggles.weighted_aggregation:
            weights = [c.y_train.size for c in fed.clients]
        new_theta = aggregate([u[0] for u in uploads], weights=weights)
        fed.server.theta.load_values(new_theta)
        if strategy.shares_generator:
            fed.server.omega.load_values(aggregate([u[1] for u in uploads], weights=weights))
        # clients adopt the new global model now, keeping their local roles
        for c in fed.clients:
            c.theta.load_values(new_theta, skip_roles=plan.keep_roles)
    fed.server.round = r

    record = RoundRecord(round=r)
    payload_params = 0
    if strategy.federated:
        payload_params = fed.server.theta.numel() - fed.server.theta.numel(strategy.exclude_roles)
        if strategy.shares_generator:
            payload_params += fed.server.omega.numel()
    for k, ds in enumerate(fed.eval_sets):
        client = fed.clients[0] if strategy.name == "all" else fed.clients[k]
        metrics = results[0][2] if strategy.name == "all" else results[k][2]
        record.clients.append(
            {
                "client": k,
                "domain": ds.name or f"D{k}",
                "accuracy": evaluate(fed.specs, client.theta, ds.x_test, ds.y_test),
                "train": dict(metrics),
                "params_up": payload_params,
                "params_down": payload_params,
                "bytes_up": bytes_up[0] if strategy.name == "all" else bytes_up[k],
                "bytes_down": bytes_down,
            }
        )
    record.duration = time.perf_counter() - start
    return record


def initial_record(fed: Federation) -> RoundRecord:
    record = RoundRecord(round=0)
    for k, ds in enumerate(fed.eval_sets):
        client = fed.clients[0] if fed.strategy.name == "all" else fed.clients[k]
        record.clients.append(
            {
                "client": k,
                "domain": ds.name or f"D{k}",
                "accuracy": evaluate(fed.specs, client.theta, ds.x_test, ds.y_test),
                "train": {},
                "params_up": 0,
                "params_down": 0,
                "bytes_up": 0,
                "bytes_down": 0,
            }
        )
    return record


@dataclass
class ExperimentResult:
    seed: int
    strategy: str
    records: list[RoundRecord]

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    def final_accuracy(self) -> dict[str, float]:
        return {c["domain"]: c["accuracy"] for c in self.final.clients}

    def final_average(self) -> float:
        return self.final.mean_accuracy()


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    writer=None,
    datasets=None,
    workers: int | None = None,
    on_setup=None,
) -> ExperimentResult:
    """Run ``cfg.train.rounds`` rounds for one seed; round 0 is the initial model.

    ``writer`` (a :class:`fraug.metrics.MetricsWriter`) receives every round;
    ``on_setup`` is called with the :class:`Federation` before training.
    """
    fed = setup(cfg, seed, datasets)
    if on_setup is not None:
        on_setup(fed)
    workers = cfg.run.workers if workers is None else workers
    records = [initial_record(fed)]
    if writer is not None:
        writer.write_round(records[0], seed, fed.strategy.name)
    for r in range(1, cfg.train.rounds + 1):
        rec = run_round(fed, r, workers=workers)
        records.append(rec)
        if writer is not None:
            writer.write_round(rec, seed, fed.strategy.name)
    return ExperimentResult(seed, fed.strategy.name, records)


# ---------------------------------------------------------- communication
def communication_report(cfg: ExperimentConfig, strategies=None) -> dict:
    """Parameter counts, overhead ratios and per-round payload sizes."""
    specs = network_specs(cfg, cfg.data.dim, cfg.data.num_classes)
    dtype = resolve_dtype(cfg.run.precision)
    rng = stream(0, "paramcount")
    theta = init_classifier(specs.classifier, rng, dtype)
    omega = init_generator(specs.generator, rng, dtype)
    phi = init_rtnet(specs.rtnet, rng, dtype)
    n_cls, n_gen, n_rt = theta.numel(), omega.numel(), phi.numel()
    rows = []
    for name in strategies or ("fraug", "fedavg", "fedbn", "fedprox", "noise-gauss", "single", "all"):
        st = Strategy(name, use_localbn=cfg.toggles.use_localbn)
        if not st.federated:
            up = 0
        else:
            up = n_cls - theta.numel(st.exclude_roles)
            if st.shares_generator:
                up += n_gen
        rows.append({"strategy": name, "upload_per_round": up, "download_per_round": up})
    return {
        "classifier_params": n_cls,
        "generator_params": n_gen,
        "rtnet_params": n_rt,
        "generator_ratio": n_gen / n_cls,
        "rtnet_ratio": n_rt / n_cls,
        "overhead_ratio": (n_gen + n_rt) / n_cls,
        "classifier_macs": classifier_macs(specs.classifier),
        "generator_macs": generator_macs(specs.generator),
        "rtnet_macs": rtnet_macs(specs.rtnet),
        "rtnet_transmitted": False,
        "per_round": rows,
        "reference": [
            {"model": m, "params_m": p, "macs_g": macs} for m, p, macs in REFERENCE_OVERHEAD
        ],
    }

