"""Head-finetuning study and the component ablation grid."""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from fraug.client import LocalPlan, client_update, evaluate
from fraug.config import ExperimentConfig, replace_path
from fraug.data import scarcity_subsample
from fraug.federation import load_datasets, make_client, network_specs, run_experiment
from fraug.nets import head_forward, init_classifier, extractor_forward
from fraug.objectives import cross_entropy
from fraug.optim import OptimizerState, optimizer_step
from fraug.rng import stream
from fraug.tensor import Tensor, resolve_dtype

ABLATION_ROWS = (
    ("G", {"toggles.use_uhat": False, "toggles.use_uhat_c": False}),
    ("G+EMA", {"toggles.use_uhat": False, "toggles.use_uhat_c": True}),
    ("G+RTNet", {"toggles.use_uhat": True, "toggles.use_uhat_c": False}),
    ("full", {"toggles.use_uhat": True, "toggles.use_uhat_c": True}),
)


class FreezeViolation(AssertionError):
    pass


@dataclass
class HeadStudyRow:
    seed: int
    domain: str
    scarce: float
    finetuned: float

    @property
    def delta(self) -> float:
        return self.finetuned - self.scarce


def head_study(cfg: ExperimentConfig, seed: int) -> list[HeadStudyRow]:
    """Per client, without federation: train on a scarce fraction, then
    retrain only the head on embeddings of the whole train split."""
    frac = cfg.headstudy.fraction
    if not 0 < frac < 1:
        raise ValueError("the head study needs a scarce fraction below 1")
    full = load_datasets(cfg, apply_scarcity=False)
    specs = network_specs(cfg, full[0].dim, cfg.data.num_classes)
    dtype = resolve_dtype(cfg.run.precision)
    plan = LocalPlan(specs=specs, batch_size=cfg.train.batch_size)
    steps = cfg.train.rounds * cfg.train.local_steps
    rows = []
    for k, ds in enumerate(full):
        scarce = scarcity_subsample(ds, frac, cfg.data.seed)
        theta = init_classifier(specs.classifier, stream(seed, "init", "theta"), dtype)
        client = make_client(cfg, specs, k, scarce, theta, None, seed)
        if steps:
            client_update(client, plan, None, None, steps, 1)
        before = evaluate(specs, theta, ds.x_test, ds.y_test)

        frozen = {n: t.data.copy() for n, t, r in theta.items() if r != "head"}
        x_full = np.asarray(ds.x_train, dtype=dtype)
        emb = extractor_forward(specs.classifier, theta.detached(), x_full, train=False).data
        finetune_head(theta, emb, ds.y_train, cfg, stream(seed, "headstudy", k))
        for name, ref in frozen.items():
            if not np.array_equal(theta[name].data, ref):
                raise FreezeViolation(f"extractor parameter {name!r} changed during head finetuning")
        after = evaluate(specs, theta, ds.x_test, ds.y_test)
        rows.append(HeadStudyRow(seed, ds.name or f"D{k}", before, after))
    return rows


def finetune_head(theta, embeddings: np.ndarray, labels: np.ndarray, cfg: ExperimentConfig, rng) -> None:
    opt = OptimizerState(kind=cfg.train.optimizer, learning_rate=cfg.train.lr, momentum=cfg.train.momentum)
    n = labels.size
    b = min(cfg.train.batch_size, n)
    head = theta.select(roles={"head"})
    for _ in range(cfg.headstudy.finetune_steps):
        idx = rng.choice(n, size=b, replace=False)
        head.zero_grad()
        cross_entropy(head_forward(head, Tensor(embeddings[idx])), labels[idx]).backward()
        optimizer_step(head, opt)


def summarize_head_study(rows: list[HeadStudyRow]) -> dict:
    domains = []
    for r in rows:
        if r.domain not in domains:
            domains.append(r.domain)
    seeds = sorted({r.seed for r in rows})

    def avg(attr, seed):
        return statistics.fmean(getattr(r, attr) for r in rows if r.seed == seed)

    out = {"domains": {}, "seeds": seeds}
    for d in domains:
        sel = [r for r in rows if r.domain == d]
        out["domains"][d] = {
            "scarce": statistics.fmean(r.scarce for r in sel),
            "finetuned": statistics.fmean(r.finetuned for r in sel),
        }
    out["scarce_avg"] = statistics.fmean(avg("scarce", s) for s in seeds)
    out["finetuned_avg"] = statistics.fmean(avg("finetuned", s) for s in seeds)
    out["delta"] = out["finetuned_avg"] - out["scarce_avg"]
    return out


def ablation_config(cfg: ExperimentConfig, row: str) -> ExperimentConfig:
    toggles = dict(ABLATION_ROWS)[row]
    return replace_path(cfg, **{"strategy__name": "fraug", **{k.replace(".", "__"): v for k, v in toggles.items()}})


def ablation(cfg: ExperimentConfig, seeds=None, rows=None) -> dict:
    """``row -> {"per_seed": [...], "domains": {...}, "mean", "std"}``."""
    seeds = tuple(cfg.run.seeds if seeds is None else seeds)
    out = {}
    for name, _ in ABLATION_ROWS:
        if rows is not None and name not in rows:
            continue
        rcfg = ablation_config(cfg, name)
        results = [run_experiment(rcfg, s) for s in seeds]
        per_seed = [r.final_average() for r in results]
        domains = {}
        for r in results:
            for d, acc in r.final_accuracy().items():
                domains.setdefault(d, []).append(acc)
        out[name] = {
            "per_seed": per_seed,
            "domains": {d: statistics.fmean(v) for d, v in domains.items()},
            "mean": statistics.fmean(per_seed),
            "std": statistics.stdev(per_seed) if len(per_seed) > 1 else 0.0,
        }
    return out
