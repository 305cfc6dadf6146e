import itertools
import math

import numpy as np
import pytest

from fraug.config import ConfigError
from fraug.federation import (
    REFERENCE_OVERHEAD,
    Strategy,
    aggregate,
    communication_report,
    run_experiment,
    run_round,
    setup,
    transmit,
)
from fraug.params import ParameterSet, StructureError
from fraug.tensor import Tensor
from tests.conftest import small_config

ROLES = ("extractor", "batchnorm", "head", "generator")


def client_sets(k, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        out.append(
            ParameterSet(
                (f"p{i}", Tensor(rng.normal(size=(3, 4)).astype(dtype), requires_grad=True), role)
                for i, role in enumerate(ROLES)
            )
        )
    return out


def exact_mean_oracle(values, dtype):
    """Correctly rounded mean: exact sum (fsum), one division, one cast."""
    return dtype.type(math.fsum(float(v) for v in values) / len(values))


def aggregation_matches_oracle(ks=(1, 2, 5), dtype=np.float32):
    for k in ks:
        sets = client_sets(k, seed=k, dtype=dtype)
        out = aggregate(sets)
        for name in out.names():
            stack = np.stack([s[name].data for s in sets])
            flat = stack.reshape(k, -1)
            want = np.array([exact_mean_oracle(flat[:, j], np.dtype(dtype)) for j in range(flat.shape[1])])
            if out[name].data.reshape(-1).tobytes() != want.astype(dtype).tobytes():
                return False
    return True


def test_aggregate_is_exact_elementwise_mean():
    assert aggregation_matches_oracle()


def test_aggregate_simple_cases():
    a = ParameterSet([("w", Tensor(np.array([0.0])), "head")])
    b = ParameterSet([("w", Tensor(np.array([2.0])), "head")])
    assert aggregate([a, b])["w"].data[0] == 1.0
    single = client_sets(1)[0]
    assert aggregate([single]).to_bytes() == single.to_bytes()
    same = client_sets(1, seed=3)[0]
    assert aggregate([same, same.copy(), same.copy()]).to_bytes() == same.to_bytes()


def permutation_invariant(k=5):
    sets = client_sets(k, seed=42)
    ref = aggregate(sets).to_bytes()
    return all(aggregate([sets[i] for i in perm]).to_bytes() == ref for perm in itertools.permutations(range(k)))


def test_aggregate_permutation_invariant():
    assert permutation_invariant()


def test_aggregate_excludes_roles():
    out = aggregate(client_sets(3), exclude_roles={"batchnorm"})
    assert "batchnorm" not in out.roles()
    assert out.names() == ["p0", "p2", "p3"]


def test_aggregate_weighted():
    a = ParameterSet([("w", Tensor(np.array([0.0])), "head")])
    b = ParameterSet([("w", Tensor(np.array([4.0])), "head")])
    assert aggregate([a, b], weights=[3, 1])["w"].data[0] == 1.0
    with pytest.raises(ValueError):
        aggregate([a, b], weights=[1])


def test_aggregate_incompatible_names_first_mismatch():
    a = client_sets(1)[0]
    b = ParameterSet((("q0" if n == "p2" else n), t, r) for n, t, r in client_sets(1)[0].items())
    with pytest.raises(StructureError, match="p2"):
        aggregate([a, b])
    with pytest.raises(ValueError):
        aggregate([])


def test_transmit_roundtrip_counts_bytes():
    p = client_sets(1)[0]
    copy, nbytes = transmit(p)
    assert copy.to_bytes() == p.to_bytes() and nbytes == len(p.to_bytes())
    assert copy["p0"] is not p["p0"]


# --------------------------------------------------------------- payload roles
def payload_role_violations(strategies=("fraug", "fedavg", "fedbn", "fedprox", "noise-gauss", "single", "all")):
    """Runs one round per strategy, recording every payload that crosses the wire."""
    import fraug.federation as fe

    seen = []
    real = fe.transmit

    def spy(payload):
        seen.append(payload.roles())
        return real(payload)

    problems = []
    fe.transmit = spy
    try:
        for name in strategies:
            seen.clear()
            cfg = small_config(strategy__name=name, train__rounds=1)
            fed = setup(cfg, 0)
            run_round(fed, 1)
            banned = {"rtnet"}
            if name == "fedbn" or name == "fraug":
                banned.add("batchnorm")
            for roles in seen:
                if roles & banned:
                    problems.append(f"{name}: payload carried {sorted(roles & banned)}")
            if name in ("single", "all") and seen:
                problems.append(f"{name}: transmitted without federation")
    finally:
        fe.transmit = real
    return problems


def test_payload_roles():
    assert payload_role_violations() == []


def test_strategy_exclusions():
    assert Strategy("fedbn").exclude_roles == {"batchnorm", "rtnet"}
    assert Strategy("fraug").exclude_roles == {"batchnorm", "rtnet"}
    assert Strategy("fraug", use_localbn=False).exclude_roles == {"rtnet"}
    assert Strategy("fedavg").exclude_roles == {"rtnet"}
    assert not Strategy("single").federated and not Strategy("all").federated


def test_local_bn_survives_round():
    fed = setup(small_config(strategy__name="fedbn", train__rounds=1), 0)
    run_round(fed, 1)
    bn = [c.theta.select(roles={"batchnorm"}).to_bytes() for c in fed.clients]
    assert len(set(bn)) == len(bn)  # each client kept its own
    heads = [c.theta.select(roles={"head"}).to_bytes() for c in fed.clients]
    assert len(set(heads)) == 1


# ------------------------------------------------------------------ reductions
def trajectory(cfg, seed=0, workers=1):
    fed = setup(cfg, seed)
    out = []
    for r in range(1, cfg.train.rounds + 1):
        rec = run_round(fed, r, workers=workers)
        out.append(
            (
                [c.theta.to_bytes() for c in fed.clients],
                fed.server.theta.to_bytes(),
                [c["accuracy"] for c in rec.clients],
                [c["train"].get("loss_real") for c in rec.clients],
            )
        )
    return out


REDUCTION_SHAPE = dict(data__num_domains=4, train__rounds=3, train__local_steps=5)


def reduction_a():
    off = small_config(
        strategy__name="fraug",
        strategy__lambda_syn_max=0.0,
        toggles__use_synthetic=False,
        toggles__use_stage2=False,
        **REDUCTION_SHAPE,
    )
    return trajectory(off) == trajectory(small_config(strategy__name="fedbn", **REDUCTION_SHAPE))


def reduction_b():
    nobn = dict(network__classifier__batchnorm=False, **REDUCTION_SHAPE)
    return trajectory(small_config(strategy__name="fedbn", **nobn)) == trajectory(
        small_config(strategy__name="fedavg", **nobn)
    )


def reduction_c():
    return trajectory(small_config(strategy__name="noise-gauss", strategy__gamma=0.0, **REDUCTION_SHAPE)) == trajectory(
        small_config(strategy__name="fedavg", **REDUCTION_SHAPE)
    )


def test_reduction_fraug_off_is_fedbn():
    assert reduction_a()


def test_reduction_fedbn_without_bn_is_fedavg():
    assert reduction_b()


def test_reduction_zero_noise_is_fedavg():
    assert reduction_c()


def test_reductions_are_not_vacuous():
    # a live component must change the trajectory
    assert trajectory(small_config(strategy__name="fraug", **REDUCTION_SHAPE)) != trajectory(
        small_config(strategy__name="fedbn", **REDUCTION_SHAPE)
    )
    assert trajectory(small_config(strategy__name="noise-gauss", strategy__gamma=0.3, **REDUCTION_SHAPE)) != trajectory(
        small_config(strategy__name="fedavg", **REDUCTION_SHAPE)
    )


# ------------------------------------------------------------- other protocol
def test_zero_lr_fedavg_fixed_point():
    cfg = small_config(strategy__name="fedavg", train__lr=0.0, network__classifier__batchnorm=False, train__rounds=1)
    fed = setup(cfg, 0)
    before = fed.server.theta.to_bytes()
    run_round(fed, 1)
    assert fed.server.theta.to_bytes() == before


def displacement(mu):
    cfg = small_config(strategy__name="fedprox", strategy__mu=mu, train__local_steps=1, train__rounds=1)
    fed = setup(cfg, 0)
    start = fed.server.theta.copy()
    run_round_no_aggregate = fed.clients[0]
    from fraug.client import client_update

    client_update(run_round_no_aggregate, fed.plan, start.select(exclude={"rtnet"}), None, 1, 1)
    trainable = start.select(trainable_only=True).names()
    return math.sqrt(sum(float(((run_round_no_aggregate.theta[n].data - start[n].data) ** 2).sum()) for n in trainable))


def test_fedprox_large_mu_limits_displacement():
    assert displacement(1e6) <= displacement(0.0)


def test_zero_rounds_evaluates_initial_model():
    res = run_experiment(small_config(strategy__name="fedavg", train__rounds=0), 0)
    assert [r.round for r in res.records] == [0]
    assert len(res.final.clients) == 4


def parallel_matches_sequential(strategy="fraug"):
    cfg = small_config(strategy__name=strategy, train__rounds=2)
    return trajectory(cfg, workers=1) == trajectory(cfg, workers=4)


def test_parallel_matches_sequential():
    assert parallel_matches_sequential()


def test_all_and_single_strategies_run():
    for name in ("all", "single"):
        res = run_experiment(small_config(strategy__name=name, train__rounds=1), 0)
        assert len(res.final.clients) == 4
        assert res.final.clients[0]["params_up"] == 0


def test_zero_clients_is_config_error():
    with pytest.raises(ConfigError):
        setup(small_config(), 0, datasets=[])


def test_payload_accounting():
    cfg = small_config(strategy__name="fraug", train__rounds=1)
    fed = setup(cfg, 0)
    rec = run_round(fed, 1)
    theta, omega = fed.server.theta, fed.server.omega
    expected = theta.numel() - theta.numel({"batchnorm"}) + omega.numel()
    assert rec.clients[0]["params_up"] == expected == rec.clients[0]["params_down"]
    assert rec.clients[0]["bytes_up"] > 4 * expected


def test_communication_report_defaults():
    from fraug.config import ExperimentConfig

    rep = communication_report(ExperimentConfig())
    assert rep["overhead_ratio"] <= 0.05
    assert rep["rtnet_transmitted"] is False
    rows = {r["strategy"]: r["upload_per_round"] for r in rep["per_round"]}
    assert rows["fedavg"] == rep["classifier_params"]
    bn = rows["fedavg"] - rows["fedbn"]
    assert rows["fraug"] == rep["classifier_params"] - bn + rep["generator_params"]
    assert rows["single"] == rows["all"] == 0
    assert [tuple(r.values()) for r in rep["reference"]] == [tuple(r) for r in REFERENCE_OVERHEAD]
