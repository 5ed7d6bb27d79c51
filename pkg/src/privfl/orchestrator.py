"""Training loops: private federated SGD and the baselines it is judged against.

Five methods share one metrics shape:

  c         plain centralized minibatch SGD with momentum
  cdp       centralized DPSGD (Poisson sampling, clip, noise, accountant)
  f         FedAvg: sampled hospitals run local epochs, server averages
  fpdp      FedAvg where every local step is a full-noise DPSGD step and
            each hospital runs its own accountant
  dopamine  one noisy clipped step per hospital per round, momentum on the
            noisy gradient, encrypted averaging, one global accountant

The centralized loops are written independently of the federated ones on
purpose: the reduction checks (dopamine at K=1 vs cdp, fedavg at K=1 with one
local epoch vs c) compare two code paths that only share the arithmetic
engines, so they catch plumbing mistakes in either loop.

Randomness is split into per-role, per-hospital Philox streams derived from
the run seed, so a method never perturbs another method's draws and the
reductions above hold bit-for-bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import accountant as acct
from . import bfv, dp_engine, secure_agg
from .dp_engine import DpConfig, MomentumState
from .errors import ProtocolError
from .model_core import (
    Dataset,
    ModelParams,
    build_model,
    evaluate,
    loss_and_per_sample_grads,
    model_hash,
)
from .transport import close_network, loopback_network, tcp_network

METHODS = ("c", "cdp", "f", "fpdp", "dopamine")
SECURE_MODES = ("on", "off", "plaintext-audit")
TRANSPORTS = ("loopback", "tcp")

# Stream roles; each (seed, role, entity) triple is an independent generator.
ROLE_INIT = 1
ROLE_SHUFFLE = 2
ROLE_SAMPLE = 3
ROLE_NOISE = 4
ROLE_PARTICIPATION = 5
ROLE_ENCRYPTION = 6


def role_rng(seed: int, role: int, entity: int = 0) -> np.random.Generator:
    """Philox stream for one (role, entity) pair; order-independent by design."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, role, entity])))


@dataclass(frozen=True)
class RunConfig:
    """What to train and how; the dataset itself is passed in separately."""

    method: str
    dp: DpConfig = field(default_factory=DpConfig)
    model_kind: str = "logistic"
    hidden: int = 32
    batch_size: int = 32
    fedavg_local_epochs: int = 5
    participation_fraction: float | None = None  # None -> method default
    secure: str = "on"
    transport: str = "loopback"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.fedavg_local_epochs < 1:
            raise ValueError("fedavg_local_epochs must be >= 1")
        if self.participation_fraction is not None and not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must lie in (0, 1]")
        if self.secure not in SECURE_MODES:
            raise ValueError(f"secure must be one of {SECURE_MODES}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")

    @property
    def participation(self) -> float:
        """Fraction of hospitals drawn per round; half for the FedAvg pair."""
        if self.participation_fraction is not None:
            return self.participation_fraction
        return 0.5 if self.method in ("f", "fpdp") else 1.0


@dataclass(frozen=True)
class RoundRecord:
    """Metrics for one completed global round."""

    round_index: int
    train_loss: float
    test_accuracy: float
    epsilon_hat: float | None
    batch_sizes: tuple[int, ...]
    wall_ms: float


@dataclass(frozen=True)
class RunResult:
    method: str
    seed: int
    records: tuple[RoundRecord, ...]
    final_params: ModelParams
    # model_hashes[0] is the initial model; one more entry per completed round.
    model_hashes: tuple[str, ...]
    stop_reason: str  # "max-rounds" or "budget"


def poisson_sample(shard_size: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a Poisson-subsampled batch: each record kept with prob q."""
    if not 0.0 < q <= 1.0:
        raise ValueError("sampling probability must lie in (0, 1]")
    return np.flatnonzero(rng.random(shard_size) < q)


def shard_dataset(data: Dataset, hospitals: int) -> list[Dataset]:
    """Contiguous near-equal shards, one per hospital, preserving order."""
    if not 1 <= hospitals <= len(data):
        raise ValueError(f"cannot split {len(data)} records across {hospitals} hospitals")
    return [data.subset(idx) for idx in np.array_split(np.arange(len(data)), hospitals)]


def union_dataset(shards: list[Dataset]) -> Dataset:
    """Concatenation of the shards in order; what the centralized runs train on."""
    if len(shards) == 1:
        return shards[0]
    return Dataset(
        features=np.concatenate([s.features for s in shards]),
        labels=np.concatenate([s.labels for s in shards]),
        num_classes=shards[0].num_classes,
        name="union",
    )


def run(config: RunConfig, shards: list[Dataset], test_set: Dataset, seed: int) -> RunResult:
    """Train one method for one seed and return per-round metrics."""
    if not shards:
        raise ValueError("need at least one shard")
    if config.method in ("dopamine", "f", "fpdp") and config.dp.hospitals != len(shards):
        raise ValueError(
            f"config says {config.dp.hospitals} hospitals but {len(shards)} shards given"
        )
    if config.method == "c":
        return run_centralized_sgd(config, shards, test_set, seed)
    if config.method == "cdp":
        return run_centralized_dpsgd(config, shards, test_set, seed)
    if config.method in ("f", "fpdp"):
        return run_fedavg(config, shards, test_set, seed)
    return run_private_federated(config, shards, test_set, seed)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def _build(config: RunConfig, shards: list[Dataset], seed: int):
    model = build_model(
        config.model_kind, shards[0].num_features, shards[0].num_classes, hidden=config.hidden
    )
    params = model.init_params(role_rng(seed, ROLE_INIT))
    return model, params


def _epoch_minibatch_sgd(model, params, momentum_state, shard, config, rng):
    """One shuffled pass of plain minibatch SGD with momentum."""
    dp = config.dp
    order = rng.permutation(len(shard))
    for start in range(0, len(order), config.batch_size):
        batch = shard.subset(order[start : start + config.batch_size])
        _, grads = loss_and_per_sample_grads(model, params, batch)
        mean_grad = np.mean([g.values for g in grads], axis=0)
        momentum_state = dp_engine.momentum_step(momentum_state, mean_grad, dp.momentum)
        params = dp_engine.sgd_update(params, momentum_state, dp.learning_rate)
    return params, momentum_state


def _noisy_local_gradient(model, params, shard, dp, hospitals, sample_rng, noise_rng,
                          budget_slices: int | None = None):
    """Poisson-sample, clip, and noise one gradient; returns (gradient, batch size).

    budget_slices is the number of equal shares the total (epsilon, delta) is
    split into under per-round calibration: the round count for single-step
    methods, rounds times local steps for FedAvg-style ones.

    An empty batch is a legal Poisson outcome: the update is then pure noise
    at the variance a batch of one would get, so the step still consumes one
    noise draw and the privacy accounting is unchanged.
    """
    idx = poisson_sample(len(shard), dp.sampling_prob, sample_rng)
    dim = len(params)
    if budget_slices is None:
        budget_slices = dp.max_rounds
    if len(idx) == 0:
        if dp.calibration == "per-round":
            var = dp_engine.calibrated_noise_variance(
                dp.epsilon / budget_slices, dp.delta / budget_slices, dp.clip_norm, 1, hospitals
            )
            return noise_rng.normal(0.0, math.sqrt(var), size=dim), 0
        share = dp_engine.noise_share(dim, dp.noise_multiplier, dp.clip_norm, hospitals, noise_rng)
        return share, 0
    batch = shard.subset(idx)
    _, grads = loss_and_per_sample_grads(model, params, batch)
    clipped = [dp_engine.clip_gradient(g, dp.clip_norm) for g in grads]
    if dp.calibration == "per-round":
        noisy = dp_engine.noisy_average_calibrated(
            clipped, dp.epsilon / budget_slices, dp.delta / budget_slices,
            dp.clip_norm, hospitals, noise_rng,
        )
    else:
        noisy = dp_engine.noisy_average(
            clipped, dp.noise_multiplier, dp.clip_norm, hospitals, noise_rng
        )
    return noisy, len(idx)


def _make_ledger(dp: DpConfig):
    """Accountant state, or None when there is nothing to track (sigma = 0
    diagnostic reductions and the closed-form per-round calibration)."""
    if dp.calibration == "multiplier" and dp.noise_multiplier > 0:
        return acct.make_accountant(dp.sampling_prob, dp.noise_multiplier)
    return None


def _record(model, params, union, test_set, round_index, eps, sizes, t0) -> RoundRecord:
    return RoundRecord(
        round_index=round_index,
        train_loss=evaluate(model, params, union).loss,
        test_accuracy=evaluate(model, params, test_set).accuracy,
        epsilon_hat=eps,
        batch_sizes=tuple(int(s) for s in sizes),
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


# ---------------------------------------------------------------------------
# Centralized baselines
# ---------------------------------------------------------------------------

def run_centralized_sgd(config, shards, test_set, seed) -> RunResult:
    """Plain minibatch SGD with momentum on the pooled data; no privacy."""
    model, params = _build(config, shards, seed)
    union = union_dataset(shards)
    dp = config.dp
    shuffle_rng = role_rng(seed, ROLE_SHUFFLE, 1)
    mom = MomentumState.zeros(len(params))
    records, hashes = [], [model_hash(params)]
    for t in range(1, dp.max_rounds + 1):
        t0 = time.perf_counter()
        params, mom = _epoch_minibatch_sgd(model, params, mom, union, config, shuffle_rng)
        records.append(_record(model, params, union, test_set, t, None, (len(union),), t0))
        hashes.append(model_hash(params))
    return RunResult("c", seed, tuple(records), params, tuple(hashes), "max-rounds")


def run_centralized_dpsgd(config, shards, test_set, seed) -> RunResult:
    """DPSGD over the pooled data: one noisy clipped step per round.

    The noise variance is the full (sigma * C)^2 per coordinate, i.e. the
    hospitals=1 case of the shared-noise decomposition.
    """
    model, params = _build(config, shards, seed)
    union = union_dataset(shards)
    dp = config.dp
    sample_rng = role_rng(seed, ROLE_SAMPLE, 1)
    noise_rng = role_rng(seed, ROLE_NOISE, 1)
    ledger = _make_ledger(dp)
    mom = MomentumState.zeros(len(params))
    records, hashes = [], [model_hash(params)]
    stop = "max-rounds"
    for t in range(1, dp.max_rounds + 1):
        t0 = time.perf_counter()
        noisy, size = _noisy_local_gradient(model, params, union, dp, 1, sample_rng, noise_rng)
        new_mom = dp_engine.momentum_step(mom, noisy, dp.momentum)
        new_params = dp_engine.sgd_update(params, new_mom, dp.learning_rate)
        eps = None
        if ledger is not None:
            ledger = acct.charge(ledger)
            spend = acct.compose_and_convert(ledger, steps=0, delta=dp.delta)
            if acct.budget_exceeded(spend, dp.epsilon):
                stop = "budget"  # this round's step is discarded, per the gate
                break
            eps = spend.epsilon_hat
        elif dp.calibration == "per-round":
            eps = t * dp.epsilon / dp.max_rounds
        params, mom = new_params, new_mom
        records.append(_record(model, params, union, test_set, t, eps, (size,), t0))
        hashes.append(model_hash(params))
    return RunResult("cdp", seed, tuple(records), params, tuple(hashes), stop)


# ---------------------------------------------------------------------------
# FedAvg pair
# ---------------------------------------------------------------------------

def _choose_participants(k: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """ceil(K * fraction) hospitals without replacement; all of them skips the draw."""
    if fraction >= 1.0:
        return list(range(1, k + 1))
    m = math.ceil(k * fraction)
    return sorted(int(i) + 1 for i in rng.choice(k, size=m, replace=False))


def run_fedavg(config, shards, test_set, seed) -> RunResult:
    """FedAvg with optional per-step DP at the hospitals (methods f and fpdp).

    fpdp hospitals run ceil(1/q) Poisson DPSGD steps per local epoch (one
    expected pass over the shard) at full per-hospital noise variance
    (sigma * C)^2, and each hospital's own accountant is charged per step.
    The run stops before any hospital's projected spend would cross epsilon;
    the reported epsilon_hat is the worst spend across hospitals.
    """
    model, params = _build(config, shards, seed)
    union = union_dataset(shards)
    dp = config.dp
    k = len(shards)
    private = config.method == "fpdp"
    steps_per_epoch = math.ceil(1.0 / dp.sampling_prob)
    steps_per_round = config.fedavg_local_epochs * steps_per_epoch

    shuffle_rngs = {h: role_rng(seed, ROLE_SHUFFLE, h) for h in range(1, k + 1)}
    sample_rngs = {h: role_rng(seed, ROLE_SAMPLE, h) for h in range(1, k + 1)}
    noise_rngs = {h: role_rng(seed, ROLE_NOISE, h) for h in range(1, k + 1)}
    part_rng = role_rng(seed, ROLE_PARTICIPATION, 0)
    ledger0 = _make_ledger(dp) if private else None
    ledgers = {h: ledger0 for h in range(1, k + 1)} if ledger0 is not None else None
    moms = {h: MomentumState.zeros(len(params)) for h in range(1, k + 1)}

    records, hashes = [], [model_hash(params)]
    stop = "max-rounds"
    for t in range(1, dp.max_rounds + 1):
        t0 = time.perf_counter()
        chosen = _choose_participants(k, config.participation, part_rng)
        if ledgers is not None:
            projected = max(
                acct.compose_and_convert(ledgers[h], steps=steps_per_round, delta=dp.delta).epsilon_hat
                for h in chosen
            )
            if projected > dp.epsilon:
                stop = "budget"  # the next round would overdraw some hospital
                break
        locals_, sizes = [], []
        for h in chosen:
            local, mom, consumed = params, moms[h], 0
            for _ in range(config.fedavg_local_epochs):
                if private:
                    for _ in range(steps_per_epoch):
                        noisy, size = _noisy_local_gradient(
                            model, local, shards[h - 1], dp, 1, sample_rngs[h], noise_rngs[h],
                            budget_slices=dp.max_rounds * steps_per_round,
                        )
                        mom = dp_engine.momentum_step(mom, noisy, dp.momentum)
                        local = dp_engine.sgd_update(local, mom, dp.learning_rate)
                        consumed += size
                        if ledgers is not None:
                            ledgers[h] = acct.charge(ledgers[h])
                else:
                    local, mom = _epoch_minibatch_sgd(
                        model, local, mom, shards[h - 1], config, shuffle_rngs[h]
                    )
                    consumed += len(shards[h - 1])
            moms[h] = mom
            locals_.append(local.values)
            sizes.append(consumed)
        params = params.with_values(np.mean(locals_, axis=0))
        eps = None
        if ledgers is not None:
            eps = max(
                acct.compose_and_convert(ledgers[h], steps=0, delta=dp.delta).epsilon_hat
                for h in range(1, k + 1)
            )
        elif private and dp.calibration == "per-round":
            eps = t * dp.epsilon / dp.max_rounds
        records.append(_record(model, params, union, test_set, t, eps, sizes, t0))
        hashes.append(model_hash(params))
    return RunResult(config.method, seed, tuple(records), params, tuple(hashes), stop)


# ---------------------------------------------------------------------------
# Private federated training
# ---------------------------------------------------------------------------

def run_private_federated(config, shards, test_set, seed) -> RunResult:
    """One noisy clipped momentum step per hospital per round, then a secure
    average; the accountant is charged one subsampled-Gaussian step per round
    and the budget gate returns the previous global model.

    With secure="off" the average is computed in plaintext (used by the
    reduction checks); "plaintext-audit" runs the encrypted path and asserts
    it stays within the quantization bound of the plaintext average.
    """
    model, params = _build(config, shards, seed)
    union = union_dataset(shards)
    dp = config.dp
    k = len(shards)
    sample_rngs = {h: role_rng(seed, ROLE_SAMPLE, h) for h in range(1, k + 1)}
    noise_rngs = {h: role_rng(seed, ROLE_NOISE, h) for h in range(1, k + 1)}
    ledger = _make_ledger(dp)
    moms = {h: MomentumState.zeros(len(params)) for h in range(1, k + 1)}

    session, endpoints = None, None
    if config.secure != "off":
        network = tcp_network if config.transport == "tcp" else loopback_network
        endpoints = network(k)
        session = secure_agg.SecureAggregationSession.create(
            endpoints, bfv.EncryptionParams(),
            seed=int(role_rng(seed, ROLE_ENCRYPTION).integers(2**63)),
        )

    records, hashes = [], [model_hash(params)]
    stop = "max-rounds"
    try:
        for t in range(1, dp.max_rounds + 1):
            t0 = time.perf_counter()
            locals_, sizes = [], []
            for h in range(1, k + 1):
                noisy, size = _noisy_local_gradient(
                    model, params, shards[h - 1], dp, k, sample_rngs[h], noise_rngs[h]
                )
                new_mom = dp_engine.momentum_step(moms[h], noisy, dp.momentum)
                locals_.append(dp_engine.sgd_update(params, new_mom, dp.learning_rate))
                moms[h] = new_mom
                sizes.append(size)
            eps = None
            if ledger is not None:
                ledger = acct.charge(ledger)
                spend = acct.compose_and_convert(ledger, steps=0, delta=dp.delta)
                if acct.budget_exceeded(spend, dp.epsilon):
                    stop = "budget"  # return the previous global model
                    break
                eps = spend.epsilon_hat
            elif dp.calibration == "per-round":
                eps = t * dp.epsilon / dp.max_rounds
            plain_mean = params.with_values(np.mean([m.values for m in locals_], axis=0))
            if session is None:
                params = plain_mean
            else:
                aggregated = session.aggregate(locals_)
                if config.secure == "plaintext-audit":
                    gap = float(np.max(np.abs(aggregated.values - plain_mean.values)))
                    if gap > 5e-4:
                        raise ProtocolError(
                            f"secure aggregate deviates from the plaintext audit by {gap:.2e}"
                        )
                params = aggregated
            records.append(_record(model, params, union, test_set, t, eps, sizes, t0))
            hashes.append(model_hash(params))
    finally:
        if endpoints is not None:
            close_network(endpoints)
    return RunResult("dopamine", seed, tuple(records), params, tuple(hashes), stop)
