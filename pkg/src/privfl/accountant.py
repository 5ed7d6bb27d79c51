"""Privacy accounting for Poisson-subsampled Gaussian steps.

The moments-accountant bookkeeping is realized as Rényi differential privacy:
each global round charges one subsampled-Gaussian step at every order in a
fixed grid, ledgers compose linearly, and the (epsilon, delta) figure is the
standard conversion minimized over orders. The per-order RDP values use the
stable log-space series: a finite binomial sum at integer orders and the
two-part erfc series at fractional orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

# Orders 1.25 .. 5.0 in quarter steps, then a sparse tail out to 64.
_DENSE = tuple(1.0 + k / 4.0 for k in range(1, 17))
_SPARSE = (6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0)


def default_orders() -> tuple[float, ...]:
    """The default Rényi order grid."""
    return _DENSE + _SPARSE


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    """log(exp(a) - exp(b)) for a > b."""
    if b == -math.inf:
        return a
    if a <= b:
        raise ValueError("log_sub requires a > b")
    return a + math.log1p(-math.exp(b - a))


def _log_comb(n: float, k: int) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_erfc(x: float) -> float:
    # erfc(x) = 2 * ndtr(-x * sqrt(2)); log_ndtr stays finite for large x.
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_q, log_1mq = math.log(q), math.log1p(-q)
    out = -math.inf
    for i in range(alpha + 1):
        term = (
            _log_comb(alpha, i)
            + i * log_q
            + (alpha - i) * log_1mq
            + (i * i - i) / (2.0 * sigma**2)
        )
        out = _log_add(out, term)
    return out


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    sqrt2_sigma = math.sqrt(2.0) * sigma
    # Terms peak near max(alpha, z0); don't stop before passing the peak.
    min_terms = max(alpha, z0) + 1.0
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef)) if coef != 0 else -math.inf
        j = alpha - i
        log_t0 = log_coef + i * log_q + j * log_1mq
        log_t1 = log_coef + j * log_q + i * log_1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / sqrt2_sigma)
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / sqrt2_sigma)
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 and i > min_terms:
            break
        if i > 10_000:
            raise RuntimeError("fractional-order RDP series failed to converge")
    return _log_add(log_a0, log_a1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Per-step RDP of order alpha for Poisson sampling prob q and noise sigma.

    For q = 1 this is exactly alpha / (2 sigma^2); for q < 1 the stable
    log-space moment computation is used.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


@dataclass(frozen=True)
class AccountantState:
    """Cumulative per-order RDP ledger for one (q, sigma) mechanism."""

    orders: tuple[float, ...]
    step_rdp: tuple[float, ...]
    rdp_ledger: tuple[float, ...]
    rounds: int
    sampling_prob: float
    noise_multiplier: float

    def __post_init__(self):
        if any(a <= 1 for a in self.orders):
            raise ValueError("all orders must exceed 1")
        if len(self.orders) != len(self.rdp_ledger) or len(self.orders) != len(self.step_rdp):
            raise ValueError("orders and ledgers disagree on length")
        if any(v < 0 for v in self.rdp_ledger):
            raise ValueError("ledger entries must be non-negative")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")


@dataclass(frozen=True)
class PrivacySpend:
    """The (epsilon_hat, delta) figure after a number of rounds."""

    epsilon_hat: float
    delta: float
    rounds: int


def make_accountant(q: float, sigma: float, orders=None) -> AccountantState:
    """Fresh accountant for a mechanism with fixed (q, sigma)."""
    orders = tuple(orders) if orders is not None else default_orders()
    step = tuple(rdp_subsampled_gaussian(q, sigma, a) for a in orders)
    return AccountantState(
        orders=orders,
        step_rdp=step,
        rdp_ledger=tuple(0.0 for _ in orders),
        rounds=0,
        sampling_prob=q,
        noise_multiplier=sigma,
    )


def charge(state: AccountantState, steps: int = 1) -> AccountantState:
    """Advance the ledger by `steps` identical mechanism invocations."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    return AccountantState(
        orders=state.orders,
        step_rdp=state.step_rdp,
        rdp_ledger=tuple(v + steps * s for v, s in zip(state.rdp_ledger, state.step_rdp)),
        rounds=state.rounds + steps,
        sampling_prob=state.sampling_prob,
        noise_multiplier=state.noise_multiplier,
    )


def compose_and_convert(state: AccountantState, steps: int, delta: float) -> PrivacySpend:
    """Project the spend `steps` further rounds ahead and convert to (eps, delta).

    epsilon_hat = min over orders of (rdp_total(alpha) + ln(1/delta)/(alpha-1)),
    with epsilon_hat(0 rounds) = 0 by definition.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    total_rounds = state.rounds + steps
    if total_rounds == 0:
        return PrivacySpend(epsilon_hat=0.0, delta=delta, rounds=0)
    log_inv_delta = math.log(1.0 / delta)
    eps = min(
        ledger + steps * step + log_inv_delta / (alpha - 1.0)
        for alpha, step, ledger in zip(state.orders, state.step_rdp, state.rdp_ledger)
    )
    return PrivacySpend(epsilon_hat=float(eps), delta=delta, rounds=total_rounds)


def budget_exceeded(spend: PrivacySpend, target_epsilon: float) -> bool:
    """True iff the realized epsilon_hat strictly exceeds the target."""
    return spend.epsilon_hat > target_epsilon


def epsilon_schedule(q: float, sigma: float, delta: float, rounds: int, orders=None) -> np.ndarray:
    """epsilon_hat after 1..rounds steps; the accountant CLI table."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    state = make_accountant(q, sigma, orders)
    out = np.empty(rounds)
    for t in range(1, rounds + 1):
        out[t - 1] = compose_and_convert(state, t, delta).epsilon_hat
    return out
