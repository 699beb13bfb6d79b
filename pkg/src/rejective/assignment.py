"""Exact machinery for conditional-on-total Bernoulli treatment assignment.

Units adopt treatment independently with probabilities ``p_i``; everything
here conditions on the realized number treated equaling ``n1``.  The
conditional law puts mass proportional to ``prod_i p_i^d_i (1-p_i)^(1-d_i)``
on each binary vector ``d`` with ``sum(d) == n1``.

The workhorse quantities are elementary symmetric functions of the odds
``w_i = p_i / (1 - p_i)``: writing ``e_k(w)`` for the sum over all size-k
subsets of products of ``w``, a vector ``d`` selecting subset ``S`` has
conditional probability ``prod_{i in S} w_i / e_{n1}(w)``, and the marginal
(inclusion) probability of unit ``i`` is ``w_i e_{n1-1}(w_{-i}) / e_{n1}(w)``.

All ``e_k`` arithmetic is carried out in log space: across the subset-size
axis the values span far more orders of magnitude than a float64 can hold
once n is in the thousands, so no single linear-space rescaling suffices.
Sums of nonnegative terms in log space are cancellation-free.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "InclusionProfile",
    "EnumeratedAssignments",
    "esp_suffix_table",
    "inclusion_probabilities",
    "draw_assignment",
    "draw_assignments",
    "enumerate_assignments",
    "exact_randomization_moments",
]

ENUMERATION_GUARD = 10**6


@dataclass(frozen=True)
class InclusionProfile:
    """Exact conditional inclusion probabilities for one (p, n1) design.

    ``pi[i]`` is the probability unit i is treated given the total; ``pi_tilde``
    carries the per-unit assignment variances ``pi * (1 - pi)`` used as weights
    by the variance formulas downstream.
    """

    pi: np.ndarray
    pi_tilde: np.ndarray
    n1: int
    n0: int

    @property
    def n(self) -> int:
        return self.pi.shape[0]


@dataclass(frozen=True)
class EnumeratedAssignments:
    """Full support of the conditional assignment law.

    ``draws`` has one row per support point (int8, each row summing to n1);
    ``probabilities`` are the exact conditional probabilities, summing to 1.
    Iterating yields ``(draw, probability)`` pairs.
    """

    draws: np.ndarray
    probabilities: np.ndarray

    def __len__(self) -> int:
        return self.draws.shape[0]

    def __iter__(self):
        return zip(self.draws, self.probabilities)


def _validate_probabilities(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("p must be a 1-d probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("treatment probabilities must lie in [0, 1]")
    return p


def _split_units(p: np.ndarray, n1: int):
    """Peel off deterministic units (p in {0, 1}) and check feasibility.

    Odds are infinite at p == 1, so forced units never enter the symmetric
    function tables; the conditional problem is solved on the free units with
    a reduced quota.
    """
    n = p.shape[0]
    if not 0 <= n1 <= n:
        raise ValueError(f"n1={n1} outside [0, {n}]")
    forced_in = np.flatnonzero(p == 1.0)
    forced_out = np.flatnonzero(p == 0.0)
    free = np.flatnonzero((p > 0.0) & (p < 1.0))
    k_free = n1 - forced_in.size
    if k_free < 0:
        raise ValueError(
            f"infeasible design: {forced_in.size} units have p=1 "
            f"but only n1={n1} treatment slots"
        )
    if k_free > free.size:
        raise ValueError(
            f"infeasible design: n1={n1} requires {k_free} treated among "
            f"{free.size} units with 0 < p < 1 ({forced_out.size} have p=0)"
        )
    return forced_in, forced_out, free, k_free


def esp_suffix_table(w, k_max: int) -> np.ndarray:
    """Log-space table of elementary symmetric functions over suffixes.

    Returns ``T`` of shape ``(n + 1, k_max + 1)`` with
    ``T[j, k] = log e_k(w[j:])``; row ``n`` is the empty suffix
    (``e_0 = 1``, ``e_k = 0`` for k >= 1, i.e. ``[0, -inf, ...]``).

    Built by the backward recurrence
    ``e_k(w[j:]) = e_k(w[j+1:]) + w[j] * e_{k-1}(w[j+1:])``,
    a sum of nonnegative terms, so log-space evaluation is stable for any
    n (no overflow or underflow of representable magnitudes).
    """
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("odds must be finite and nonnegative")
    n = w.shape[0]
    if not 0 <= k_max <= n:
        raise ValueError(f"k_max={k_max} outside [0, {n}]")
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    table = np.full((n + 1, k_max + 1), -np.inf)
    table[:, 0] = 0.0
    for j in range(n - 1, -1, -1):
        prev = table[j + 1]
        if k_max >= 1:
            table[j, 1:] = np.logaddexp(prev[1:], logw[j] + prev[:-1])
    return table


def _chord_scale(w: np.ndarray, k: int) -> float:
    """Odds rescaling that keeps the normalized DP values near unit size.

    Inclusion probabilities are invariant to scaling all odds by t > 0, so t
    is free to be spent on conditioning: pick the exponential tilt centering
    the independent-sum at k, then a second linear-in-k correction so that
    ``e_k(w t)`` is comparable to ``C(n, k)``.  By log-concavity of
    ``k -> e_k`` the whole profile ``log(e_k(wt) / C(n, k))``, k = 0..k_max,
    then stays within a modest band, which is what lets the sweeps below run
    in plain float64 without overflow.
    """
    n = w.shape[0]
    logw = np.log(w)
    lo, hi = -745.0, 745.0
    for _ in range(80):
        u = 0.5 * (lo + hi)
        with np.errstate(over="ignore"):
            total = (1.0 / (1.0 + np.exp(-(logw + u)))).sum()
        if total > k:
            hi = u
        else:
            lo = u
    u = 0.5 * (lo + hi)
    log_binom = (
        math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    )
    delta = np.logaddexp(0.0, logw + u).sum() - log_binom
    return math.exp(u - delta / k)


class _NormalizedRow:
    """One row of binomial-normalized symmetric functions, f_b = e_b / C(L, b).

    ``L`` is the number of units folded in so far.  The recurrence for adding
    one unit is a nonnegative combination, so entries never cancel; a scalar
    log-scale absorbs any slow drift of the row magnitude.
    """

    __slots__ = ("values", "log_scale", "length")

    def __init__(self, width: int):
        self.values = np.zeros(width)
        self.values[0] = 1.0
        self.log_scale = 0.0
        self.length = 0

    def copy(self) -> "_NormalizedRow":
        out = _NormalizedRow.__new__(_NormalizedRow)
        out.values = self.values.copy()
        out.log_scale = self.log_scale
        out.length = self.length
        return out

    def add_unit(self, wt: float, ar: np.ndarray) -> None:
        L = self.length + 1
        v = self.values
        out = v * ((L - ar) / L)
        out[1:] += (wt / L) * ar[1:] * v[:-1]
        m = out.max()
        if m > 1e100 or (m > 0 and m < 1e-100):
            out /= m
            self.log_scale += math.log(m)
        self.values = out
        self.length = L


def _hypergeom_profile(i: int, nf: int, k: int) -> np.ndarray:
    """Exact-ratio hypergeometric pmf C(i,a) C(nf-1-i, k-1-a) / C(nf-1, k-1).

    Rolled multiplicatively outward from the mode (so intermediate values
    never overflow) and normalized by its own sum, which the Vandermonde
    identity pins to one.  Entries outside the feasible range of ``a`` are
    exactly zero.  Returned over a = 0..k-1.
    """
    m = k - 1
    a_lo = max(0, m - (nf - 1 - i))
    a_hi = min(i, m)
    h = np.zeros(k)
    a = np.arange(a_lo, a_hi, dtype=float)
    # ratio h(a+1) / h(a)
    ratios = ((i - a) * (m - a)) / ((a + 1.0) * (nf - i - m + a))
    mode = min(max((i + 1) * (m + 1) // (nf + 1), a_lo), a_hi)
    seg = np.ones(a_hi - a_lo + 1)
    pos = mode - a_lo
    if pos < seg.shape[0] - 1:
        seg[pos + 1 :] = np.cumprod(ratios[pos:])
    if pos > 0:
        seg[:pos] = np.cumprod(1.0 / ratios[:pos][::-1])[::-1]
    h[a_lo : a_hi + 1] = seg / seg.sum()
    return h


def _free_inclusion_probabilities(w: np.ndarray, k: int) -> np.ndarray:
    """Inclusion probabilities for the free units via a prefix/suffix split.

    For each unit, ``e_{k-1}`` of the others is assembled as the convolution
    of prefix and suffix symmetric functions, never by deflating the full
    ``e_k(w)`` (that subtraction cancels catastrophically for large odds).
    Prefix and suffix sweeps run on binomial-normalized values, whose near
    unit magnitude keeps float64 rounding at machine scale even at n = 1e5;
    the binomial mass enters the per-unit convolution exactly, as a
    hypergeometric profile.  Suffix rows are checkpointed every ``block``
    units and regenerated one block at a time, keeping memory at
    O(sqrt(n) * k) while the prefix row sweeps forward once.
    """
    nf = w.shape[0]
    if k == 0:
        return np.zeros(nf)
    if k == nf:
        return np.ones(nf)

    wt = w * _chord_scale(w, k)
    width = k + 1
    ar = np.arange(width, dtype=float)
    block = max(16, math.isqrt(nf))
    n_blocks = (nf + block - 1) // block

    # Backward sweep: checkpoint the suffix row at every block boundary.
    checkpoints: list[_NormalizedRow | None] = [None] * (n_blocks + 1)
    suffix = _NormalizedRow(width)
    checkpoints[n_blocks] = suffix.copy()
    for j in range(nf - 1, -1, -1):
        suffix.add_unit(wt[j], ar)
        if j % block == 0:
            checkpoints[j // block] = suffix.copy()

    full = checkpoints[0]
    log_f_full = math.log(full.values[k]) + full.log_scale

    log_pi = np.empty(nf)
    log_k_over_n = math.log(k) - math.log(nf)
    prefix = _NormalizedRow(width)
    for b in range(n_blocks):
        lo = b * block
        hi = min(lo + block, nf)
        # rows[i - lo] = suffix over w[i+1:] for i in [lo, hi), walked back
        # from the next checkpoint (empty row when the last block is ragged).
        cur = (
            checkpoints[b + 1].copy()
            if hi == (b + 1) * block
            else _NormalizedRow(width)
        )
        rows = np.empty((hi - lo, width))
        scales = np.empty(hi - lo)
        rows[hi - 1 - lo] = cur.values
        scales[hi - 1 - lo] = cur.log_scale
        for j in range(hi - 1, lo, -1):
            cur.add_unit(wt[j], ar)
            rows[j - 1 - lo] = cur.values
            scales[j - 1 - lo] = cur.log_scale
        for i in range(lo, hi):
            h = _hypergeom_profile(i, nf, k)
            q = h @ (prefix.values[:k] * rows[i - lo, k - 1 :: -1])
            log_pi[i] = (
                math.log(wt[i])
                + log_k_over_n
                + math.log(q)
                + prefix.log_scale
                + scales[i - lo]
                - log_f_full
            )
            prefix.add_unit(wt[i], ar)
    return np.exp(log_pi)


def inclusion_probabilities(p, n1: int) -> InclusionProfile:
    """Exact conditional inclusion probabilities under the assignment law.

    Deterministic units (p of 0 or 1) are forced out or in before the
    log-space dynamic program runs on the remaining odds.  The returned
    marginals satisfy ``sum(pi) == n1`` up to float rounding and agree with
    brute-force enumeration wherever enumeration is feasible.
    """
    p = _validate_probabilities(p)
    forced_in, forced_out, free, k_free = _split_units(p, n1)
    pi = np.zeros(p.shape[0])
    pi[forced_in] = 1.0
    if free.size:
        w = p[free] / (1.0 - p[free])
        pi[free] = _free_inclusion_probabilities(np.log(w), k_free)
    return InclusionProfile(
        pi=pi, pi_tilde=pi * (1.0 - pi), n1=n1, n0=p.shape[0] - n1
    )


def _batch_draw(p: np.ndarray, n1: int, uniforms: np.ndarray) -> np.ndarray:
    """Sequential conditional sampling, vectorized across draws.

    At each unit, with ``m`` slots still open, the acceptance probability is
    ``w_i e_{m-1}(w_rest) / e_m(w_here_on)`` read off the suffix table; every
    unit consumes one uniform per draw whether free or forced, so a batch of
    R draws consumes exactly the first R*n uniforms of a stream in row order.
    """
    forced_in, forced_out, free, k_free = _split_units(p, n1)
    R, n = uniforms.shape
    d = np.zeros((R, n), dtype=np.int8)
    d[:, forced_in] = 1
    if free.size == 0 or k_free == 0:
        return d
    w = p[free] / (1.0 - p[free])
    logw = np.log(w)
    table = esp_suffix_table(w, k_free)
    m = np.full(R, k_free, dtype=np.intp)
    for j, pos in enumerate(free):
        active = m > 0
        log_accept = np.full(R, -np.inf)
        ma = m[active]
        log_accept[active] = (
            logw[j] + table[j + 1, ma - 1] - table[j, ma]
        )
        take = uniforms[:, pos] < np.exp(log_accept)
        d[take, pos] = 1
        m[take] -= 1
    return d


def draw_assignment(p, n1: int, rng: np.random.Generator) -> np.ndarray:
    """One exact draw from the conditional law; always has ``sum(d) == n1``.

    Consumes exactly ``n`` uniforms from ``rng``.
    """
    p = _validate_probabilities(p)
    u = rng.random((1, p.shape[0]))
    return _batch_draw(p, n1, u)[0]


def draw_assignments(p, n1: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Matrix of ``size`` independent exact draws (rows), from one stream.

    Equivalent to stacking ``size`` calls to :func:`draw_assignment` on the
    same generator, but vectorized.
    """
    p = _validate_probabilities(p)
    u = rng.random((size, p.shape[0]))
    return _batch_draw(p, n1, u)


def enumerate_assignments(p, n1: int) -> EnumeratedAssignments:
    """Materialize the full conditional law; the project-wide exact oracle.

    Guarded at ``C(n_free, k_free) <= 10^6`` support points.  Probabilities
    are normalized over the enumerated support (softmax in log space), so
    they sum to one by construction up to rounding.
    """
    p = _validate_probabilities(p)
    forced_in, forced_out, free, k_free = _split_units(p, n1)
    n = p.shape[0]
    count = math.comb(free.size, k_free)
    if count > ENUMERATION_GUARD:
        raise ValueError(
            f"support has {count} assignments, above the "
            f"{ENUMERATION_GUARD} enumeration guard"
        )
    with np.errstate(divide="ignore"):
        logw = np.log(p[free]) - np.log1p(-p[free])
    draws = np.zeros((count, n), dtype=np.int8)
    draws[:, forced_in] = 1
    logprob = np.empty(count)
    for row, combo in enumerate(itertools.combinations(range(free.size), k_free)):
        idx = free[list(combo)]
        draws[row, idx] = 1
        logprob[row] = logw[list(combo)].sum()
    logprob -= logprob.max()
    prob = np.exp(logprob)
    prob /= prob.sum()
    return EnumeratedAssignments(draws=draws, probabilities=prob)


def exact_randomization_moments(p, n1: int, statistic):
    """Exact mean and covariance of a statistic over the assignment law.

    ``statistic`` maps a draw (binary vector) to a scalar or 1-d vector.
    Returns ``(mean, cov)`` with matching shapes (scalar variance for scalar
    statistics).  Cost is one statistic evaluation per support point, so the
    enumeration guard applies.
    """
    support = enumerate_assignments(p, n1)
    values = np.asarray([np.atleast_1d(statistic(d)) for d, _ in support], dtype=float)
    probs = support.probabilities
    mean = probs @ values
    centered = values - mean
    cov = (centered.T * probs) @ centered
    if mean.shape == (1,):
        return float(mean[0]), float(cov[0, 0])
    return mean, cov


def marginal_consistency_residual(p, n1: int) -> float:
    """Max elementwise gap between DP inclusion probabilities and enumeration."""
    profile = inclusion_probabilities(p, n1)
    support = enumerate_assignments(p, n1)
    marginals = support.probabilities @ support.draws
    return float(np.abs(profile.pi - marginals).max())


def sum_consistency_residual(profile: InclusionProfile) -> float:
    """|sum(pi) - n1| evaluated with compensated summation."""
    return abs(math.fsum(profile.pi.tolist()) - profile.n1)
