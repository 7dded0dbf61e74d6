"""Candidate distribution fitting, AIC-based selection, and posterior sampling.

Each feature column gets a small library of candidate families (normal,
logistic, cauchy, negative binomial, Bernoulli bit, discrete uniform).
Families are fitted by maximum likelihood, ranked by AIC, and the winning
family's hyperparameters can be refined with a random-walk Metropolis
chain on transformed coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, polygamma, xlogy

from .dataset import InvalidConfig

__all__ = [
    "DistFitError",
    "SupportViolation",
    "DegenerateSample",
    "TooSmallSample",
    "NoValidCandidate",
    "ChainDiverged",
    "Family",
    "FAMILIES",
    "DEFAULT_CANDIDATES",
    "get_family",
    "FittedPrior",
    "McmcConfig",
    "ChainSummary",
    "fit_family",
    "select_model",
    "model_probs",
    "mcmc_posterior",
    "sample_prior",
]

_MIN_SAMPLE = 8
_R_CAP = 1e6  # negative-binomial shape bound; hit only for under-dispersed data


class DistFitError(Exception):
    pass


class SupportViolation(DistFitError):
    pass


class DegenerateSample(DistFitError):
    """All-equal sample offered to a continuous scale family."""


class TooSmallSample(DistFitError):
    pass


class NoValidCandidate(DistFitError):
    pass


class ChainDiverged(DistFitError):
    pass


def _is_integral(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)) and np.all(x == np.floor(x)))


# ---------------------------------------------------------------------------
# family definitions


class Family:
    """One candidate distribution family.

    Subclasses provide log-density, MLE, sampling, and the coordinate
    transform used by the Metropolis chain (log for positive parameters,
    logit for probabilities, identity otherwise). Log-density code uses
    numpy ops throughout so extreme chain proposals evaluate to inf or
    nan instead of raising.
    """

    tag: str = ""
    k: int = 0
    support: str = "real"
    param_names: tuple[str, ...] = ()

    def valid_for(self, x: np.ndarray) -> bool:
        if not np.all(np.isfinite(x)):
            return False
        if self.support == "real":
            return True
        if self.support == "nonneg_int":
            return _is_integral(x) and bool(np.all(x >= 0))
        if self.support == "bits":
            return bool(np.all((x == 0.0) | (x == 1.0)))
        if self.support == "int_interval":
            return _is_integral(x)
        raise AssertionError(self.support)

    def logpdf(self, theta: Sequence[float], x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loglik(self, theta: Sequence[float], x: np.ndarray) -> float:
        with np.errstate(all="ignore"):
            return float(np.sum(self.logpdf(theta, x)))

    def fit(self, x: np.ndarray) -> tuple[tuple[float, ...], float]:
        raise NotImplementedError

    def sample(self, theta: Sequence[float], n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_chain(self, theta: Sequence[float], n: int) -> np.ndarray:
        """Map parameters onto the unconstrained chain coordinates."""
        return np.asarray(theta, dtype=float)

    def from_chain(self, phi: np.ndarray) -> tuple[float, ...]:
        return tuple(float(v) for v in phi)


class _Normal(Family):
    tag = "normal"
    k = 2
    support = "real"
    param_names = ("mu", "sigma")

    def logpdf(self, theta, x):
        mu, sigma = theta
        z = (x - mu) / sigma
        return -0.5 * z * z - np.log(sigma) - 0.5 * math.log(2.0 * math.pi)

    def fit(self, x):
        # closed form; population sd (n denominator) is the MLE
        mu = float(np.mean(x))
        sigma = float(np.std(x))
        theta = (mu, sigma)
        return theta, self.loglik(theta, x)

    def sample(self, theta, n, rng):
        mu, sigma = theta
        return mu + sigma * rng.standard_normal(n)

    def to_chain(self, theta, n):
        mu, sigma = theta
        return np.array([mu, math.log(sigma)])

    def from_chain(self, phi):
        with np.errstate(all="ignore"):
            return (float(phi[0]), float(np.exp(phi[1])))


class _Logistic(Family):
    tag = "logistic"
    k = 2
    support = "real"
    param_names = ("mu", "s")

    def logpdf(self, theta, x):
        mu, s = theta
        z = np.abs((x - mu) / s)  # pdf is even in z, so fold for stability
        return -z - np.log(s) - 2.0 * np.log1p(np.exp(-z))

    def fit(self, x):
        q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
        iqr = q3 - q1
        # logistic quartiles sit at mu +- s*ln 3
        s0 = iqr / (2.0 * math.log(3.0)) if iqr > 0 else float(np.std(x)) * math.sqrt(3.0) / math.pi
        s0 = max(s0, 1e-12)

        def nll(phi):
            return -self.loglik((phi[0], math.exp(phi[1])), x)

        res = minimize(
            nll,
            np.array([med, math.log(s0)]),
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-12, "maxiter": 4000},
        )
        theta = (float(res.x[0]), float(math.exp(res.x[1])))
        return theta, -float(res.fun)

    def sample(self, theta, n, rng):
        mu, s = theta
        u = rng.uniform(size=n)
        return mu + s * (np.log(u) - np.log1p(-u))

    def to_chain(self, theta, n):
        mu, s = theta
        return np.array([mu, math.log(s)])

    def from_chain(self, phi):
        with np.errstate(all="ignore"):
            return (float(phi[0]), float(np.exp(phi[1])))


class _Cauchy(Family):
    tag = "cauchy"
    k = 2
    support = "real"
    param_names = ("x0", "gamma")

    def logpdf(self, theta, x):
        x0, gamma = theta
        z = (x - x0) / gamma
        return -np.log(math.pi * gamma) - np.log1p(z * z)

    def fit(self, x):
        q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
        g0 = (q3 - q1) / 2.0  # quartiles sit at x0 +- gamma
        if g0 <= 0:
            g0 = max(float(np.std(x)) / 2.0, 1e-12)

        def nll(phi):
            return -self.loglik((phi[0], math.exp(phi[1])), x)

        res = minimize(
            nll,
            np.array([med, math.log(g0)]),
            method="Nelder-Mead",
            options={"xatol": 1e-12, "fatol": 1e-12, "maxiter": 4000},
        )
        theta = (float(res.x[0]), float(math.exp(res.x[1])))
        return theta, -float(res.fun)

    def sample(self, theta, n, rng):
        x0, gamma = theta
        u = rng.uniform(size=n)
        return x0 + gamma * np.tan(math.pi * (u - 0.5))

    def to_chain(self, theta, n):
        x0, gamma = theta
        return np.array([x0, math.log(gamma)])

    def from_chain(self, phi):
        with np.errstate(all="ignore"):
            return (float(phi[0]), float(np.exp(phi[1])))


class _NegativeBinomial(Family):
    """Counts with pmf C(x+r-1, x) p^r (1-p)^x, mean r(1-p)/p."""

    tag = "negative_binomial"
    k = 2
    support = "nonneg_int"
    param_names = ("r", "p")

    def logpdf(self, theta, x):
        r, p = theta
        return (
            gammaln(x + r)
            - gammaln(r)
            - gammaln(x + 1.0)
            + r * np.log(p)
            + xlogy(x, 1.0 - p)
        )

    def _profile_ll(self, r: float, x: np.ndarray) -> float:
        p = r / (r + float(np.mean(x)))
        return self.loglik((r, p), x)

    def fit(self, x):
        xbar = float(np.mean(x))
        if xbar == 0.0:
            # every draw zero: p = 1 and any r give likelihood 1
            return (1.0, 1.0), 0.0
        lo, hi = math.log(1e-3), math.log(_R_CAP)
        # golden-section maximization over log r
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = self._profile_ll(math.exp(c), x)
        fd = self._profile_ll(math.exp(d), x)
        while b - a > 1e-10:
            if fc > fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = self._profile_ll(math.exp(c), x)
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = self._profile_ll(math.exp(d), x)
        r = math.exp((a + b) / 2.0)
        n = len(x)
        if r < _R_CAP * 0.99:
            # polish: profile score g(r) = sum psi(x+r) - n psi(r) + n log(r/(r+xbar))
            for _ in range(60):
                g = float(np.sum(digamma(x + r))) - n * digamma(r) + n * math.log(r / (r + xbar))
                if abs(g) <= 1e-10:
                    break
                gp = float(np.sum(polygamma(1, x + r))) - n * polygamma(1, r) + n * (1.0 / r - 1.0 / (r + xbar))
                if gp == 0.0:
                    break
                step = g / gp
                r_new = r - step
                while r_new <= 0:
                    step /= 2.0
                    r_new = r - step
                r = r_new
        p = r / (r + xbar)
        theta = (float(r), float(p))
        return theta, self.loglik(theta, x)

    def sample(self, theta, n, rng):
        r, p = theta
        if p >= 1.0:
            return np.zeros(n)
        lam = rng.gamma(shape=r, scale=(1.0 - p) / p, size=n)
        return rng.poisson(lam).astype(float)

    def to_chain(self, theta, n):
        r, p = theta
        p = min(max(p, 0.5 / n), 1.0 - 0.5 / n)
        return np.array([math.log(r), math.log(p / (1.0 - p))])

    def from_chain(self, phi):
        with np.errstate(all="ignore"):
            return (float(np.exp(phi[0])), float(1.0 / (1.0 + np.exp(-phi[1]))))


class _Binomial(Family):
    """Single Bernoulli bit; encoded categoricals contribute one per bit column."""

    tag = "binomial"
    k = 1
    support = "bits"
    param_names = ("p",)

    def logpdf(self, theta, x):
        (p,) = theta
        return xlogy(x, p) + xlogy(1.0 - x, 1.0 - p)

    def fit(self, x):
        p = float(np.mean(x))
        theta = (p,)
        return theta, self.loglik(theta, x)

    def sample(self, theta, n, rng):
        (p,) = theta
        u = rng.uniform(size=n)
        return (u < p).astype(float)

    def to_chain(self, theta, n):
        (p,) = theta
        p = min(max(p, 0.5 / n), 1.0 - 0.5 / n)
        return np.array([math.log(p / (1.0 - p))])

    def from_chain(self, phi):
        with np.errstate(all="ignore"):
            return (float(1.0 / (1.0 + np.exp(-phi[0]))),)


class _DiscreteUniform(Family):
    tag = "discrete_uniform"
    k = 2
    support = "int_interval"
    param_names = ("a", "b")

    def logpdf(self, theta, x):
        a, b = round(theta[0]), round(theta[1])
        width = b - a + 1
        if width < 1:
            return np.full(np.shape(x), -np.inf)
        inside = (x >= a) & (x <= b)
        return np.where(inside, -math.log(width), -np.inf)

    def fit(self, x):
        theta = (float(np.min(x)), float(np.max(x)))
        return theta, self.loglik(theta, x)

    def sample(self, theta, n, rng):
        a, b = round(theta[0]), round(theta[1])
        u = rng.uniform(size=n)
        return np.minimum(np.floor(a + u * (b - a + 1)), b).astype(float)

    # the Metropolis chain walks the (a, b) integer lattice directly


FAMILIES: dict[str, Family] = {
    f.tag: f
    for f in (
        _Normal(),
        _Logistic(),
        _Cauchy(),
        _NegativeBinomial(),
        _Binomial(),
        _DiscreteUniform(),
    )
}

DEFAULT_CANDIDATES = tuple(FAMILIES)


def get_family(tag: str) -> Family:
    try:
        return FAMILIES[tag]
    except KeyError:
        raise NoValidCandidate(f"unknown family {tag!r}") from None


# ---------------------------------------------------------------------------
# fitting and model selection


@dataclass
class ChainSummary:
    param_names: tuple[str, ...]
    mean: tuple[float, ...]
    sd: tuple[float, ...]
    acceptance_rate: float
    n_kept: int
    draws: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "param_names": list(self.param_names),
            "mean": list(self.mean),
            "sd": list(self.sd),
            "acceptance_rate": self.acceptance_rate,
            "n_kept": self.n_kept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainSummary":
        return cls(
            param_names=tuple(d["param_names"]),
            mean=tuple(float(v) for v in d["mean"]),
            sd=tuple(float(v) for v in d["sd"]),
            acceptance_rate=float(d["acceptance_rate"]),
            n_kept=int(d["n_kept"]),
        )


@dataclass
class FittedPrior:
    family: Family
    theta_hat: tuple[float, ...]
    loglik: float
    aic: float
    model_prob: float = 1.0
    chain: Optional[ChainSummary] = None

    @property
    def theta(self) -> tuple[float, ...]:
        """Chain posterior mean when available, otherwise the MLE."""
        if self.chain is not None:
            return self.chain.mean
        return self.theta_hat

    def to_dict(self) -> dict:
        return {
            "family": self.family.tag,
            "param_names": list(self.family.param_names),
            "theta_hat": list(self.theta_hat),
            "loglik": self.loglik,
            "aic": self.aic,
            "model_prob": self.model_prob,
            "chain": None if self.chain is None else self.chain.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedPrior":
        chain = d.get("chain")
        return cls(
            family=get_family(d["family"]),
            theta_hat=tuple(float(v) for v in d["theta_hat"]),
            loglik=float(d["loglik"]),
            aic=float(d["aic"]),
            model_prob=float(d.get("model_prob", 1.0)),
            chain=None if chain is None else ChainSummary.from_dict(chain),
        )


def fit_family(family: Family | str, sample: Sequence[float]) -> tuple[tuple[float, ...], float]:
    """Maximum-likelihood fit of one family. Returns (theta_hat, loglik)."""
    if isinstance(family, str):
        family = get_family(family)
    x = np.asarray(sample, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    if len(x) < _MIN_SAMPLE:
        raise TooSmallSample(f"need at least {_MIN_SAMPLE} values, got {len(x)}")
    if not family.valid_for(x):
        raise SupportViolation(f"sample outside support of family {family.tag!r}")
    if family.support == "real" and np.ptp(x) == 0.0:
        raise DegenerateSample(
            f"all values equal; scale parameter of {family.tag!r} is unbounded"
        )
    if family.tag == "cauchy":
        # the cauchy likelihood is unbounded (gamma -> 0 at the atom) when
        # one value holds more than half the sample
        _, counts = np.unique(x, return_counts=True)
        if counts.max() * 2 > len(x):
            raise DegenerateSample(
                "over half the sample sits at a single value; cauchy fit is unbounded"
            )
    return family.fit(x)


def model_probs(aics: Sequence[float]) -> np.ndarray:
    """Akaike weights: softmax of -AIC/2 with min-shift for overflow safety."""
    a = np.asarray(aics, dtype=float)
    shifted = a - a.min()
    w = np.exp(-shifted / 2.0)
    return w / w.sum()


def select_model(
    sample: Sequence[float],
    candidates: Sequence[Family | str] = DEFAULT_CANDIDATES,
) -> list[FittedPrior]:
    """Fit every support-compatible candidate and rank ascending by AIC.

    Candidates whose support does not contain the sample are skipped
    silently, as are scale families handed an all-equal sample.
    """
    x = np.asarray(sample, dtype=float).ravel()
    fitted: list[FittedPrior] = []
    for cand in candidates:
        fam = get_family(cand) if isinstance(cand, str) else cand
        if not fam.valid_for(x):
            continue
        try:
            theta, ll = fit_family(fam, x)
        except DegenerateSample:
            continue
        aic = -2.0 * ll + 2.0 * fam.k
        fitted.append(FittedPrior(family=fam, theta_hat=theta, loglik=ll, aic=aic))
    if not fitted:
        raise NoValidCandidate("no candidate family is valid for this sample")
    fitted.sort(key=lambda fp: (fp.aic, fp.family.tag))
    probs = model_probs([fp.aic for fp in fitted])
    for fp, p in zip(fitted, probs):
        fp.model_prob = float(p)
    return fitted


# ---------------------------------------------------------------------------
# MCMC over hyperparameters


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 20000
    burn_in: int = 5000
    scales: Optional[tuple[float, ...]] = None  # None: Hessian-based auto-tuning
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 1:
            raise InvalidConfig("n_iter must be >= 1")
        if not 0 <= self.burn_in < self.n_iter:
            raise InvalidConfig("burn_in must satisfy 0 <= burn_in < n_iter")
        if self.scales is not None:
            if any(s <= 0 for s in self.scales):
                raise InvalidConfig("proposal scales must be positive")


def _fd_hessian(fn: Callable[[np.ndarray], float], phi: np.ndarray) -> np.ndarray:
    d = len(phi)
    h = 1e-4 * np.maximum(1.0, np.abs(phi))
    H = np.empty((d, d))
    f0 = fn(phi)
    for i in range(d):
        for j in range(i, d):
            if i == j:
                ei = np.zeros(d)
                ei[i] = h[i]
                H[i, i] = (fn(phi + ei) - 2.0 * f0 + fn(phi - ei)) / h[i] ** 2
            else:
                ei = np.zeros(d)
                ej = np.zeros(d)
                ei[i] = h[i]
                ej[j] = h[j]
                H[i, j] = H[j, i] = (
                    fn(phi + ei + ej) - fn(phi + ei - ej) - fn(phi - ei + ej) + fn(phi - ei - ej)
                ) / (4.0 * h[i] * h[j])
    return H


def _auto_scales(family: Family, theta_hat, x: np.ndarray) -> np.ndarray:
    d = len(family.param_names)
    n = len(x)
    if family.tag == "discrete_uniform":
        # integer lattice walk; the flat-top likelihood has no usable curvature
        return np.full(d, 0.5)
    phi0 = family.to_chain(theta_hat, n)

    def ll(phi):
        return family.loglik(family.from_chain(phi), x)

    fallback = np.full(d, 1.0 / math.sqrt(n))
    try:
        H = _fd_hessian(ll, phi0)
        cov = np.linalg.inv(-H)
        diag = np.diag(cov)
        if np.any(~np.isfinite(diag)) or np.any(diag <= 0):
            return fallback
        return 2.4 / math.sqrt(d) * np.sqrt(diag)
    except np.linalg.LinAlgError:
        return fallback


def mcmc_posterior(
    family: Family | str,
    sample: Sequence[float],
    cfg: McmcConfig = McmcConfig(),
    theta_hat: Optional[tuple[float, ...]] = None,
) -> ChainSummary:
    """Random-walk Metropolis over transformed hyperparameters.

    Flat priors on the transformed scale, so the acceptance ratio reduces
    to the likelihood ratio. The chain starts at the MLE. A streak of 100
    consecutive non-finite-likelihood proposals aborts the run.
    """
    if isinstance(family, str):
        family = get_family(family)
    x = np.asarray(sample, dtype=float).ravel()
    if theta_hat is None:
        theta_hat, _ = fit_family(family, x)
    d = len(family.param_names)
    scales = (
        np.asarray(cfg.scales, dtype=float)
        if cfg.scales is not None
        else _auto_scales(family, theta_hat, x)
    )
    if len(scales) != d:
        raise InvalidConfig(f"expected {d} proposal scales, got {len(scales)}")
    rng = np.random.default_rng(cfg.seed)
    integer_walk = family.tag == "discrete_uniform"
    if integer_walk:
        cur = np.array([round(theta_hat[0]), round(theta_hat[1])], dtype=float)
        cur_theta = (float(cur[0]), float(cur[1]))
    else:
        cur = family.to_chain(theta_hat, len(x))
        cur_theta = family.from_chain(cur)
    cur_ll = family.loglik(cur_theta, x)
    if not np.isfinite(cur_ll):
        raise ChainDiverged("log-likelihood non-finite at the chain start")

    draws = np.empty((cfg.n_iter, d))
    accepted = 0
    bad_streak = 0
    for it in range(cfg.n_iter):
        step = rng.standard_normal(d) * scales
        if integer_walk:
            prop = cur + np.round(step)
            prop_theta = (float(prop[0]), float(prop[1]))
        else:
            prop = cur + step
            prop_theta = family.from_chain(prop)
        prop_ll = family.loglik(prop_theta, x)
        if np.isfinite(prop_ll):
            bad_streak = 0
            if math.log(rng.uniform()) < prop_ll - cur_ll:
                cur, cur_theta, cur_ll = prop, prop_theta, prop_ll
                accepted += 1
        else:
            bad_streak += 1
            if bad_streak >= 100:
                raise ChainDiverged(
                    "100 consecutive proposals with non-finite log-likelihood"
                )
        draws[it] = cur_theta
    kept = draws[cfg.burn_in :]
    return ChainSummary(
        param_names=family.param_names,
        mean=tuple(float(v) for v in kept.mean(axis=0)),
        sd=tuple(float(v) for v in kept.std(axis=0, ddof=1)),
        acceptance_rate=accepted / cfg.n_iter,
        n_kept=len(kept),
        draws=kept,
    )


def sample_prior(fp: FittedPrior, n: int, seed) -> np.ndarray:
    """Draw n values from a fitted prior, preferring the chain mean.

    seed may be an integer or an already-constructed Generator, which lets
    the simulation layer hand in its own per-draw streams.
    """
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return fp.family.sample(fp.theta, n, rng)
