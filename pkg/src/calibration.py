from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import DataError, NumericalError
from .losses import DEFAULT_SMOOTH, dice_loss_grad


logger = logging.getLogger(__name__)

ObjectiveFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


# -----------------------------
# Temperature scaling
# -----------------------------

def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """sigmoid(z / T), stable for any finite z."""
    if not temperature > 0:
        raise DataError(f"Temperature must be > 0, got {temperature}")
    return expit(np.asarray(logits, dtype=np.float64) / float(temperature))


def _flat_pair(logits: np.ndarray, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if z.size == 0:
        raise DataError("Empty logits")
    if z.shape != y.shape:
        raise DataError(f"{z.size} logits but {y.size} targets")
    return z, y


def nll_and_grad(logits: np.ndarray, targets: np.ndarray, temperature: float) -> Tuple[float, float]:
    """
    Mean binary cross-entropy of sigmoid(z/T) against targets and its
    derivative with respect to T. Uses BCE = softplus(u) - y*u, u = z/T.
    """
    if not temperature > 0:
        raise DataError(f"Temperature must be > 0, got {temperature}")
    z, y = _flat_pair(logits, targets)
    u = z / temperature
    value = float(np.mean(np.logaddexp(0.0, u) - y * u))
    grad = float(np.mean((expit(u) - y) * (-u / temperature)))
    return value, grad


def nll(logits: np.ndarray, targets: np.ndarray, temperature: float = 1.0) -> float:
    return nll_and_grad(logits, targets, temperature)[0]


# -----------------------------
# L-BFGS with a strong-Wolfe line search
# -----------------------------

@dataclass
class LineSearchStep:
    """One accepted step; enough to re-check both Wolfe conditions."""
    iteration: int
    alpha: float
    f_start: float
    f_end: float
    slope_start: float
    slope_end: float


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    evaluations: int
    history: List[LineSearchStep] = field(default_factory=list)


def _cubic_minimizer(a: float, fa: float, fpa: float, b: float, fb: float, c: float, fc: float) -> Optional[float]:
    """Minimizer of the cubic through (a, fa), (b, fb), (c, fc) with slope fpa at a."""
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db, dc = b - a, c - a
            denom = (db * dc) ** 2 * (db - dc)
            rb = fb - fa - fpa * db
            rc = fc - fa - fpa * dc
            A = (dc ** 2 * rb - db ** 2 * rc) / denom
            B = (-dc ** 3 * rb + db ** 3 * rc) / denom
            xmin = a + (-B + np.sqrt(B * B - 3 * A * fpa)) / (3 * A)
        except (ArithmeticError, FloatingPointError):
            return None
    return float(xmin) if np.isfinite(xmin) else None


def _quadratic_minimizer(a: float, fa: float, fpa: float, b: float, fb: float) -> Optional[float]:
    """Minimizer of the parabola through (a, fa), (b, fb) with slope fpa at a."""
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db = b - a
            curv = (fb - fa - fpa * db) / (db * db)
            xmin = a - fpa / (2.0 * curv)
        except (ArithmeticError, FloatingPointError):
            return None
    return float(xmin) if np.isfinite(xmin) else None


class _LineFunction:
    """phi(alpha) = f(x + alpha d) with memoized point values and gradients."""

    def __init__(self, fg: ObjectiveFn, x: np.ndarray, d: np.ndarray) -> None:
        self.fg = fg
        self.x = x
        self.d = d
        self.evaluations = 0
        self.cache: Dict[float, Tuple[float, float, np.ndarray]] = {}

    def __call__(self, alpha: float) -> Tuple[float, float]:
        if alpha not in self.cache:
            self.evaluations += 1
            f, g = self.fg(self.x + alpha * self.d)
            g = np.asarray(g, dtype=np.float64)
            if not np.isfinite(f) or not np.all(np.isfinite(g)):
                f, slope = math.inf, math.inf
            else:
                slope = float(g @ self.d)
            self.cache[alpha] = (float(f), slope, g)
        f, slope, _ = self.cache[alpha]
        return f, slope

    def gradient(self, alpha: float) -> np.ndarray:
        return self.cache[alpha][2]


def _zoom(phi: _LineFunction, a_lo: float, a_hi: float, f_lo: float, f_hi: float, s_lo: float,
          f0: float, s0: float, c1: float, c2: float, max_iter: int = 30) -> Optional[float]:
    a_rec, f_rec = 0.0, f0
    for i in range(max_iter):
        span = a_hi - a_lo
        lo, hi = (a_hi, a_lo) if span < 0 else (a_lo, a_hi)
        trial = None
        if i > 0:
            trial = _cubic_minimizer(a_lo, f_lo, s_lo, a_hi, f_hi, a_rec, f_rec)
            if trial is not None and not (lo + 0.2 * abs(span) <= trial <= hi - 0.2 * abs(span)):
                trial = None
        if trial is None:
            trial = _quadratic_minimizer(a_lo, f_lo, s_lo, a_hi, f_hi)
            if trial is None or not (lo + 0.1 * abs(span) <= trial <= hi - 0.1 * abs(span)):
                trial = a_lo + 0.5 * span

        f_t, s_t = phi(trial)
        if f_t > f0 + c1 * trial * s0 or f_t >= f_lo:
            a_rec, f_rec = a_hi, f_hi
            a_hi, f_hi = trial, f_t
            continue
        if abs(s_t) <= -c2 * s0:
            return trial
        if s_t * (a_hi - a_lo) >= 0:
            a_rec, f_rec = a_hi, f_hi
            a_hi, f_hi = a_lo, f_lo
        else:
            a_rec, f_rec = a_lo, f_lo
        a_lo, f_lo, s_lo = trial, f_t, s_t
    return None


def strong_wolfe_search(phi: _LineFunction, f0: float, s0: float, alpha1: float,
                        c1: float = 1e-4, c2: float = 0.9, max_iter: int = 40,
                        alpha_max: float = 1e10) -> Optional[float]:
    """Bracketing phase; returns a step satisfying both strong Wolfe conditions or None."""
    a_prev, f_prev, s_prev = 0.0, f0, s0
    alpha = alpha1
    for i in range(max_iter):
        f_a, s_a = phi(alpha)
        if f_a > f0 + c1 * alpha * s0 or (i > 0 and f_a >= f_prev):
            return _zoom(phi, a_prev, alpha, f_prev, f_a, s_prev, f0, s0, c1, c2)
        if abs(s_a) <= -c2 * s0:
            return alpha
        if s_a >= 0:
            return _zoom(phi, alpha, a_prev, f_a, f_prev, s_a, f0, s0, c1, c2)
        a_prev, f_prev, s_prev = alpha, f_a, s_a
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _two_loop(g: np.ndarray, pairs: Sequence[Tuple[np.ndarray, np.ndarray, float]], gamma: float) -> np.ndarray:
    """-H g for the inverse-Hessian estimate built from (s, y, 1/(y.s)) pairs."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    r = gamma * q
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ r)
        r += (a - b) * s
    return -r


def lbfgs_minimize(
    fg: ObjectiveFn,
    x0: Sequence[float] | np.ndarray,
    memory: int = 10,
    gtol: float = 1e-8,
    xtol: float = 1e-12,
    max_iter: int = 200,
    c1: float = 1e-4,
    c2: float = 0.9,
    callback: Optional[Callable[[np.ndarray], bool]] = None,
) -> LBFGSResult:
    """
    Limited-memory BFGS. `fg(x)` returns (value, gradient).

    Stops when the gradient's max-norm drops below `gtol`, a step moves less
    than `xtol`, `max_iter` iterations pass, or `callback(x)` returns True.
    A failed line search returns the best point so far with converged=False.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    f, g = fg(x)
    g = np.asarray(g, dtype=np.float64).ravel()
    evaluations = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError(f"Objective is not finite at the starting point (f={f})")

    pairs: Deque[Tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=memory)
    gamma = 1.0
    history: List[LineSearchStep] = []

    def result(it: int, converged: bool, message: str) -> LBFGSResult:
        logger.debug("L-BFGS stopped after %d iterations: %s", it, message)
        return LBFGSResult(x=x, fun=float(f), grad=g, iterations=it, converged=converged,
                           message=message, evaluations=evaluations, history=history)

    if np.max(np.abs(g)) < gtol:
        return result(0, True, "gradient below tolerance")

    for it in range(1, max_iter + 1):
        d = _two_loop(g, list(pairs), gamma)
        s0 = float(g @ d)
        if s0 >= 0:
            # Not a descent direction; restart from steepest descent.
            pairs.clear()
            gamma = 1.0
            d = -g
            s0 = float(g @ d)
        alpha1 = 1.0 if pairs else min(1.0, 1.0 / float(np.max(np.abs(g))))

        phi = _LineFunction(fg, x, d)
        alpha = strong_wolfe_search(phi, float(f), s0, alpha1, c1, c2)
        evaluations += phi.evaluations
        if alpha is None:
            return result(it - 1, False, "line search failed")

        f_new, s_new = phi(alpha)
        g_new = phi.gradient(alpha)
        history.append(LineSearchStep(it, alpha, float(f), f_new, s0, s_new))
        step = alpha * d
        x_new = x + step
        yv = g_new - g
        sy = float(step @ yv)
        if sy > 1e-10:
            pairs.append((step, yv, 1.0 / sy))
            gamma = sy / float(yv @ yv)

        x, f, g = x_new, f_new, g_new
        if np.max(np.abs(g)) < gtol:
            return result(it, True, "gradient below tolerance")
        if np.max(np.abs(step)) < xtol:
            return result(it, True, "step below tolerance")
        if callback is not None and callback(x):
            return result(it, False, "stopped by callback")
    return result(max_iter, False, "iteration limit reached")


@dataclass(frozen=True)
class CalibrationModel:
    temperature: float
    iterations: int
    nll_before: float
    nll_after: float
    converged: bool
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "temperature": self.temperature,
            "iterations": self.iterations,
            "nll_before": self.nll_before,
            "nll_after": self.nll_after,
            "converged": self.converged,
            "message": self.message,
        }


def fit_temperature(
    logits: np.ndarray,
    targets: np.ndarray,
    cap: float = 1000.0,
    max_iter: int = 200,
) -> CalibrationModel:
    """
    Minimize mean NLL over log T from T = 1 with L-BFGS. When the optimum runs
    off towards T -> infinity (labels carrying no signal), T is capped and the
    fit reported as not converged.
    """
    z, y = _flat_pair(logits, targets)
    positives = int(np.count_nonzero(y > 0.5))
    if positives == 0 or positives == y.size:
        raise DataError("Temperature fitting needs both classes in the validation targets")

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        u = z * math.exp(-float(theta[0]))
        value = float(np.mean(np.logaddexp(0.0, u) - y * u))
        grad = float(np.mean((expit(u) - y) * (-u)))
        return value, np.array([grad])

    log_cap = math.log(cap)
    res = lbfgs_minimize(objective, [0.0], max_iter=max_iter,
                         callback=lambda theta: float(theta[0]) > log_cap)
    nll_before = nll(z, y, 1.0)
    temperature = math.exp(float(res.x[0]))
    converged = res.converged
    message = res.message
    if temperature > cap:
        logger.warning("Fitted temperature %.3g exceeds cap %.0f; logits look uninformative", temperature, cap)
        temperature = cap
        converged = False
        message = f"temperature capped at {cap:g}"
    model = CalibrationModel(
        temperature=temperature,
        iterations=res.iterations,
        nll_before=nll_before,
        nll_after=nll(z, y, temperature),
        converged=converged,
        message=message,
    )
    logger.info("Fitted T=%.5f in %d iterations (NLL %.5f -> %.5f)",
                model.temperature, model.iterations, model.nll_before, model.nll_after)
    return model


# -----------------------------
# Reliability and confidence
# -----------------------------

@dataclass(frozen=True, eq=False)
class ReliabilityDiagram:
    edges: np.ndarray          # (bins + 1,)
    mean_pred: np.ndarray      # NaN where the bin is empty
    observed: np.ndarray       # NaN where the bin is empty
    counts: np.ndarray
    ece: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_lo": self.edges[:-1],
            "bin_hi": self.edges[1:],
            "mean_pred": self.mean_pred,
            "observed": self.observed,
            "count": self.counts.astype(np.int64),
        })


def reliability(probs: np.ndarray, targets: np.ndarray, bins: int = 10) -> ReliabilityDiagram:
    """Equal-width bins over [0, 1], the last one closed on the right."""
    if bins < 2:
        raise DataError(f"bins must be >= 2, got {bins}")
    p, y = _flat_pair(probs, targets)
    if np.any((p < 0) | (p > 1)):
        raise DataError("Probabilities must lie in [0, 1]")
    idx = np.minimum((p * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sum_p = np.bincount(idx, weights=p, minlength=bins)
    sum_y = np.bincount(idx, weights=y, minlength=bins)
    occupied = counts > 0
    mean_pred = np.full(bins, np.nan)
    observed = np.full(bins, np.nan)
    mean_pred[occupied] = sum_p[occupied] / counts[occupied]
    observed[occupied] = sum_y[occupied] / counts[occupied]
    ece = float(np.sum(counts[occupied] / p.size * np.abs(mean_pred[occupied] - observed[occupied])))
    return ReliabilityDiagram(
        edges=np.linspace(0.0, 1.0, bins + 1),
        mean_pred=mean_pred,
        observed=observed,
        counts=counts.astype(np.int64),
        ece=ece,
    )


def expected_calibration_error(probs: np.ndarray, targets: np.ndarray, bins: int = 10) -> float:
    return reliability(probs, targets, bins).ece


CONFIDENCE_LOW, CONFIDENCE_MEDIUM, CONFIDENCE_HIGH = 0, 1, 2


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    confidence: np.ndarray    # max(p, 1 - p), in [0.5, 1]
    level: np.ndarray         # 0 low, 1 medium, 2 high

    def level_fractions(self) -> Dict[str, float]:
        n = max(self.level.size, 1)
        return {
            name: float(np.count_nonzero(self.level == code)) / n
            for name, code in (("low", CONFIDENCE_LOW), ("medium", CONFIDENCE_MEDIUM), ("high", CONFIDENCE_HIGH))
        }


def confidence_map(probs: np.ndarray, levels: Tuple[float, float] = (0.7, 0.9)) -> ConfidenceMap:
    p = np.asarray(probs, dtype=np.float64)
    lo, hi = levels
    if not 0.5 <= lo <= hi <= 1.0:
        raise DataError(f"Confidence levels must satisfy 0.5 <= lo <= hi <= 1, got {levels}")
    c = np.maximum(p, 1.0 - p)
    level = np.where(c < lo, CONFIDENCE_LOW, np.where(c < hi, CONFIDENCE_MEDIUM, CONFIDENCE_HIGH)).astype(np.int8)
    return ConfidenceMap(confidence=c, level=level)


def confidence_error_summary(probs: np.ndarray, targets: np.ndarray, levels: Tuple[float, float] = (0.7, 0.9)) -> Dict[str, float]:
    """Mean confidence on correctly vs wrongly classified pixels at the 0.5 threshold."""
    p, y = _flat_pair(probs, targets)
    cmap = confidence_map(p, levels)
    correct = (p >= 0.5) == (y > 0.5)
    wrong = ~correct
    return {
        "n_correct": int(correct.sum()),
        "n_wrong": int(wrong.sum()),
        "mean_confidence_correct": float(cmap.confidence[correct].mean()) if correct.any() else float("nan"),
        "mean_confidence_wrong": float(cmap.confidence[wrong].mean()) if wrong.any() else float("nan"),
        "low_confidence_share_wrong": float((cmap.level[wrong] == CONFIDENCE_LOW).mean()) if wrong.any() else float("nan"),
        "low_confidence_share_correct": float((cmap.level[correct] == CONFIDENCE_LOW).mean()) if correct.any() else float("nan"),
    }


# -----------------------------
# Mean-variance estimation
# -----------------------------

def _mve_noise(shape: Tuple[int, ...], samples: int, rng: np.random.Generator) -> np.ndarray:
    if samples < 1:
        raise DataError(f"samples must be >= 1, got {samples}")
    return rng.standard_normal(size=(samples,) + shape)


def _mve_std(log_variance: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        std = np.exp(0.5 * np.asarray(log_variance, dtype=np.float64))
    if not np.all(np.isfinite(std)):
        raise NumericalError("Non-finite predicted variance")
    return std


def mve_mc_dice_loss_grad(
    mean_logits: np.ndarray,
    log_variance: np.ndarray,
    targets: np.ndarray,
    samples: int = 16,
    rng: Optional[np.random.Generator] = None,
    eps: float = DEFAULT_SMOOTH,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Monte-Carlo Dice loss of logits mu + sigma*e, e ~ N(0, 1), averaged over
    `samples` draws, with reparameterized gradients for mu and log-variance.
    """
    mu = np.asarray(mean_logits, dtype=np.float64)
    if mu.shape != np.shape(log_variance) or mu.shape != np.shape(targets):
        raise DataError("mean_logits, log_variance and targets must share one shape")
    std = _mve_std(log_variance)
    noise = _mve_noise(mu.shape, samples, rng if rng is not None else np.random.default_rng(0))
    total = 0.0
    dmu = np.zeros_like(mu)
    dlogvar = np.zeros_like(mu)
    for e in noise:
        p = expit(mu + std * e)
        loss, dp = dice_loss_grad(p, targets, eps)
        dz = dp * p * (1.0 - p)
        total += loss
        dmu += dz
        dlogvar += dz * 0.5 * std * e
    return total / samples, dmu / samples, dlogvar / samples


def mve_mc_dice_loss(
    mean_logits: np.ndarray,
    log_variance: np.ndarray,
    targets: np.ndarray,
    samples: int = 16,
    rng: Optional[np.random.Generator] = None,
    eps: float = DEFAULT_SMOOTH,
) -> float:
    return mve_mc_dice_loss_grad(mean_logits, log_variance, targets, samples, rng, eps)[0]


def mve_predictive_probs(
    mean_logits: np.ndarray,
    log_variance: np.ndarray,
    samples: int = 16,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Mean of the sampled sigmoids; the MVE head's predictive probability."""
    mu = np.asarray(mean_logits, dtype=np.float64)
    std = _mve_std(log_variance)
    noise = _mve_noise(mu.shape, samples, rng if rng is not None else np.random.default_rng(0))
    return np.mean([expit(mu + std * e) for e in noise], axis=0)
