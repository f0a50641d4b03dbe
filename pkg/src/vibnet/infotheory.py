"""Information quantities and bounds for noisy-weight networks.

Everything is in nats. The central quantity is the information the
weights carry about the dataset, -1/2 sum log alpha up to an additive
constant; around it sit the capacity-style bound per unit, its
multi-layer extension, the closed form that scores the information a
single noisy layer's output carries about its input, a Monte Carlo
estimator of the same quantity kept as an independent cross-check, the
quadratic-loss optimum for the noise level, the resulting flat-minima
bound, and a PAC-Bayes style generalization bound.

The closed form and the Monte Carlo route measure the same quantity at
the same Gaussian approximation; tests compare them within sampling
error, so the two implementations must stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from .numeric_core import Tensor
from .vnn import NetworkState, VariationalDense


@dataclass
class MIEstimate:
    """A mutual information estimate with its sampling error."""

    value: float
    std_error: float
    n_samples: int
    discriminator_loss: float = None


@dataclass
class GaussianStats:
    """Sample mean, covariance, and second moment of a feature batch."""

    mean: Tensor
    cov: Tensor
    second_moment: Tensor

    @classmethod
    def from_samples(cls, x: Tensor) -> "GaussianStats":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] < 2:
            raise ValueError("need at least 2 samples for unbiased covariance")
        mean = x.mean(axis=0)
        centered = x - mean
        cov = centered.T @ centered / (x.shape[0] - 1)
        return cls(mean=mean, cov=cov, second_moment=(x ** 2).mean(axis=0))


@dataclass
class InfoReport:
    """Weight-information accounting for a trained network."""

    per_layer_nats: list
    total_nats: float
    nats_per_sample: float
    per_layer_effective_alpha: list


@dataclass
class SingleLayerBound:
    """Interval pinning a noisy layer's input-output information.

    lower/upper give the per-component interval [B(alpha), B(alpha)+1];
    total_lower/total_upper scale them by the layer's output dimension.
    """

    alpha: float
    lower: float
    upper: float
    total_lower: float
    total_upper: float


@dataclass
class BoundReport:
    """Bundle of bound evaluations produced by the verification run."""

    per_layer_bounds: list
    multilayer_nats: float
    flat_minima_nats: float = None
    pac_bayes: float = None


def info_in_weights(log_alphas) -> float:
    """-1/2 sum of log alpha over the given arrays (additive constant
    dropped). Accepts one array or an iterable of arrays."""
    if isinstance(log_alphas, np.ndarray):
        log_alphas = [log_alphas]
    return float(sum(-0.5 * np.asarray(a, dtype=np.float64).sum() for a in log_alphas))


def effective_alpha(info_nats: float, dim: int) -> float:
    """Single noise level implied by a layer's information content:
    exp(-info / dim) for dim weights carrying info nats in total."""
    if dim <= 0:
        raise ValueError("dim must be positive")
    return float(np.exp(-float(info_nats) / dim))


def network_info_report(net: NetworkState, n_samples: int) -> InfoReport:
    """Per-layer and total weight information, plus nats per training
    sample and each layer's effective noise level."""
    per_layer = []
    eff = []
    for layer in net.dense_layers:
        if layer.noise.is_variational:
            nats = -0.5 * float(layer.log_alpha.sum())
            per_layer.append(nats)
            eff.append(effective_alpha(nats, layer.weight_count))
        else:
            per_layer.append(0.0)
            eff.append(float("nan"))
    total = float(sum(per_layer))
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    return InfoReport(
        per_layer_nats=per_layer,
        total_nats=total,
        nats_per_sample=total / n_samples,
        per_layer_effective_alpha=eff,
    )


def bound_fn(alpha: float) -> float:
    """Per-unit capacity term B(alpha) = -1/2 log(1 - e^(-alpha)).

    Equal to 1/2 log(1 + 1/alpha_tilde) for log-normal noise with
    variance alpha_tilde = e^alpha - 1; decreasing in alpha, diverging
    as alpha -> 0 and vanishing as alpha -> inf. The sign convention
    follows the version of the bound that is actually proved, under
    which the bound is decreasing in the noise level.
    """
    alpha = float(alpha)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    # -1/2 * log(1 - e^-alpha). expm1 keeps the small-alpha tail exact;
    # log1p keeps the large-alpha tail positive instead of rounding the
    # argument of the log to 1.
    if alpha < 1.0:
        return float(-0.5 * np.log(-np.expm1(-alpha)))
    return float(-0.5 * np.log1p(-np.exp(-alpha)))


def single_layer_bound(layer: VariationalDense, dim_x: int) -> SingleLayerBound:
    """Interval [B(alpha), B(alpha) + 1] per output component for one
    noisy layer, where alpha is the layer's effective noise level.

    The width-1 slack absorbs the residual of the Gaussian capacity
    argument, which shrinks like 1/dim_x; the information the layer
    output carries about its input lands inside the interval.
    """
    if dim_x < 1:
        raise ValueError("dim_x must be at least 1")
    nats = -0.5 * float(layer.log_alpha.sum()) if layer.noise.is_variational else 0.0
    alpha = effective_alpha(nats, layer.weight_count)
    b = bound_fn(alpha)
    return SingleLayerBound(
        alpha=alpha,
        lower=b,
        upper=b + 1.0,
        total_lower=layer.out_dim * b,
        total_upper=layer.out_dim * (b + 1.0),
    )


def multilayer_bound(net: NetworkState) -> float:
    """min over variational layers of out_dim * (B(alpha_eff) + 1).

    Information about the input that survives to the output can be no
    more than what any single noisy layer lets through, so the tightest
    per-layer ceiling bounds the whole stack. alpha_eff per layer comes
    from that layer's total weight information.
    """
    bounds = []
    for layer in net.dense_layers:
        if not layer.noise.is_variational:
            continue
        nats = -0.5 * float(layer.log_alpha.sum())
        alpha_eff = effective_alpha(nats, layer.weight_count)
        bounds.append(layer.out_dim * (bound_fn(alpha_eff) + 1.0))
    if not bounds:
        raise ValueError("network has no variational layers")
    return float(min(bounds))


def gaussian_kl(mu0, var0, mu1, var1):
    """KL(N(mu0, var0) || N(mu1, var1)) elementwise, in nats."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    var0 = np.asarray(var0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    var1 = np.asarray(var1, dtype=np.float64)
    if np.any(var0 <= 0) or np.any(var1 <= 0):
        raise ValueError("variances must be positive")
    out = 0.5 * (var0 / var1 + (mu0 - mu1) ** 2 / var1 - 1.0 + np.log(var1 / var0))
    return float(out) if out.ndim == 0 else out


def _layer_output_stats(w_rows: Tensor, alphas, x: Tensor):
    """Shared shape handling for the two layer-information estimators.

    w_rows holds weight mean rows [dz, dx] (a single row may come in
    1-D); alphas is the noise level alpha per output row, scalar or
    [dz], converted here to the log-normal variance e^alpha - 1.
    Returns (w [dz, dx], alpha_tilde [dz], x [n, dx]).
    """
    w = np.atleast_2d(np.asarray(w_rows, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"weights expect {w.shape[1]} inputs, x has {x.shape[1]}")
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim == 0:
        alphas = np.full(w.shape[0], float(alphas))
    if alphas.shape != (w.shape[0],):
        raise ValueError(f"need one alpha per output row, got {alphas.shape} for {w.shape[0]} rows")
    if np.any(alphas <= 0):
        raise ValueError("alpha must be positive")
    alpha_tilde = np.expm1(alphas)
    return w, alpha_tilde, x


def duality_closed_form(w_rows: Tensor, alphas, x_samples: Tensor) -> MIEstimate:
    """Closed form for the information a noisy linear layer's output
    carries about its input, estimated over an input sample.

    Per input x and output unit i the value is
      -1/2 log( atld_i (w_i^2 . x^2) / (w_i Cov(x) w_i + atld_i (w_i^2 . E[x^2])) )
    summed over units and averaged over inputs; expectations use
    unbiased sample statistics (at least 2 samples). The returned
    estimate carries the standard error of the average over inputs.
    Raises on degenerate inputs where the log argument hits zero.
    """
    w, alpha_tilde, x = _layer_output_stats(w_rows, alphas, x_samples)
    stats = GaussianStats.from_samples(x)
    num = (x ** 2) @ (w ** 2).T * alpha_tilde  # [n, dz]
    den = np.einsum("ij,jk,ik->i", w, stats.cov, w) + alpha_tilde * ((w ** 2) @ stats.second_moment)
    if np.any(den <= 0):
        raise ValueError("degenerate input distribution: zero output variance")
    if np.any(num <= 0):
        raise ValueError("degenerate input: conditional output variance is zero (log of 0)")
    per_sample = -0.5 * np.log(num / den).sum(axis=1)
    n = x.shape[0]
    se = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return MIEstimate(value=float(per_sample.mean()), std_error=se, n_samples=n)


def mc_mi_gaussian(w_rows: Tensor, alphas, x_samples: Tensor) -> MIEstimate:
    """Monte Carlo route to the same layer information: average over
    inputs of the KL between the conditional and marginal Gaussian
    output distributions, component by component.

    Kept implementationally independent of duality_closed_form (KL
    formula rather than a reduced log-ratio) so the two can cross-check
    each other.
    """
    w, alpha_tilde, x = _layer_output_stats(w_rows, alphas, x_samples)
    stats = GaussianStats.from_samples(x)
    mu0 = x @ w.T                                    # [n, dz]
    var0 = (x ** 2) @ (w ** 2).T * alpha_tilde       # [n, dz]
    mu1 = w @ stats.mean                             # [dz]
    var1 = np.einsum("ij,jk,ik->i", w, stats.cov, w) + alpha_tilde * ((w ** 2) @ stats.second_moment)
    if np.any(var0 <= 0):
        raise ValueError("degenerate input: conditional output variance is zero")
    per_sample = gaussian_kl(mu0, var0, mu1[None, :], var1[None, :]).sum(axis=1)
    n = x.shape[0]
    se = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return MIEstimate(value=float(per_sample.mean()), std_error=se, n_samples=n)


def hessian_diagonal(grad_fn, params: Tensor, delta: float = 1e-4) -> Tensor:
    """Diagonal of the Hessian by central differences on a gradient.

    grad_fn maps a 1-D parameter vector to the gradient vector;
    H_ii = (g_i(p + delta e_i) - g_i(p - delta e_i)) / (2 delta).
    """
    params = np.asarray(params, dtype=np.float64).ravel()
    if delta <= 0:
        raise ValueError("delta must be positive")
    diag = np.empty_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = delta
        g_plus = np.asarray(grad_fn(params + step), dtype=np.float64)
        g_minus = np.asarray(grad_fn(params - step), dtype=np.float64)
        diag[i] = (g_plus[i] - g_minus[i]) / (2.0 * delta)
    return diag


def optimal_alpha_quadratic(w: Tensor, h_diag: Tensor, beta: float) -> Tensor:
    """Noise level minimizing quadratic-loss-plus-information per
    weight: alpha_i = beta / (2 w_i^2 H_ii).

    Entries with a zero weight or nonpositive curvature have no finite
    optimum and come back as NaN flags.
    """
    w = np.asarray(w, dtype=np.float64)
    h_diag = np.asarray(h_diag, dtype=np.float64)
    if w.shape != h_diag.shape:
        raise ValueError(f"shape mismatch: weights {w.shape}, curvatures {h_diag.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    valid = (w != 0) & (h_diag > 0)
    out = np.full(w.shape, np.nan)
    out[valid] = beta / (2.0 * w[valid] ** 2 * h_diag[valid])
    return out


def flat_minima_bound(w: Tensor, h_diag: Tensor, beta: float) -> float:
    """Upper bound on the weight information at the quadratic optimum:

      1/2 K [ log sum w_i^2 + log sum H_ii - log(K^2 beta / 2) ]

    with K the number of weights. By concavity of the log this
    dominates the exact -1/2 sum log alpha_i* and matches it when
    K = 1. All weights must be nonzero and all curvatures positive.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    h_diag = np.asarray(h_diag, dtype=np.float64).ravel()
    if w.shape != h_diag.shape:
        raise ValueError("weights and curvatures must have the same length")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if np.any(w == 0) or np.any(h_diag <= 0):
        raise ValueError("bound needs nonzero weights and positive curvature")
    k = w.size
    return float(0.5 * k * (np.log((w ** 2).sum()) + np.log(h_diag.sum())
                            - np.log(k ** 2 * beta / 2.0)))


def pac_bayes_bound(ce_total_nats: float, kl_nats: float, n: int,
                    lam: float = 1.0, l_max: float = 1.0) -> float:
    """Generalization bound (C_hat + lambda L_max KL) / (N (1 - 1/(2 lambda))).

    ce_total_nats is the empirical total cross-entropy over the N
    training points, kl_nats the divergence of the posterior from the
    prior. Requires lambda > 1/2 so the denominator is positive.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if lam <= 0.5:
        raise ValueError("lambda must exceed 1/2")
    if kl_nats < 0:
        raise ValueError("KL must be nonnegative")
    if l_max <= 0:
        raise ValueError("l_max must be positive")
    return float((ce_total_nats + lam * l_max * kl_nats) / (n * (1.0 - 1.0 / (2.0 * lam))))


_GM_TABLE_MIN = np.exp(-14.0)
_GM_TABLE_MAX = 1.0
_GM_TABLE_KNOTS = 1024
_gm_spline = None


def kl_gaussmult_quadrature(alpha: float) -> float:
    """Information per weight for Gaussian multiplicative noise
    eps ~ N(1, alpha), computed by direct numerical quadrature:

      -1/2 log alpha + E[ log |eps| ]

    The integrand has an integrable log singularity where eps crosses
    zero; the quadrature gets that point flagged explicitly.
    """
    alpha = float(alpha)
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    sd = np.sqrt(alpha)

    def integrand(t):
        return np.log(np.abs(1.0 + sd * t)) * np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)

    t_sing = -1.0 / sd
    lo, hi = -60.0, 60.0
    points = [t_sing] if lo < t_sing < hi else None
    val, _err = quad(integrand, lo, hi, points=points, limit=200)
    return float(-0.5 * np.log(alpha) + val)


def _gm_table() -> CubicSpline:
    global _gm_spline
    if _gm_spline is None:
        log_knots = np.linspace(np.log(_GM_TABLE_MIN), np.log(_GM_TABLE_MAX), _GM_TABLE_KNOTS)
        values = [kl_gaussmult_quadrature(np.exp(la)) for la in log_knots]
        _gm_spline = CubicSpline(log_knots, values)
    return _gm_spline


def kl_gaussmult_numeric(alpha: float) -> float:
    """Table-backed version of kl_gaussmult_quadrature.

    Interpolates a cubic spline over 1024 knots in log alpha covering
    [e^-14, 1]; values below the table fall back to direct quadrature.
    """
    alpha = float(alpha)
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if alpha < _GM_TABLE_MIN:
        return kl_gaussmult_quadrature(alpha)
    return float(_gm_table()(np.log(alpha)))
