"""Nuisance-perturbed data and density-ratio mutual information.

The generator overlays random bright squares (the nuisance n) on clean
images via pixelwise max, so x is a deterministic function of (y, n)
with n independent of y by construction. The estimator trains a small
discriminator between joint samples (z, n) and product samples
(z, n') with n' reshuffled; at the optimum the discriminator output D
satisfies D = p(z) / (p(z) + p(z|n)), so ln((1 - D) / D) averaged
over joint samples estimates I(z; n). There are no guarantees on the
quality of the approximation away from the optimum; the held-out loss
in the returned estimate is the health signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import vnn
from .infotheory import MIEstimate
from .numeric_core import Rng, Tensor

_D_CLIP = 1e-6


@dataclass
class ClutterConfig:
    """Square-clutter nuisance parameters."""

    num_squares: int = 10
    square_size: int = 4
    intensity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_squares < 0:
            raise ValueError("num_squares must be nonnegative")
        if self.square_size < 1:
            raise ValueError("square_size must be at least 1")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")


@dataclass
class NuisanceSample:
    """One perturbed image with its label and the clutter mask alone."""

    x: Tensor
    y: int
    n: Tensor


def generate_cluttered(images: Tensor, labels: Tensor, config: ClutterConfig,
                       rng: Rng) -> list:
    """Overlay num_squares random squares per image.

    images: [N, H, W] in [0, 1]. Top-left corners are uniform over
    [0, H-s] x [0, W-s]; squares may overlap each other and the digit.
    x = max(clean, intensity * n) pixelwise; the binary mask n comes
    back separately so estimators can see the nuisance alone.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"expected [N, H, W] images, got shape {images.shape}")
    n_img, h, w = images.shape
    s = config.square_size
    if s > min(h, w):
        raise ValueError(f"square_size {s} exceeds image side {min(h, w)}")
    labels = np.asarray(labels, dtype=np.int64)
    out = []
    for i in range(n_img):
        mask = np.zeros((h, w))
        if config.num_squares > 0:
            rows = rng.integers(0, h - s + 1, (config.num_squares,))
            cols = rng.integers(0, w - s + 1, (config.num_squares,))
            for r, c in zip(rows, cols):
                mask[r:r + s, c:c + s] = 1.0
        x = np.maximum(images[i], config.intensity * mask)
        out.append(NuisanceSample(x=x, y=int(labels[i]), n=mask))
    return out


def cluttered_arrays(samples) -> tuple:
    """Stack a NuisanceSample sequence into (x, y, n) arrays."""
    x = np.stack([s.x for s in samples])
    y = np.array([s.y for s in samples], dtype=np.int64)
    n = np.stack([s.n for s in samples])
    return x, y, n


@dataclass
class DiscriminatorConfig:
    """Training knobs for the joint-vs-product discriminator."""

    hidden: tuple = (256, 256)
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


@dataclass
class Discriminator:
    """Trained joint-vs-product classifier plus its held-out scores."""

    net: vnn.NetworkState
    heldout_loss: float
    heldout_accuracy: float


def _pair_features(z: Tensor, n: Tensor) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    z = z.reshape(z.shape[0], -1)
    n = n.reshape(n.shape[0], -1)
    if z.shape[0] != n.shape[0]:
        raise ValueError(f"{z.shape[0]} z rows vs {n.shape[0]} n rows")
    return np.concatenate([z, n], axis=1)


def train_discriminator(joint: tuple, product: tuple, config: DiscriminatorConfig,
                        rng: Rng) -> Discriminator:
    """Fit the density-ratio discriminator.

    joint and product are (z, n) pairs of equal count; product samples
    get class 1 (the D side of the ratio), joint samples class 0. The
    two-logit softmax head is a sigmoid on the logit difference, so
    cross-entropy training here is exactly logistic loss. A held-out
    fraction picks the best epoch: the returned network is the one with
    the lowest held-out loss seen during training, not the last.
    """
    xj = _pair_features(*joint)
    xp = _pair_features(*product)
    if xj.shape[0] == 0 or xp.shape[0] == 0:
        raise ValueError("empty sample sets")
    if xj.shape[0] != xp.shape[0]:
        raise ValueError(f"joint/product counts differ: {xj.shape[0]} vs {xp.shape[0]}")
    if xj.shape[1] != xp.shape[1]:
        raise ValueError("joint and product feature widths differ")
    x_all = np.concatenate([xj, xp], axis=0)
    y_all = np.concatenate([np.zeros(xj.shape[0], dtype=np.int64),
                            np.ones(xp.shape[0], dtype=np.int64)])
    perm = rng.permutation(x_all.shape[0])
    x_all, y_all = x_all[perm], y_all[perm]
    n_held = max(1, int(round(config.heldout_fraction * x_all.shape[0])))
    x_held, y_held = x_all[:n_held], y_all[:n_held]
    x_tr, y_tr = x_all[n_held:], y_all[n_held:]

    sizes = (x_all.shape[1],) + tuple(config.hidden) + (2,)
    net = vnn.init_network(sizes, noise=vnn.NoiseModel("none"), rng=rng)
    best = (float("inf"), 0.0, vnn.clone_network(net))
    opt_state = {}
    n_tr = x_tr.shape[0]
    for _epoch in range(config.epochs):
        order = rng.permutation(n_tr)
        for start in range(0, n_tr, config.batch_size):
            idx = order[start:start + config.batch_size]
            # n_total=1 turns the dataset-total objective into plain
            # mean cross-entropy, the right scale for this side task.
            lg = vnn.loss_and_grad(net, (x_tr[idx], y_tr[idx]), 0.0, 1, rng)
            net, opt_state = vnn.sgd_step(net, lg.grads, opt_state,
                                          config.learning_rate, config.momentum)
        acc, ce = vnn.evaluate(net, x_held, y_held)
        if ce < best[0]:
            best = (ce, acc, vnn.clone_network(net))
    return Discriminator(net=best[2], heldout_loss=best[0], heldout_accuracy=best[1])


def estimate_mi_density_ratio(disc: Discriminator, joint: tuple) -> MIEstimate:
    """Average ln((1 - D) / D) over joint samples.

    D is the discriminator's product-class probability. Outputs at
    exactly 0 or 1 are clipped to [1e-6, 1 - 1e-6]; clipping triggers a
    warning since it means the ratio estimate saturated.
    """
    x = _pair_features(*joint)
    if x.shape[0] == 0:
        raise ValueError("empty sample sets")
    probs = vnn.softmax(vnn.forward_deterministic(disc.net, x))
    d = probs[:, 1]
    clipped = int(((d < _D_CLIP) | (d > 1.0 - _D_CLIP)).sum())
    if clipped:
        warnings.warn(f"discriminator saturated on {clipped} of {d.size} samples; "
                      "ratio estimates clipped", RuntimeWarning)
        d = np.clip(d, _D_CLIP, 1.0 - _D_CLIP)
    ratios = np.log((1.0 - d) / d)
    n = ratios.size
    se = float(ratios.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return MIEstimate(value=float(ratios.mean()), std_error=se, n_samples=n,
                      discriminator_loss=disc.heldout_loss)


def estimate_mi(z: Tensor, n: Tensor, config: DiscriminatorConfig, rng: Rng,
                eval_fraction: float = 0.2) -> MIEstimate:
    """End-to-end I(z; n) estimate from paired samples.

    Splits off an evaluation set, builds product samples for the
    training portion by permuting n within the batch, trains the
    discriminator, and evaluates the ratio on the held-aside joints.
    """
    z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
    n = np.asarray(n, dtype=np.float64).reshape(len(n), -1)
    if z.shape[0] != n.shape[0]:
        raise ValueError("z and n sample counts differ")
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in (0, 1)")
    count = z.shape[0]
    order = rng.permutation(count)
    n_eval = max(1, int(round(eval_fraction * count)))
    eval_idx, train_idx = order[:n_eval], order[n_eval:]
    z_tr, n_tr = z[train_idx], n[train_idx]
    shuffle = rng.permutation(z_tr.shape[0])
    disc = train_discriminator((z_tr, n_tr), (z_tr, n_tr[shuffle]), config, rng)
    return estimate_mi_density_ratio(disc, (z[eval_idx], n[eval_idx]))


def synthetic_correlated_gaussian(rho: float, n: int, rng: Rng) -> tuple:
    """n pairs of unit-variance Gaussians with correlation rho, the
    analytic calibration case for the estimator."""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"correlation must lie in (-1, 1), got {rho}")
    if n < 1:
        raise ValueError("n must be at least 1")
    a = rng.standard_normal((n, 1))
    b = rng.standard_normal((n, 1))
    return a, rho * a + np.sqrt(1.0 - rho * rho) * b


def true_gaussian_mi(rho: float) -> float:
    """Bivariate-normal mutual information -1/2 ln(1 - rho^2) nats."""
    if not -1.0 < rho < 1.0:
        raise ValueError(f"correlation must lie in (-1, 1), got {rho}")
    return float(-0.5 * np.log1p(-rho * rho))


def hidden_representation(net: vnn.NetworkState, x: Tensor) -> Tensor:
    """Final hidden-layer activation under the deterministic forward;
    the z whose nuisance content the experiments measure."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).reshape(len(x), -1)
    cur = x
    last_hidden = None
    dense = net.dense_layers
    for layer in net.layers:
        if isinstance(layer, vnn.VariationalDense):
            if layer is dense[-1]:
                break
            cur = cur @ layer.w_mean.T + layer.bias
        elif layer == "relu":
            cur = np.maximum(cur, 0.0)
            last_hidden = cur
        elif layer == "elu":
            cur = np.where(cur > 0, cur, np.expm1(cur))
            last_hidden = cur
    if last_hidden is None:
        raise ValueError("network has no hidden layer to read a representation from")
    return last_hidden
