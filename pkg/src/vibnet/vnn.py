"""Dense networks whose weights carry multiplicative noise.

Each dense layer holds a weight mean, a bias, and a per-weight log
noise variance log_alpha. On a stochastic forward pass the weight is
w = eps * w_mean with eps mean 1 and variance alpha_tilde; the layer
samples its pre-activation from the induced Gaussian (one draw per
unit and example) instead of sampling a weight matrix per example.
Gradients are written out by hand, including the path through the
pre-activation variance, so training needs no autodiff framework.

The amount of information the weights carry about the data is scored
as -1/2 * sum(log_alpha) nats (up to an additive constant that does
not depend on the parameters); beta times that score is added to the
total cross-entropy to form the training loss. Cross-entropy enters
the loss summed over the whole training set, estimated from a batch
as n_total * mean_batch_ce, which is what puts the random-label
memorization transition at beta = 1.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .numeric_core import Rng, Tensor

LOG_ALPHA_MIN = -12.0
LOG_ALPHA_MAX = 0.0

# Floor inside the sqrt of the pre-activation variance; keeps the
# backward pass finite when every incoming weight or input is zero.
_VAR_EPS = 1e-16

# Per-coordinate-group step preconditioning inside train() (see its
# docstring). Means/biases step at (1/3) mean-loss scale; log_alpha
# steps at 4x dataset scale so noise reaches its working level before
# the means commit. Positive constants: stationary points unchanged.
_MEAN_PRECOND_DIV = 3.0
_LOG_ALPHA_PRECOND = 4.0

_ACTIVATIONS = ("relu", "elu", "softmax-head")
_NOISE_KINDS = ("log-normal", "gaussian-multiplicative", "none")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class NoiseModel:
    """Multiplicative noise family attached to a dense layer.

    log-normal: eps ~ logN(-alpha/2, alpha), mean 1, variance e^alpha - 1.
    gaussian-multiplicative: eps ~ N(1, alpha), variance alpha.
    none: deterministic layer, excluded from information accounting.
    """

    kind: str = "log-normal"

    def __post_init__(self):
        if self.kind not in _NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {_NOISE_KINDS}")

    @property
    def is_variational(self) -> bool:
        return self.kind != "none"

    def noise_variance(self, log_alpha: Tensor) -> Tensor:
        """Variance alpha_tilde of eps as a function of log_alpha."""
        alpha = np.exp(log_alpha)
        if self.kind == "log-normal":
            return np.expm1(alpha)
        if self.kind == "gaussian-multiplicative":
            return alpha
        return np.zeros_like(np.asarray(log_alpha, dtype=np.float64))

    def noise_variance_grad(self, log_alpha: Tensor) -> Tensor:
        """d alpha_tilde / d log_alpha."""
        alpha = np.exp(log_alpha)
        if self.kind == "log-normal":
            return np.exp(alpha) * alpha
        if self.kind == "gaussian-multiplicative":
            return alpha
        return np.zeros_like(np.asarray(log_alpha, dtype=np.float64))


@dataclass
class VariationalDense:
    """One dense layer: z = (eps * w_mean) @ x + bias."""

    w_mean: Tensor
    bias: Tensor
    log_alpha: Tensor
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.w_mean.ndim != 2:
            raise ValueError(f"w_mean must be 2-D, got shape {self.w_mean.shape}")
        if self.bias.shape != (self.w_mean.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.w_mean.shape[0]} outputs")
        if self.log_alpha.shape != self.w_mean.shape:
            raise ValueError(f"log_alpha shape {self.log_alpha.shape} != w_mean shape {self.w_mean.shape}")

    @property
    def in_dim(self) -> int:
        return self.w_mean.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_mean.shape[0]

    @property
    def weight_count(self) -> int:
        return self.w_mean.size


@dataclass
class NetworkState:
    """A stack of dense layers and activation markers.

    layers holds VariationalDense objects interleaved with the strings
    "relu", "elu", and a single trailing "softmax-head". Dense layer
    dimensions must chain.
    """

    layers: list

    def __post_init__(self):
        dense = [l for l in self.layers if isinstance(l, VariationalDense)]
        if not dense:
            raise ValueError("network needs at least one dense layer")
        for item in self.layers:
            if not isinstance(item, VariationalDense) and item not in _ACTIVATIONS:
                raise ValueError(f"unknown layer entry {item!r}")
        heads = [i for i, l in enumerate(self.layers) if l == "softmax-head"]
        if heads != [len(self.layers) - 1]:
            raise ValueError("network must end with exactly one softmax-head")
        for a, b in zip(dense, dense[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def dense_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, VariationalDense)]

    @property
    def input_dim(self) -> int:
        return self.dense_layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.dense_layers[-1].out_dim


@dataclass
class TrainConfig:
    """Knobs for one training run."""

    beta: float = 0.1
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 0.02
    lr_decay_epochs: tuple = (40,)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    init_log_alpha: float = -6.0
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need learning_rate > 0 and momentum in [0, 1)")
        if not LOG_ALPHA_MIN <= self.init_log_alpha <= LOG_ALPHA_MAX:
            raise ValueError(f"init_log_alpha must lie in [{LOG_ALPHA_MIN}, {LOG_ALPHA_MAX}]")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor ** drops


@dataclass
class EpochRecord:
    epoch: int
    train_accuracy: float
    train_ce_nats: float          # mean cross-entropy, nats/sample
    info_nats: float
    info_nats_per_sample: float
    total_loss: float
    learning_rate: float
    seconds: float                # wall time for the epoch


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


@dataclass
class ForwardTrace:
    """Everything a stochastic forward pass produced.

    activations has one entry per item in net.layers (output of that
    item); dense_cache maps layer index to the intermediates needed by
    the backward pass, including the sampled unit noise.
    """

    inputs: Tensor
    activations: list
    dense_cache: dict

    @property
    def logits(self) -> Tensor:
        # softmax-head is a marker; the logits are the output just before it.
        return self.activations[-2] if len(self.activations) > 1 else self.activations[-1]


@dataclass
class LossGrad:
    """Loss pieces plus gradients aligned with net.dense_layers."""

    total_loss: float
    ce_sum_nats: float
    info_nats: float
    grads: list  # one dict per dense layer: w_mean, bias, log_alpha


def init_network(sizes, noise: NoiseModel = None, init_log_alpha: float = -6.0,
                 rng: Rng = None, hidden_activation: str = "relu") -> NetworkState:
    """Fully connected net over the given layer sizes.

    Weight means use scaled Gaussian init (variance 2 / fan_in), biases
    start at zero, log_alpha starts constant at init_log_alpha.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if rng is None:
        rng = Rng(0)
    if noise is None:
        noise = NoiseModel()
    if hidden_activation not in ("relu", "elu"):
        raise ValueError(f"hidden_activation must be relu or elu, got {hidden_activation!r}")
    if not LOG_ALPHA_MIN <= init_log_alpha <= LOG_ALPHA_MAX:
        raise ValueError(f"init_log_alpha must lie in [{LOG_ALPHA_MIN}, {LOG_ALPHA_MAX}]")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(VariationalDense(
            w_mean=w,
            bias=np.zeros(fan_out),
            log_alpha=np.full((fan_out, fan_in), float(init_log_alpha)),
            noise=noise,
        ))
        is_last = i == len(sizes) - 2
        layers.append("softmax-head" if is_last else hidden_activation)
    return NetworkState(layers)


def sample_noise(net: NetworkState, batch_size: int, rng: Rng) -> list:
    """One standard-normal draw per unit and example for each dense layer.

    Returns a list aligned with net.dense_layers; entries are None for
    layers with noise kind "none".
    """
    eps = []
    for layer in net.dense_layers:
        if layer.noise.is_variational:
            eps.append(rng.standard_normal((batch_size, layer.out_dim)))
        else:
            eps.append(None)
    return eps


def _forward(net: NetworkState, x: Tensor, eps_list) -> ForwardTrace:
    """Stochastic forward with the given unit noise (None entries mean
    the layer runs deterministically)."""
    activations = []
    dense_cache = {}
    cur = x
    dense_idx = 0
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, VariationalDense):
            m = cur @ layer.w_mean.T + layer.bias
            eps = eps_list[dense_idx]
            if eps is not None:
                alpha_tilde = layer.noise.noise_variance(layer.log_alpha)
                v = (cur ** 2) @ (alpha_tilde * layer.w_mean ** 2).T
                s = np.sqrt(v + _VAR_EPS)
                z = m + s * eps
                dense_cache[idx] = {"x": cur, "eps": eps, "s": s, "alpha_tilde": alpha_tilde}
            else:
                z = m
                dense_cache[idx] = {"x": cur, "eps": None}
            cur = z
            dense_idx += 1
        elif layer == "relu":
            dense_cache[idx] = {"pre": cur}
            cur = np.maximum(cur, 0.0)
        elif layer == "elu":
            dense_cache[idx] = {"pre": cur}
            cur = np.where(cur > 0, cur, np.expm1(cur))
        else:  # softmax-head marks the output; logits pass through
            dense_cache[idx] = {}
        activations.append(cur)
    return ForwardTrace(inputs=x, activations=activations, dense_cache=dense_cache)


def forward_stochastic(net: NetworkState, x: Tensor, rng: Rng) -> ForwardTrace:
    """Sample noise and run the noisy forward pass, keeping the draws."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.input_dim}")
    eps = sample_noise(net, x.shape[0], rng)
    return _forward(net, x, eps)


def forward_deterministic(net: NetworkState, x: Tensor) -> Tensor:
    """Forward pass through the weight means only; returns logits."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.input_dim}")
    cur = x
    for layer in net.layers:
        if isinstance(layer, VariationalDense):
            cur = cur @ layer.w_mean.T + layer.bias
        elif layer == "relu":
            cur = np.maximum(cur, 0.0)
        elif layer == "elu":
            cur = np.where(cur > 0, cur, np.expm1(cur))
    return cur


def _log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    return np.exp(_log_softmax(logits))


def info_nats(net: NetworkState) -> float:
    """Nats the weights carry about the data: -1/2 sum log_alpha over
    variational layers, up to an additive constant dropped throughout."""
    total = 0.0
    for layer in net.dense_layers:
        if layer.noise.is_variational:
            total += -0.5 * float(layer.log_alpha.sum())
    return total


def loss_and_grad_fixed_noise(net: NetworkState, x: Tensor, y: Tensor, beta: float,
                              n_total: int, eps_list) -> LossGrad:
    """Loss and exact gradients for a fixed noise draw.

    This is the function the finite-difference checks probe: for the
    same eps_list it is a deterministic, differentiable map from the
    parameters to the loss. loss_and_grad samples eps_list and
    delegates here.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if y.shape != (batch,):
        raise ValueError(f"labels shape {y.shape} does not match batch {batch}")

    trace = _forward(net, x, eps_list)
    logits = trace.logits
    log_p = _log_softmax(logits)
    mean_ce = -float(log_p[np.arange(batch), y].mean())
    ce_sum = n_total * mean_ce
    info = info_nats(net)
    total = ce_sum + beta * info

    # dL/dlogits for the n_total-scaled mean cross-entropy.
    probs = np.exp(log_p)
    dlogits = probs.copy()
    dlogits[np.arange(batch), y] -= 1.0
    dlogits *= n_total / batch

    dense_layers = net.dense_layers
    grads = [None] * len(dense_layers)
    delta = dlogits
    dense_idx = len(dense_layers) - 1
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        cache = trace.dense_cache[idx]
        if layer == "softmax-head":
            continue
        if layer == "relu":
            delta = delta * (cache["pre"] > 0)
            continue
        if layer == "elu":
            pre = cache["pre"]
            delta = delta * np.where(pre > 0, 1.0, np.exp(pre))
            continue
        x_in = cache["x"]
        if cache["eps"] is not None:
            eps = cache["eps"]
            s = cache["s"]
            alpha_tilde = cache["alpha_tilde"]
            w = layer.w_mean
            dv = delta * eps / (2.0 * s)  # [batch, out]
            da = dv.T @ (x_in ** 2)       # grad wrt alpha_tilde * w^2, [out, in]
            dw = delta.T @ x_in + da * (2.0 * alpha_tilde * w)
            dla_ce = da * (w ** 2) * layer.noise.noise_variance_grad(layer.log_alpha)
            db = delta.sum(axis=0)
            dx = delta @ w + (dv @ (alpha_tilde * w ** 2)) * (2.0 * x_in)
            # The info term contributes -1/2 per weight inside the clamp
            # and nothing for entries pinned at a boundary.
            interior = (layer.log_alpha > LOG_ALPHA_MIN) & (layer.log_alpha < LOG_ALPHA_MAX)
            dla = dla_ce + beta * (-0.5) * interior
        else:
            dw = delta.T @ x_in
            db = delta.sum(axis=0)
            dx = delta @ layer.w_mean
            dla = np.zeros_like(layer.log_alpha)
        grads[dense_idx] = {"w_mean": dw, "bias": db, "log_alpha": dla}
        delta = dx
        dense_idx -= 1

    return LossGrad(total_loss=total, ce_sum_nats=ce_sum, info_nats=info, grads=grads)


def loss_and_grad(net: NetworkState, batch, beta: float, n_total: int, rng: Rng) -> LossGrad:
    """Sample one noise draw and return loss pieces plus gradients.

    batch is an (x, y) pair; cross-entropy is scaled to estimate the
    total over n_total examples from the batch mean.
    """
    x, y = batch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = sample_noise(net, x.shape[0], rng)
    return loss_and_grad_fixed_noise(net, x, y, beta, n_total, eps)


def sgd_step(net: NetworkState, grads: list, opt_state: dict, learning_rate: float,
             momentum: float) -> tuple:
    """One SGD-with-momentum update, in place on net's tensors.

    v <- momentum * v - lr * g; p <- p + v. log_alpha entries are
    clamped back into [LOG_ALPHA_MIN, LOG_ALPHA_MAX] after the step.
    Returns (net, opt_state) for chaining.
    """
    dense_layers = net.dense_layers
    if len(grads) != len(dense_layers):
        raise ValueError(f"got {len(grads)} gradient entries for {len(dense_layers)} dense layers")
    for i, (layer, g) in enumerate(zip(dense_layers, grads)):
        slot = opt_state.setdefault(i, {
            "w_mean": np.zeros_like(layer.w_mean),
            "bias": np.zeros_like(layer.bias),
            "log_alpha": np.zeros_like(layer.log_alpha),
        })
        for name, param in (("w_mean", layer.w_mean), ("bias", layer.bias),
                            ("log_alpha", layer.log_alpha)):
            vel = slot[name]
            vel *= momentum
            vel -= learning_rate * g[name]
            param += vel
        np.clip(layer.log_alpha, LOG_ALPHA_MIN, LOG_ALPHA_MAX, out=layer.log_alpha)
    return net, opt_state


def evaluate(net: NetworkState, x: Tensor, y: Tensor, mode: str = "deterministic",
             k: int = 8, rng: Rng = None, chunk: int = 4096) -> tuple:
    """Accuracy and mean cross-entropy (nats/sample) over a dataset.

    mode "deterministic" uses the weight means; "stochastic-avg"
    averages k sampled softmax outputs per example before the argmax
    and the log for the cross-entropy.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if mode not in ("deterministic", "stochastic-avg"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "stochastic-avg":
        if rng is None:
            raise ValueError("stochastic-avg evaluation needs an rng")
        if k < 1:
            raise ValueError("stochastic-avg needs k >= 1")
    correct = 0
    ce_total = 0.0
    for start in range(0, n, chunk):
        xb = x[start:start + chunk]
        yb = y[start:start + chunk]
        if mode == "deterministic":
            probs = softmax(forward_deterministic(net, xb))
        else:
            probs = np.zeros((xb.shape[0], net.output_dim))
            for _ in range(k):
                probs += softmax(forward_stochastic(net, xb, rng).logits)
            probs /= k
        correct += int((probs.argmax(axis=1) == yb).sum())
        p_true = np.clip(probs[np.arange(xb.shape[0]), yb], 1e-300, None)
        ce_total += -float(np.log(p_true).sum())
    return correct / n, ce_total / n


def train(net: NetworkState, x: Tensor, y: Tensor, config: TrainConfig,
          stop=None) -> tuple:
    """Mini-batch SGD on the bottlenecked objective.

    Shuffles each epoch with the run's own stream, evaluates
    deterministically at each epoch end, and appends one EpochRecord
    per epoch. stop, if given, is called with the history after each
    epoch and ends training early when it returns True (config.epochs
    is then the cap). Raises TrainingDiverged if the loss goes
    non-finite.

    The optimizer preconditions by coordinate group: weight and bias
    gradients are divided by a multiple of the dataset size (so the
    configured learning rate has the familiar mean-loss scale and does
    not depend on N), while log_alpha gradients step at a multiple of
    dataset scale, where the constant information force beta/2 per
    weight can actually traverse its clamp range within a desk-scale
    run. Scaling each coordinate's gradient by a positive constant
    moves no stationary point of the total objective
    sum-CE + beta * info; it only equalizes the two terms' time
    scales. The split matters near the critical beta: noise variances
    must reach their working level before the means can descend far
    into a memorizing minimum, otherwise the run leaves the basin the
    objective actually prefers.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    history = TrainHistory()
    rng = Rng(config.seed)
    opt_state = {}
    for epoch in range(config.epochs):
        tick = time.perf_counter()
        lr = config.lr_at(epoch)
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            lg = loss_and_grad(net, (x[idx], y[idx]), config.beta, n, rng)
            if not np.isfinite(lg.total_loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            d = _MEAN_PRECOND_DIV * n
            scaled = [{"w_mean": g["w_mean"] / d, "bias": g["bias"] / d,
                       "log_alpha": g["log_alpha"] * _LOG_ALPHA_PRECOND}
                      for g in lg.grads]
            net, opt_state = sgd_step(net, scaled, opt_state, lr, config.momentum)
        acc, ce = evaluate(net, x, y)
        info = info_nats(net)
        history.append(EpochRecord(
            epoch=epoch, train_accuracy=acc, train_ce_nats=ce, info_nats=info,
            info_nats_per_sample=info / n, total_loss=n * ce + config.beta * info,
            learning_rate=lr, seconds=time.perf_counter() - tick,
        ))
        if stop is not None and stop(history):
            break
    return net, history


def clone_network(net: NetworkState) -> NetworkState:
    """Deep copy; used for held-out model selection and checkpoints."""
    return copy.deepcopy(net)


def network_payload(net: NetworkState) -> tuple:
    """Describe a network as (structure dict, named tensor dict) for
    the checkpoint container."""
    structure = []
    tensors = {}
    dense_idx = 0
    for layer in net.layers:
        if isinstance(layer, VariationalDense):
            structure.append({
                "kind": "dense",
                "in": layer.in_dim,
                "out": layer.out_dim,
                "noise": layer.noise.kind,
            })
            prefix = f"layer{dense_idx:02d}"
            tensors[f"{prefix}.w_mean"] = layer.w_mean
            tensors[f"{prefix}.bias"] = layer.bias
            tensors[f"{prefix}.log_alpha"] = layer.log_alpha
            dense_idx += 1
        else:
            structure.append({"kind": layer})
    return {"layers": structure}, tensors


def network_from_payload(structure: dict, tensors: dict) -> NetworkState:
    """Rebuild a network from checkpoint structure and tensors."""
    layers = []
    dense_idx = 0
    for entry in structure["layers"]:
        if entry["kind"] == "dense":
            prefix = f"layer{dense_idx:02d}"
            layers.append(VariationalDense(
                w_mean=np.array(tensors[f"{prefix}.w_mean"], dtype=np.float64),
                bias=np.array(tensors[f"{prefix}.bias"], dtype=np.float64),
                log_alpha=np.array(tensors[f"{prefix}.log_alpha"], dtype=np.float64),
                noise=NoiseModel(entry["noise"]),
            ))
            dense_idx += 1
        else:
            layers.append(entry["kind"])
    return NetworkState(layers)
