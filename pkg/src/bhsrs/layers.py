"""Bayesian and frequentist layers, the patch classifier network and its losses.

Bayesian layers keep a diagonal Gaussian posterior per weight, stored as a
mean ``mu`` and a raw spread ``rho`` with ``sigma = softplus(rho)``. Their
forward pass samples activations instead of weights (local
reparameterisation): the mean path convolves with ``mu`` and the noise path
scales unit Gaussian noise by ``sqrt(conv(x**2, sigma**2))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STOCHASTIC = "stochastic"
MEAN = "mean"
BAYESIAN = "bayesian"
FREQUENTIST = "frequentist"


@dataclass
class VariationalParam:
    mu: Tensor
    rho: Tensor
    prior_sigma: float = 0.1

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu shape {self.mu.shape} != rho shape {self.rho.shape}")
        if not self.prior_sigma > 0:
            raise ValueError(f"prior_sigma must be positive, got {self.prior_sigma}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def sigma(self) -> Tensor:
        return ad.softplus(self.rho)

    def sigma_np(self) -> np.ndarray:
        return ad._softplus_np(self.rho.data, 1.0)

    def alpha(self) -> np.ndarray:
        """Variance-to-squared-mean ratio; infinite where ``mu`` is zero."""
        with np.errstate(divide="ignore"):
            return self.sigma_np() ** 2 / self.mu.data ** 2


def kl_gaussian_terms(mu: Tensor, sigma: Tensor, prior_sigma: float) -> Tensor:
    """Summed KL(N(mu, sigma^2) || N(0, prior_sigma^2)) over all entries."""
    sp2 = prior_sigma * prior_sigma
    terms = (math.log(prior_sigma) - ad.log(sigma)
             + (ad.square(sigma) + ad.square(mu)) / (2.0 * sp2) - 0.5)
    return ad.tsum(terms)


def kl_gaussian(layer) -> Tensor:
    """Closed-form KL between a layer's posterior and its zero-mean Gaussian prior."""
    total = kl_gaussian_terms(layer.weight.mu, layer.weight.sigma(), layer.weight.prior_sigma)
    if layer.bias is not None:
        total = total + kl_gaussian_terms(layer.bias.mu, layer.bias.sigma(), layer.bias.prior_sigma)
    return total


def _variational_param(shape, fan_in, prior_sigma, rho_init, rng, name, zero_mean=False) -> VariationalParam:
    mu = np.zeros(shape) if zero_mean else rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return VariationalParam(
        Tensor(mu, requires_grad=True, name=f"{name}.mu"),
        Tensor(np.full(shape, rho_init), requires_grad=True, name=f"{name}.rho"),
        prior_sigma,
    )


class _Layer:
    weight: object
    bias: object
    mask: np.ndarray | None

    def set_mask(self, keep: np.ndarray | None) -> None:
        if keep is not None:
            keep = np.asarray(keep, dtype=bool)
            if keep.shape != self.weight_shape:
                raise ValueError(f"mask shape {keep.shape} != weight shape {self.weight_shape}")
        self.mask = keep


class BayesianConv2d(_Layer):
    def __init__(self, in_channels, out_channels, kernel=3, prior_sigma=0.1, rho_init=-5.0,
                 rng=None, name="conv"):
        rng = rng if rng is not None else np.random.default_rng()
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight_shape = shape
        self.weight = _variational_param(shape, in_channels * kernel * kernel, prior_sigma, rho_init, rng, f"{name}.weight")
        self.bias = _variational_param((out_channels,), 1, prior_sigma, rho_init, rng, f"{name}.bias", zero_mean=True)
        self.rng = np.random.default_rng()
        self.mask = None

    def parameters(self) -> list[Tensor]:
        return [self.weight.mu, self.weight.rho, self.bias.mu, self.bias.rho]

    def forward(self, x, mode=STOCHASTIC) -> Tensor:
        return variational_conv_forward(self, x, mode)


class BayesianDense(_Layer):
    def __init__(self, in_features, out_features, prior_sigma=0.1, rho_init=-5.0, rng=None, name="dense"):
        rng = rng if rng is not None else np.random.default_rng()
        shape = (in_features, out_features)
        self.weight_shape = shape
        self.weight = _variational_param(shape, in_features, prior_sigma, rho_init, rng, f"{name}.weight")
        self.bias = _variational_param((out_features,), 1, prior_sigma, rho_init, rng, f"{name}.bias", zero_mean=True)
        self.rng = np.random.default_rng()
        self.mask = None

    def parameters(self) -> list[Tensor]:
        return [self.weight.mu, self.weight.rho, self.bias.mu, self.bias.rho]

    def forward(self, x, mode=STOCHASTIC) -> Tensor:
        return variational_dense_forward(self, x, mode)


def _posterior(layer) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    w_mu, w_sigma = layer.weight.mu, layer.weight.sigma()
    if layer.mask is not None:
        w_mu = ad.masked(w_mu, layer.mask)
        w_sigma = ad.masked(w_sigma, layer.mask)
    return w_mu, w_sigma, layer.bias.mu, layer.bias.sigma()


def _check_mode(mode: str) -> None:
    if mode not in (STOCHASTIC, MEAN):
        raise ValueError(f"mode must be {STOCHASTIC!r} or {MEAN!r}, got {mode!r}")


def variational_conv_forward(layer: BayesianConv2d, x, mode: str = STOCHASTIC) -> Tensor:
    """Locally reparameterised convolution: ``conv(x, mu) + eps * sqrt(conv(x^2, sigma^2))``."""
    _check_mode(mode)
    x = ad.as_tensor(x)
    w_mu, w_sigma, b_mu, b_sigma = _posterior(layer)
    cout = w_mu.shape[0]
    mean = ad.conv2d(x, w_mu, b_mu)
    if mode == MEAN:
        return mean
    var = ad.conv2d(ad.square(x), ad.square(w_sigma)) + ad.reshape(ad.square(b_sigma), (1, cout, 1, 1))
    assert np.all(var.data >= 0), "negative activation variance"
    eps = layer.rng.standard_normal(mean.shape)
    return mean + ad.sqrt(var) * eps


def variational_dense_forward(layer: BayesianDense, x, mode: str = STOCHASTIC) -> Tensor:
    """Dense analogue of :func:`variational_conv_forward`."""
    _check_mode(mode)
    x = ad.as_tensor(x)
    w_mu, w_sigma, b_mu, b_sigma = _posterior(layer)
    mean = ad.matmul(x, w_mu) + b_mu
    if mode == MEAN:
        return mean
    var = ad.matmul(ad.square(x), ad.square(w_sigma)) + ad.square(b_sigma)
    assert np.all(var.data >= 0), "negative activation variance"
    eps = layer.rng.standard_normal(mean.shape)
    return mean + ad.sqrt(var) * eps


class Conv2d(_Layer):
    def __init__(self, in_channels, out_channels, kernel=3, rng=None, name="conv"):
        rng = rng if rng is not None else np.random.default_rng()
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight_shape = shape
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias")
        self.mask = None

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x, mode=MEAN) -> Tensor:
        w = self.weight if self.mask is None else ad.masked(self.weight, self.mask)
        return ad.conv2d(x, w, self.bias)


class Dense(_Layer):
    def __init__(self, in_features, out_features, rng=None, name="dense"):
        rng = rng if rng is not None else np.random.default_rng()
        shape = (in_features, out_features)
        self.weight_shape = shape
        self.weight = Tensor(rng.normal(0.0, math.sqrt(2.0 / in_features), size=shape), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")
        self.mask = None

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x, mode=MEAN) -> Tensor:
        w = self.weight if self.mask is None else ad.masked(self.weight, self.mask)
        return ad.matmul(ad.as_tensor(x), w) + self.bias


@dataclass
class NetworkSpec:
    """Three valid 3x3 conv blocks, flatten, dense, log-softmax.

    With the default widths the flattened size is 512 * 3 * 3 = 4608.
    """

    in_channels: int
    n_classes: int
    widths: tuple[int, ...] = (128, 256, 512)
    kernel: int = 3
    patch: int = 9
    mode: str = BAYESIAN
    prior_sigma: float = 0.1
    rho_init: float = -5.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.mode not in (BAYESIAN, FREQUENTIST):
            raise ValueError(f"mode must be {BAYESIAN!r} or {FREQUENTIST!r}, got {self.mode!r}")
        if self.out_size < 1:
            raise ValueError(f"patch {self.patch} too small for {len(self.widths)} blocks of kernel {self.kernel}")

    @property
    def out_size(self) -> int:
        return self.patch - len(self.widths) * (self.kernel - 1)

    @property
    def flat_size(self) -> int:
        return self.widths[-1] * self.out_size ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


@dataclass
class _Block:
    conv: object
    gain: Tensor
    offset: Tensor


class Network:
    """Patch classifier in either Bayesian or frequentist form.

    Both forms share the layer layout; Bayesian blocks use Softplus
    activations and variational weights, frequentist blocks use ReLU.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        bayes = spec.mode == BAYESIAN
        self.blocks: list[_Block] = []
        cin, size = spec.in_channels, spec.patch
        for i, width in enumerate(spec.widths):
            name = f"block{i}.conv"
            if bayes:
                conv = BayesianConv2d(cin, width, spec.kernel, spec.prior_sigma, spec.rho_init, init_rng, name)
            else:
                conv = Conv2d(cin, width, spec.kernel, init_rng, name)
            size -= spec.kernel - 1
            gain = Tensor(np.ones((width, size, size)), requires_grad=True, name=f"block{i}.norm.gain")
            offset = Tensor(np.zeros((width, size, size)), requires_grad=True, name=f"block{i}.norm.offset")
            self.blocks.append(_Block(conv, gain, offset))
            cin = width
        if bayes:
            self.dense = BayesianDense(spec.flat_size, spec.n_classes, spec.prior_sigma, spec.rho_init, init_rng, "dense")
        else:
            self.dense = Dense(spec.flat_size, spec.n_classes, init_rng, "dense")
        self.reseed(seed)

    @property
    def bayesian(self) -> bool:
        return self.spec.mode == BAYESIAN

    def layers(self) -> list:
        return [b.conv for b in self.blocks] + [self.dense]

    def reseed(self, seed: int) -> None:
        """Reset every layer's noise stream; identical seeds give identical draws."""
        streams = np.random.SeedSequence([seed, 1]).spawn(len(self.layers()))
        for layer, ss in zip(self.layers(), streams):
            layer.rng = np.random.default_rng(ss)

    def forward(self, x, mode: str = STOCHASTIC) -> Tensor:
        """Log class probabilities for a batch of ``N x C x patch x patch`` inputs."""
        x = ad.as_tensor(x)
        act = ad.softplus if self.bayesian else ad.relu
        if self.bayesian:
            _check_mode(mode)
        for block in self.blocks:
            x = block.conv.forward(x, mode) if self.bayesian else block.conv.forward(x)
            x = act(x)
            x = ad.layer_norm(x, block.gain, block.offset, self.spec.ln_eps)
        x = ad.flatten(x)
        x = self.dense.forward(x, mode) if self.bayesian else self.dense.forward(x)
        return ad.log_softmax(x)

    __call__ = forward

    def kl(self) -> Tensor:
        if not self.bayesian:
            return Tensor(0.0)
        total = kl_gaussian(self.layers()[0])
        for layer in self.layers()[1:]:
            total = total + kl_gaussian(layer)
        return total

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for block in self.blocks:
            params += block.conv.parameters() + [block.gain, block.offset]
        return params + self.dense.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        for i, layer in enumerate(self.layers()):
            if layer.mask is not None:
                state[f"mask.{i}"] = layer.mask.astype(np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}: {state[p.name].shape} vs {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)
        for i, layer in enumerate(self.layers()):
            key = f"mask.{i}"
            layer.set_mask(state[key] > 0.5 if key in state else None)

    def clone(self) -> "Network":
        twin = Network(self.spec, self.seed)
        twin.load_state_dict(self.state_dict())
        return twin


def frequentist_forward(network: Network, x) -> Tensor:
    if network.bayesian:
        raise ValueError("frequentist_forward needs a frequentist network")
    return network.forward(x)


def elbo_loss(network: Network, inputs, labels, n_batches: int, mc_samples: int = 1) -> Tensor:
    """Minibatch variational objective: KL / n_batches + mean over draws of the summed NLL."""
    if mc_samples < 1:
        raise ValueError(f"mc_samples must be >= 1, got {mc_samples}")
    if n_batches < 1:
        raise ValueError(f"n_batches must be >= 1, got {n_batches}")
    labels = np.asarray(labels)
    k = network.spec.n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    nll = ad.nll_loss(network.forward(inputs, STOCHASTIC), labels, reduction="sum")
    for _ in range(mc_samples - 1):
        nll = nll + ad.nll_loss(network.forward(inputs, STOCHASTIC), labels, reduction="sum")
    if mc_samples > 1:
        nll = nll / float(mc_samples)
    return network.kl() / float(n_batches) + nll


def cross_entropy_loss(network: Network, inputs, labels) -> Tensor:
    """Mean categorical cross-entropy for the frequentist twin."""
    return ad.nll_loss(network.forward(inputs), np.asarray(labels), reduction="mean")
