"""Encoder, decoder and the beta-weighted ELBO.

The encoder maps a batch of series ``(B, T, d)`` (or image frames
``(B, T, H, W)``) to per-channel structured posteriors; the decoder maps each
latent vector ``z_t`` to the mean of a Gaussian observation model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import init, ops
from .autodiff.tensor import Parameter, Tensor, as_tensor
from .posterior import (
    BandedCholesky,
    PriorFactors,
    StructuredGaussian,
    positive_diag,
    sample,
    total_kl,
)

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteTerm(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite value in ELBO term {term!r}")
        self.term = term


@dataclass
class Conv2dSpec:
    layers: int = 1
    filters: int = 32
    filter_size: int = 3


@dataclass
class EncoderConfig:
    input_dim: int
    latent_dim: int
    temporal_filters: int = 32
    temporal_width: int = 3
    ff_layers: int = 2
    ff_width: int = 64
    image_shape: tuple[int, int] | None = None
    image_preproc: Conv2dSpec | None = None
    mean_field: bool = False

    def __post_init__(self):
        if isinstance(self.image_preproc, dict):
            self.image_preproc = Conv2dSpec(**self.image_preproc)
        if self.image_shape is not None:
            self.image_shape = tuple(self.image_shape)
        for name in ("input_dim", "latent_dim", "temporal_filters", "temporal_width", "ff_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if self.ff_layers < 0:
            raise ValueError("EncoderConfig.ff_layers must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.image_shape is not None:
            d["image_shape"] = list(self.image_shape)
        return d


@dataclass
class DecoderConfig:
    latent_dim: int
    output_dim: int
    ff_layers: int = 3
    ff_width: int = 64
    obs_variance: float = 1.0

    def __post_init__(self):
        if not self.obs_variance > 0:
            raise ValueError("DecoderConfig.obs_variance must be > 0")
        if self.latent_dim < 1 or self.output_dim < 1 or self.ff_width < 1 or self.ff_layers < 0:
            raise ValueError("DecoderConfig dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _dense(rng, fan_in, fan_out, name, params):
    params[f"{name}/w"] = init.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out, f"{name}/w")
    params[f"{name}/b"] = init.zeros((fan_out,), f"{name}/b")


class Encoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = c = config
        self.params: dict[str, Parameter] = {}
        feat = c.input_dim
        if c.image_shape is not None:
            h, w = c.image_shape
            spec = c.image_preproc or Conv2dSpec()
            cin = 1
            for i in range(spec.layers):
                k = spec.filter_size
                name = f"enc/conv2d{i}"
                shape = (spec.filters, cin, k, k)
                self.params[f"{name}/w"] = init.glorot_uniform(
                    rng, shape, cin * k * k, spec.filters * k * k, f"{name}/w")
                self.params[f"{name}/b"] = init.zeros((spec.filters, 1, 1), f"{name}/b")
                cin = spec.filters
                h, w = h - k + 1, w - k + 1
                if h < 1 or w < 1:
                    raise ValueError(f"image {c.image_shape} too small for {spec.layers} conv layers")
            feat = cin * h * w
        k, f = c.temporal_width, c.temporal_filters
        self.params["enc/conv1d/w"] = init.glorot_uniform(rng, (k, feat, f), k * feat, k * f, "enc/conv1d/w")
        self.params["enc/conv1d/b"] = init.zeros((f,), "enc/conv1d/b")
        width = f
        for i in range(c.ff_layers):
            _dense(rng, width, c.ff_width, f"enc/ff{i}", self.params)
            width = c.ff_width
        _dense(rng, width, 3 * c.latent_dim, "enc/head", self.params)

    def features(self, x) -> Tensor:
        """Backbone activations of shape (B, T, width)."""
        c, p = self.config, self.params
        x = as_tensor(x)
        if c.image_shape is not None:
            if x.ndim != 4 or tuple(x.shape[2:]) != c.image_shape:
                raise ValueError(f"encoder expects (B, T, {c.image_shape[0]}, {c.image_shape[1]}), got {x.shape}")
            n, T = x.shape[:2]
            h = ops.reshape(x, (n * T, 1) + c.image_shape)
            spec = c.image_preproc or Conv2dSpec()
            for i in range(spec.layers):
                h = ops.relu(ops.conv2d(h, p[f"enc/conv2d{i}/w"]) + p[f"enc/conv2d{i}/b"])
            h = ops.reshape(h, (n, T, -1))
        else:
            if x.ndim != 3 or x.shape[2] != c.input_dim:
                raise ValueError(f"encoder expects (B, T, {c.input_dim}), got {x.shape}")
            h = x
        h = ops.relu(ops.conv1d(h, p["enc/conv1d/w"]) + p["enc/conv1d/b"])
        for i in range(c.ff_layers):
            h = ops.relu(h @ p[f"enc/ff{i}/w"] + p[f"enc/ff{i}/b"])
        return h

    def encode(self, x) -> StructuredGaussian:
        """Posterior with mean/diag of shape (B, m, T) and superdiag (B, m, T-1)."""
        m = self.config.latent_dim
        h = self.features(x)
        out = h @ self.params["enc/head/w"] + self.params["enc/head/b"]  # B, T, 3m
        out = ops.transpose(out, (0, 2, 1))  # B, 3m, T
        mean = out[:, :m, :]
        diag = positive_diag(out[:, m:2 * m, :])
        if self.config.mean_field:
            sup = Tensor(np.zeros(mean.shape[:-1] + (mean.shape[-1] - 1,)))
        else:
            sup = out[:, 2 * m:, :-1]
        return StructuredGaussian(mean, BandedCholesky(diag, sup))

    __call__ = encode


class Decoder:
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = c = config
        self.params: dict[str, Parameter] = {}
        width = c.latent_dim
        for i in range(c.ff_layers):
            _dense(rng, width, c.ff_width, f"dec/ff{i}", self.params)
            width = c.ff_width
        _dense(rng, width, c.output_dim, "dec/out", self.params)

    def decode(self, z) -> Tensor:
        """Map latents ``(..., m)`` to observation means ``(..., d)`` point-wise."""
        c, p = self.config, self.params
        z = as_tensor(z)
        if z.shape[-1] != c.latent_dim:
            raise ValueError(f"decoder expects latent size {c.latent_dim}, got {z.shape}")
        single = z.ndim == 1
        h = ops.reshape(z, (1, -1)) if single else z
        for i in range(c.ff_layers):
            h = ops.relu(h @ p[f"dec/ff{i}/w"] + p[f"dec/ff{i}/b"])
        out = h @ p["dec/out/w"] + p["dec/out/b"]
        return ops.reshape(out, (c.output_dim,)) if single else out

    __call__ = decode


def gaussian_log_likelihood(x, mean, obs_variance: float) -> Tensor:
    """Sum over the last axis of isotropic Gaussian log densities."""
    x, mean = as_tensor(x), as_tensor(mean)
    d = mean.shape[-1]
    resid = x - mean
    return -0.5 * d * (LOG_2PI + math.log(obs_variance)) - ops.sum(ops.square(resid), axis=-1) / (2.0 * obs_variance)


@dataclass
class ElboBreakdown:
    reconstruction: Tensor
    kl: Tensor
    total: Tensor
    beta: float = 1.0

    def values(self) -> dict[str, float]:
        return {"elbo": self.total.item(), "recon": self.reconstruction.item(), "kl": self.kl.item()}


@dataclass
class DGPVAE:
    encoder: Encoder
    decoder: Decoder
    priors: PriorFactors | None = None
    params: dict[str, Parameter] = field(init=False)

    def __post_init__(self):
        self.params = {**self.encoder.params, **self.decoder.params}

    def elbo(self, x, beta: float = 1.0, rng: np.random.Generator | None = None,
             mc_samples: int = 1, eps=None, priors: PriorFactors | None = None) -> ElboBreakdown:
        """Batch-averaged objective: sum over time of expected log-likelihood
        minus ``beta`` times the KL summed over channels.

        ``eps`` (shape (mc_samples, B, m, T) or (B, m, T)) fixes the
        reparameterization noise; otherwise it is drawn from ``rng``.
        """
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        priors = priors or self.priors
        if priors is None:
            raise ValueError("no prior factors supplied")
        x = as_tensor(x)
        q = self.encoder.encode(x)
        shape = q.mean.shape
        if eps is not None:
            eps = np.asarray(eps, dtype=np.float64)
            if eps.shape == shape:
                eps = eps[None]
            mc_samples = eps.shape[0]
        recon = None
        for s in range(mc_samples):
            noise = eps[s] if eps is not None else rng.standard_normal(shape)
            z = sample(q, eps=noise)  # B, m, T
            mu = self.decoder.decode(ops.transpose(z, (0, 2, 1)))  # B, T, d
            obs = x if x.ndim == 3 else ops.reshape(x, mu.shape)
            ll = ops.sum(gaussian_log_likelihood(obs, mu, self.decoder.config.obs_variance), axis=-1)
            recon = ll if recon is None else recon + ll
        recon = ops.mean(recon, axis=0) / mc_samples
        kl = ops.mean(total_kl(q, priors), axis=0)
        if not np.isfinite(recon.data):
            raise NonFiniteTerm("reconstruction")
        if not np.isfinite(kl.data):
            raise NonFiniteTerm("kl")
        return ElboBreakdown(recon, kl, recon - beta * kl, beta)
