"""Transformer diffusion policy over action chunks.

The denoiser runs a stack of AdaLN-conditioned transformer blocks over
[action tokens ++ observation tokens ++ noise-level token] and decodes only
the action rows. Training follows the EDM recipe: sigma sampled log-normal,
input/output preconditioning, weighted denoising loss. Sampling is the
deterministic probability-flow update on a Karras sigma grid (4 steps by
default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import FusedObservation, modulate
from .nn import MLP, Linear, Module, SelfAttention, sinusoidal_features


@dataclass
class EDMConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 7.0
    n_sample_steps: int = 4
    # training sigma ~ exp(N(p_mean, p_std^2))
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0.0:
            raise ValueError("sigma_data must be positive")
        if self.n_sample_steps < 1:
            raise ValueError("n_sample_steps must be >= 1")


def edm_precondition(sigma, config: EDMConfig):
    """Preconditioning coefficients (c_skip, c_out, c_in, c_noise).

    c_skip = sd^2 / (s^2 + sd^2), c_out = s*sd / sqrt(s^2 + sd^2),
    c_in = 1 / sqrt(s^2 + sd^2), c_noise = ln(s) / 4.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    sd = config.sigma_data
    denom = sigma * sigma + sd * sd
    c_skip = sd * sd / denom
    c_out = sigma * sd / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, config: EDMConfig):
    """EDM loss weighting (s^2 + sd^2) / (s * sd)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sd = config.sigma_data
    return (sigma * sigma + sd * sd) / (sigma * sd) ** 2


def sigma_grid(config: EDMConfig) -> np.ndarray:
    """Karras sampling grid from sigma_max down to sigma_min, then 0."""
    n = config.n_sample_steps
    if n == 1:
        return np.array([config.sigma_max, 0.0])
    inv_rho = 1.0 / config.rho
    i = np.arange(n, dtype=np.float64)
    hi = config.sigma_max**inv_rho
    lo = config.sigma_min**inv_rho
    grid = (hi + i / (n - 1) * (lo - hi)) ** config.rho
    return np.concatenate([grid, [0.0]])


def sample_train_sigmas(rng: np.random.Generator, n: int, config: EDMConfig) -> np.ndarray:
    return np.exp(rng.normal(config.p_mean, config.p_std, size=n))


class NoiseEmbed(Module):
    """c_noise scalar -> sinusoidal features -> MLP -> model width."""

    def __init__(self, freq_dim: int, dim: int, rng: np.random.Generator):
        self.freq_dim = freq_dim
        self.mlp = MLP([freq_dim, dim, dim], rng)

    def __call__(self, c_noise: np.ndarray) -> Tensor:
        feats = sinusoidal_features(c_noise, self.freq_dim)
        return self.mlp(Tensor(feats))


class DiTBlock(Module):
    """Transformer block whose layer norms and residual gates are modulated
    by a condition vector.

    The single modulation head maps the condition to six d-wide vectors
    (gain/shift/gate for attention, gain/shift/gate for the MLP) and is
    zero-initialized, making the block an exact identity at init.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.dim = dim
        self.attn = SelfAttention(dim, heads, rng)
        self.ffn = MLP([dim, ffn_dim, dim], rng)
        self.mod = Linear(dim, 6 * dim, rng, zero_init=True)
        self._unit = Tensor(np.ones(dim))
        self._zero = Tensor(np.zeros(dim))

    def __call__(self, tokens: Tensor, condition: Tensor) -> Tensor:
        d = self.dim
        if tokens.shape[-1] != d or condition.shape[-1] != d:
            raise ad.ShapeError(
                f"dit_block width mismatch: tokens {tokens.shape}, "
                f"condition {condition.shape}, dim {d}"
            )
        m = self.mod(ad.gelu(condition))  # (B, 6d)
        g1 = ad.narrow(m, 1, 0, d)
        s1 = ad.narrow(m, 1, d, d)
        a1 = ad.narrow(m, 1, 2 * d, d)
        g2 = ad.narrow(m, 1, 3 * d, d)
        s2 = ad.narrow(m, 1, 4 * d, d)
        a2 = ad.narrow(m, 1, 5 * d, d)
        b = tokens.shape[0]

        normed = ad.layer_norm(tokens, self._unit, self._zero)
        attn_out = self.attn(modulate(normed, g1, s1))
        tokens = ad.add(tokens, ad.mul(attn_out, ad.reshape(a1, (b, 1, d))))
        normed = ad.layer_norm(tokens, self._unit, self._zero)
        ffn_out = self.ffn(modulate(normed, g2, s2))
        tokens = ad.add(tokens, ad.mul(ffn_out, ad.reshape(a2, (b, 1, d))))
        return tokens


def dit_block(tokens: Tensor, condition: Tensor, block: DiTBlock) -> Tensor:
    return block(tokens, condition)


class Denoiser(Module):
    """The trainable network mapping (noisy chunk, observation, sigma) to a
    clean-chunk estimate."""

    def __init__(self, horizon: int, action_dim: int, dim: int, heads: int,
                 ffn_dim: int, n_blocks: int, noise_freq_dim: int,
                 edm: EDMConfig, rng: np.random.Generator):
        self.horizon = horizon
        self.action_dim = action_dim
        self.dim = dim
        self.edm = edm
        self.act_embed = Linear(action_dim, dim, rng)
        self.act_pos = Tensor(rng.normal(0.0, 0.02, size=(1, horizon, dim)),
                              requires_grad=True)
        self.noise_embed = NoiseEmbed(noise_freq_dim, dim, rng)
        self.blocks = [DiTBlock(dim, heads, ffn_dim, rng) for _ in range(n_blocks)]
        # final layer: modulated norm then zero-init projection back to actions
        self.final_mod = Linear(dim, 2 * dim, rng, zero_init=True)
        self.head = Linear(dim, action_dim, rng, zero_init=True)
        self._unit = Tensor(np.ones(dim))
        self._zero = Tensor(np.zeros(dim))

    def __call__(self, noisy: Tensor, obs: FusedObservation, sigma: np.ndarray) -> Tensor:
        """noisy: (B, H, A); sigma: (B,) -> denoised estimate (B, H, A)."""
        b, h, a = noisy.shape
        if h != self.horizon or a != self.action_dim:
            raise ad.ShapeError(
                f"chunk shape {(h, a)} does not match model ({self.horizon}, {self.action_dim})"
            )
        if obs.main_tokens.shape[-1] != self.dim:
            raise ad.ShapeError(
                f"observation width {obs.main_tokens.shape[-1]} != model width {self.dim}"
            )
        c_skip, c_out, c_in, c_noise = edm_precondition(sigma, self.edm)
        dt = ad.get_default_dtype()
        c_skip = c_skip.astype(dt).reshape(b, 1, 1)
        c_out = c_out.astype(dt).reshape(b, 1, 1)
        c_in = c_in.astype(dt).reshape(b, 1, 1)

        noise_vec = self.noise_embed(c_noise)  # (B, d)
        cond = noise_vec
        if obs.condition is not None:
            cond = ad.add(cond, obs.condition)

        act_tok = ad.add(self.act_embed(ad.mul(noisy, Tensor(c_in))), self.act_pos)
        noise_tok = ad.reshape(noise_vec, (b, 1, self.dim))
        seq = ad.concat([act_tok, obs.main_tokens, noise_tok], axis=1)
        for block in self.blocks:
            seq = block(seq, cond)
        act_out = ad.narrow(seq, 1, 0, h)
        normed = ad.layer_norm(act_out, self._unit, self._zero)
        fm = self.final_mod(cond)
        g = ad.narrow(fm, 1, 0, self.dim)
        s = ad.narrow(fm, 1, self.dim, self.dim)
        net = self.head(modulate(normed, g, s))
        return ad.add(ad.mul(noisy, Tensor(c_skip)), ad.mul(net, Tensor(c_out)))


def denoiser_forward(noisy, obs: FusedObservation, sigma, denoiser: Denoiser) -> Tensor:
    """Functional entry point; accepts a raw (B, H, A) array for noisy."""
    if not isinstance(noisy, Tensor):
        noisy = Tensor(np.asarray(noisy))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    return denoiser(noisy, obs, sigma)


def score_matching_loss(obs: FusedObservation, clean: np.ndarray,
                        denoiser: Denoiser, config: EDMConfig,
                        rng: np.random.Generator) -> Tensor:
    """Weighted denoising loss over one batch.

    Per sample: sigma from the log-normal training distribution, Gaussian
    noise at that scale, then weight * ||D(clean + noise) - clean||^2,
    averaged over the batch.
    """
    clean = np.asarray(clean)
    if clean.ndim != 3 or clean.shape[0] < 1:
        raise ValueError(f"need a non-empty (B, H, A) batch, got {clean.shape}")
    b = clean.shape[0]
    sigmas = sample_train_sigmas(rng, b, config)
    eps = rng.standard_normal(clean.shape) * sigmas[:, None, None]
    dt = ad.get_default_dtype()
    noisy = Tensor((clean + eps).astype(dt))
    target = Tensor(clean.astype(dt))
    weights = loss_weight(sigmas, config).astype(dt).reshape(b, 1, 1)

    denoised = denoiser(noisy, obs, sigmas)
    err = ad.sub(denoised, target)
    per_sample = ad.sum_(ad.mul(ad.mul(err, err), Tensor(weights)), axis=(1, 2))
    return ad.mean(per_sample)


def ddim_sample(obs: FusedObservation, denoiser: Denoiser, config: EDMConfig,
                rng: np.random.Generator | int, horizon: int | None = None,
                action_dim: int | None = None) -> np.ndarray:
    """Deterministic probability-flow sampling on the Karras grid.

    Starts from seeded Gaussian noise at sigma_max and applies
    a <- a + (s_next - s) * (a - D(a, obs, s)) / s down to zero. Fixed
    (seed, parameters, observation) give bit-identical chunks.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    h = horizon if horizon is not None else denoiser.horizon
    a_dim = action_dim if action_dim is not None else denoiser.action_dim
    b = obs.main_tokens.shape[0]
    grid = sigma_grid(config)
    dt = ad.get_default_dtype()
    x = (rng.standard_normal((b, h, a_dim)) * config.sigma_max).astype(dt)
    for i in range(len(grid) - 1):
        s, s_next = float(grid[i]), float(grid[i + 1])
        denoised = denoiser(Tensor(x), obs, np.full(b, s)).data
        x = x + (s_next - s) * (x - denoised) / s
    return x


class ActionNormalizer:
    """Per-dimension affine map of actions to roughly zero mean, unit
    variance; inverted when decoding samples back to world actions."""

    STD_FLOOR = 1e-3  # constant action dimensions would otherwise divide by 0

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(std, dtype=np.float64), self.STD_FLOOR)

    @classmethod
    def fit(cls, chunks: np.ndarray) -> "ActionNormalizer":
        """chunks: (N, H, A); statistics are taken per action dimension."""
        flat = np.asarray(chunks, dtype=np.float64).reshape(-1, chunks.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    def encode(self, actions: np.ndarray) -> np.ndarray:
        return (np.asarray(actions, dtype=np.float64) - self.mean) / self.std

    def decode(self, actions: np.ndarray) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64) * self.std + self.mean

    def data_sigma(self, chunks: np.ndarray) -> float:
        """Std of the normalized training actions (the EDM data scale)."""
        return float(self.encode(chunks).std())
