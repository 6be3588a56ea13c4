"""Condition-generated factor matrices and the small diffusion stack that
trains them.

A condition vector and the diffusion step are fused into a control vector h.
Generators turn h into per-sample ternary matrices and a per-sample first
layer of the topic FFN by mixing learned bases around the shared base
matrix; a unary conditioner scales, shifts and gates the initial beliefs.
With every generator head at its zero initialisation the mix returns the
base matrices exactly, so a fresh conditional denoiser reproduces the plain
cornerstone denoiser bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import (
    FactorBank,
    ModelConfig,
    BeliefState,
    embed_patches,
    mfvi_iterate,
    patchify,
    z_normalize,
)
from .nn import MLP, Linear, Module, param
from .optim import AdamState, adam_step
from .tensor import Tensor

TERNARY_KEYS = ("U_time", "V_time", "U_chan", "V_chan")


@dataclass
class DiffusionConfig:
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sample_steps: int = 50
    p_null: float = 0.1
    guidance_scale: float = 1.5
    lambda_spec: float = 0.1
    n_basis_ternary: int = 8
    n_basis_topic: int = 16
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if not 0.0 <= self.p_null < 1.0:
            raise ValueError("p_null must lie in [0, 1)")
        if not 1 <= self.sample_steps <= self.t_train:
            raise ValueError("sample_steps must lie in [1, t_train]")

    def betas(self) -> np.ndarray:
        """Quadratic schedule: linear in sqrt(beta), then squared."""
        if "betas" not in self._cache:
            self._cache["betas"] = np.linspace(math.sqrt(self.beta_start), math.sqrt(self.beta_end),
                                               self.t_train) ** 2
        return self._cache["betas"]

    def alpha_bars(self) -> np.ndarray:
        if "abar" not in self._cache:
            self._cache["abar"] = np.cumprod(1.0 - self.betas())
        return self._cache["abar"]

    def abar(self, t) -> np.ndarray:
        """alpha_bar at integer steps; t = -1 denotes the clean signal (1.0)."""
        t = np.asarray(t)
        if np.any(t < -1) or np.any(t >= self.t_train):
            raise IndexError(f"diffusion step outside [-1, {self.t_train})")
        ab = self.alpha_bars()
        return np.where(t < 0, 1.0, ab[np.clip(t, 0, None)])


def _bcast(a: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(np.shape(a) + (1,) * (ndim - np.ndim(a)))


def q_sample(x0, t, noise, sched: DiffusionConfig):
    """x_t = sqrt(abar) x0 + sqrt(1 - abar) eps, with t per leading sample."""
    ab = _bcast(sched.abar(t), np.ndim(x0))
    if np.any(np.asarray(t) < 0):
        raise IndexError("q_sample needs t >= 0")
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def v_target(x0, noise, t, sched: DiffusionConfig):
    ab = _bcast(sched.abar(t), np.ndim(x0))
    return np.sqrt(ab) * noise - np.sqrt(1.0 - ab) * x0


def x0_from_v(x_t, v, t, sched: DiffusionConfig):
    ab = _bcast(sched.abar(t), len(x_t.shape))
    return x_t * np.sqrt(ab) - v * np.sqrt(1.0 - ab)


def eps_from_v(x_t, v, t, sched: DiffusionConfig):
    ab = _bcast(sched.abar(t), len(x_t.shape))
    return x_t * np.sqrt(1.0 - ab) + v * np.sqrt(ab)


def ddim_step(x_t: np.ndarray, v_pred: np.ndarray, t: int, t_prev: int, sched: DiffusionConfig) -> np.ndarray:
    """Deterministic (eta = 0) DDIM move from step t to t_prev (-1 = clean)."""
    if not t_prev < t:
        raise IndexError(f"t_prev {t_prev} must precede t {t}")
    x0 = x0_from_v(x_t, v_pred, t, sched)
    eps = eps_from_v(x_t, v_pred, t, sched)
    ab_prev = float(sched.abar(t_prev))
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


def ddim_timesteps(sched: DiffusionConfig, steps: int | None = None) -> list[int]:
    steps = sched.sample_steps if steps is None else steps
    ts = np.unique(np.round(np.linspace(0, sched.t_train - 1, steps)).astype(int))[::-1]
    return ts.tolist()


def cfg_combine(v_cond, v_null, scale: float):
    if np.shape(v_cond) != np.shape(v_null):
        raise ValueError("conditional and null predictions differ in shape")
    return v_null + (v_cond - v_null) * scale


def dft_mats(L: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(L // 2 + 1)
    n = np.arange(L)
    ang = 2.0 * np.pi * np.outer(n, k) / L
    return np.cos(ang), -np.sin(ang)


def spectral_loss(x_gen, x_ref) -> Tensor:
    """Mean squared difference of per-channel power spectra |DFT|^2 / L."""
    x_gen, x_ref = T.as_tensor(x_gen), T.as_tensor(x_ref)
    if x_gen.shape != x_ref.shape:
        raise ValueError(f"length mismatch {x_gen.shape} vs {x_ref.shape}")
    L = x_gen.shape[-1]
    C, S = dft_mats(L)
    Ct, St = Tensor(C), Tensor(S)

    def power(x):
        re, im = T.matmul(x, Ct), T.matmul(x, St)
        return (re * re + im * im) / L

    d = power(x_gen) - power(x_ref)
    return (d * d).mean()


# ---------------------------------------------------------------------------
# conditioning


def time_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal ``[B, dim]`` encoding of integer steps."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class ConditionEncoder(Module):
    """h = MLP(W_c c + TimeEmb(t)); null rows swap W_c c for a learned vector."""

    def __init__(self, cond_dim: int, d: int, rng: np.random.Generator) -> None:
        self.W_c = Linear(cond_dim, d, rng, bias=False)
        self.null = param(rng.standard_normal(d) * 0.02)
        self.mlp = MLP(d, d, d, rng)
        self._d = d

    def __call__(self, c, t, null_mask=None) -> Tensor:
        c = T.as_tensor(c)
        proj = self.W_c(c)
        if null_mask is not None:
            # Always select, so the null vector gets a (possibly zero) gradient
            # even in batches without dropped conditions.
            null_mask = np.asarray(null_mask, dtype=bool)
            nul = T.broadcast_to(self.null, proj.shape)
            proj = T.where(np.broadcast_to(null_mask[:, None], proj.shape), nul, proj)
        return self.mlp(proj + time_embedding(t, self._d))


class BasisGenerator(Module):
    """U(h) = (U0 + sum_k alpha_k(h) B_k) * r(h) * c(h)^T for a ``rows x cols``
    view of the target; heads start at zero so U(h) = U0 exactly."""

    def __init__(self, target_shape: tuple[int, ...], d_cond: int, n_basis: int,
                 rng: np.random.Generator, basis_std: float = 0.02) -> None:
        self._shape = tuple(target_shape)
        rows, cols = int(np.prod(target_shape[:-1])), target_shape[-1]
        self._rows, self._cols = rows, cols
        self.bases = param(rng.standard_normal((n_basis, rows * cols)) * basis_std)
        self.coef_head = Linear(d_cond, n_basis, rng).zero_()
        self.row_head = Linear(d_cond, rows, rng).zero_()
        self.col_head = Linear(d_cond, cols, rng).zero_()

    @property
    def n_basis(self) -> int:
        return self.bases.shape[0]

    def heads(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.coef_head(h), 1.0 + T.tanh(self.row_head(h)), 1.0 + T.tanh(self.col_head(h))

    def __call__(self, U0: Tensor, h: Tensor) -> Tensor:
        alpha, r, c = self.heads(h)
        return mix_basis(U0, self.bases, alpha, r, c, self._shape)


def mix_basis(U0: Tensor, bases: Tensor, alpha: Tensor, r: Tensor, c: Tensor,
              target_shape: tuple[int, ...]) -> Tensor:
    """Per-sample mixed matrices ``[B, *target_shape]``."""
    alpha, r, c = T.as_tensor(alpha), T.as_tensor(r), T.as_tensor(c)
    B = alpha.shape[0]
    rows, cols = r.shape[-1], c.shape[-1]
    mixed = T.matmul(alpha, T.as_tensor(bases)) + T.as_tensor(U0).reshape(1, rows * cols)
    mixed = mixed.reshape(B, rows, cols) * r.reshape(B, rows, 1) * c.reshape(B, 1, cols)
    return mixed.reshape(B, *target_shape)


class UnaryConditioner(Module):
    """Patch-wise scale s = 1 + tanh, shift b, gate g = 2 sigmoid; all neutral at init."""

    def __init__(self, d_cond: int, n_patches: int, d: int, rng: np.random.Generator) -> None:
        self._P, self._d = n_patches, d
        self.scale_head = Linear(d_cond, n_patches * d, rng).zero_()
        self.shift_head = Linear(d_cond, n_patches * d, rng).zero_()
        self.gate_head = Linear(d_cond, n_patches, rng).zero_()

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B = h.shape[0]
        s = 1.0 + T.tanh(self.scale_head(h)).reshape(B, 1, self._P, self._d)
        b = self.shift_head(h).reshape(B, 1, self._P, self._d)
        g = (T.sigmoid(self.gate_head(h)) * 2.0).reshape(B, 1, self._P, 1)
        return s, b, g


def unary_condition(Z: Tensor, s, b, g) -> Tensor:
    """Z <- g * (s * Z + b), broadcast over channels."""
    return (Z * s + b) * g


class AttributeConditioner(Module):
    """Discrete attributes -> condition vector (concatenated embeddings).

    ``independent`` keeps every attribute on its own path; ``cross_talk`` adds
    one single-head self-attention layer (with residual) across attributes.
    """

    MODES = ("independent", "cross_talk")

    def __init__(self, cardinalities: list[int], emb_dim: int, rng: np.random.Generator,
                 mode: str = "independent") -> None:
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self._mode = mode
        self._card = list(cardinalities)
        self._e = emb_dim
        self.tables = [param(rng.standard_normal((k, emb_dim)) * 0.5) for k in cardinalities]
        if mode == "cross_talk":
            std = 1.0 / math.sqrt(emb_dim)
            self.W_q = param(rng.standard_normal((emb_dim, emb_dim)) * std)
            self.W_k = param(rng.standard_normal((emb_dim, emb_dim)) * std)
            self.W_v = param(rng.standard_normal((emb_dim, emb_dim)) * std)

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def out_dim(self) -> int:
        return len(self._card) * self._e

    def tokens(self, ids: np.ndarray) -> Tensor:
        """Post-conditioner attribute embeddings ``[B, A, e]``."""
        ids = np.asarray(ids, dtype=int)
        toks = T.stack([self.tables[a][ids[:, a]] for a in range(len(self._card))], axis=1)
        if self._mode == "independent":
            return toks
        q, k, v = T.matmul(toks, self.W_q), T.matmul(toks, self.W_k), T.matmul(toks, self.W_v)
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) / math.sqrt(self._e), axis=-1)
        return toks + T.matmul(att, v)

    def __call__(self, ids: np.ndarray) -> Tensor:
        toks = self.tokens(ids)
        return toks.reshape(toks.shape[0], self.out_dim)


# ---------------------------------------------------------------------------
# denoiser


class PTFG(Module):
    """Sample-specific cornerstone denoiser predicting v over ``[B, N, L]``."""

    def __init__(self, cfg: ModelConfig, cond_dim: int, dcfg: DiffusionConfig, rng: np.random.Generator) -> None:
        self._cfg, self._dcfg = cfg, dcfg
        d, C, dh = cfg.d_model, cfg.n_heads, cfg.d_head
        self.bank = FactorBank(cfg, rng, with_head=False)
        self.out_head = Linear(d, cfg.patch_len, rng)
        self.cond = ConditionEncoder(cond_dim, d, rng)
        self.gens = {key: BasisGenerator((C, dh, d), d, dcfg.n_basis_ternary, rng) for key in TERNARY_KEYS}
        self.gens["topic_w1"] = BasisGenerator((cfg.d_ff, d), d, dcfg.n_basis_topic, rng)
        self.unary_cond = UnaryConditioner(d, cfg.n_patches, d, rng)

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def dcfg(self) -> DiffusionConfig:
        return self._dcfg

    def base(self, key: str) -> Tensor:
        return self.bank.topic.fc1.weight if key == "topic_w1" else getattr(self.bank, key)

    def overrides(self, h: Tensor) -> dict[str, Tensor]:
        """Mix every generated factor once per (sample, diffusion step)."""
        return {key: gen(self.base(key), h) for key, gen in self.gens.items()}

    def _run(self, x_t, overrides: dict | None, modulation) -> Tensor:
        cfg = self._cfg
        X = patchify(x_t, cfg.patch_len)
        unary = embed_patches(X, self.bank)
        Z0 = z_normalize(unary, cfg)
        if modulation is not None:
            Z0 = unary_condition(Z0, *modulation)
        state = mfvi_iterate(BeliefState(Z=Z0, unary=unary), self.bank, cfg, overrides=overrides)
        out = self.out_head(state.Z)  # [B, N, P, p]
        B, N, P, p = out.shape
        return out.reshape(B, N, P * p)

    def __call__(self, x_t, t, c, null_mask=None) -> Tensor:
        """Conditional v prediction."""
        h = self.cond(c, t, null_mask)
        return self._run(x_t, self.overrides(h), self.unary_cond(h))

    def unconditional(self, x_t) -> Tensor:
        """The plain cornerstone denoiser on the base factors."""
        return self._run(x_t, None, None)


def diffusion_loss(model: PTFG, x0: np.ndarray, c: np.ndarray, rng: np.random.Generator) -> Tensor:
    """v-prediction MSE plus lambda_spec times the spectral loss of the implied x0."""
    sched = model.dcfg
    B = x0.shape[0]
    t = rng.integers(0, sched.t_train, size=B)
    noise = rng.standard_normal(x0.shape)
    null = rng.random(B) < sched.p_null
    x_t = q_sample(x0, t, noise, sched)
    v_pred = model(x_t, t, c, null)
    loss = T.mse_loss(v_pred, v_target(x0, noise, t, sched))
    if sched.lambda_spec:
        loss = loss + spectral_loss(x0_from_v(T.as_tensor(x_t), v_pred, t, sched), x0) * sched.lambda_spec
    return loss


def train_ptfg(model: PTFG, x0: np.ndarray, conds: np.ndarray, steps: int, seed: int,
               batch: int = 64, lr: float = 1e-4, weight_decay: float = 0.0, log=None) -> list[float]:
    rng = np.random.default_rng([int(seed), 7])
    opt = AdamState(lr=lr, weight_decay=weight_decay, horizon=steps)
    params = model.parameters()
    losses = []
    for k in range(steps):
        idx = rng.choice(len(x0), size=min(batch, len(x0)), replace=False)
        loss = diffusion_loss(model, x0[idx], conds[idx], rng)
        model.zero_grad()
        loss.backward()
        adam_step(opt, params)
        losses.append(loss.item())
        if log and (k % 10 == 0 or k == steps - 1):
            log(f"step {k} loss {loss.item():.4f}")
    return losses


def sample(model: PTFG, c: np.ndarray, n_channels: int, seed: int, guidance_scale: float | None = None,
           steps: int | None = None) -> np.ndarray:
    """DDIM (eta = 0) with classifier-free guidance; c is ``[B, cond_dim]``."""
    sched = model.dcfg
    scale = sched.guidance_scale if guidance_scale is None else guidance_scale
    c = np.asarray(c, dtype=float)
    B = c.shape[0]
    rng = np.random.default_rng([int(seed), 11])
    x = rng.standard_normal((B, n_channels, model.cfg.seq_len))
    ts = ddim_timesteps(sched, steps)
    null = np.ones(B, dtype=bool)
    with T.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            tt = np.full(B, t)
            v_c = model(x, tt, c).data
            v = v_c if scale == 1.0 else cfg_combine(v_c, model(x, tt, c, null).data, scale)
            x = ddim_step(x, v, t, t_prev, sched)
    return x
