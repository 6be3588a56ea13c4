"""Latent-space autoregression on the cornerstone graph.

The encoder runs causal MFVI over the history and leaves one latent slice per
patch in an append-only cache. Each rollout step reads the last slice, emits
the next patch, re-encodes it, adds a learned transition prior, and fuses
that evidence with the cache by a few single-slice MFVI rounds. Training
distils the rolled-out future latents towards those the same causal encoder
produces when the true future is visible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import (
    BeliefState,
    FactorBank,
    ModelConfig,
    _readback,
    _rotate,
    causal_time_mask,
    embed_patches,
    init_state,
    joint_softmax,
    message_F,
    mfvi_iterate,
    patchify,
    project,
    z_normalize,
    z_update,
)
from .nn import MLP, Linear, Module, param
from .tensor import Tensor

DISTILL_LOSSES = ("smooth_l1", "smooth_l1_plus_cosine", "kl_under_squared_softmax")


@dataclass
class ARConfig:
    k_enc: int = 2
    k_dec: int = 2
    n_future: int = 12  # P_f
    lambda_latent: float = 0.1
    distill_loss: str = "smooth_l1"
    alpha_ar_init: float = 0.5

    def __post_init__(self) -> None:
        if self.n_future < 1:
            raise ValueError("n_future must be at least 1")
        if self.distill_loss not in DISTILL_LOSSES:
            raise ValueError(f"unknown distill loss {self.distill_loss!r}")
        if not 0.0 < self.alpha_ar_init < 1.0:
            raise ValueError("alpha_ar_init must lie in (0, 1)")


class EmptyCacheError(ValueError):
    pass


@dataclass
class LatentCache:
    """Append-only list of ``[B, N, d]`` latent slices."""

    slices: list[Tensor] = field(default_factory=list)
    n_history: int = 0

    @classmethod
    def from_latents(cls, Z: Tensor) -> "LatentCache":
        P = Z.shape[2]
        return cls([Z[:, :, t] for t in range(P)], n_history=P)

    def __len__(self) -> int:
        return len(self.slices)

    def append(self, z: Tensor) -> None:
        if self.slices and z.shape != self.slices[0].shape:
            raise ValueError(f"slice shape {z.shape} != {self.slices[0].shape}")
        self.slices.append(z)

    def last(self) -> Tensor:
        if not self.slices:
            raise EmptyCacheError("latent cache is empty")
        return self.slices[-1]

    def tensor(self) -> Tensor:
        """``[B, N, S, d]`` view of every slice."""
        if not self.slices:
            raise EmptyCacheError("latent cache is empty")
        return T.stack(self.slices, axis=2)

    def future(self) -> Tensor:
        return T.stack(self.slices[self.n_history:], axis=2)


class TransitionPrior(Module):
    """p_psi: d -> d -> d with GELU."""

    def __init__(self, d_model: int, rng: np.random.Generator) -> None:
        self.mlp = MLP(d_model, d_model, d_model, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.mlp(z)


class LatentAR(Module):
    """Encoder bank (shared ternary factors and unary), decoder topic FFN,
    patch head, transition prior, and the append damping scalar."""

    def __init__(self, cfg: ModelConfig, ar: ARConfig, rng: np.random.Generator) -> None:
        self._cfg = cfg
        self._ar = ar
        self.bank = FactorBank(cfg, rng, with_head=False)
        self.dec_topic = MLP(cfg.d_model, cfg.d_ff, cfg.d_model, rng)
        self.pred_head = Linear(cfg.d_model, cfg.patch_len, rng)
        self.transition = TransitionPrior(cfg.d_model, rng)
        a = ar.alpha_ar_init
        self.alpha_ar_logit = param(np.array(math.log(a / (1.0 - a))))

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def ar(self) -> ARConfig:
        return self._ar

    def alpha_ar(self) -> Tensor:
        return T.sigmoid(self.alpha_ar_logit)


# ---------------------------------------------------------------------------


def causal_mask(n_total: int) -> np.ndarray:
    """Additive ``(time_mask, chan_mask)`` pair: s > t blocked, channels open."""
    return causal_time_mask(n_total), None


def causal_encoder(patches: Tensor | np.ndarray, model: LatentAR, k_enc: int | None = None,
                   unary: Tensor | None = None) -> LatentCache:
    """Causal MFVI over ``[B, N, P, p]`` patches; returns the latent cache."""
    if unary is None:
        unary = embed_patches(T.as_tensor(patches), model.bank)
    P = unary.shape[2]
    k = model.ar.k_enc if k_enc is None else k_enc
    state = init_state(unary, model.cfg)
    state = mfvi_iterate(state, model.bank, model.cfg, None, causal_mask(P), n_iters=k)
    return LatentCache.from_latents(state.Z)


def predict_patch(z_prev: Tensor, model: LatentAR) -> Tensor:
    """``[B, N, d]`` -> next patch ``[B, N, p]``."""
    return model.pred_head(z_prev)


def dual_unary(x_hat: Tensor, z_prev: Tensor, model: LatentAR) -> Tensor:
    """phi_u(x_hat) + p_psi(z_prev) as ``[B, N, 1, d]``."""
    obs = model.bank.unary(x_hat)
    trans = model.transition(z_prev)
    out = obs + trans
    return out.reshape(out.shape[0], out.shape[1], 1, out.shape[2])


@dataclass
class StepTrace:
    z: Tensor
    qH: Tensor


def single_step_mfvi(unary_new: Tensor, cache: LatentCache, model: LatentAR,
                     k_dec: int | None = None) -> StepTrace:
    """Refine the new slice against the read-only cache for ``k_dec`` rounds."""
    if len(cache) == 0:
        raise EmptyCacheError("single-step MFVI needs at least one cached slice")
    cfg, bank = model.cfg, model.bank
    k = model.ar.k_dec if k_dec is None else k_dec
    hist = cache.tensor()  # [B, N, S, d]
    S = hist.shape[2]
    pos_new = np.array([S])
    K_hist_raw = project(hist, bank.V_time)
    K_hist = _rotate(K_hist_raw, bank, "time", np.arange(S))
    alpha = bank.alpha()
    z = z_normalize(unary_new, cfg)
    qH = None
    for _ in range(k):
        Qt = _rotate(project(z, bank.U_time), bank, "time", pos_new)
        Qc = _rotate(project(z, bank.U_chan), bank, "chan", None)
        Kc_raw = project(z, bank.V_chan)
        Kc = _rotate(Kc_raw, bank, "chan", None)
        F_time = message_F(Qt, K_hist, "time", exclude_self=False)  # every cached slice is a parent
        F_chan = message_F(Qc, Kc, "chan")
        qH = joint_softmax(F_time, F_chan, None, cfg.lambda_h)
        q_time, q_chan = qH[..., :S], qH[..., S:]
        # [b,n,c,1,S] @ [b,n,c,S,h]
        agg_t = T.matmul(T.transpose(q_time, (0, 1, 3, 2, 4)), T.transpose(K_hist_raw, (0, 1, 3, 2, 4)))
        agg_t = T.transpose(agg_t, (0, 1, 3, 2, 4))
        agg_c = T.matmul(T.transpose(q_chan, (0, 2, 3, 1, 4)), T.transpose(Kc_raw, (0, 2, 3, 1, 4)))
        agg_c = T.transpose(agg_c, (0, 3, 1, 2, 4))
        m_time, m_chan = _readback(agg_t, bank.U_time), _readback(agg_c, bank.U_chan)
        state = z_update(BeliefState(Z=z, unary=unary_new), m_time, m_chan, bank, cfg,
                         alpha=alpha, topic=model.dec_topic(z))
        z = state.Z
    return StepTrace(z, qH)


@dataclass
class Rollout:
    y_hat: Tensor  # [B, N, pred_len]
    cache: LatentCache
    traces: list[dict] = field(default_factory=list)


def rollout(x_hist: Tensor | np.ndarray, model: LatentAR, n_future: int | None = None,
            pred_len: int | None = None, cache: LatentCache | None = None) -> Rollout:
    """Encode the history, then emit ``n_future`` patches autoregressively."""
    cfg = model.cfg
    n_future = model.ar.n_future if n_future is None else n_future
    if cache is None:
        cache = causal_encoder(patchify(x_hist, cfg.patch_len), model)
    else:
        cache = LatentCache(list(cache.slices), cache.n_history)
    alpha_ar = model.alpha_ar()
    patches, traces = [], []
    for k in range(n_future):
        z_prev = cache.last()
        x_hat = predict_patch(z_prev, model)
        unary_new = dual_unary(x_hat, z_prev, model)
        step = single_step_mfvi(unary_new, cache, model)
        z_new = step.z[:, :, 0]
        cache.append(z_prev * alpha_ar + z_new * (1.0 - alpha_ar))
        patches.append(x_hat)
        S = len(cache) - 1
        mass_t = float(step.qH.data[..., :S].sum(axis=-1).mean())
        traces.append({"k": k + 1, "pred_mean": float(x_hat.data.mean()), "pred_std": float(x_hat.data.std()),
                       "pred_min": float(x_hat.data.min()), "pred_max": float(x_hat.data.max()),
                       "mass_temporal": mass_t, "mass_channel": 1.0 - mass_t})
    y_hat = T.concat(patches, axis=-1)
    if pred_len is not None:
        if pred_len > y_hat.shape[-1]:
            raise ValueError(f"pred_len {pred_len} exceeds {n_future} patches")
        y_hat = y_hat[..., :pred_len]  # final patch truncated when p does not divide pred_len
    return Rollout(y_hat, cache, traces)


def dump_trace(traces: list[dict], path) -> None:
    with open(path, "w") as fh:
        for row in traces:
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# training


def distill(student: Tensor, teacher: Tensor, kind: str = "smooth_l1") -> Tensor:
    if kind == "smooth_l1":
        return T.smooth_l1(student, teacher)
    if kind == "smooth_l1_plus_cosine":
        dot = (student * teacher).sum(axis=-1)
        ns = T.sqrt((student * student).sum(axis=-1) + 1e-12)
        nt = T.sqrt((teacher * teacher).sum(axis=-1) + 1e-12)
        return T.smooth_l1(student, teacher) + (1.0 - dot / (ns * nt)).mean()
    if kind == "kl_under_squared_softmax":
        # KL(teacher || student) treating each latent row as a distribution.
        eps = 1e-12
        return (teacher * (T.log(teacher + eps) - T.log(student + eps))).sum(axis=-1).mean()
    raise ValueError(f"unknown distill loss {kind!r}")


@dataclass
class StepLosses:
    total: Tensor
    mse: Tensor
    distill: Tensor
    y_hat: Tensor
    teacher: Tensor  # [B, N, P + P_f, d], no gradient


def teacher_latents(x_hist, y, model: LatentAR) -> Tensor:
    """Causal encoder latents on [X || Y], ``[B, N, P + P_f, d]``.

    The teacher is a fixed target: nothing downstream of its unary embedding
    carries gradient, and since only its latents enter the loss the whole
    path runs untracked.
    """
    cfg = model.cfg
    full = np.concatenate([T.as_tensor(x_hist).data, T.as_tensor(y).data], axis=-1)
    pad = (-full.shape[-1]) % cfg.patch_len
    if pad:
        full = np.concatenate([full, np.repeat(full[..., -1:], pad, axis=-1)], axis=-1)
    with T.no_grad():
        return causal_encoder(patchify(full, cfg.patch_len), model).tensor()


def training_step(x_hist, y, model: LatentAR, lambda_latent: float | None = None,
                  teacher_override: Tensor | np.ndarray | None = None) -> StepLosses:
    """L = MSE(Y_hat, Y) + lambda * distill(student future, teacher future)."""
    cfg, ar = model.cfg, model.ar
    x_hist, y = T.as_tensor(x_hist), T.as_tensor(y)
    if x_hist.shape[:2] != y.shape[:2]:
        raise ValueError(f"history {x_hist.shape} and target {y.shape} disagree on batch/channels")
    pred_len = y.shape[-1]
    n_future = math.ceil(pred_len / cfg.patch_len)
    lam = ar.lambda_latent if lambda_latent is None else lambda_latent
    P = x_hist.shape[-1] // cfg.patch_len
    if teacher_override is None:
        Z_teacher = teacher_latents(x_hist, y, model)
    else:
        Z_teacher = T.as_tensor(teacher_override).detach()
    ro = rollout(x_hist, model, n_future=n_future, pred_len=pred_len)
    mse = T.mse_loss(ro.y_hat, y)
    d_term = distill(ro.cache.future(), Z_teacher[:, :, P:P + n_future], ar.distill_loss)
    total = mse + d_term * lam
    return StepLosses(total, mse, d_term, ro.y_hat, Z_teacher)
