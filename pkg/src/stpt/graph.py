"""The two-axis (channel x time-patch) CRF and its mean-field iteration.

One iteration, applied at every coordinate (i, t):

1. project beliefs to per-head queries/keys for both axes (RoPE on scores),
2. score temporal parents (same channel) and channel parents (same patch),
3. normalise all parents jointly into q(H),
4. aggregate un-rotated keys under q(H) and read them back through U^T,
5. add the topic FFN of the current beliefs,
6. damp: Z <- (1 - alpha) Z + alpha * sigma(unary + messages + extras).

Tensor layout is ``[B, N, P, ...]`` throughout. Scores keep one slot per
position including self; self and masked slots carry the ``NEG_INF``
sentinel, so after the softmax they hold exactly zero mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import faults
from . import tensor as T
from .nn import MLP, Linear, Module, param
from .priors import (
    PriorSet,
    apply_period_modulation,
    indep_mask,
    lag_messages,
    trend_update,
)
from .tensor import NEG_INF, Tensor

Z_NORMALIZERS = ("softmax", "squared_softmax", "layernorm")


@dataclass
class ModelConfig:
    n_channels: int
    seq_len: int
    patch_len: int = 8
    d_model: int = 64
    n_heads: int = 8
    n_iters: int = 3
    pred_len: int = 96
    d_ff: int = 128
    alpha_init: float = 0.5
    lambda_h: float = 1.0
    z_normalizer: str = "softmax"
    z_temperature: float = 1.0
    rope_time: bool = True
    rope_chan: bool = True
    rope_base_time: float = 10000.0
    rope_base_chan: float = 100.0
    qk_init_std: float | None = None  # defaults to 1/sqrt(d_model)

    def __post_init__(self) -> None:
        if self.seq_len % self.patch_len:
            raise ValueError(f"seq_len {self.seq_len} not divisible by patch_len {self.patch_len}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.rope_time or self.rope_chan) and self.d_head % 2:
            raise ValueError("RoPE needs an even per-head size")
        if not 0.0 < self.alpha_init < 1.0:
            raise ValueError("alpha_init must lie in (0, 1)")
        if self.lambda_h <= 0 or self.z_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.z_normalizer not in Z_NORMALIZERS:
            raise ValueError(f"unknown z_normalizer {self.z_normalizer!r}")

    @property
    def n_patches(self) -> int:
        return self.seq_len // self.patch_len

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def rope_frequencies(d_head: int, base: float) -> np.ndarray:
    return base ** (-np.arange(0, d_head, 2) / d_head)


class FactorBank(Module):
    """All learnable potentials of the cornerstone graph.

    Ternary matrices are stored stacked per axis as ``[C, d_h, d]``; head c
    maps a belief in R^d to R^{d_h}.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, with_head: bool = True) -> None:
        d, C, dh = cfg.d_model, cfg.n_heads, cfg.d_head
        std = cfg.qk_init_std if cfg.qk_init_std is not None else 1.0 / math.sqrt(d)
        self.unary = MLP(cfg.patch_len, cfg.d_ff, d, rng)
        self.U_time = param(rng.standard_normal((C, dh, d)) * std)
        self.V_time = param(rng.standard_normal((C, dh, d)) * std)
        self.U_chan = param(rng.standard_normal((C, dh, d)) * std)
        self.V_chan = param(rng.standard_normal((C, dh, d)) * std)
        self.topic = MLP(d, cfg.d_ff, d, rng)
        self.head = Linear(cfg.n_patches * d, cfg.pred_len, rng) if with_head else None
        a = cfg.alpha_init
        self.damping_logit = param(np.array(math.log(a / (1.0 - a))))
        # Fixed rotary banks, disjoint per axis.
        self._rope_time = rope_frequencies(dh, cfg.rope_base_time) if cfg.rope_time else None
        self._rope_chan = rope_frequencies(dh, cfg.rope_base_chan) if cfg.rope_chan else None

    @property
    def rope_time(self) -> np.ndarray | None:
        return self._rope_time

    @property
    def rope_chan(self) -> np.ndarray | None:
        return self._rope_chan

    def alpha(self) -> Tensor:
        return T.sigmoid(self.damping_logit)

    def ternary(self, axis: str) -> tuple[Tensor, Tensor]:
        if axis == "time":
            return self.U_time, self.V_time
        if axis == "chan":
            return self.U_chan, self.V_chan
        raise ValueError(f"axis must be 'time' or 'chan', got {axis!r}")


@dataclass
class BeliefState:
    Z: Tensor
    unary: Tensor
    qH: Tensor | None = None
    qM: Tensor | None = None
    history: list = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.Z.shape


# ---------------------------------------------------------------------------
# unary and normaliser


def patchify(x: np.ndarray | Tensor, patch_len: int) -> Tensor:
    """``[B, N, L]`` -> ``[B, N, L/p, p]``."""
    x = T.as_tensor(x)
    B, N, L = x.shape
    if L % patch_len:
        raise ValueError(f"length {L} not divisible by patch_len {patch_len}")
    return x.reshape(B, N, L // patch_len, patch_len)


def embed_patches(X: Tensor, bank: FactorBank) -> Tensor:
    """Unary log-potentials ``[B, N, P, d]`` from patches ``[B, N, P, p]``."""
    X = T.as_tensor(X)
    p = bank.unary.fc1.weight.shape[1]
    if X.ndim != 4 or X.shape[-1] != p:
        raise ValueError(f"patches must be [B, N, P, {p}], got {X.shape}")
    return bank.unary(X)


def z_normalize(x: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.z_normalizer == "softmax":
        return T.softmax(x, axis=-1, temperature=cfg.z_temperature)
    if cfg.z_normalizer == "squared_softmax":
        sq = x * x
        return sq / (sq.sum(axis=-1, keepdims=True) + 1e-12)
    return T.layer_norm(x, axis=-1)


def init_state(unary: Tensor, cfg: ModelConfig) -> BeliefState:
    """Beliefs start from the normalised local evidence."""
    return BeliefState(Z=z_normalize(unary, cfg), unary=unary)


# ---------------------------------------------------------------------------
# projections and RoPE


def rope_tables(positions: np.ndarray, freqs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cos and signed-sin tables ``[len(positions), d_h]`` for interleaved pairs."""
    ang = np.asarray(positions, dtype=float)[:, None] * freqs[None, :]
    c = np.repeat(np.cos(ang), 2, axis=1)
    s = np.repeat(np.sin(ang), 2, axis=1)
    s[:, 0::2] *= -1.0
    return c, s


def apply_rope(x: Tensor, positions: np.ndarray, freqs: np.ndarray | None, pos_axis: int) -> Tensor:
    """Rotate each (2k, 2k+1) plane of the last dim by position * freq_k."""
    if freqs is None:
        return x
    c, s = rope_tables(positions, freqs)
    shape = [1] * x.ndim
    shape[pos_axis] = len(positions)
    shape[-1] = c.shape[1]
    dh = x.shape[-1]
    pairs = x.reshape(*x.shape[:-1], dh // 2, 2)
    swapped = pairs[..., ::-1].reshape(x.shape)
    return x * c.reshape(shape) + swapped * s.reshape(shape)


def project(Z: Tensor, M: Tensor) -> Tensor:
    """Per-head projection ``[B, N, P, C, d_h]``; M is shared ``[C, d_h, d]`` or
    per-sample ``[B, C, d_h, d]``.

    Shared matrices are broadcast over the batch so both cases run the same
    batched product; a generated matrix equal to the shared one then gives
    bit-identical beliefs.
    """
    B, N, P, d = Z.shape
    if M.ndim == 3:
        M = T.broadcast_to(M, (B,) + M.shape)
    C, dh = M.shape[1], M.shape[2]
    # [B, NP, d] @ [B, d, C*dh]
    out = T.matmul(Z.reshape(B, N * P, d), T.transpose(M.reshape(B, C * dh, d), (0, 2, 1)))
    return out.reshape(B, N, P, C, dh)


def project_qk(Z: Tensor, bank: FactorBank, axis: str, positions: np.ndarray | None = None,
               overrides: dict | None = None) -> tuple[Tensor, Tensor]:
    """Rotated (Q, K) for one axis. ``positions`` default to patch index (time)
    or channel index (chan)."""
    U, V = _ternary(bank, axis, overrides)
    Q, K = project(Z, U), project(Z, V)
    return _rotate(Q, bank, axis, positions), _rotate(K, bank, axis, positions)


def _ternary(bank: FactorBank, axis: str, overrides: dict | None) -> tuple[Tensor, Tensor]:
    U, V = bank.ternary(axis)
    if overrides:
        U = overrides.get(f"U_{axis}", U)
        V = overrides.get(f"V_{axis}", V)
    return U, V


def _rotate(x: Tensor, bank: FactorBank, axis: str, positions) -> Tensor:
    if axis == "time":
        pos = np.arange(x.shape[2]) if positions is None else positions
        return apply_rope(x, pos, bank.rope_time, pos_axis=2)
    pos = np.arange(x.shape[1]) if positions is None else positions
    return apply_rope(x, pos, bank.rope_chan, pos_axis=1)


# ---------------------------------------------------------------------------
# messages


def message_F(Q: Tensor, K: Tensor, axis: str, exclude_self: bool = True) -> Tensor:
    """Scaled dot-product scores.

    time: ``F[b,i,t,c,s] = q_{i,t,c} . k_{i,s,c} / sqrt(d_h)``
    chan: ``F[b,i,t,c,j] = q_{i,t,c} . k_{j,t,c} / sqrt(d_h)``
    """
    scale = 1.0 / math.sqrt(Q.shape[-1])
    exclude_self = exclude_self and not faults.active("self_mask")
    if axis == "time":
        # [b,n,c,t,h] @ [b,n,c,h,s] -> [b,n,c,t,s] -> [b,n,t,c,s]
        F = T.matmul(T.transpose(Q, (0, 1, 3, 2, 4)), T.transpose(K, (0, 1, 3, 4, 2)))
        F = T.transpose(F, (0, 1, 3, 2, 4)) * scale
        if exclude_self:
            P = Q.shape[2]
            F = T.masked_fill(F, np.eye(P, dtype=bool)[None, None, :, None, :], NEG_INF)
        return F
    if axis == "chan":
        # [b,t,c,n,h] @ [b,t,c,h,j] -> [b,t,c,n,j] -> [b,n,t,c,j]
        F = T.matmul(T.transpose(Q, (0, 2, 3, 1, 4)), T.transpose(K, (0, 2, 3, 4, 1)))
        F = T.transpose(F, (0, 3, 1, 2, 4)) * scale
        if exclude_self:
            N = Q.shape[1]
            F = T.masked_fill(F, np.eye(N, dtype=bool)[None, :, None, None, :], NEG_INF)
        return F
    raise ValueError(f"axis must be 'time' or 'chan', got {axis!r}")


class NoAdmissibleParentError(ValueError):
    pass


def joint_softmax(F_time: Tensor, F_chan: Tensor, masks: Sequence | None = None,
                  lambda_h: float = 1.0) -> Tensor:
    """One softmax over temporal-then-channel candidates.

    ``masks`` is ``(time_mask, chan_mask)`` of additive arrays (either may be
    None). Returns ``[B, N, P, C, P_t + N]`` with zero mass on self/masked slots.
    """
    if masks is not None:
        m_time, m_chan = masks
        if m_time is not None:
            F_time = F_time + m_time
        if m_chan is not None:
            F_chan = F_chan + m_chan
    logits = T.concat([F_time, F_chan], axis=-1)
    if (logits.data.max(axis=-1) <= NEG_INF / 2).any():
        raise NoAdmissibleParentError("a dependency row has every candidate masked")
    return T.softmax(logits, axis=-1, temperature=lambda_h)


def compact_qh(qH: np.ndarray, n_time: int, exclude_time_self: bool = True) -> np.ndarray:
    """Drop self slots: ``[B, N, P, C, P+N]`` -> ``[B, N, P, C, (P-1)+(N-1)]``,
    temporal (ascending s != t) first, then channels (ascending j != i)."""
    qH = np.asarray(qH)
    B, N, P, C, W = qH.shape
    out = []
    for i in range(N):
        rows = []
        for t in range(P):
            keep_t = [s for s in range(n_time) if not (exclude_time_self and s == t)]
            keep_c = [n_time + j for j in range(W - n_time) if j != i]
            rows.append(qH[:, i, t][:, :, keep_t + keep_c])
        out.append(np.stack(rows, axis=1))
    return np.stack(out, axis=1)


def _readback(agg: Tensor, U: Tensor) -> Tensor:
    B, N, P, C, dh = agg.shape
    scale = 1.0 / math.sqrt(dh)
    if U.ndim == 3:
        U = T.broadcast_to(U, (B,) + U.shape)
    out = T.matmul(agg.reshape(B, N * P, C * dh), U.reshape(B, C * dh, U.shape[-1]))
    return out.reshape(B, N, P, -1) * scale


def message_G(qH: Tensor, K_time: Tensor, K_chan: Tensor, bank: FactorBank,
              overrides: dict | None = None) -> tuple[Tensor, Tensor]:
    """Attention-weighted keys per head, read back to label space via U^T / sqrt(d_h).

    ``K_time`` holds the temporal candidates ``[B, N, S, C, d_h]`` (S may
    differ from the query count, e.g. a latent cache); ``K_chan`` holds
    ``[B, N, P, C, d_h]``.
    """
    S = K_time.shape[2]
    q_time = qH[..., :S]
    q_chan = qH[..., S:]
    # [b,n,c,t,s] @ [b,n,c,s,h] -> [b,n,c,t,h]
    agg_t = T.matmul(T.transpose(q_time, (0, 1, 3, 2, 4)), T.transpose(K_time, (0, 1, 3, 2, 4)))
    agg_t = T.transpose(agg_t, (0, 1, 3, 2, 4))
    # [b,t,c,n,j] @ [b,t,c,j,h] -> [b,t,c,n,h]
    agg_c = T.matmul(T.transpose(q_chan, (0, 2, 3, 1, 4)), T.transpose(K_chan, (0, 2, 3, 1, 4)))
    agg_c = T.transpose(agg_c, (0, 3, 1, 2, 4))
    U_t, _ = _ternary(bank, "time", overrides)
    U_c, _ = _ternary(bank, "chan", overrides)
    return _readback(agg_t, U_t), _readback(agg_c, U_c)


def topic_message(Z: Tensor, bank: FactorBank, overrides: dict | None = None) -> Tensor:
    """Topic FFN of the current beliefs; ``overrides["topic_w1"]`` swaps in a
    per-sample first layer ``[B, d_ff, d]``."""
    B, N, P, d = Z.shape
    W1 = overrides.get("topic_w1") if overrides else None
    if W1 is None:
        W1 = T.broadcast_to(bank.topic.fc1.weight, (B,) + bank.topic.fc1.weight.shape)
    h = T.matmul(Z.reshape(B, N * P, d), T.transpose(W1, (0, 2, 1))) + bank.topic.fc1.bias
    return bank.topic.fc2(T.gelu(h)).reshape(B, N, P, d)


def z_update(state: BeliefState, m_time: Tensor, m_chan: Tensor, bank: FactorBank, cfg: ModelConfig,
             extra_messages: Sequence[Tensor] = (), alpha=None, topic: Tensor | None = None) -> BeliefState:
    """Z <- (1 - alpha) Z + alpha * sigma(unary + m_time + m_chan + FFN(Z) + sum(extra))."""
    if alpha is None:
        alpha = bank.alpha()
    if topic is None:
        topic = topic_message(state.Z, bank)
    logits = state.unary + m_time + m_chan + topic
    for extra in extra_messages:
        if extra.shape != state.Z.shape:
            raise ValueError(f"extra message shape {extra.shape} != {state.Z.shape}")
        logits = logits + extra
    Z_new = state.Z * (1.0 - alpha) + z_normalize(logits, cfg) * alpha
    return BeliefState(Z=Z_new, unary=state.unary, qH=state.qH, qM=state.qM, history=state.history)


def causal_time_mask(n_patches: int) -> np.ndarray:
    """Sentinel on s > t for temporal candidates, ``[1, 1, P, 1, P]``."""
    upper = np.triu(np.ones((n_patches, n_patches), dtype=bool), k=1)
    if faults.active("causal_mask"):
        upper[:] = False
    return np.where(upper, NEG_INF, 0.0)[None, None, :, None, :]


def mfvi_step(state: BeliefState, bank: FactorBank, cfg: ModelConfig, priors: PriorSet | None = None,
              masks: Sequence | None = None, overrides: dict | None = None) -> BeliefState:
    """One iteration: project -> F -> prior modulation -> joint softmax -> G -> topic -> update."""
    Z = state.Z
    U_t, V_t = _ternary(bank, "time", overrides)
    U_c, V_c = _ternary(bank, "chan", overrides)
    Kt_raw, Kc_raw = project(Z, V_t), project(Z, V_c)
    Qt = _rotate(project(Z, U_t), bank, "time", None)
    Qc = _rotate(project(Z, U_c), bank, "chan", None)
    Kt = _rotate(Kt_raw, bank, "time", None)
    Kc = _rotate(Kc_raw, bank, "chan", None)

    F_time = message_F(Qt, Kt, "time")
    F_chan = message_F(Qc, Kc, "chan")

    m_time_mask, m_chan_mask = masks if masks is not None else (None, None)
    if priors is not None:
        if priors.period is not None:
            F_time = apply_period_modulation(F_time, priors.period.matrix(Z.shape[2], cfg.patch_len),
                                             priors.period.gamma)
        if priors.indep is not None:
            im = indep_mask(priors.indep, Z.shape[1])
            m_chan_mask = im if m_chan_mask is None else m_chan_mask + im

    qH = joint_softmax(F_time, F_chan, (m_time_mask, m_chan_mask), cfg.lambda_h)
    m_time, m_chan = message_G(qH, Kt_raw, Kc_raw, bank, overrides)

    extras = []
    qM = state.qM
    if priors is not None:
        if priors.trend is not None:
            if qM is None:
                qM = priors.trend.init_beliefs(Z.shape[0], Z.shape[1], Z.shape[2])
            qM, trend_msg = trend_update(priors.trend, qM, Z)
            extras.append(trend_msg)
        if priors.lag is not None:
            extras.append(lag_messages(priors.lag, Z, cfg.patch_len))

    topic = topic_message(Z, bank, overrides)
    staged = BeliefState(Z=Z, unary=state.unary, qH=qH, qM=qM, history=state.history)
    return z_update(staged, m_time, m_chan, bank, cfg, extras, topic=topic)


def mfvi_iterate(state: BeliefState, bank: FactorBank, cfg: ModelConfig, priors: PriorSet | None = None,
                 masks: Sequence | None = None, n_iters: int | None = None, overrides: dict | None = None,
                 record: bool = False) -> BeliefState:
    K = cfg.n_iters if n_iters is None else n_iters
    for _ in range(K):
        state = mfvi_step(state, bank, cfg, priors, masks, overrides)
        if record:
            state.history.append((state.Z, state.qH))
    return state


def forecast(state: BeliefState, bank: FactorBank) -> Tensor:
    """Channel-shared head on the flattened P latents: ``[B, N, pred_len]``."""
    B, N, P, d = state.Z.shape
    return bank.head(state.Z.reshape(B, N, P * d))


class STPT(Module):
    """Cornerstone forecaster: unary -> K damped MFVI iterations -> head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, priors: PriorSet | None = None) -> None:
        self._cfg = cfg
        self.bank = FactorBank(cfg, rng)
        self.priors = priors if priors is not None else PriorSet()

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def encode(self, x: Tensor | np.ndarray, masks: Sequence | None = None) -> BeliefState:
        X = patchify(x, self._cfg.patch_len)
        state = init_state(embed_patches(X, self.bank), self._cfg)
        return mfvi_iterate(state, self.bank, self._cfg, self.priors, masks)

    def __call__(self, x: Tensor | np.ndarray, masks: Sequence | None = None) -> Tensor:
        """``[B, N, seq_len]`` (already normalised) -> ``[B, N, pred_len]``."""
        return forecast(self.encode(x, masks), self.bank)
