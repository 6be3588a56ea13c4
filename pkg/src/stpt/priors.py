"""Graph-level priors: periodic potential modulation, a per-channel HMM trend
chain, lagged bilinear factors, and channel-group edge masking.

Each prior touches the cornerstone iteration at one site: the period matrix
rescales temporal scores before the joint softmax, the channel partition adds
an additive mask, and the trend chain and lag factors emit extra messages
that join the Z update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import NEG_INF, Tensor

ABSNORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# periodicity


@dataclass
class PeriodicityPrior:
    periods_per_channel: list[list[float]]
    gamma: float = 5.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        for i, periods in enumerate(self.periods_per_channel):
            for T_ in periods:
                if not T_ > 0:
                    raise ValueError(f"channel {i}: period {T_} is not positive")

    def matrix(self, n_patches: int, patch_len: int) -> np.ndarray:
        key = (n_patches, patch_len)
        if key not in self._cache:
            self._cache[key] = build_period_matrix(self, n_patches, patch_len)
        return self._cache[key]


def build_period_matrix(prior: PeriodicityPrior, n_patches: int, patch_len: int) -> np.ndarray:
    """Per-channel ``[N, P, P]`` mean cosine similarity of patch offsets."""
    idx = np.arange(n_patches)
    diff = idx[:, None] - idx[None, :]  # s - t
    mats = []
    for periods in prior.periods_per_channel:
        if not periods:
            mats.append(np.ones((n_patches, n_patches)))
            continue
        for T_ in periods:
            if not T_ > 0:
                raise ValueError(f"period {T_} is not positive")
        acc = np.zeros((n_patches, n_patches))
        for T_ in periods:
            acc += np.cos(2.0 * np.pi * diff / (T_ / patch_len))
        mats.append(acc / len(periods))
    return np.stack(mats)


def apply_period_modulation(F_time: Tensor, period_matrix: np.ndarray, gamma: float) -> Tensor:
    """F[b,i,t,c,s] <- F[b,i,t,c,s] * gamma * P_i[s,t]; sentinels stay put."""
    # P_i[s, t] laid out as [1, N, t, 1, s]
    scale = gamma * np.transpose(period_matrix, (0, 2, 1))[None, :, :, None, :]
    sentinel = F_time.data <= NEG_INF / 2
    return T.masked_fill(F_time * scale, sentinel, NEG_INF)


# ---------------------------------------------------------------------------
# trend HMM chain


class TrendPrior(Module):
    """Second latent layer M with per-channel observation (B) and transition
    (K) matrices; the chain is updated once per MFVI iteration."""

    def __init__(self, n_channels: int, d_model: int, rng: np.random.Generator, d_m: int = 64,
                 init_std: float = 0.2) -> None:
        self.d_m = d_m
        self.B = param(rng.standard_normal((n_channels, d_m, d_model)) * init_std)
        self.K = param(rng.standard_normal((n_channels, d_m, d_m)) * init_std)

    def init_beliefs(self, batch: int, n_channels: int, n_patches: int) -> Tensor:
        return Tensor(np.full((batch, n_channels, n_patches, self.d_m), 1.0 / self.d_m))


def abs_norm(v: Tensor, fallback: Tensor) -> Tensor:
    """|v| / ||v||_1 per row; rows with ||v||_1 below 1e-12 return ``fallback``."""
    a = T.abs_(v)
    norm = a.sum(axis=-1, keepdims=True)
    dead = norm.data < ABSNORM_EPS
    safe = T.where(dead, 1.0, norm)
    return T.where(np.broadcast_to(dead, a.shape), fallback, a / safe)


def _per_channel(x: Tensor, M: Tensor, transpose_m: bool = False) -> Tensor:
    """out[b,n,p,:] = x[b,n,p,:] @ M[n] (or M[n]^T)."""
    B, N, P, a = x.shape
    xs = T.transpose(x, (1, 0, 2, 3)).reshape(N, B * P, a)
    Ms = T.transpose(M, (0, 2, 1)) if transpose_m else M
    out = T.matmul(xs, Ms)
    return T.transpose(out.reshape(N, B, P, out.shape[-1]), (1, 0, 2, 3))


def trend_update(prior: TrendPrior, qM: Tensor, Z: Tensor) -> tuple[Tensor, Tensor]:
    """One damped sweep of the trend chain; returns (qM', message to Z)."""
    P = qM.shape[2]
    v = _per_channel(Z, prior.B, transpose_m=True)  # q(Z) B^T
    if P > 1:
        zero = T.zeros(qM.shape[:2] + (1, qM.shape[3]))
        prev = T.concat([zero, qM[:, :, :-1]], axis=2)  # q(M_{t-1}), zero at t=0
        nxt = T.concat([qM[:, :, 1:], zero], axis=2)  # q(M_{t+1}), zero at t=P-1
        v = v + _per_channel(prev, prior.K) + _per_channel(nxt, prior.K, transpose_m=True)
    q_new = (qM + abs_norm(v, qM)) * 0.5
    return q_new, _per_channel(q_new, prior.B)


# ---------------------------------------------------------------------------
# lag factors


class LagPrior(Module):
    def __init__(self, relations: list[tuple[int, int, float]], d_model: int, rng: np.random.Generator,
                 eta: float = 200.0, init_std: float = 0.02, seq_len: int | None = None) -> None:
        for a, b, tau in relations:
            if a == b:
                raise ValueError(f"lag relation ({a},{b},{tau}) links a channel to itself")
            if not tau > 0 or (seq_len is not None and not tau < seq_len):
                raise ValueError(f"lag {tau} outside (0, T)")
        self._relations = [(int(a), int(b), float(tau)) for a, b, tau in relations]
        self.eta = eta
        self.W = param(rng.standard_normal((len(relations), d_model, d_model)) * init_std)

    @property
    def relations(self) -> list[tuple[int, int, float]]:
        return list(self._relations)


def lag_interpolation(n_patches: int, delta: float) -> np.ndarray:
    """S[target, source] weights spreading patch t onto t+delta (dropped past the end)."""
    S = np.zeros((n_patches, n_patches))
    for t in range(n_patches):
        pos = t + delta
        lo = math.floor(pos)
        beta = pos - lo
        if lo < n_patches:
            S[lo, t] += 1.0 - beta
        if beta > 0 and lo + 1 < n_patches:
            S[lo + 1, t] += beta
    return S


def lag_messages(prior: LagPrior, Z: Tensor, patch_len: int) -> Tensor:
    B, N, P, d = Z.shape
    per_channel: dict[int, Tensor] = {}
    for k, (src, dst, tau) in enumerate(prior._relations):
        if not (0 <= src < N and 0 <= dst < N):
            raise IndexError(f"lag relation ({src},{dst}) outside {N} channels")
        S = lag_interpolation(P, tau / patch_len)
        proj = T.matmul(Z[:, src], prior.W[k])  # rows are (W^T z)^T
        msg = T.matmul(Tensor((S * prior.eta)[None]), proj)
        per_channel[dst] = msg if dst not in per_channel else per_channel[dst] + msg
    zero = T.zeros((B, P, d))
    return T.stack([per_channel.get(i, zero) for i in range(N)], axis=1)


# ---------------------------------------------------------------------------
# channel independence


@dataclass
class ChannelIndepPrior:
    groups: list[list[int]]

    def group_of(self, n_channels: int) -> np.ndarray:
        gid = np.full(n_channels, -1)
        for g, members in enumerate(self.groups):
            for ch in members:
                if not 0 <= ch < n_channels:
                    raise ValueError(f"channel {ch} outside {n_channels} channels")
                if gid[ch] != -1:
                    raise ValueError(f"channel {ch} appears in two groups")
                gid[ch] = g
        missing = np.flatnonzero(gid < 0)
        if missing.size:
            raise ValueError(f"channels {missing.tolist()} missing from partition")
        return gid


def indep_mask(prior: ChannelIndepPrior, n_channels: int, n_patches: int | None = None) -> np.ndarray:
    """Additive mask ``[1, N, 1, 1, N]`` over channel candidates (0 or sentinel)."""
    gid = prior.group_of(n_channels)
    same = gid[:, None] == gid[None, :]
    mask = np.where(same, 0.0, NEG_INF)
    return mask[None, :, None, None, :]


# ---------------------------------------------------------------------------


class PriorSet(Module):
    """Bundle of optional priors handed to the MFVI loop."""

    def __init__(self, period: PeriodicityPrior | None = None, trend: TrendPrior | None = None,
                 lag: LagPrior | None = None, indep: ChannelIndepPrior | None = None) -> None:
        self._period = period
        self.trend = trend
        self.lag = lag
        self._indep = indep

    @property
    def period(self) -> PeriodicityPrior | None:
        return self._period

    @property
    def indep(self) -> ChannelIndepPrior | None:
        return self._indep

    def is_empty(self) -> bool:
        return not (self._period or self.trend or self.lag or self._indep)


# ---------------------------------------------------------------------------
# declarative form


@dataclass
class PriorSpec:
    """Declarative prior description, as read from an experiment config."""

    periods: list[list[float]] | None = None
    gamma: float = 5.0
    trend_d_m: int | None = None
    lag: list[tuple[int, int, float]] | None = None
    eta: float = 200.0
    partition: list[list[int]] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        trend = d.get("trend")
        return cls(periods=d.get("periods"), gamma=d.get("gamma", 5.0),
                   trend_d_m=(trend or {}).get("d_m", 64) if trend is not None else None,
                   lag=[tuple(r) for r in d["lag"]] if d.get("lag") else None,
                   eta=d.get("eta", 200.0), partition=d.get("partition"))

    def select(self, kinds: set[str]) -> "PriorSpec":
        """Keep only the named mechanisms (period, trend, lag, indep)."""
        return PriorSpec(periods=self.periods if "period" in kinds else None, gamma=self.gamma,
                         trend_d_m=self.trend_d_m if "trend" in kinds else None,
                         lag=self.lag if "lag" in kinds else None, eta=self.eta,
                         partition=self.partition if "indep" in kinds else None)

    def build(self, n_channels: int, d_model: int, rng: np.random.Generator,
              seq_len: int | None = None) -> PriorSet:
        period = trend = lag = indep = None
        if self.periods is not None:
            if len(self.periods) != n_channels:
                raise ValueError(f"{len(self.periods)} period sets for {n_channels} channels")
            period = PeriodicityPrior([list(p) for p in self.periods], self.gamma)
        if self.trend_d_m is not None:
            trend = TrendPrior(n_channels, d_model, rng, d_m=self.trend_d_m)
        if self.lag is not None:
            lag = LagPrior(list(self.lag), d_model, rng, eta=self.eta, seq_len=seq_len)
        if self.partition is not None:
            indep = ChannelIndepPrior([list(g) for g in self.partition])
            indep.group_of(n_channels)
        return PriorSet(period, trend, lag, indep)
