"""Donsker-Varadhan mutual-information estimation (MINE) for the encoders.

The encoder objective is ``I(S; X_c) + alpha * I(Y; X_l)``: each term is the
DV lower bound evaluated by its own statistic network. Gradients of the
log-mean-exp term use an exponential moving average of the denominator to
reduce the minibatch bias.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .nn import Adam, DenseNet
from .sim import N_ACTIONS

logger = logging.getLogger(__name__)

STATE_DIM = 35


def anneal_beta(step: int, total_anneal_steps: int, beta0: float) -> float:
    """Linear decay of the encoder-loss weight, exactly 0 from ``total_anneal_steps`` on."""
    if total_anneal_steps <= 0:
        raise ValueError("total_anneal_steps must be positive")
    return beta0 * max(0.0, 1.0 - step / total_anneal_steps)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (identity when n == 1)."""
    if n < 2:
        return np.arange(n)
    p = rng.permutation(n)
    k = int(rng.integers(1, n))
    out = np.empty(n, dtype=np.int64)
    out[p] = p[(np.arange(n) + k) % n]
    return out


def _logmeanexp(t: np.ndarray) -> float:
    m = float(np.max(t))
    return m + math.log(float(np.mean(np.exp(t - m))))


class StatisticNet:
    """Scalar critic ``T_w(a, b)`` on the concatenation of its two arguments."""

    def __init__(self, dim_a: int, dim_b: int, hidden=(64, 64), activation="relu",
                 rng: np.random.Generator | None = None, ema_decay: float = 0.99):
        self.dim_a = dim_a
        self.dim_b = dim_b
        sizes = [dim_a + dim_b, *hidden, 1]
        self.net = DenseNet(sizes, [activation] * len(hidden) + ["identity"], rng)
        self.ema_decay = ema_decay
        self.log_ema = None  # log of the moving-average denominator

    def params(self) -> list:
        return self.net.params()

    def __call__(self, a, b) -> np.ndarray:
        return self.net(np.concatenate([a, b], axis=1))[:, 0]

    @property
    def ema(self) -> float | None:
        return None if self.log_ema is None else math.exp(self.log_ema)


def dv_estimate(T: StatisticNet, joint, marginal) -> float:
    """DV bound ``mean T(joint) - log mean exp T(marginal)``.

    ``joint`` and ``marginal`` are ``(a, b)`` array pairs.
    """
    tj = T(*joint)
    tm = T(*marginal)
    if len(tj) < 2 or len(tm) < 2:
        raise ValueError("DV estimate needs batches of at least 2 pairs")
    return float(np.mean(tj)) - _logmeanexp(tm)


def dv_value_and_grads(T: StatisticNet, a: np.ndarray, b: np.ndarray, perm: np.ndarray,
                       use_ema: bool = True, update_ema: bool = True):
    """DV bound on ``(a, b)`` vs ``(a, b[perm])`` with gradients.

    Returns ``(value, param_grads, grad_a, grad_b)``: gradients of the bound
    (ascent direction). With ``use_ema`` the log-mean-exp gradient is divided
    by the moving-average denominator instead of the batch mean. Returns
    ``None`` if the critic produced non-finite scores.
    """
    n = len(a)
    x_joint = np.concatenate([a, b], axis=1)
    x_marg = np.concatenate([a, b[perm]], axis=1)
    tj, cj = T.net.forward(x_joint)
    tm, cm = T.net.forward(x_marg)
    tj = tj[:, 0]
    tm = tm[:, 0]
    if not (np.all(np.isfinite(tj)) and np.all(np.isfinite(tm))):
        logger.warning("non-finite statistic network output, batch skipped")
        return None
    lme = _logmeanexp(tm)
    value = float(np.mean(tj)) - lme
    if use_ema:
        if T.log_ema is None or not update_ema:
            log_den = lme if T.log_ema is None else T.log_ema
        else:
            log_den = float(np.logaddexp(math.log(T.ema_decay) + T.log_ema,
                                         math.log(1.0 - T.ema_decay) + lme))
        if update_ema:
            T.log_ema = log_den
    else:
        log_den = lme
    with np.errstate(over="ignore"):
        weights = np.exp(tm - log_den)
    if not np.all(np.isfinite(weights)):
        logger.warning("marginal scores far above the moving average, batch skipped")
        return None
    g_tj = np.full((n, 1), 1.0 / n)
    g_tm = -(weights / n)[:, None]
    gj, gxj = T.net.backward(cj, g_tj)
    gm, gxm = T.net.backward(cm, g_tm)
    grads = [x + y for x, y in zip(gj, gm)]
    da = T.dim_a
    grad_a = gxj[:, :da] + gxm[:, :da]
    grad_b = gxj[:, da:].copy()
    grad_b[perm] += gxm[:, da:]  # b[perm[i]] fed row i of the marginal batch
    return value, grads, grad_a, grad_b


class MineEstimator:
    """Train a statistic network on paired samples and report the DV estimate."""

    def __init__(self, dim_a: int, dim_b: int, hidden=(64, 64), lr=1e-3, seed=0, ema_decay=0.99):
        self.rng = np.random.default_rng(seed)
        self.T = StatisticNet(dim_a, dim_b, hidden, rng=self.rng, ema_decay=ema_decay)
        self.opt = Adam(self.T.params(), lr=lr)

    def fit(self, a: np.ndarray, b: np.ndarray, steps=2000, batch_size=256) -> "MineEstimator":
        a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
        b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
        for _ in range(steps):
            idx = self.rng.choice(len(a), size=batch_size, replace=False)
            out = dv_value_and_grads(self.T, a[idx], b[idx], derangement(batch_size, self.rng))
            if out is None:
                continue
            _, grads, _, _ = out
            self.opt.step([-g for g in grads])
        return self

    def estimate(self, a: np.ndarray, b: np.ndarray) -> float:
        a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
        b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
        return dv_estimate(self.T, (a, b), (a, b[derangement(len(b), self.rng)]))


# ---------------------------------------------------------------- trajectories


def trajectory_dim(h: int) -> int:
    return h * (STATE_DIM + N_ACTIONS) + STATE_DIM


class TrajectoryWindow:
    """Rolling ``y = [s_0, a_0, ..., s_h]`` over the last ``h`` decisions.

    Slots before the episode start stay zero and are marked invalid.
    """

    def __init__(self, h: int = 8):
        self.h = h
        self.states = deque(maxlen=h + 1)
        self.actions = deque(maxlen=h)

    def reset(self, state_vec: np.ndarray) -> None:
        self.states.clear()
        self.actions.clear()
        self.states.append(np.asarray(state_vec, dtype=np.float64))

    def push(self, action: int, next_state_vec: np.ndarray) -> None:
        self.actions.append(int(action))
        self.states.append(np.asarray(next_state_vec, dtype=np.float64))

    def vector(self):
        """``(y, mask)``; mask has one entry per state slot (h + 1)."""
        h = self.h
        y = np.zeros(trajectory_dim(h))
        mask = np.zeros(h + 1, dtype=bool)
        n_states = len(self.states)
        first = h + 1 - n_states
        block = STATE_DIM + N_ACTIONS
        for k, s in enumerate(self.states):
            slot = first + k
            y[slot * block: slot * block + STATE_DIM] = s
            mask[slot] = True
        n_act = len(self.actions)
        for k, a in enumerate(self.actions):
            slot = h - n_act + k
            y[slot * block + STATE_DIM + a] = 1.0
        return y, mask


@dataclass
class EncodedPair:
    y: np.ndarray
    obs: object  # graph.Observation
    x_l: np.ndarray | None
    x_c: np.ndarray


class EncodedPairBuffer:
    """FIFO ring of (y, x_l, x_c, s) records; ``s`` lives in ``obs``."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, record: EncodedPair) -> None:
        if len(self.items) < self.capacity:
            self.items.append(record)
        else:
            self.items[self.cursor] = record
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        idx = rng.integers(0, len(self.items), size=batch_size)
        return [self.items[i] for i in idx]


def _unit_rows(x: np.ndarray):
    """Rows rescaled to norm ``sqrt(dim)``; returns ``(x_hat, norms)``."""
    norms = np.linalg.norm(x, axis=1, keepdims=True) + 1e-8
    return x / norms * math.sqrt(x.shape[1]), norms


def _unit_rows_backward(x_hat: np.ndarray, norms: np.ndarray, g: np.ndarray) -> np.ndarray:
    d = x_hat.shape[1]
    radial = np.sum(x_hat * g, axis=1, keepdims=True) / d
    return (g - x_hat * radial) * math.sqrt(d) / norms


def encoder_objective(batch, stat_c: StatisticNet, stat_l: StatisticNet, enc, alpha: float,
                      rng: np.random.Generator, update_ema: bool = True):
    """Combined bound ``I_c + alpha * I_l`` on a batch of :class:`EncodedPair`.

    ``x_c``/``x_l`` are recomputed from the stored observations so gradients
    reach the encoders. Returns ``None`` for an empty batch or a skipped
    (non-finite) one, else a dict with ``value``, ``i_common``, ``i_local``
    and ascent gradients ``grads_c``, ``grads_l``, ``grads_enc``.
    """
    from .graph import batch_graphs  # local import, graph imports sim only

    if not batch:
        return None
    n = len(batch)
    vfeat = np.stack([r.obs.vfeat for r in batch])
    s = np.stack([r.obs.state_vec for r in batch])
    use_local = alpha != 0.0 and all(r.obs.graph is not None for r in batch)
    graphs = batch_graphs([r.obs.graph for r in batch]) if use_local else None
    x_c, x_l, ctx = enc.forward(vfeat, graphs)
    # critics see scale-free states; otherwise the bound rewards inflating |x|
    xc_hat, xc_norm = _unit_rows(x_c)
    perm = derangement(n, rng)
    out_c = dv_value_and_grads(stat_c, s, xc_hat, perm, update_ema=update_ema)
    if out_c is None:
        return None
    i_c, grads_c, _, g_xc = out_c
    g_xc = _unit_rows_backward(xc_hat, xc_norm, g_xc)
    i_l = 0.0
    grads_l = [np.zeros_like(p) for p in stat_l.params()]
    g_xl = None
    if use_local:
        y = np.stack([r.y for r in batch])
        xl_hat, xl_norm = _unit_rows(x_l)
        out_l = dv_value_and_grads(stat_l, y, xl_hat, derangement(n, rng), update_ema=update_ema)
        if out_l is None:
            return None
        i_l, g_l, _, g_xl_raw = out_l
        grads_l = [alpha * g for g in g_l]
        g_xl = alpha * _unit_rows_backward(xl_hat, xl_norm, g_xl_raw)
    grads_enc = enc.backward(ctx, g_xc, g_xl)
    return {
        "value": i_c + alpha * i_l,
        "i_common": i_c,
        "i_local": i_l if use_local else float("nan"),
        "grads_c": grads_c,
        "grads_l": grads_l,
        "grads_enc": grads_enc,
    }
