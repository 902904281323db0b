"""Training objectives: cross-entropy, logit KD, FitNets hints and MemKD.

The memory signature of a hidden trajectory is, for each ``(t, z)`` pair,

    s[t, z] = ||h[t+z] - h[t]|| / (||h[t]|| + eps)

with 1-based time indices.  Each side uses its own hidden states, so teacher
and student may have different widths.  The MemKD loss applies a smooth-L1
penalty between teacher and student signatures over the short pairs
``(t, 1)`` plus a random set of long pairs with ``z >= 2``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError, LabelError, PairIndexError, SequenceTooShortError
from .model import HiddenTrajectory

logger = logging.getLogger(__name__)

Pair = tuple[int, int]


@dataclass(frozen=True)
class KdLossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 4.0
    delta: float = 1.0
    num_long_pairs: int | None = None  # None -> T - 1
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.tau <= 0 or self.delta <= 0 or self.epsilon <= 0:
            raise ContractError("tau, delta and epsilon must be positive")
        if self.num_long_pairs is not None and self.num_long_pairs < 0:
            raise ContractError("num_long_pairs must be non-negative")

    def long_pairs_for(self, T: int) -> int:
        return T - 1 if self.num_long_pairs is None else self.num_long_pairs


def _trajectory_tensor(traj) -> nc.Tensor:
    """Accept a HiddenTrajectory, tensor or array and return ``[T, b, m]``."""
    if isinstance(traj, HiddenTrajectory):
        t = traj.hidden
    else:
        t = nc.as_tensor(traj)
    if t.data.ndim == 2:
        t = nc.reshape(t, (t.shape[0], 1, t.shape[1]))
    if t.data.ndim != 3:
        raise DimensionError(f"trajectory must be [T, m] or [T, b, m], got {t.shape}")
    return t


# ---------------------------------------------------------------------------
# classification and logit objectives


def cross_entropy(logits, labels) -> nc.Tensor:
    logits = nc.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, C = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must lie in [0, {C})")
    onehot = np.zeros((b, C))
    onehot[np.arange(b), labels] = 1.0
    picked = nc.reduce("sum", nc.hadamard(nc.log_softmax_rows(logits), nc.Tensor(onehot)))
    return nc.scale(picked, -1.0 / b)


def kd_soft_targets(teacher_logits, student_logits, tau: float = 4.0) -> nc.Tensor:
    """tau**2 * mean_b KL(softmax(teacher/tau) || softmax(student/tau)).

    The teacher side is treated as a constant.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    t_logits = nc.as_tensor(teacher_logits).data
    student_logits = nc.as_tensor(student_logits)
    if t_logits.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t_logits.shape} vs student {student_logits.shape}")
    b = t_logits.shape[0]
    log_p = nc.log_softmax_rows(t_logits / tau).data
    p = np.exp(log_p)
    log_q = nc.log_softmax_rows(nc.scale(student_logits, 1.0 / tau))
    cross = nc.reduce("sum", nc.hadamard(log_q, nc.Tensor(p)))
    entropy_term = float(np.sum(p * log_p))
    return nc.scale(nc.add_scalar(nc.scale(cross, -1.0), entropy_term), tau * tau / b)


# ---------------------------------------------------------------------------
# FitNets


def init_regressor(student_dim: int, teacher_dim: int, seed: int) -> nc.ParamSet:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(student_dim)
    return {
        "regressor.weight": rng.uniform(-bound, bound, size=(teacher_dim, student_dim)),
        "regressor.bias": rng.uniform(-bound, bound, size=(teacher_dim,)),
    }


def fitnets_hint(teacher_traj, student_traj, regressor: Mapping) -> nc.Tensor:
    """Mean squared error between teacher states and a linear map of student states."""
    ht = _trajectory_tensor(teacher_traj).data
    hs = _trajectory_tensor(student_traj)
    if ht.shape[:2] != hs.shape[:2]:
        raise DimensionError(f"teacher trajectory {ht.shape} vs student {hs.shape}")
    T, b, m_t = ht.shape
    m_s = hs.shape[2]
    w = nc.as_tensor(regressor["regressor.weight"])
    bias = nc.as_tensor(regressor["regressor.bias"])
    if w.shape != (m_t, m_s):
        raise DimensionError(f"regressor weight {w.shape}, expected {(m_t, m_s)}")
    mapped = nc.add(nc.matmul(nc.reshape(hs, (T * b, m_s)), nc.transpose(w)), nc.tile_rows(bias, T * b))
    diff = nc.sub(mapped, nc.Tensor(ht.reshape(T * b, m_t)))
    return nc.reduce("mean", nc.square(diff))


# ---------------------------------------------------------------------------
# MemKD


def short_pairs(T: int) -> list[Pair]:
    if T < 2:
        raise SequenceTooShortError(f"short pairs need T >= 2, got {T}")
    return [(t, 1) for t in range(1, T)]


def long_pair_population(T: int) -> list[Pair]:
    return [(t, z) for t in range(1, T - 1) for z in range(2, T - t + 1)]


def sample_pairs_long(T: int, K: int, rng: np.random.Generator) -> list[Pair]:
    """K distinct pairs with z >= 2 and t + z <= T, uniform without replacement."""
    if T < 3:
        raise SequenceTooShortError(f"long pairs need T >= 3, got {T}")
    if K < 1:
        raise ContractError("K must be at least 1")
    population = long_pair_population(T)
    if K >= len(population):
        return population
    picks = rng.choice(len(population), size=K, replace=False)
    return [population[i] for i in picks]


def _check_pairs(pairs: Sequence[Pair], T: int) -> tuple[np.ndarray, np.ndarray]:
    if not len(pairs):
        raise PairIndexError("empty pair set")
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    t, z = arr[:, 0], arr[:, 1]
    bad = (t < 1) | (t > T - 1) | (z < 1) | (t + z > T)
    if bad.any():
        raise PairIndexError(f"pair {tuple(arr[bad][0])} out of range for T={T}")
    return t, z


def memory_signature(traj, pairs: Sequence[Pair], epsilon: float = 1e-8) -> nc.Tensor:
    """Signature ``[P, b]``: one ratio per pair (rows follow ``pairs``) and sample."""
    h = _trajectory_tensor(traj)
    t, z = _check_pairs(pairs, h.shape[0])
    start = nc.take(h, t - 1, axis=0)
    end = nc.take(h, t + z - 1, axis=0)
    change = nc.reduce("l2_norm", nc.sub(end, start), axis=2)
    base = nc.add_scalar(nc.reduce("l2_norm", start, axis=2), epsilon)
    return nc.div(change, base)


def smooth_l1(a, b, delta: float = 1.0) -> nc.Tensor:
    a, b = nc.as_tensor(a), nc.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"smooth_l1 operands differ: {a.shape} vs {b.shape}")
    return nc.reduce("mean", nc.smooth_l1(nc.sub(a, b), delta))


def _signature_discrepancy(teacher: nc.Tensor, student: nc.Tensor, pairs, cfg: KdLossConfig) -> nc.Tensor:
    sig_t = memory_signature(nc.Tensor(teacher.data), pairs, cfg.epsilon)
    sig_s = memory_signature(student, pairs, cfg.epsilon)
    return smooth_l1(sig_t, sig_s, cfg.delta)


def memkd_loss(teacher_traj, student_traj, cfg: KdLossConfig, rng: np.random.Generator) -> nc.Tensor:
    """Short-pair plus long-pair signature discrepancy; teacher is a constant."""
    ht = _trajectory_tensor(teacher_traj)
    hs = _trajectory_tensor(student_traj)
    if ht.shape[:2] != hs.shape[:2]:
        raise DimensionError(f"teacher trajectory {ht.shape} vs student {hs.shape}")
    T = ht.shape[0]
    loss = _signature_discrepancy(ht, hs, short_pairs(T), cfg)
    K = cfg.long_pairs_for(T)
    if T < 3:
        logger.warning("sequence length %d has no long pairs; using the short term only", T)
        return loss
    if K > 0:
        loss = nc.add(loss, _signature_discrepancy(ht, hs, sample_pairs_long(T, K, rng), cfg))
    return loss


def total_train_loss(ce, kd, alpha: float = 1.0, beta: float = 1.0) -> nc.Tensor:
    if alpha < 0 or beta < 0:
        raise ContractError("alpha and beta must be non-negative")
    ce = nc.as_tensor(ce)
    if kd is None or beta == 0:
        return ce if alpha == 1.0 else nc.scale(ce, alpha)
    return nc.add(nc.scale(ce, alpha), nc.scale(kd, beta))
