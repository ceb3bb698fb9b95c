"""Training objectives.

Probability-space versions follow the textbook formulas (with a 1e-12 floor
before every log).  The ``*_from_logits`` variants fuse the log-softmax or
log-sigmoid and are what the training loops use.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_BANDWIDTHS = (2.0, 5.0, 10.0, 20.0, 40.0, 60.0)

# number of labeled-class probabilities that had to be floored before a log
clamp_events = 0


@dataclass(frozen=True)
class KernelBandwidths:
    sigmas: tuple[float, ...] = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        if not self.sigmas:
            raise ContractError("at least one kernel bandwidth is required")
        if any(s <= 0 for s in self.sigmas):
            raise ContractError(f"bandwidths must be positive, got {self.sigmas}")

    def scaled_to(self, population: np.ndarray) -> "KernelBandwidths":
        """Rescale so the median bandwidth equals the median pairwise distance of ``population``."""
        pop = np.asarray(population, dtype=float)
        d2 = ((pop[:, None, :] - pop[None, :, :]) ** 2).sum(-1)
        iu = np.triu_indices(len(pop), k=1)
        med = float(np.sqrt(np.median(d2[iu]))) if iu[0].size else 1.0
        if med <= 0:
            return self
        ref = float(np.median(self.sigmas))
        return KernelBandwidths(tuple(s * med / ref for s in self.sigmas))


def _as_rows(x: Tensor) -> Tensor:
    return x if x.data.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))


def seg_cross_entropy(P: Tensor, y: np.ndarray) -> Tensor:
    """-sum y log P over every pixel and class (summed, not averaged)."""
    global clamp_events
    P = P if isinstance(P, Tensor) else Tensor(P)
    y = np.asarray(y, dtype=float)
    if P.shape != y.shape:
        raise ShapeError(f"probabilities {P.shape} vs one-hot {y.shape}")
    P2 = _as_rows(P)
    y2 = y.reshape(P2.shape)
    floored = int(np.count_nonzero((P2.data < PROB_FLOOR) & (y2 > 0)))
    if floored:
        clamp_events += floored
        log.warning("seg_cross_entropy: %d labeled probabilities floored at %g", floored, PROB_FLOOR)
    return -T.sum(T.mul(T.log(T.clamp_min(P2, PROB_FLOOR)), y2))


def seg_cross_entropy_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed pixel cross-entropy for (n, C) logits and integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -T.sum(T.mul(T.log_softmax_rows(logits), onehot))


def _mask_weights(mask, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    sel = np.asarray(getattr(mask, "selected", mask), dtype=float).reshape(-1)
    if sel.size != n:
        raise ShapeError(f"mask has {sel.size} pixels, predictions have {n}")
    return sel


def entropy_loss(P: Tensor, mask=None) -> Tensor:
    """Normalized pixel entropies, summed over all pixels or only the masked ones."""
    P = P if isinstance(P, Tensor) else Tensor(P)
    C = P.shape[-1]
    if C < 2:
        raise ContractError("entropy normalizer log(C) needs at least two classes")
    P2 = _as_rows(P)
    plogp = T.sum(T.mul(P2, T.log(T.clamp_min(P2, PROB_FLOOR))), axis=1)
    w = _mask_weights(mask, P2.shape[0])
    if w is not None:
        plogp = T.mul(plogp, w)
    return T.mul(T.sum(plogp), -1.0 / math.log(C))


def entropy_from_logits(logits: Tensor, mask=None) -> Tensor:
    C = logits.shape[-1]
    if C < 2:
        raise ContractError("entropy normalizer log(C) needs at least two classes")
    logp = T.log_softmax_rows(logits)
    p = T.softmax_rows(logits)
    plogp = T.sum(T.mul(p, logp), axis=1)
    w = _mask_weights(mask, logits.shape[0])
    if w is not None:
        plogp = T.mul(plogp, w)
    return T.mul(T.sum(plogp), -1.0 / math.log(C))


def gmmn_mmd(real, gen, bandwidths: KernelBandwidths | Sequence[float] = KernelBandwidths(),
             normalize: bool = False) -> Tensor:
    """Multi-bandwidth Gaussian-kernel MMD between real and generated features.

    Self-pairs are included (V-statistic).  The real population is a constant;
    only ``gen`` receives gradient.  With ``normalize`` each double sum is
    divided by its number of pairs.
    """
    if not isinstance(bandwidths, KernelBandwidths):
        bandwidths = KernelBandwidths(tuple(bandwidths))
    real = np.atleast_2d(np.asarray(real.data if isinstance(real, Tensor) else real, dtype=float))
    gen = gen if isinstance(gen, Tensor) else Tensor(np.atleast_2d(gen))
    if real.shape[0] == 0 or gen.shape[0] == 0:
        raise ContractError("MMD needs two non-empty populations")
    if real.shape[1] != gen.shape[1]:
        raise ShapeError(f"feature widths differ: {real.shape} vs {gen.shape}")
    n, m = real.shape[0], gen.shape[0]
    w_rr, w_gg, w_rg = (1.0 / (n * n), 1.0 / (m * m), 1.0 / (n * m)) if normalize else (1.0, 1.0, 1.0)
    sig = bandwidths.sigmas
    k_rr = T.gaussian_kernel_sum(T.pairwise_sq_dist(Tensor(real), Tensor(real)), sig).item()
    k_gg = T.gaussian_kernel_sum(T.pairwise_sq_dist(gen, gen), sig)
    k_rg = T.gaussian_kernel_sum(T.pairwise_sq_dist(Tensor(real), gen), sig)
    return T.mul(k_gg, w_gg) - T.mul(k_rg, 2.0 * w_rg) + w_rr * k_rr


def binary_cross_entropy(p, label: int):
    """-label ln p - (1-label) ln(1-p), with p clamped to [1e-12, 1-1e-12]."""
    if isinstance(p, Tensor):
        pc = T.clamp_min(p, PROB_FLOOR)
        qc = T.clamp_min(1.0 - p, PROB_FLOOR)
        return -(label * T.log(pc) + (1 - label) * T.log(qc))
    p = min(max(float(p), PROB_FLOOR), 1.0 - PROB_FLOOR)
    return -label * math.log(p) - (1 - label) * math.log(1.0 - p)


def discriminator_loss(D, f_source, f_target) -> Tensor:
    """Mean BCE with source labelled 1 and target labelled 0; gradient reaches D only."""
    fs = np.atleast_2d(f_source.data if isinstance(f_source, Tensor) else f_source)
    ft = np.atleast_2d(f_target.data if isinstance(f_target, Tensor) else f_target)
    if fs.shape[0] == 0 or ft.shape[0] == 0:
        raise ContractError("discriminator batches must be non-empty")
    src = -T.mean(T.log_sigmoid(D.logits(Tensor(fs))))
    trg = -T.mean(T.log_sigmoid(-D.logits(Tensor(ft))))
    return src + trg


def adversarial_loss(D, f_target: Tensor) -> Tensor:
    """Mean BCE of generated target features against the source label; D is held fixed."""
    f_target = f_target if isinstance(f_target, Tensor) else Tensor(np.atleast_2d(f_target))
    if f_target.shape[0] == 0:
        raise ContractError("adversarial batch must be non-empty")
    return -T.mean(T.log_sigmoid(D.logits(f_target, frozen=True)))
