"""Finite-difference check of every objective composed with every network it trains.

Each component builds a small random network and input batch, differentiates
the loss with the tape, and compares against central differences on every
trainable coordinate.  Draws that land within ``KINK_MARGIN`` of a leaky-ReLU
or clamp corner are redrawn, since a central difference straddling a corner
measures neither one-sided slope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .models import Discriminator, Generator, Segmenter
from .tensor import Rng, Tensor

TOLERANCE = 1e-5
FD_STEP = 1e-4
KINK_MARGIN = 1e-2
MAX_REDRAWS = 50


@dataclass
class Problem:
    params: list[Tensor]
    loss: Callable[[], Tensor]


def _segmenter(rng: Rng) -> tuple[Segmenter, np.ndarray]:
    d_in, d_h, d_f, C = (int(v) for v in rng.integers(2, 6, size=4))
    F = Segmenter.init(d_in, d_h, d_f, C, rng.child("F"))
    n = int(rng.integers(4, 12))
    return F, rng.normal((n, d_in))


def _generator(rng: Rng) -> tuple[Generator, np.ndarray, np.ndarray, np.ndarray]:
    d_a, d_z, d_f = (int(v) for v in rng.integers(2, 5, size=3))
    G = Generator.init(d_a, d_z, d_f, rng.child("G"), dropout=0.5, hidden=int(rng.integers(4, 10)))
    n = int(rng.integers(3, 8))
    a = rng.normal((n, d_a))
    dom = rng.integers(0, 2, size=n)
    return G, a, dom, rng.normal((n, d_z))


def _gen_out(G: Generator, a, dom, z, rng: Rng) -> Tensor:
    # same dropout mask on every call, so the loss is a fixed function of the weights
    return G.forward(a, dom, z, train_mode=True, rng=rng.child("dropout"))


def ce_segmenter(rng: Rng) -> Problem:
    F, x = _segmenter(rng)
    y = rng.integers(0, F.n_classes, size=len(x))
    onehot = np.eye(F.n_classes)[y]
    return Problem(F.parameters(), lambda: L.seg_cross_entropy(T.softmax_rows(F.logits(x)), onehot))


def entropy_segmenter(rng: Rng) -> Problem:
    F, x = _segmenter(rng)
    mask = rng.uniform(len(x)) < 0.5
    return Problem(F.parameters(), lambda: L.entropy_loss(T.softmax_rows(F.logits(x)), mask))


def mmd_generator(rng: Rng) -> Problem:
    G, a, dom, z = _generator(rng)
    real = rng.normal((int(rng.integers(3, 8)), G.config["d_f"])) * 3.0
    bw = L.KernelBandwidths((0.5, 1.0, 2.0, 5.0))
    return Problem(G.parameters(), lambda: L.gmmn_mmd(real, _gen_out(G, a, dom, z, rng), bw))


def mmd_segmenter(rng: Rng) -> Problem:
    F, x = _segmenter(rng)
    real = rng.normal((5, F.d_f))
    bw = L.KernelBandwidths((0.5, 1.0, 2.0, 5.0))
    return Problem(F.parameters("feat."), lambda: L.gmmn_mmd(real, F.features(x), bw))


def disc_discriminator(rng: Rng) -> Problem:
    d_f = int(rng.integers(2, 8))
    D = Discriminator.init(d_f, rng.child("D"))
    fs, ft = rng.normal((6, d_f)), rng.normal((5, d_f)) + 0.5
    return Problem(D.parameters(), lambda: L.discriminator_loss(D, fs, ft))


def adv_generator(rng: Rng) -> Problem:
    G, a, dom, z = _generator(rng)
    D = Discriminator.init(G.config["d_f"], rng.child("D"))
    return Problem(G.parameters(), lambda: L.adversarial_loss(D, _gen_out(G, a, dom, z, rng)))


def adv_segmenter(rng: Rng) -> Problem:
    F, x = _segmenter(rng)
    D = Discriminator.init(F.d_f, rng.child("D"))
    return Problem(F.parameters("feat."), lambda: L.adversarial_loss(D, F.features(x)))


COMPONENTS: dict[str, Callable[[Rng], Problem]] = {
    "cross_entropy/segmenter": ce_segmenter,
    "entropy/segmenter": entropy_segmenter,
    "mmd/generator": mmd_generator,
    "mmd/segmenter": mmd_segmenter,
    "discriminator_bce/discriminator": disc_discriminator,
    "adversarial/generator": adv_generator,
    "adversarial/segmenter": adv_segmenter,
}


def kink_distance(out: Tensor) -> float:
    """Smallest distance of any leaky-ReLU input or clamped value to its corner."""
    dist = np.inf
    for node in T.Tape.record(out).nodes:
        if node.op == "leaky_relu":
            dist = min(dist, float(np.min(np.abs(node._parents[0].data))))
        elif node.op == "clamp_min":
            dist = min(dist, float(np.min(np.abs(node._parents[0].data - L.PROB_FLOOR))))
    return dist


def check_problem(prob: Problem) -> float:
    loss = prob.loss()
    T.backward(loss, prob.params)
    worst = 0.0
    for p in prob.params:
        analytic = p.grad.copy()
        saved = p.data

        def f(v, p=p):
            p.data = v
            return prob.loss().item()

        numeric = T.finite_diff_gradient(f, saved, FD_STEP)
        p.data = saved
        worst = max(worst, T.max_relative_error(analytic, numeric))
    return worst


def check_component(name: str, n_configs: int = 20, seed: int = 0) -> float:
    build = COMPONENTS[name]
    worst = 0.0
    for i in range(n_configs):
        for attempt in range(MAX_REDRAWS):
            prob = build(Rng(seed, ("gradcheck", name, str(i), str(attempt))))
            if kink_distance(prob.loss()) > KINK_MARGIN:
                break
        else:
            raise RuntimeError(f"{name}: no smooth configuration after {MAX_REDRAWS} draws")
        worst = max(worst, check_problem(prob))
    return worst


def run_suite(n_configs: int = 20, seed: int = 0) -> dict[str, float]:
    return {name: check_component(name, n_configs, seed) for name in COMPONENTS}
