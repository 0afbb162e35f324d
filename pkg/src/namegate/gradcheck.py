"""Finite-difference self-check of every trainable loss path.

Runs the matcher loss (all six head parameters), the classifier loss
(including batchnorm scale and shift), the CTC loss with the per-frame
logits as the free variable, and a pooling chain that covers the remaining
primitives. Reports the max relative error per model across seeds.
"""

from __future__ import annotations

import numpy as np

from .baselines import Alphabet, init_mlp, taped_classifier_loss
from .matcher import init_matcher, taped_contrastive_loss
from .numerics import (
    Param,
    Tape,
    finite_difference_grad,
    relative_gradient_error,
)

TOLERANCE = 1e-4
FD_STEP = 1e-5


def _check_params(build, params: list[Param]) -> float:
    """Max relative error across params for a scalar graph builder."""
    for p in params:
        p.reset_grad()
    tape, loss = build()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        fd = finite_difference_grad(lambda: build()[1].value.item(), p, h=FD_STEP)
        worst = max(worst, relative_gradient_error(p.grad, fd))
    return worst


def check_matcher(seed: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    params = init_matcher(8, 8, d=8, seed=seed, dtype=np.float64)
    pooled_audio = rng.standard_normal((4, 8))
    text = rng.standard_normal((4, 8))

    def build():
        tape = Tape()
        return tape, taped_contrastive_loss(tape, params, pooled_audio, text)

    return _check_params(build, params.all_params())


def check_classifier(seed: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    params = init_mlp(6, 4, hidden=8, seed=seed, dtype=np.float64)
    x = rng.standard_normal((8, 6))
    labels = rng.integers(0, 4, size=8)

    def build():
        tape = Tape()
        return tape, taped_classifier_loss(tape, params, x, labels)

    return _check_params(build, params.all_params())


def check_ctc(seed: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    alphabet = Alphabet(("<blank>", "a", "b", "c"))
    logits = Param(rng.standard_normal((6, alphabet.size)), "logits")
    target = rng.integers(1, alphabet.size, size=3)

    def build():
        tape = Tape()
        lp = tape.log_softmax_rows(tape.leaf(logits))
        return tape, tape.ctc(lp, target, blank=0)

    return _check_params(build, [logits])


def check_pooling_chain(seed: int) -> float:
    """Covers mean pooling, relu, transpose, and the scaled-similarity op."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    frames = rng.standard_normal((7, 5))
    w = Param(rng.standard_normal((5, 6)), "w")
    b = Param(rng.standard_normal((1, 6)), "b")
    scale = Param(np.asarray(0.2), "scale")
    ref = rng.standard_normal((3, 6))

    def build():
        tape = Tape()
        h = tape.relu(tape.add_bias(tape.matmul(tape.constant(frames), tape.leaf(w)),
                                    tape.leaf(b)))
        pooled = tape.mean_pool(h)
        sims = tape.matmul_nt(pooled, tape.transpose(tape.constant(ref.T)))
        logits = tape.scale_exp(sims, tape.leaf(scale))
        return tape, tape.softmax_cross_entropy(logits, [1])

    return _check_params(build, [w, b, scale])


SUITES = {
    "matcher": check_matcher,
    "classifier": check_classifier,
    "ctc": check_ctc,
    "pooling_chain": check_pooling_chain,
}


def run_gradcheck(seed: int = 0, n_seeds: int = 10) -> dict[str, float]:
    """Max relative error per suite over n_seeds consecutive seeds."""
    results = {}
    for name, check in SUITES.items():
        worst = 0.0
        for offset in range(n_seeds):
            worst = max(worst, check(seed + offset))
        results[name] = worst
    return results
