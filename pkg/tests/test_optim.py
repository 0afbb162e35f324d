import numpy as np
import pytest

from namegate.errors import TrainingDivergedError
from namegate.numerics import Param
from namegate.optim import Adam, AdamW


def reference_adam(values, grads_per_step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Straight transcription of the update recurrences, float64."""
    theta = np.array(values, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads_per_step, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Param(np.array([[1.0, -2.0]]))
        before = p.value.copy()
        opt = Adam([p], lr=0.1)
        opt.step()
        assert np.array_equal(p.value, before)

    def test_first_step_closed_form(self):
        p = Param(np.array(1.0))
        p.grad[...] = 4.0
        Adam([p], lr=0.1).step()
        # first bias-corrected step is -lr * g / (|g| + eps)
        expected = 1.0 - 0.1 * 4.0 / (4.0 + 1e-8)
        assert abs(p.value.item() - expected) < 1e-12

    def test_two_steps_match_reference(self):
        rng = np.random.default_rng(0)
        init = rng.standard_normal((3, 2))
        g1 = rng.standard_normal((3, 2))
        g2 = rng.standard_normal((3, 2))
        p = Param(init)
        opt = Adam([p], lr=0.05)
        p.grad[...] = g1
        opt.step()
        p.grad[...] = g2
        opt.step()
        want = reference_adam(init, [g1, g2], lr=0.05)
        assert np.max(np.abs(p.value - want)) < 1e-9

    def test_first_step_magnitude_bounded_by_lr(self):
        rng = np.random.default_rng(1)
        for scale in (1e-6, 1.0, 1e6):
            p = Param(rng.standard_normal((4, 4)))
            before = p.value.copy()
            p.grad[...] = scale * rng.standard_normal((4, 4))
            Adam([p], lr=0.01).step()
            assert np.max(np.abs(p.value - before)) <= 0.01 * (1 + 1e-6)

    def test_degenerate_betas_give_sign_like_update(self):
        p = Param(np.array([2.0, -3.0]))
        before = p.value.copy()
        g = np.array([5.0, -0.5])
        p.grad[...] = g
        Adam([p], lr=0.1, beta1=0.0, beta2=0.0).step()
        want = before - 0.1 * g / (np.abs(g) + 1e-8)
        assert np.max(np.abs(p.value - want)) < 1e-12

    def test_nonfinite_gradient_raises(self):
        p = Param(np.array([1.0]))
        p.grad[...] = np.nan
        with pytest.raises(TrainingDivergedError):
            Adam([p], lr=0.1).step()

    def test_deterministic(self):
        def run():
            p = Param(np.ones((2, 2), dtype=np.float32))
            opt = Adam([p], lr=0.01)
            for i in range(5):
                p.grad[...] = np.float32(0.1 * (i + 1))
                opt.step()
                p.reset_grad()
            return p.value.copy()

        assert np.array_equal(run(), run())


class TestAdamW:
    def test_zero_decay_matches_adam_bitwise(self):
        rng = np.random.default_rng(2)
        init = rng.standard_normal((3, 3)).astype(np.float32)
        g = rng.standard_normal((3, 3)).astype(np.float32)
        pa = Param(init.copy())
        pw = Param(init.copy())
        oa = Adam([pa], lr=0.01)
        ow = AdamW([pw], lr=0.01, weight_decay=0.0)
        for _ in range(3):
            pa.grad[...] = g
            pw.grad[...] = g
            oa.step()
            ow.step()
        assert np.array_equal(pa.value, pw.value)

    def test_decay_only_scaling(self):
        p = Param(np.array([10.0, -4.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.01)
        expected = p.value.copy()
        for _ in range(4):
            p.grad[...] = 0.0
            opt.step()
            expected *= (1 - 0.1 * 0.01)
        assert np.max(np.abs(p.value - expected)) < 1e-12

    def test_first_step_is_adam_plus_decay(self):
        init = np.array([2.0])
        g = np.array([3.0])
        pw = Param(init.copy())
        pw.grad[...] = g
        AdamW([pw], lr=0.1, weight_decay=0.01).step()
        decayed = init * (1 - 0.1 * 0.01)
        adam_step = 0.1 * g / (np.abs(g) + 1e-8)
        assert np.max(np.abs(pw.value - (decayed - adam_step))) < 1e-9

    def test_scalar_exemption_flag(self):
        s = Param(np.array(5.0))
        opt = AdamW([s], lr=0.1, weight_decay=0.5, decay_scalars=False)
        s.grad[...] = 0.0
        opt.step()
        assert s.value.item() == 5.0
