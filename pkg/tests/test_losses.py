import math

import numpy as np
import pytest

import farsight.tensor as T
from farsight.errors import ConfigError, LabelError
from farsight.losses import LossWeights, attribute_loss, gender_loss, total_loss
from farsight.tensor import Tensor


def logits_with_ce(target_ce: float, label: int, k: int = 3) -> np.ndarray:
    """One logit row whose cross-entropy at ``label`` is exactly ``target_ce``."""
    p = math.exp(-target_ce)
    x = math.log((k - 1) * p / (1.0 - p))
    row = np.zeros(k)
    row[label] = x
    return row[None, :]


def test_logits_with_ce_helper():
    row = logits_with_ce(1.0, 0)
    ce = T.cross_entropy_ignore(Tensor(row), [0]).item()
    assert ce == pytest.approx(1.0, rel=1e-12)


class TestGenderLoss:
    def test_uniform_heads_closed_form(self):
        z = Tensor(np.zeros((4, 3)))
        y = np.array([0, 1, 2, 1])
        loss = gender_loss(z, z, z, y, auxiliary_weight=0.25)
        assert loss.item() == pytest.approx(1.5 * math.log(3.0), rel=1e-12)

    def test_zero_auxiliary_weight(self):
        rng = np.random.default_rng(0)
        fused = Tensor(rng.normal(size=(5, 3)))
        other = Tensor(rng.normal(size=(5, 3)))
        y = rng.integers(0, 3, 5)
        loss = gender_loss(fused, other, other, y, auxiliary_weight=0.0)
        assert loss.item() == pytest.approx(
            T.cross_entropy_ignore(fused, y).item(), rel=1e-14)

    def test_component_arithmetic(self):
        # fused CE 1.0 and per-path CE 2.0 combine to 1 + 0.25*(2+2) = 2.0
        fused = Tensor(logits_with_ce(1.0, 0))
        side = Tensor(logits_with_ce(2.0, 0))
        combined = gender_loss(fused, side, side, [0], 0.25).item()
        assert combined == pytest.approx(2.0, rel=1e-12)

    def test_randomized_closed_form(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            f, d, m = (Tensor(rng.normal(size=(6, 3))) for _ in range(3))
            y = rng.integers(0, 3, 6)
            alpha = float(rng.uniform(0, 1))
            expect = (T.cross_entropy_ignore(f, y).item()
                      + alpha * (T.cross_entropy_ignore(d, y).item()
                                 + T.cross_entropy_ignore(m, y).item()))
            assert gender_loss(f, d, m, y, alpha).item() == pytest.approx(expect, abs=1e-12)

    def test_unknown_label_first_class(self):
        # label 2 participates exactly like 0 and 1
        logits = Tensor(np.array([[0.0, 0.0, 5.0]]))
        loss = gender_loss(logits, logits, logits, [2], 0.0)
        assert loss.item() == pytest.approx(math.log(1 + 2 * math.exp(-5)), rel=1e-10)

    def test_out_of_range_label(self):
        z = Tensor(np.zeros((1, 3)))
        with pytest.raises(LabelError):
            gender_loss(z, z, z, [3], 0.25)
        with pytest.raises(LabelError):
            gender_loss(z, z, z, [-100], 0.25)

    def test_gradient_reaches_all_heads_when_weighted(self):
        rng = np.random.default_rng(1)
        f = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        d = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        m = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        gender_loss(f, d, m, [0, 1, 2, 0], 0.25).backward()
        assert np.linalg.norm(f.grad) > 0
        assert np.linalg.norm(d.grad) > 0
        assert np.linalg.norm(m.grad) > 0

    def test_gradient_only_fused_when_alpha_zero(self):
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        d = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        m = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        gender_loss(f, d, m, [0, 1, 2, 0], 0.0).backward()
        assert np.linalg.norm(f.grad) > 0
        np.testing.assert_array_equal(d.grad, 0.0)
        np.testing.assert_array_equal(m.grad, 0.0)


class TestAttributeLoss:
    def test_all_ignored_gives_zero(self):
        logits = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros((2, 4)))}
        labels = {"a": np.array([-100, -100]), "b": np.array([-100, -100])}
        assert attribute_loss(logits, labels).item() == 0.0

    def test_mean_over_attributes(self):
        logits = {"a": Tensor(logits_with_ce(1.0, 0)), "b": Tensor(logits_with_ce(3.0, 1))}
        labels = {"a": np.array([0]), "b": np.array([1])}
        assert attribute_loss(logits, labels).item() == pytest.approx(2.0, rel=1e-12)

    def test_single_attribute_equals_its_ce(self):
        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=(5, 4)))
        y = rng.integers(0, 4, 5)
        assert attribute_loss({"only": z}, {"only": y}).item() == pytest.approx(
            T.cross_entropy_ignore(z, y).item(), rel=1e-14)

    def test_ignored_attribute_still_counts_in_denominator(self):
        logits = {"a": Tensor(logits_with_ce(2.0, 0)), "b": Tensor(np.zeros((1, 4)))}
        labels = {"a": np.array([0]), "b": np.array([-100])}
        assert attribute_loss(logits, labels).item() == pytest.approx(1.0, rel=1e-12)


class TestTotalLoss:
    def test_arithmetic(self):
        lg, la = Tensor(np.asarray(2.0)), Tensor(np.asarray(0.6))
        assert total_loss(lg, la, 0.5, 0.5).item() == pytest.approx(1.3, abs=1e-15)

    def test_gender_only(self):
        lg, la = Tensor(np.asarray(1.7)), Tensor(np.asarray(9.9))
        assert total_loss(lg, la, 0.5, 0.0).item() == pytest.approx(0.85, abs=1e-15)

    def test_all_zero_weights(self):
        lg, la = Tensor(np.asarray(1.0)), Tensor(np.asarray(1.0))
        assert total_loss(lg, la, 0.0, 0.0).item() == 0.0

    def test_linearity_randomized(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            g, a = rng.uniform(0, 5, 2)
            wg, wa = rng.uniform(0, 2, 2)
            got = total_loss(Tensor(np.asarray(g)), Tensor(np.asarray(a)), wg, wa).item()
            assert got == pytest.approx(wg * g + wa * a, abs=1e-12)


def test_loss_weights_validate_nonnegative():
    with pytest.raises(ConfigError):
        LossWeights(auxiliary=-0.1)
    w = LossWeights()
    assert (w.auxiliary, w.gender, w.attributes) == (0.25, 0.5, 0.5)
