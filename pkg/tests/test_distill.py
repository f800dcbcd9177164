import math

import numpy as np
import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from distill_mil.distill import bernoulli_kl, soften, student_loss
from distill_mil.losses import bernoulli_kl_t
from distill_mil.model import build_model, clone_model, predict_bag
from distill_mil.types import COLON_VAT, DistillConfig, VatConfig
from distill_mil.vat import vat_loss

from conftest import MICRO, random_bag
from oracles import central_diff, kl_hp, rel_err, softmax_hp


# ------------------------------------------------------------------ soften

def test_soften_symmetric_logits():
    for c in (-3.0, 0.0, 7.5):
        for tau in (0.1, 1.0, 4.0):
            np.testing.assert_allclose(soften([c, c], tau), [0.5, 0.5], atol=1e-15)


def test_soften_tau_one_is_softmax():
    z = np.array([1.3, -0.2])
    np.testing.assert_allclose(soften(z, 1.0), np.exp(z) / np.exp(z).sum(), atol=1e-12)
    np.testing.assert_allclose(soften(z, 1.0), torch.softmax(torch.tensor(z), 0).numpy(), atol=1e-12)


def test_soften_oracle():
    expected = [float(v) for v in softmax_hp([1, 0])]
    np.testing.assert_allclose(soften([2.0, 0.0], 2.0), expected, atol=1e-12)
    np.testing.assert_allclose(expected, [0.731059, 0.268941], atol=1e-6)


def test_soften_shift_invariant(rng):
    for _ in range(20):
        z, c, tau = rng.normal(size=2) * 5, rng.normal() * 10, rng.uniform(0.1, 5)
        np.testing.assert_allclose(soften(z + c, tau), soften(z, tau), atol=1e-9)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_soften_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        soften([1.0, 0.0], tau)


# ------------------------------------------------------------------ bernoulli KL

def test_kl_examples():
    assert bernoulli_kl(0.3, 0.3) == pytest.approx(0.0, abs=1e-15)
    assert bernoulli_kl(0.9, 0.5) == pytest.approx(float(kl_hp(0.9, 0.5)), abs=1e-12)
    assert bernoulli_kl(0.5, 0.9) == pytest.approx(float(kl_hp(0.5, 0.9)), abs=1e-12)
    # frozen oracle values
    assert bernoulli_kl(0.9, 0.5) == pytest.approx(0.368064, abs=1e-6)
    assert bernoulli_kl(0.5, 0.9) == pytest.approx(0.510826, abs=1e-6)


def test_kl_edges():
    assert bernoulli_kl(0.0, 0.0) == pytest.approx(0.0, abs=1e-9)
    assert bernoulli_kl(1.0, 1.0) == pytest.approx(0.0, abs=1e-9)
    assert math.isfinite(bernoulli_kl(1.0, 0.0))


@pytest.mark.parametrize("p,q", [(-0.1, 0.5), (0.5, 1.5), (float("nan"), 0.5)])
def test_kl_domain(p, q):
    with pytest.raises(ValueError):
        bernoulli_kl(p, q)


def test_kl_grid_nonnegative_and_zero_iff_equal():
    grid = np.linspace(0, 1, 101)
    for p in grid:
        for q in grid:
            v = bernoulli_kl(p, q)
            assert v >= 0
            if abs(p - q) < 1e-6:
                assert v < 1e-9
            else:
                assert v > 1e-9


def test_kl_tensor_matches_scalar(rng):
    p, q = rng.uniform(size=50), rng.uniform(0.01, 0.99, size=50)
    t = bernoulli_kl_t(torch.as_tensor(p), torch.as_tensor(q)).numpy()
    np.testing.assert_allclose(t, [bernoulli_kl(a, b) for a, b in zip(p, q)], atol=1e-12)


# ------------------------------------------------------------------ student loss

def _teacher():
    return build_model(MICRO, attention_dim=3, seed=1, dtype=torch.float64)


def test_student_from_teacher_has_zero_distillation(rng):
    t = _teacher()
    s = clone_model(t)
    res = student_loss(s, t, random_bag(rng, 6), DistillConfig(gamma_c=0, gamma_e=0))
    assert abs(res.terms["bag_kd"]) < 1e-9 and abs(res.terms["inst_kd"]) < 1e-9
    assert abs(res.total.item()) < 1e-9


def test_student_loss_reduces_to_bce(rng):
    t, s = _teacher(), build_model(MICRO, 3, seed=2, dtype=torch.float64)
    bag = random_bag(rng, 5, label=0)
    res = student_loss(s, t, bag, DistillConfig(gamma_c=1, gamma_b=0, gamma_i=0, gamma_e=0))
    p = predict_bag(s, bag).bag_probs[1]
    assert res.total.item() == pytest.approx(-math.log(1 - p), rel=1e-9)


def test_student_loss_weighting(rng):
    t, s = _teacher(), build_model(MICRO, 3, seed=2, dtype=torch.float64)
    res = student_loss(s, t, random_bag(rng, 5), DistillConfig())
    a, b, c, d = (res.terms[k] for k in ("cls", "bag_kd", "inst_kd", "entropy"))
    assert res.total.item() == pytest.approx(0.3 * a + 0.5 * b + 0.5 * c + 0.1 * d, rel=1e-9)
    assert sum(res.weighted().values()) == pytest.approx(res.total.item(), rel=1e-9)


def test_student_loss_terms_match_scalar_definitions(rng):
    t, s = _teacher(), build_model(MICRO, 3, seed=2, dtype=torch.float64)
    bag = random_bag(rng, 4, label=1)
    cfg = DistillConfig(tau=3.0)
    res = student_loss(s, t, bag, cfg)
    pt, ps = predict_bag(t, bag, True), predict_bag(s, bag, True)
    assert res.terms["bag_kd"] == pytest.approx(
        bernoulli_kl(soften(pt.bag_logits, 3.0)[1], soften(ps.bag_logits, 3.0)[1]), rel=1e-9)
    with torch.no_grad():
        lt = t.instance_logits(t.extractor(t.as_tensor(bag.instances))).numpy()
        ls = s.instance_logits(s.extractor(s.as_tensor(bag.instances))).numpy()
    inst = sum(bernoulli_kl(soften(a, 3.0)[1], soften(b, 3.0)[1]) for a, b in zip(lt, ls))
    assert res.terms["inst_kd"] == pytest.approx(inst, rel=1e-9)
    from distill_mil.losses import conditional_entropy
    assert res.terms["entropy"] == pytest.approx(sum(conditional_entropy(p[1]) for p in ps.instance_probs), rel=1e-9)


def test_student_loss_instance_cap(rng):
    t, s = _teacher(), build_model(MICRO, 3, seed=2, dtype=torch.float64)
    bag = random_bag(rng, 40)
    full = student_loss(s, t, bag, DistillConfig())
    capped = [student_loss(s, t, bag, DistillConfig(max_instances=10), np.random.default_rng(i)).terms["entropy"]
              for i in range(300)]
    assert np.mean(capped) == pytest.approx(full.terms["entropy"], rel=0.05)


def test_teacher_receives_no_gradient(rng):
    t, s = _teacher(), build_model(MICRO, 3, seed=2, dtype=torch.float64)
    student_loss(s, t, random_bag(rng, 5), DistillConfig()).total.backward()
    assert all(p.grad is None for p in t.parameters())
    assert any(p.grad is not None for p in s.parameters())


# ------------------------------------------------------------------ gradient checks

def _fd_check(model, loss_of_model):
    params = list(model.parameters())
    theta = parameters_to_vector(params).detach().clone()
    model.zero_grad()
    loss_of_model().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy()

    def f(x):
        with torch.no_grad():
            vector_to_parameters(torch.as_tensor(x), params)
            return loss_of_model().item()

    numeric = central_diff(f, theta.numpy(), step=1e-5)
    with torch.no_grad():
        vector_to_parameters(theta, params)
    return rel_err(analytic, numeric)


def test_vat_loss_gradient(rng):
    m = build_model(MICRO, 3, seed=4, dtype=torch.float64)
    bag = random_bag(rng, 4, label=1)
    cfg = VatConfig(lambda_c=1.0, lambda_n=0.5, lambda_delta=0.3, lambda_e=0.3, delta=0.5,
                    entropy_realizations=2)
    err = _fd_check(m, lambda: vat_loss(m, bag, cfg, np.random.default_rng(9), detach_clean=False).total)
    assert err < 1e-4


def test_student_loss_gradient(rng):
    t = build_model(MICRO, 3, seed=4, dtype=torch.float64)
    s = build_model(MICRO, 3, seed=5, dtype=torch.float64)
    bag = random_bag(rng, 4, label=0)
    err = _fd_check(s, lambda: student_loss(s, t, bag, DistillConfig()).total)
    assert err < 1e-4
