import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from genlmk.errors import NonFiniteError, ShapeError
from genlmk.losses import (
    LossWeights,
    SpringVariant,
    cycle_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    spring_loss,
    total_objective,
)
from genlmk.template import SemanticLine, Template

LC, VD = SpringVariant.LENGTH_CHANGE, SpringVariant.VECTOR_DIFF


def full(v, shape=(2, 1, 6, 6)):
    return torch.full(shape, v, dtype=torch.float64)


@pytest.mark.parametrize("real, fake, expected", [(1.0, 0.0, 0.0), (0.5, 0.5, 0.25)])
def test_discriminator_loss_points(real, fake, expected):
    assert float(gan_loss_discriminator(full(real), full(fake))) == pytest.approx(expected, abs=1e-9)


def test_discriminator_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        gan_loss_discriminator(full(1.0), full(0.0, (2, 1, 5, 5)))


@pytest.mark.parametrize("fake, expected", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)])
def test_generator_loss_points(fake, expected):
    assert float(gan_loss_generator(full(fake))) == pytest.approx(expected, abs=1e-9)


def test_bce_mode_is_available():
    assert float(gan_loss_generator(full(50.0), mode="bce")) == pytest.approx(0.0, abs=1e-9)
    assert float(gan_loss_discriminator(full(50.0), full(-50.0), mode="bce")) == pytest.approx(0.0, abs=1e-9)


def test_cycle_loss_points():
    a = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert float(cycle_loss(a, a.clone())) == 0.0
    assert float(cycle_loss(a, a + 0.5)) == pytest.approx(0.5, abs=1e-9)
    assert float(cycle_loss([a, a], [a + 0.5, a + 0.25])) == pytest.approx(0.75, abs=1e-9)
    with pytest.raises(ShapeError):
        cycle_loss(a, a[:, :2])


def two_point(k=1.0):
    return Template.build([[0.0, 0.0], [1.0, 0.0]], [SemanticLine("l", (0, 1))], spring_constant=k)


@pytest.mark.parametrize("variant", [LC, VD])
def test_spring_rest_and_translation(variant):
    t = random_template(np.random.default_rng(1))
    n = t.n_landmarks
    assert float(spring_loss(t, torch.zeros(n, 2, dtype=torch.float64), variant)) == 0.0
    shift = torch.full((n, 2), 0.13, dtype=torch.float64)
    assert float(spring_loss(t, shift, variant)) == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("variant", [LC, VD])
def test_spring_analytic_point(variant):
    delta = torch.tensor([[0.0, 0.0], [0.5, 0.0]], dtype=torch.float64)
    assert float(spring_loss(two_point(), delta, variant)) == pytest.approx(0.25, abs=1e-9)


def test_spring_shape_error():
    with pytest.raises(ShapeError):
        spring_loss(two_point(), torch.zeros(3, 2))


def random_template(rng, n=None, k=None):
    n = n or int(rng.integers(2, 12))
    pts = rng.random((n, 2))
    edges = {(int(a), int(b)) for a, b in rng.integers(0, n, (2 * n, 2)) if a != b}
    return Template.build(pts, [], sorted(edges), k if k is not None else float(rng.uniform(0.1, 5.0)))


def naive_spring(t, delta, variant):
    total = 0.0
    for s in t.springs:
        pi = t.points[s.i] + delta[s.i]
        pj = t.points[s.j] + delta[s.j]
        if variant is VD:
            total += (delta[s.i][0] - delta[s.j][0]) ** 2 + (delta[s.i][1] - delta[s.j][1]) ** 2
        else:
            total += (math.hypot(pi[0] - pj[0], pi[1] - pj[1]) - s.rest_length) ** 2
    return t.spring_constant * total


@pytest.mark.parametrize("variant", [LC, VD])
def test_spring_matches_naive_loop(variant):
    rng = np.random.default_rng(7)
    for _ in range(200):
        t = random_template(rng)
        delta = rng.normal(0, 0.1, (t.n_landmarks, 2))
        got = float(spring_loss(t, torch.from_numpy(delta), variant))
        want = naive_spring(t, delta, variant)
        assert got == pytest.approx(want, rel=1e-6, abs=1e-15)


def test_spring_batched_is_mean():
    rng = np.random.default_rng(2)
    t = random_template(rng, n=6)
    deltas = torch.from_numpy(rng.normal(0, 0.1, (3, 6, 2)))
    per = [float(spring_loss(t, d)) for d in deltas]
    assert float(spring_loss(t, deltas)) == pytest.approx(sum(per) / 3, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(0.01, 100.0))
def test_spring_linear_in_k(seed, k):
    rng = np.random.default_rng(seed)
    t1 = random_template(rng, k=1.0)
    tk = Template(t1.points, t1.lines, t1.springs, k)
    delta = torch.from_numpy(rng.normal(0, 0.1, (t1.n_landmarks, 2)))
    for v in (LC, VD):
        base = float(spring_loss(t1, delta, v))
        assert float(spring_loss(tk, delta, v)) == pytest.approx(k * base, rel=1e-9, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_spring_nonnegative_and_zero_iff(seed):
    rng = np.random.default_rng(seed)
    t = random_template(rng)
    delta = torch.from_numpy(rng.normal(0, 0.2, (t.n_landmarks, 2)))
    for v in (LC, VD):
        assert float(spring_loss(t, delta, v)) >= 0.0


def rotation_case(angle=0.7):
    """Delta that rigidly rotates the template about (0.3, 0.2)."""
    t = Template.build([[0.2, 0.2], [0.6, 0.3], [0.5, 0.7]], [SemanticLine("l", (0, 1, 2, 0))])
    c, s = math.cos(angle), math.sin(angle)
    center = np.array([0.3, 0.2])
    rotated = (t.points - center) @ np.array([[c, -s], [s, c]]).T + center
    return t, torch.from_numpy(rotated - t.points)


def test_rotation_discriminates_variants():
    t, delta = rotation_case()
    assert float(spring_loss(t, delta, LC)) == pytest.approx(0.0, abs=1e-12)
    assert float(spring_loss(t, delta, VD)) > 1e-3


def test_zero_length_spring_gradient_is_finite():
    t = Template.build([[0.5, 0.5], [0.5, 0.5]], [SemanticLine("l", (0, 1))])
    delta = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
    spring_loss(t, delta).backward()
    assert torch.all(torch.isfinite(delta.grad))


@pytest.mark.parametrize("variant", [LC, VD])
def test_spring_gradient_matches_finite_differences(variant):
    rng = np.random.default_rng(11)
    for _ in range(10):
        t = random_template(rng, n=5)
        delta = torch.from_numpy(rng.normal(0, 0.1, (5, 2))).requires_grad_()
        spring_loss(t, delta, variant).backward()
        fd = np.zeros((5, 2))
        h = 1e-6
        base = delta.detach().numpy()
        for idx in np.ndindex(5, 2):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (naive_spring(t, up, variant) - naive_spring(t, dn, variant)) / (2 * h)
        np.testing.assert_allclose(delta.grad.numpy(), fd, rtol=1e-3, atol=1e-7)


def test_gan_and_cycle_gradients_match_finite_differences():
    torch.manual_seed(0)
    real = torch.randn(2, 1, 3, 3, dtype=torch.float64)
    fake = torch.randn(2, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    a = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    b = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda f: gan_loss_discriminator(real, f), (fake,))
    assert torch.autograd.gradcheck(gan_loss_generator, (fake,))
    assert torch.autograd.gradcheck(lambda x: cycle_loss(a, x), (b,))


def test_total_objective_points():
    zero = {"gan_UtoM": 0.0, "gan_MtoU": 0.0, "cyc": 0.0, "spring": 0.0}
    total, report = total_objective(zero)
    assert total == 0.0 and report["total"] == 0.0
    ones = dict.fromkeys(zero, 1.0)
    total, report = total_objective(ones, LossWeights())
    assert total == pytest.approx(13.0, abs=1e-9)
    with pytest.raises(NonFiniteError):
        total_objective({**ones, "cyc": float("nan")})
    with pytest.raises(NonFiniteError):
        total_objective({**ones, "spring": torch.tensor(float("inf"))})


@settings(max_examples=50, deadline=None)
@given(
    parts=st.fixed_dictionaries({k: st.floats(0, 100) for k in ("gan_UtoM", "gan_MtoU", "cyc", "spring")}),
    lg=st.floats(0, 10),
    lc=st.floats(0, 50),
)
def test_total_objective_is_weighted_sum_of_report(parts, lg, lc):
    total, report = total_objective(parts, LossWeights(lg, lc))
    assert report["total"] == lg * (report["gan_UtoM"] + report["gan_MtoU"]) + lc * report["cyc"] + report["spring"]
    assert total == report["total"]
