import math

import numpy as np
import pytest
import torch
from PIL import Image

from genlmk.errors import FrameIOError, ParamError, ShapeError
from genlmk.renderer import RenderSettings, overlay_export, render, splat_weight
from genlmk.template import SemanticLine, Template
from oracles import composite_reference, random_template, relative_error, render_gradient_instance


@pytest.mark.parametrize(
    "d, expected",
    [(0.0, 1.0), (1.5, math.exp(-0.5)), (4.5, math.exp(-4.5))],
)
def test_splat_weight_points(d, expected):
    assert splat_weight(d, 1.5) == pytest.approx(expected, rel=1e-12)
    assert splat_weight(1.5, 1.5) == pytest.approx(0.6065, abs=1e-4)
    assert splat_weight(4.5, 1.5) == pytest.approx(0.0111, abs=1e-4)


def test_splat_weight_rejects_bad_sigma():
    with pytest.raises(ParamError):
        splat_weight(1.0, 0.0)


@pytest.mark.parametrize("kwargs", [{"sigma_px": 0}, {"alpha": 0}, {"alpha": 1.5}, {"mode": "mesh"}, {"samples_per_segment": 1}])
def test_settings_validation(kwargs):
    with pytest.raises(ParamError):
        RenderSettings(**kwargs)


def single_point(color=(1.0, 1.0, 1.0)):
    # one isolated landmark at the image center plus a far-away partner on a line off-image
    return Template.build([[0.5, 0.5]], [])


def test_center_pixel_of_white_point_on_black():
    t = single_point()
    img = -torch.ones(3, 16, 16, dtype=torch.float64)
    out = render(torch.zeros(1, 2), t, img, RenderSettings(alpha=1.0))
    assert torch.allclose(out[:, 8, 8], torch.ones(3, dtype=torch.float64), atol=1e-12)


def test_determinism_and_zero_delta():
    rng = np.random.default_rng(0)
    t = random_template(rng)
    img = torch.from_numpy(rng.uniform(-1, 1, (3, 32, 32)))
    a = render(torch.zeros(t.n_landmarks, 2), t, img)
    b = render(torch.zeros(t.n_landmarks, 2), t, img)
    assert torch.equal(a, b)


@pytest.mark.parametrize("mode", ["points", "polylines"])
def test_matches_reference_compositing(mode):
    rng = np.random.default_rng(5)
    s = RenderSettings(sigma_px=1.7, alpha=0.8, mode=mode, samples_per_segment=5)
    for _ in range(5):
        t = random_template(rng)
        delta = rng.normal(0, 0.05, (t.n_landmarks, 2))
        img = rng.uniform(-1, 1, (3, 24, 20))
        got = render(torch.from_numpy(delta), t, torch.from_numpy(img), s).numpy()
        pos = (t.points + delta) * np.array([20, 24])
        np.testing.assert_allclose(got, composite_reference(pos, t, img, s), atol=1e-10)


def test_shape_range_and_batching():
    rng = np.random.default_rng(1)
    t = random_template(rng)
    img = torch.from_numpy(rng.uniform(-1, 1, (4, 3, 20, 28)))
    delta = torch.from_numpy(rng.normal(0, 0.3, (4, t.n_landmarks, 2)))
    out = render(delta, t, img)
    assert out.shape == img.shape
    assert out.min() >= -1 and out.max() <= 1
    for k in range(4):
        torch.testing.assert_close(out[k], render(delta[k], t, img[k]))
    # a single delta broadcasts over the batch
    shared = render(delta[0], t, img)
    torch.testing.assert_close(shared[2], render(delta[0], t, img[2]))


def test_tiny_alpha_leaves_image_unchanged():
    rng = np.random.default_rng(2)
    t = random_template(rng)
    img = torch.from_numpy(rng.uniform(-1, 1, (3, 16, 16)))
    out = render(torch.zeros(t.n_landmarks, 2), t, img, RenderSettings(alpha=5e-324))
    assert torch.equal(out, img)


@pytest.mark.parametrize("mode", ["points", "polylines"])
def test_translation_equivariance(mode):
    rng = np.random.default_rng(3)
    t = random_template(rng, margin=0.3)
    s = RenderSettings(mode=mode)
    h, w, k = 32, 40, 3
    img = torch.full((3, h, w), -0.4, dtype=torch.float64)
    delta = torch.from_numpy(rng.normal(0, 0.02, (t.n_landmarks, 2)))
    a = render(delta, t, img, s)
    b = render(delta + torch.tensor([k / w, 0.0], dtype=torch.float64), t, img, s)
    torch.testing.assert_close(b[:, :, k:], a[:, :, :-k], atol=1e-12, rtol=0)
    c = render(delta + torch.tensor([0.0, k / h], dtype=torch.float64), t, img, s)
    torch.testing.assert_close(c[:, k:, :], a[:, :-k, :], atol=1e-12, rtol=0)


def test_stroke_order_invariance():
    rng = np.random.default_rng(4)
    t = random_template(rng, n_min=6)
    flipped = Template(t.points, tuple(reversed(t.lines)), t.springs, t.spring_constant)
    img = torch.from_numpy(rng.uniform(-1, 1, (3, 24, 24)))
    delta = torch.from_numpy(rng.normal(0, 0.05, (t.n_landmarks, 2)))
    torch.testing.assert_close(render(delta, t, img), render(delta, flipped, img), atol=1e-12, rtol=1e-12)


def test_shape_errors():
    t = random_template(np.random.default_rng(0))
    n = t.n_landmarks
    with pytest.raises(ShapeError):
        render(torch.zeros(n - 1, 2), t, torch.zeros(3, 16, 16))
    with pytest.raises(ShapeError):
        render(torch.zeros(n, 2), t, torch.zeros(1, 16, 16))
    with pytest.raises(ShapeError):
        render(torch.zeros(n, 2), t, torch.zeros(3, 4, 16))
    with pytest.raises(ShapeError):
        render(torch.zeros(3, n, 2), t, torch.zeros(2, 3, 16, 16))


@pytest.mark.parametrize("mode", ["points", "polylines"])
def test_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(21)
    for _ in range(5):
        analytic, fd = render_gradient_instance(rng, size=32, settings=RenderSettings(mode=mode))
        assert relative_error(analytic, fd) <= 1e-3


def test_gradient_of_pixel_sum():
    rng = np.random.default_rng(8)
    t = random_template(rng)
    img = torch.from_numpy(rng.uniform(-1, 1, (3, 32, 32)))
    delta = rng.normal(0, 0.03, (t.n_landmarks, 2))
    d = torch.from_numpy(delta).requires_grad_()
    render(d, t, img).sum().backward()
    from oracles import fd_gradient

    fd = fd_gradient(lambda x: float(render(torch.from_numpy(x), t, img).sum()), delta)
    assert relative_error(d.grad.numpy(), fd) <= 1e-3


def test_gradient_through_image_and_exact_hit():
    t = Template.build([[0.5, 0.5], [0.25, 0.5]], [SemanticLine("l", (0, 1))])
    img = (torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1).requires_grad_()
    delta = torch.zeros(2, 2, 2, dtype=torch.float64, requires_grad=True)
    # samples land exactly on pixel centers: coverage hits 1 there
    assert torch.autograd.gradcheck(lambda d, x: render(d, t, x, RenderSettings(alpha=1.0)), (delta, img))


def test_overlay_export(tmp_path):
    rng = np.random.default_rng(0)
    t = random_template(rng)
    img = rng.uniform(-1, 1, (3, 20, 30))
    p = overlay_export(t.points, img, tmp_path / "o.png", template=t)
    with Image.open(p) as im:
        assert np.asarray(im).shape == (20, 30, 3)
    off = t.points + np.array([0.8, -0.9])
    overlay_export(off, img, tmp_path / "off.png", template=t)
    assert (tmp_path / "off.png").is_file()
    with pytest.raises(FrameIOError):
        overlay_export(t.points, img, tmp_path / "missing" / "o.png", template=t)
