import math

import numpy as np
import pytest
import torch

from gsdif import diffcore as dc
from gsdif.geometry import make_circular_geometry, pixel_ray
from gsdif.model import DivergenceError, ModelConfig, TrainingConfig, init_params, normalize_projections, prepare
from gsdif.projector import ProjectionStack, drr, line_integral
from gsdif.tto import (
    TTOConfig,
    all_rays,
    projection_loss,
    render_ray,
    render_rays,
    sample_rays,
    tto_finetune,
)
from gsdif.volume import generate_phantom, random_phantom_spec

F64 = torch.float64


def tiny_cfg(**kw):
    base = dict(k_views=3, det_nu=16, det_nv=16, C=4, C_t=8, C_g=4, V=3, enc_widths=(4, 6), dec_widths=(),
                atten_hidden=(8,), gauss_hidden=(8,), field_half_extent_mm=37.5,
                training=TrainingConfig(epochs=10, points_per_sample=64))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def geom():
    return make_circular_geometry(3, 1000.0, 1500.0, (16, 16), 9.0)


@pytest.fixture(scope="module")
def proj(geom):
    vol = generate_phantom(random_phantom_spec(np.random.default_rng(0), 35.0), (16, 16, 16), 5.0)
    return drr(vol, geom, 128)


def random_params(cfg, seed, dtype=F64):
    params = init_params(cfg, seed, dtype)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for n in params.names("gauss_head"):
            params[n].add_(0.3 * torch.randn(params[n].shape, generator=g, dtype=dtype))
    return params


def constant_params(cfg, c, dtype=F64):
    params = init_params(cfg, 0, dtype)
    with torch.no_grad():
        for n in params.names("atten_head"):
            params[n].zero_()
        params[f"atten_head.{len(cfg.atten_hidden)}.bias"].fill_(c)
    return params


# -- ray sampling ------------------------------------------------------------

def test_sample_all_pixels_once(proj):
    total = 3 * 16 * 16
    rays = sample_rays(proj, total, 1)
    ids = rays.views * 256 + rays.pixels[:, 1] * 16 + rays.pixels[:, 0]
    assert sorted(ids.tolist()) == list(range(total))
    with pytest.raises(ValueError):
        sample_rays(proj, total + 1, 1)
    with pytest.raises(ValueError):
        sample_rays(proj, 0, 1)


def test_sample_rays_seeded_and_consistent(proj, geom):
    a, b = sample_rays(proj, 50, 7), sample_rays(proj, 50, 7)
    assert np.array_equal(a.p_d, b.p_d) and np.array_equal(a.e_true, b.e_true)
    for i in range(0, 50, 7):
        r = a[i]
        u, v = r.pixel
        ref = pixel_ray(geom, r.view, (u, v))
        np.testing.assert_allclose(r.ray.p_s, ref.p_s, atol=1e-9)
        np.testing.assert_allclose(r.ray.p_d, ref.p_d, atol=1e-9)
        assert r.e_true == float(proj.data[r.view, v, u])


def test_sample_rays_view_histogram_uniform():
    g = make_circular_geometry(4, 1000.0, 1500.0, (64, 64), 3.0)
    big = ProjectionStack(g, np.zeros((4, 64, 64), np.float32))
    rays = sample_rays(big, 10_000, 3)
    counts = np.bincount(rays.views, minlength=4)
    # without replacement from 16384: hypergeometric spread is below the binomial one
    sd = math.sqrt(10_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) < 3 * sd)


# -- rendering ---------------------------------------------------------------

def test_constant_model_closed_form(proj, geom):
    cfg = tiny_cfg()
    c = 0.37
    params = constant_params(cfg, c)
    ray = pixel_ray(geom, 1, (5, 9))
    for n_r in (8, 40):
        e = render_ray(params, proj, ray, cfg, n_r, clip_to_box=False)
        assert float(e.detach()) == pytest.approx(c * ray.length * (n_r + 1) / n_r, rel=1e-12)


def test_clipped_render_matches_box_indicator(proj, geom):
    cfg = tiny_cfg()
    c = 0.25
    params = constant_params(cfg, c)
    h = cfg.field_half_extent_mm
    for uv in [(7.5, 7.5), (2.0, 11.0), (15.0, 0.0)]:
        ray = pixel_ray(geom, 2, uv)
        ref = line_integral(lambda p: np.where(np.all(np.abs(p) <= h, axis=1), c, 0.0), ray, 192)
        assert float(render_ray(params, proj, ray, cfg, 192).detach()) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_render_refinement_consistent(proj, geom):
    cfg = tiny_cfg()
    params = random_params(cfg, 4)
    fw = prepare(normalize_projections(proj, F64), geom, params, cfg)
    rays = sample_rays(proj, 12, 5)
    p_s, p_d = torch.as_tensor(rays.p_s), torch.as_tensor(rays.p_d)
    coarse, mid, fine = (render_rays(fw, p_s, p_d, n).detach() for n in (200, 400, 3200))
    # refining the sample grid moves the estimate towards the fine value
    assert float((mid - fine).abs().mean()) < float((coarse - fine).abs().mean())


@pytest.mark.parametrize("clip, n_r", [(True, 64), (False, 8)])
def test_render_gradient_check(proj, geom, clip, n_r):
    cfg = tiny_cfg()
    params = random_params(cfg, 6)
    names = params.names("atten_head")
    with torch.no_grad():
        # far from the box the features vanish; zero biases would sit on the ReLU kink there
        params[names[1]].add_(0.2)
    fw_x = normalize_projections(proj, F64)
    rays = sample_rays(proj, 4, 8)

    def loss():
        fw = prepare(fw_x, geom, params, cfg)
        return projection_loss(fw, rays, n_r=n_r, clip_to_box=clip)

    assert dc.gradient_check(loss, [params[n] for n in names]) < 1e-5


def test_projection_loss_chunk_invariant(proj, geom):
    cfg = tiny_cfg()
    params = random_params(cfg, 9)
    fw = prepare(normalize_projections(proj, F64), geom, params, cfg)
    rays = all_rays(proj)
    whole = projection_loss(fw, rays, 32)
    parts = projection_loss(fw, rays, 32, chunk=100)
    assert float(whole) == pytest.approx(float(parts), rel=1e-12)


# -- fine-tuning -------------------------------------------------------------

def test_zero_steps_and_zero_lr_are_identity(proj):
    cfg = tiny_cfg()
    params = random_params(cfg, 10, torch.float32)
    same, log = tto_finetune(params, proj, cfg, TTOConfig(steps=0))
    assert log == []
    assert all(torch.equal(t, same[n]) for n, t in params.items())
    frozen, log = tto_finetune(params, proj, cfg, TTOConfig(steps=3, lr=0.0, rays_per_step=16, n_r=16))
    assert len(log) == 3
    assert all(torch.equal(t, frozen[n]) for n, t in params.items())


def test_stationary_point(geom):
    cfg = tiny_cfg()
    empty = ProjectionStack(geom, np.zeros((3, 16, 16), np.float32))
    params = constant_params(cfg, 0.0, torch.float32)
    tuned, log = tto_finetune(params, empty, cfg, TTOConfig(steps=3, lr=1e-4, rays_per_step=32, n_r=16))
    assert log[0][1] < 1e-10
    for n, t in params.items():
        assert float((tuned[n] - t).abs().max()) < 1e-8


def test_input_params_untouched(proj):
    cfg = tiny_cfg()
    params = random_params(cfg, 12, torch.float32)
    before = {n: t.detach().clone() for n, t in params.items()}
    tuned, _ = tto_finetune(params, proj, cfg, TTOConfig(steps=2, lr=1e-3, rays_per_step=16, n_r=16))
    assert all(torch.equal(before[n], params[n]) for n in before)
    assert any(not torch.equal(before[n], tuned[n]) for n in before)


def test_tto_reduces_projection_loss(proj):
    cfg = tiny_cfg()
    params = random_params(cfg, 13, torch.float32)
    _, log = tto_finetune(params, proj, cfg, TTOConfig(steps=30, lr=1e-5, rays_per_step=128, n_r=48), seed=2)
    assert np.mean([l for _, l in log[-10:]]) < log[0][1]


def test_tto_divergence_detected(proj):
    cfg = tiny_cfg()
    params = random_params(cfg, 14, torch.float32)
    with pytest.raises(DivergenceError):
        tto_finetune(params, proj, cfg, TTOConfig(steps=30, lr=1e6, rays_per_step=32, n_r=16))


def test_default_lr_is_tenth_of_final_training_lr():
    cfg = ModelConfig(training=TrainingConfig(epochs=100, lr0=0.01))
    assert TTOConfig().resolved_lr(cfg) == pytest.approx(0.1 * 0.01 * 0.001 ** 0.99, rel=1e-12)
    assert TTOConfig(lr=0.5).resolved_lr(cfg) == 0.5
