import pytest
import torch

from mirrorgan.cascade import (CascadeGenerator, StageConfig, StageDiscriminator, clamp_logit, discriminate,
                               f0_transform, fi_transform, generate_image, to_flat, to_spatial)
from mirrorgan.errors import ContractError, DimensionError
from mirrorgan.glam import glam_fuse
from mirrorgan.numerics import grad_check


def _inputs(cfg, B=2, L=5, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(B, cfg.z_dim, generator=g, dtype=dtype)
    s_ca = torch.randn(B, cfg.D_ca, generator=g, dtype=dtype)
    w = torch.randn(B, cfg.D, L, generator=g, dtype=dtype)
    lengths = torch.tensor([L, max(1, L - 2)][:B])
    return z, s_ca, w, lengths


@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return CascadeGenerator(StageConfig())


def test_default_stage_structure():
    cfg = StageConfig()
    assert cfg.sides == (16, 32, 64) and cfg.M == (32, 32, 32) and cfg.m == 3
    assert cfg.N == (256, 1024, 4096)
    assert all(b == 4 * a for a, b in zip(cfg.N, cfg.N[1:]))


def test_stage_config_validation():
    with pytest.raises(ContractError):
        StageConfig(sides=(16, 48))
    with pytest.raises(ContractError):
        StageConfig(sides=(16, 32), M=(32,))


def test_forward_shapes_and_range(gen):
    z, s_ca, w, lengths = _inputs(gen.cfg)
    out = gen(z, s_ca, w, lengths)
    for i, (q, M) in enumerate(zip(gen.cfg.sides, gen.cfg.M)):
        assert out.features[i].shape == (2, M, q * q)
        assert out.images[i].shape == (2, 3, q, q)
        assert out.images[i].abs().max() <= 1.0
    assert len(out.attention) == 2
    assert out.attention[0].score_w.shape == (2, 5, 256)


def test_forward_deterministic(gen):
    args = _inputs(gen.cfg)
    a, b = gen(*args), gen(*args)
    assert all(torch.equal(x, y) for x, y in zip(a.images, b.images))


def test_noise_changes_output(gen):
    _, s_ca, w, lengths = _inputs(gen.cfg, B=1)
    imgs = [gen(torch.randn(1, 32, generator=torch.Generator().manual_seed(k)), s_ca, w, lengths).images[-1]
            for k in range(10)]
    distinct = {tuple(im.flatten()[:64].tolist()) for im in imgs}
    assert len(distinct) == 10


def test_single_sample_entry_points(gen):
    z, s_ca, w, lengths = _inputs(gen.cfg, B=1)
    batch = gen(z, s_ca, w, lengths)
    f0 = f0_transform(z[0], s_ca[0], gen)
    assert torch.allclose(f0, batch.features[0][0], atol=1e-6)
    img0 = generate_image(f0, gen, 0)
    assert torch.allclose(img0, batch.images[0][0], atol=1e-6)
    fused, _ = gen.glams[0](batch.features[0], w, s_ca, lengths)
    f1 = fi_transform(batch.features[0][0], fused[0], gen, 1)
    assert torch.allclose(f1, batch.features[1][0], atol=1e-6)
    with pytest.raises(ContractError):
        fi_transform(f0, fused[0], gen, 0)
    with pytest.raises(ContractError):
        fi_transform(f0, fused[0], gen, 3)


def test_shape_errors(gen):
    z, s_ca, w, lengths = _inputs(gen.cfg, B=1)
    with pytest.raises(DimensionError):
        f0_transform(z[0, :5], s_ca[0], gen)
    with pytest.raises(DimensionError):
        to_spatial(torch.zeros(4, 10))
    with pytest.raises(DimensionError):
        fi_transform(torch.zeros(32, 256), torch.zeros(64, 256), gen, 1)
    with pytest.raises(DimensionError):
        gen.transforms[0](torch.zeros(1, 32, 256), torch.zeros(1, 96, 1024))


def test_spatial_round_trip():
    x = torch.arange(2 * 3 * 16.0).reshape(2, 3, 16)
    assert torch.equal(to_flat(to_spatial(x)), x)
    assert to_spatial(x)[0, 0, 1, 0] == x[0, 0, 4]


def test_discriminator_outputs():
    torch.manual_seed(0)
    d = StageDiscriminator(32, 64)
    img = torch.rand(4, 3, 32, 32) * 2 - 1
    v = d(img, torch.randn(4, 64))
    assert v.uncond.shape == (4,) and v.cond.shape == (4,)
    assert ((v.uncond > 0) & (v.uncond < 1)).all() and ((v.cond > 0) & (v.cond < 1)).all()
    single = discriminate(img[0], torch.randn(64), d)
    assert single.uncond.dim() == 0
    with pytest.raises(DimensionError):
        d(torch.zeros(1, 3, 16, 16), torch.zeros(1, 64))


def test_clamp_logit_bounded_and_smooth():
    x = torch.tensor([-1e4, -3.0, 0.0, 3.0, 1e4], dtype=torch.float64, requires_grad=True)
    y = clamp_logit(x)
    assert y.abs().max() < 12.0 + 1e-9
    assert abs(y[2].item()) == 0.0
    y.sum().backward()
    assert (x.grad[1:4] > 0.9).all()


def test_discriminator_learns_to_separate():
    torch.manual_seed(0)
    d = StageDiscriminator(16, 8)
    opt = torch.optim.Adam(d.parameters(), lr=2e-3, betas=(0.5, 0.999))
    g = torch.Generator().manual_seed(0)
    real = torch.zeros(8, 3, 16, 16)
    real[:, 0] = 1.0   # red canvas
    real[:, 1:] = -1.0
    s = torch.randn(8, 8, generator=g)
    for _ in range(200):
        fake = torch.rand(8, 3, 16, 16, generator=g) * 2 - 1
        vr, vf = d(real, s), d(fake, s)
        loss = -(torch.log(vr.uncond).mean() + torch.log1p(-vf.uncond).mean()
                 + torch.log(vr.cond).mean() + torch.log1p(-vf.cond).mean())
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        vr, vf = d(real, s), d(torch.rand(8, 3, 16, 16, generator=g) * 2 - 1, s)
    assert vr.uncond.min() > 0.9 and vf.uncond.max() < 0.1
    assert vr.cond.min() > 0.9 and vf.cond.max() < 0.1


# gradient checks at toy shapes (float64) ---------------------------------------

TOY = StageConfig(sides=(4, 8), M=(3, 3), z_dim=3, D=4, D_ca=2, d_channels=(2, 2))


@pytest.fixture(scope="module")
def toy_gen():
    torch.manual_seed(1)
    return CascadeGenerator(TOY).double()


def test_grad_f0(toy_gen):
    z, s_ca, _, _ = _inputs(TOY, B=1, dtype=torch.float64)
    assert grad_check(lambda a, b: (f0_transform(a[0], b[0], toy_gen) ** 2).sum(), [z, s_ca]) < 1e-4


def test_grad_fi_and_head(toy_gen):
    g = torch.Generator().manual_seed(2)
    f_prev = torch.randn(3, 16, generator=g, dtype=torch.float64)
    att_w = torch.randn(3, 16, generator=g, dtype=torch.float64)
    att_s = torch.randn(3, 16, generator=g, dtype=torch.float64)
    wgt = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)

    def f(fp, aw, as_):
        f1 = fi_transform(fp, glam_fuse(fp, aw, as_), toy_gen, 1)
        return (generate_image(f1, toy_gen, 1) * wgt).sum()

    assert grad_check(f, [f_prev, att_w, att_s]) < 1e-4


def test_grad_end_to_end_cascade(toy_gen):
    z, s_ca, w, lengths = _inputs(TOY, B=1, L=3, dtype=torch.float64)
    wgt = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

    def f(z_, s_, w_):
        out = toy_gen(z_, s_, w_, lengths)
        return (out.images[-1] * wgt).sum() + out.images[0].sum()

    assert grad_check(f, [z, s_ca, w]) < 1e-4


def test_grad_discriminator():
    torch.manual_seed(4)
    d = StageDiscriminator(8, 3, (2, 2)).double()
    g = torch.Generator().manual_seed(4)
    img = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    s = torch.randn(1, 3, generator=g, dtype=torch.float64)

    def f(x, s_):
        v = d(x, s_)
        return torch.log(v.uncond).sum() + torch.log1p(-v.cond).sum()

    assert grad_check(f, [img, s]) < 1e-4
