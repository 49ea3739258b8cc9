"""Central finite-difference checks of every differentiable objective (float64, eps = 1e-5)."""

import pytest
import torch
from torch.func import functional_call

from codeprior_sr import losses as L
from codeprior_sr.networks import AlignAttention

EPS = 1e-5
REL_TOL = 1e-4


def central_difference(fn, inputs, idx):
    """Numerical gradient of scalar ``fn(*inputs)`` w.r.t. ``inputs[idx]``."""
    x = inputs[idx].detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + EPS
        up = fn(*[x if j == idx else t.detach() for j, t in enumerate(inputs)]).item()
        flat[i] = orig - EPS
        down = fn(*[x if j == idx else t.detach() for j, t in enumerate(inputs)]).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * EPS)
    return grad


def check(fn, inputs, wrt):
    inputs = [t.detach().clone().requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    fn(*inputs).backward()
    for i in wrt:
        num = central_difference(fn, inputs, i)
        ana = inputs[i].grad
        rel = (ana - num).norm() / num.norm().clamp_min(1e-12)
        assert rel <= REL_TOL, f"input {i}: relative error {rel:.2e}"


def images(seed, n=2, c=3, size=8):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(1, c, size, size, generator=g, dtype=torch.float64) for _ in range(n)]


def test_esu_gradients():
    x, f = images(0)
    s = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    check(L.esu_loss, [x, f, s], wrt=(1, 2))


def test_udl_gradients():
    x, f = images(2)
    s = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    check(L.udl_loss, [x, f, s], wrt=(1, 2))


def test_l1_gradients():
    check(L.l1_loss, images(4), wrt=(0, 1))


def test_perceptual_gradients():
    phi = L.RandomFeatureExtractor(dtype=torch.float64)
    check(lambda a, b: L.perceptual_loss(a, b, phi), images(5), wrt=(1,))


def test_codebook_loss_gradients():
    g = torch.Generator().manual_seed(6)
    z_l, z_gt = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64), torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    check(L.codebook_loss, [z_l, z_gt], wrt=(0,))


def test_stage_totals_gradients():
    phi = L.RandomFeatureExtractor(dtype=torch.float64)
    hr, _ = images(7)
    g = torch.Generator().manual_seed(8)
    s = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
    z_gt = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64)

    def total(stage):
        def fn(sr, z):
            comps = {
                "codebook": L.codebook_loss(z, z_gt),
                "l1": L.l1_loss(hr, sr),
                "perceptual": L.perceptual_loss(hr, sr, phi),
                "adversarial": sr.mean() * 0.3,
                "esu": L.esu_loss(hr, sr, s),
                "udl": L.udl_loss(hr, sr, s),
            }
            return L.stage_total(stage, comps)
        return fn

    sr = images(9)[0]
    z = torch.randn(1, 4, 2, 2, generator=g, dtype=torch.float64)
    for stage in (1, 2):
        check(total(stage), [sr, z], wrt=(0, 1))


@pytest.mark.parametrize("n_hq", [1, 5, 64])
def test_align_attention_gradients(n_hq):
    torch.manual_seed(10)
    aa = AlignAttention(6, d_k=4).double()
    with torch.no_grad():
        aa.W_V.normal_()
    g = torch.Generator().manual_seed(11)
    f_lq = torch.randn(1, 64, 6, generator=g, dtype=torch.float64)
    f_hq = torch.randn(1, n_hq, 6, generator=g, dtype=torch.float64)
    w = torch.randn(1, 64, 6, generator=g, dtype=torch.float64)
    check(lambda a, b: (aa(a, b) * w).sum(), [f_lq, f_hq], wrt=(0, 1))

    for name in ("W_Q", "W_K", "W_V"):
        fn = lambda weight, name=name: (functional_call(aa, {name: weight}, (f_lq, f_hq)) * w).sum()
        check(fn, [getattr(aa, name).detach()], wrt=(0,))
