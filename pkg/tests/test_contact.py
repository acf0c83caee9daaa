import numpy as np
import pytest
import torch

from hoigen.contact import (
    CONTACT_LATENT_DIM,
    ContactDecoder,
    ContactEncoder,
    ContactError,
    ContactNet,
    PointFeatureNet,
    build_gt_contact_map,
    contact_losses,
    decoder_input_width,
    reparameterize,
)

torch.set_num_threads(1)


def test_decoder_input_width():
    assert decoder_input_width(1024) == 1024 + 64 + 1 + 512 + 64 == 1665
    assert decoder_input_width(128) == 1665  # per-point width is N-independent


def test_point_feature_shapes():
    torch.manual_seed(0)
    net = PointFeatureNet().eval()
    pts = torch.randn(2, 100, 3)
    g, loc = net(pts)
    assert g.shape == (2, 1024)
    assert loc.shape == (2, 100, 64)
    with pytest.raises(ContactError):
        net(torch.randn(2, 100, 4))


def test_input_transform_starts_at_identity():
    torch.manual_seed(0)
    net = PointFeatureNet().eval()
    mat = net.stn(torch.randn(3, 50, 3))
    eye = torch.eye(3).expand(3, 3, 3)
    assert torch.allclose(mat, eye, atol=1e-5)


def test_point_features_permutation_invariant_and_equivariant():
    torch.manual_seed(0)
    net = PointFeatureNet().eval()
    pts = torch.randn(1, 64, 3)
    perm = torch.randperm(64)
    g1, loc1 = net(pts)
    g2, loc2 = net(pts[:, perm])
    assert torch.allclose(g1, g2, atol=1e-5)        # global: invariant
    assert torch.allclose(loc1[:, perm], loc2, atol=1e-5)  # local: equivariant


def test_encoder_latent_shapes():
    torch.manual_seed(0)
    enc = ContactEncoder().eval()
    mu, logvar = enc(torch.randn(3, 80, 3), torch.rand(3, 80))
    assert mu.shape == (3, CONTACT_LATENT_DIM)
    assert logvar.shape == (3, CONTACT_LATENT_DIM)


def test_reparameterize_deterministic_eps():
    mu = torch.tensor([[1.0, 2.0]])
    logvar = torch.log(torch.tensor([[4.0, 9.0]]))
    eps = torch.ones(1, 2)
    z = reparameterize(mu, logvar, eps)
    assert torch.allclose(z, torch.tensor([[3.0, 5.0]]))


def test_decoder_outputs_probabilities():
    torch.manual_seed(0)
    dec = ContactDecoder().eval()
    out = dec(torch.randn(2, 1024), torch.randn(2, 40, 64), torch.rand(2),
              torch.randn(2, 512), torch.randn(2, 64))
    assert out.shape == (2, 40)
    assert ((out >= 0) & (out <= 1)).all()


def test_contact_net_paths():
    torch.manual_seed(0)
    net = ContactNet(n_points=32).eval()
    pts = torch.randn(2, 32, 3)
    scale = torch.rand(2)
    text = torch.randn(2, 512)
    gt = (torch.rand(2, 32) > 0.5).float()
    out = net(pts, scale, text, gt_contact=gt)
    assert out["mu"] is not None and out["contact"].shape == (2, 32)
    out_prior = net(pts, scale, text)
    assert out_prior["mu"] is None
    # explicit z is honored deterministically
    z = torch.randn(2, CONTACT_LATENT_DIM)
    a = net(pts, scale, text, z=z)["contact"]
    b = net(pts, scale, text, z=z)["contact"]
    assert torch.equal(a, b)
    with pytest.raises(ContactError):
        net(torch.randn(2, 33, 3), scale, text)


def test_gt_contact_map_oracle():
    # object points on a line; hand vertex near points 0 and 1 at one frame
    P = torch.zeros(2, 4, 3)
    P[:, :, 0] = torch.tensor([0.0, 0.05, 0.10, 0.50])
    hands = [torch.tensor([[0.0, 0.015, 0.0]]),  # frame 0: near points 0,1
             torch.zeros(0, 3)]                  # frame 1: no hand
    m = build_gt_contact_map(P, hands, tau=0.02)
    assert m.tolist() == [1.0, 0.0, 0.0, 0.0]
    hands2 = [torch.tensor([[0.04, 0.0, 0.0]]), torch.tensor([[0.5, 0.0, 0.0]])]
    m2 = build_gt_contact_map(P, hands2, tau=0.02)
    assert m2.tolist() == [0.0, 1.0, 0.0, 1.0]
    # boundary: distance exactly tau is contact
    m3 = build_gt_contact_map(P[:1], [torch.tensor([[0.02, 0.0, 0.0]])], tau=0.02)
    assert m3[0] == 1.0


def test_contact_losses_closed_forms():
    # uniform 0.5 prediction vs half-ones target: bce = ln 2
    pred = torch.full((2, 10), 0.5)
    target = torch.cat([torch.ones(2, 5), torch.zeros(2, 5)], dim=1)
    bce, dice, kl, total = contact_losses(pred, target, None, None)
    assert bce.item() == pytest.approx(np.log(2), rel=1e-6)
    assert kl.item() == 0.0
    # perfect overlap: dice -> 0
    _, dice2, _, _ = contact_losses(target.clamp(1e-4, 1 - 1e-4), target, None, None)
    assert dice2.item() == pytest.approx(0.0, abs=1e-3)
    # standard-normal posterior: kl = 0
    mu = torch.zeros(2, 64)
    logvar = torch.zeros(2, 64)
    _, _, kl3, _ = contact_losses(pred, target, mu, logvar)
    assert kl3.item() == pytest.approx(0.0, abs=1e-7)
    # kl closed form: mu=1, var=1 -> 0.5 per dim
    _, _, kl4, _ = contact_losses(pred, target, torch.ones(2, 64), logvar)
    assert kl4.item() == pytest.approx(32.0, rel=1e-5)


def test_contact_losses_total_weighting():
    pred = torch.full((1, 4), 0.5)
    target = torch.ones(1, 4)
    mu = torch.ones(1, 64)
    logvar = torch.zeros(1, 64)
    bce, dice, kl, total = contact_losses(pred, target, mu, logvar, kl_weight=0.01)
    assert total.item() == pytest.approx((bce + dice + 0.01 * kl).item(), rel=1e-6)


def test_contact_losses_reject_out_of_range():
    with pytest.raises(ContactError):
        contact_losses(torch.full((1, 3), 1.5), torch.ones(1, 3), None, None)
    with pytest.raises(ContactError):
        contact_losses(torch.full((1, 3), 0.5), torch.full((1, 3), -1.0), None, None)


def test_contact_loss_gradients_flow():
    torch.manual_seed(0)
    net = ContactNet(n_points=16)
    net.train()
    pts = torch.randn(2, 16, 3)
    gt = (torch.rand(2, 16) > 0.5).float()
    out = net(pts, torch.rand(2), torch.randn(2, 512), gt_contact=gt)
    _, _, _, total = contact_losses(out["contact"], gt, out["mu"], out["logvar"])
    total.backward()
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    assert grads and all(torch.isfinite(g).all() for g in grads)


def test_gt_contact_map_empty_sequence_raises():
    with pytest.raises(ContactError):
        build_gt_contact_map(torch.zeros(0, 4, 3), [])
