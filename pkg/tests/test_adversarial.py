import copy
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from sidadapt.adversarial import (STAGES, AdversarialError, GRLConfig, discriminator_loss, grl,
                                  grl_backward, grl_forward, make_discriminator,
                                  mapping_confusion_loss, revgrad_stage_schedule)
from sidadapt.backbone import init_params
from sidadapt.config import RevGradConfig
from sidadapt.trainer import StepRunner, effective_backbone


def logit(p):
    return math.log(p / (1 - p))


def identity_logit(z):
    return z[:, 0]


def test_grl_forward_identity():
    x = torch.randn(5, 3)
    assert torch.equal(grl_forward(x), x)
    assert torch.equal(grl_forward(torch.zeros(2, 2)), torch.zeros(2, 2))
    assert torch.equal(grl_forward(grl_forward(x)), x)
    assert torch.equal(grl(x, 0.3), x)


def test_grl_backward_definition():
    assert torch.equal(grl_backward(torch.tensor([2.0]), 1.0), torch.tensor([-2.0]))
    assert torch.equal(grl_backward(torch.randn(4), 0.0).abs(), torch.zeros(4))
    with pytest.raises(AdversarialError):
        grl_backward(torch.ones(1), -0.1)
    with pytest.raises(AdversarialError):
        grl(torch.ones(1), -1.0)


def test_grl_autograd_blocks_at_zero():
    x = torch.randn(4, requires_grad=True)
    (g,) = torch.autograd.grad((grl(x, 0.0) ** 2).sum(), x)
    assert torch.equal(g.abs(), torch.zeros(4))


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.5])
def test_grl_end_to_end_finite_difference(lam):
    def f(x):
        return torch.sin(x) * x ** 2 + torch.exp(0.3 * x)

    for x0 in (-1.3, 0.2, 2.0):
        x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(f(grl(x, lam)), x)
        h = 1e-6
        with torch.no_grad():
            fd = (f(x + h) - f(x - h)) / (2 * h)
        expected = -lam * fd.item()
        assert abs(g.item() - expected) <= 1e-4 * max(abs(expected), 1e-12) + (1e-12 if lam == 0 else 0)


def test_discriminator_loss_values():
    half = torch.zeros(3, 1, dtype=torch.float64)
    assert abs(discriminator_loss(identity_logit, half, half).item() - 2 * math.log(2)) < 1e-9
    eps = 1e-8
    s = torch.full((2, 1), logit(1 - eps), dtype=torch.float64)
    t = torch.full((2, 1), logit(eps), dtype=torch.float64)
    assert discriminator_loss(identity_logit, s, t).item() < 1e-7
    s = torch.tensor([[logit(0.8)]], dtype=torch.float64)
    t = torch.tensor([[logit(0.3)]], dtype=torch.float64)
    expected = -math.log(0.8) - math.log(0.7)
    assert abs(discriminator_loss(identity_logit, s, t).item() - expected) < 1e-6
    assert abs(expected - 0.5798) < 1e-4


def test_mapping_confusion_loss_values():
    assert mapping_confusion_loss(identity_logit, torch.full((2, 1), 60.0, dtype=torch.float64)).item() < 1e-20
    assert abs(mapping_confusion_loss(identity_logit, torch.zeros(4, 1, dtype=torch.float64)).item()
               - math.log(2)) < 1e-12
    v = mapping_confusion_loss(identity_logit, torch.tensor([[logit(0.25)]], dtype=torch.float64)).item()
    assert abs(v - 1.3863) < 1e-4 and abs(v + math.log(0.25)) < 1e-6


def test_losses_reject_empty_batches():
    with pytest.raises(AdversarialError):
        discriminator_loss(identity_logit, torch.zeros(0, 1), torch.zeros(2, 1))
    with pytest.raises(AdversarialError):
        mapping_confusion_loss(identity_logit, torch.zeros(0, 1))


def test_discriminator_outputs_one_logit_per_sample():
    D = make_discriminator(5, 16, seed=1)
    out = D(torch.randn(7, 5))
    assert out.shape == (7,) and torch.isfinite(out).all()
    assert all(torch.equal(a, b) for a, b in zip(D.parameters(), make_discriminator(5, 16, seed=1).parameters()))


def test_stage_plan(tmp_path):
    ckpt = tmp_path / "src.pt"
    ckpt.write_bytes(b"x")
    plan = revgrad_stage_schedule(source_checkpoint=ckpt)
    assert plan.stages == ("source_train", "adversarial_align", "target_eval") == STAGES
    assert plan.mode == "adda"
    with pytest.raises(FileNotFoundError):
        revgrad_stage_schedule(source_checkpoint=tmp_path / "missing.pt")
    with pytest.raises(AdversarialError):
        revgrad_stage_schedule()
    with pytest.raises(AdversarialError):
        revgrad_stage_schedule("dann", ckpt)


def test_lambda_schedule():
    cfg = GRLConfig()
    assert cfg.coefficient(0, 100) == 0.0
    assert abs(cfg.coefficient(15, 100) - 0.5) < 1e-12
    assert cfg.coefficient(30, 100) == cfg.coefficient(99, 100) == 1.0
    assert GRLConfig.constant(0.0).coefficient(50, 100) == 0.0
    with pytest.raises(AdversarialError):
        GRLConfig(initial=-1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 1000))
def test_lambda_never_negative(step, total):
    assert GRLConfig().coefficient(step, total) >= 0


@pytest.mark.parametrize("update", ["alternating", "grl"])
def test_stage2_freezes_source_and_classifier(toy_data, toy_config, update):
    cfg = toy_config.replace(variant="revgrad", revgrad=RevGradConfig(update=update))
    source = init_params(effective_backbone(cfg, toy_data.num_classes))
    before_src = copy.deepcopy(source.state_dict())
    model = copy.deepcopy(source)
    before_cls = copy.deepcopy(model.classifier.state_dict())
    runner = StepRunner(model, toy_data, cfg, "revgrad", 6, source_model=source)
    for _ in range(6):
        runner.step()
    for k, v in model.classifier.state_dict().items():
        assert torch.equal(v, before_cls[k])
    for k, v in source.state_dict().items():
        assert torch.equal(v, before_src[k])
    moved = any(not torch.equal(a, b) for a, b in zip(model.conv.parameters(), source.conv.parameters()))
    assert moved


def test_adda_needs_source_model(toy_data, toy_config):
    from sidadapt.trainer import TrainingError

    cfg = toy_config.replace(variant="revgrad")
    with pytest.raises(TrainingError):
        StepRunner(init_params(effective_backbone(cfg, 3)), toy_data, cfg, "revgrad", 1)


def test_lambda_zero_blocks_domain_gradient(toy_data, toy_config):
    cfg = toy_config.replace(variant="revgrad")
    model = init_params(effective_backbone(cfg, 3))
    D = make_discriminator(model.cfg.embedding_dim, 8, seed=0)
    emb_s = model.embed(toy_data.source.x[:4])
    emb_t = model.embed(toy_data.target.x[:4])
    loss = discriminator_loss(D, grl(emb_s, 0.0), grl(emb_t, 0.0))
    grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
    total = sum(float(g.norm()) for g in grads if g is not None)
    assert total == 0.0
    d_grads = torch.autograd.grad(discriminator_loss(D, emb_s.detach(), emb_t.detach()), list(D.parameters()))
    assert sum(float(g.norm()) for g in d_grads) > 0


def test_discriminator_and_mapping_descent():
    torch.manual_seed(0)
    D = make_discriminator(3, 16, seed=2)
    src = torch.randn(32, 3) + 1.0
    tgt = torch.randn(32, 3) - 1.0
    opt = torch.optim.SGD(D.parameters(), lr=1e-3)
    before = discriminator_loss(D, src, tgt).item()
    opt.zero_grad()
    discriminator_loss(D, src, tgt).backward()
    opt.step()
    assert discriminator_loss(D, src, tgt).item() <= before

    M = torch.nn.Linear(3, 3)
    opt_m = torch.optim.SGD(M.parameters(), lr=1e-3)
    for p in D.parameters():
        p.requires_grad_(False)
    before = mapping_confusion_loss(D, M(tgt)).item()
    opt_m.zero_grad()
    mapping_confusion_loss(D, M(tgt)).backward()
    opt_m.step()
    assert mapping_confusion_loss(D, M(tgt)).item() <= before


def test_grl_matches_explicit_min_max_direction():
    # quadratic toy: target mapping M(x) = W x, linear-logit discriminator
    g = torch.Generator().manual_seed(3)
    src = torch.randn(16, 2, generator=g, dtype=torch.float64) + 1.0
    xt = torch.randn(16, 2, generator=g, dtype=torch.float64)
    W0 = torch.randn(2, 2, generator=g, dtype=torch.float64)
    w = torch.randn(2, generator=g, dtype=torch.float64)

    def D(z):
        return z @ w + 0.1

    W = W0.clone().requires_grad_(True)
    (g_grl,) = torch.autograd.grad(discriminator_loss(D, src, grl(xt @ W.T, 1.0)), W)
    W = W0.clone().requires_grad_(True)
    (g_minmax,) = torch.autograd.grad(-discriminator_loss(D, src, xt @ W.T), W)
    cos = torch.nn.functional.cosine_similarity
    assert cos(g_grl.flatten(), g_minmax.flatten(), dim=0) >= 0.99

    # the inverted-label mapping loss weights samples by 1 - D instead of D;
    # near confusion (D close to 0.5 everywhere) the two directions coincide
    w_small = 1e-3 * w

    def D_confused(z):
        return z @ w_small

    W = W0.clone().requires_grad_(True)
    (g_grl,) = torch.autograd.grad(discriminator_loss(D_confused, src, grl(xt @ W.T, 1.0)), W)
    W = W0.clone().requires_grad_(True)
    (g_inverted,) = torch.autograd.grad(mapping_confusion_loss(D_confused, xt @ W.T), W)
    assert cos(g_grl.flatten(), g_inverted.flatten(), dim=0) >= 0.99
