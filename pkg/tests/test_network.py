import numpy as np
import pytest
import torch

from mtfas.data import N_PARSING, sample_episode
from mtfas.losses import LossWeights, depth_loss
from mtfas.meta import MetaConfig, make_optimizer, meta_step, mining_stage
from mtfas.network import (
    ECA,
    FASNet,
    FeatureMap,
    GROUPS,
    NetConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)


def _x(n, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 6, size, size, generator=g)


@pytest.mark.parametrize("size", [64, 256])
def test_shapes(size):
    cfg = NetConfig(input_size=size, widths=(8, 16, 32), asc_channels=8)
    model = build_model(cfg).eval()
    f = model.extract_features(_x(2, size))
    assert f.values.shape == (2, 32, size // 8, size // 8)
    assert [s.shape[-1] for s in f.skips] == [size // 2, size // 4]
    out = model(_x(2, size))
    assert out.depth_pred.shape == (2, 32, 32)
    assert out.parsing_logits.shape == (2, N_PARSING, size, size)
    assert out.asc_feature.shape == (2, 8, size // 8, size // 8)
    assert out.embedding.shape == (2, 32 + 8) == (2, cfg.embedding_size)
    assert out.metric_embedding.shape == (2, cfg.hidden)


def test_forward_contracts(tiny_cfg):
    model = build_model(tiny_cfg).eval()
    x = _x(3, 16)
    out = model(x)
    sm = torch.softmax(out.parsing_logits, dim=1).sum(1)
    assert torch.allclose(sm, torch.ones_like(sm), atol=1e-5)
    assert ((out.depth_pred >= 0) & (out.depth_pred <= 1)).all()
    assert ((out.live_prob > 0) & (out.live_prob < 1)).all()
    mask = out.parsing_logits.argmax(1)
    assert mask.min() >= 0 and mask.max() < N_PARSING
    again = model(x)
    for a, b in zip(out, again):
        assert torch.equal(a, b)


def test_extractor_rejects_bad_inputs(tiny_cfg):
    model = build_model(tiny_cfg)
    with pytest.raises(ValueError):
        model.extract_features(torch.zeros(1, 3, 16, 16))
    with pytest.raises(ValueError):
        model.extract_features(torch.zeros(1, 6, 20, 20))


def test_decoder_rejects_skip_mismatch(tiny_cfg):
    model = build_model(tiny_cfg)
    f = model.extract_features(_x(1, 16))
    with pytest.raises(ValueError):
        model.parse_face(FeatureMap(f.values, (f.skips[0][:, :, :4, :4], f.skips[1])))
    with pytest.raises(ValueError):
        model.parse_face(FeatureMap(f.values, f.skips[:1]))


def test_groups_partition_parameters(tiny_cfg):
    model = build_model(tiny_cfg)
    groups = model.groups()
    assert tuple(groups) == GROUPS
    ids = [id(p) for g in groups.values() for p in g.values()]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in model.parameters()}


def test_parsing_encoder_is_the_extractor(tiny_cfg, small_domains):
    model = build_model(tiny_cfg)
    assert model.parsing_encoder is model.extractor
    # the decoder owns no copy of the encoder
    enc = {id(p) for p in model.extractor.parameters()}
    assert not enc & {id(p) for p in model.parser.parameters()}
    cfg = MetaConfig(iterations=3, batch_size=4)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(0)
    for it in range(3):
        ep = sample_episode(small_domains[:3], 4, rng, 16)
        meta_step(model, opt, ep, cfg, LossWeights(), mining_stage(cfg, it))
    assert model.parsing_encoder is model.extractor
    for (n1, p1), (n2, p2) in zip(model.parsing_encoder.named_parameters(), model.extractor.named_parameters()):
        assert p1 is p2 and torch.equal(p1, p2)


def _perturb(params):
    with torch.no_grad():
        for p in params.values():
            p.add_(0.5)


def test_depth_group_does_not_touch_parsing(tiny_cfg):
    model = build_model(tiny_cfg).eval()
    x = _x(2, 16)
    before = model(x)
    _perturb(model.groups()["theta_D"])
    after = model(x)
    assert torch.equal(before.parsing_logits, after.parsing_logits)
    assert not torch.equal(before.depth_pred, after.depth_pred)


def test_meta_group_does_not_touch_dense_heads(tiny_cfg):
    model = build_model(tiny_cfg).eval()
    x = _x(2, 16)
    before = model(x)
    _perturb(model.groups()["theta_M"])
    after = model(x)
    assert torch.equal(before.parsing_logits, after.parsing_logits)
    assert torch.equal(before.depth_pred, after.depth_pred)
    assert torch.equal(before.embedding, after.embedding)
    assert not torch.equal(before.live_prob, after.live_prob)


def test_substituted_meta_params_change_prob_not_embedding(tiny_cfg):
    model = build_model(tiny_cfg).eval()
    x = _x(4, 16)
    theta = {k: v.detach() + 0.3 for k, v in model.meta_learner.named_parameters()}
    base, swapped = model(x), model(x, theta_M=theta)
    assert torch.equal(base.embedding, swapped.embedding)
    assert not torch.allclose(base.live_prob, swapped.live_prob)
    # the live parameters themselves are untouched by substitution
    assert all(not torch.equal(v, theta[k]) for k, v in model.meta_learner.named_parameters())


def test_eca_hand_oracle():
    eca = ECA(3)
    w = torch.tensor([0.5, -1.0, 2.0])
    with torch.no_grad():
        eca.conv.weight.copy_(w.view(1, 1, 3))
    consts = [0.2, -0.4, 1.0, 0.7]
    x = torch.stack([torch.full((3, 3), c) for c in consts])[None]
    padded = [0.0] + consts + [0.0]
    expect = [
        1 / (1 + np.exp(-(0.5 * padded[k] - 1.0 * padded[k + 1] + 2.0 * padded[k + 2]))) for k in range(4)
    ]
    got = eca.weights(x)[0].detach().numpy()
    np.testing.assert_allclose(got, expect, rtol=1e-6)
    assert ((got > 0) & (got < 1)).all()
    out = eca(x)
    assert torch.allclose(out, x * eca.weights(x)[:, :, None, None])


def test_attention_skip_of_zeros_is_zero():
    eca = ECA(3)
    assert torch.equal(eca(torch.zeros(2, 5, 4, 4)), torch.zeros(2, 5, 4, 4))


def test_attention_skip_channels(tiny_cfg):
    model = build_model(tiny_cfg)
    f = model.extract_features(_x(1, 16))
    _, last = model.parse_face(f)
    assert model.attention_skip(last, 2).shape == (1, tiny_cfg.asc_channels, 2, 2)


def test_classification_gradient_reaches_decoder(tiny_cfg):
    model = build_model(tiny_cfg)
    out = model(_x(4, 16))
    out.logit.sum().backward()
    for name in ("up1", "up2", "up3", "asc_conv", "eca"):
        norm = sum(p.grad.abs().sum() for p in getattr(model.parser, name).parameters())
        assert norm > 0, name
    # the parsing classifier only feeds the parsing logits, not the classifier path
    assert model.parser.classifier.weight.grad is None


def test_untrained_depth_loss_on_spoof_is_finite_positive(tiny_cfg):
    model = build_model(tiny_cfg)
    d = model.estimate_depth(model.extract_features(_x(1, 16)))
    loss = depth_loss(d, torch.zeros_like(d))
    assert torch.isfinite(loss) and loss > 0


def test_single_sample_depth_overfit():
    from mtfas.data import SynthConfig, generate_synthetic_domain

    ds = generate_synthetic_domain(SynthConfig(image_size=64, samples_per_domain=4, seed=0), 0)
    arr = ds.arrays(64)
    model = build_model(NetConfig(), seed=0)
    x, gt = torch.tensor(arr.inputs[:1]), torch.tensor(arr.depth[:1])
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _ in range(200):
        opt.zero_grad()
        depth_loss(model.estimate_depth(model.extract_features(x)), gt).backward()
        opt.step()
    mae = (model.estimate_depth(model.extract_features(x)) - gt).abs().mean().item()
    assert mae < 0.05


def test_finite_outputs_over_random_configs():
    rng = np.random.default_rng(0)
    for i in range(100):
        size = int(rng.choice([8, 16, 24, 32]))
        widths = tuple(int(v) for v in rng.integers(2, 12, size=3))
        cfg = NetConfig(input_size=size, widths=widths, asc_channels=int(rng.integers(1, 8)), hidden=int(rng.integers(1, 16)))
        model = build_model(cfg, seed=i).eval()
        g = torch.Generator().manual_seed(i)
        out = model(torch.rand(2, 6, size, size, generator=g))
        assert all(torch.isfinite(t).all() for t in out)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, tiny_cfg):
    model = build_model(tiny_cfg, seed=3)
    opt = torch.optim.Adam(model.parameters())
    model(_x(2, 16)).logit.sum().backward()
    opt.step()
    rng_state = np.random.default_rng(5).bit_generator.state
    save_checkpoint(tmp_path / "ck", model, step=7, optimizer=opt, rng_state=rng_state)
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["step"] == 7 and meta["rng_state"] == rng_state
    assert loaded.cfg == tiny_cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    assert meta["optimizer_state"]["state"].keys() == opt.state_dict()["state"].keys()
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == [
        "meta.json",
        "optimizer.pt",
        "theta_D.pt",
        "theta_F.pt",
        "theta_M.pt",
        "theta_S.pt",
    ]


def test_fasnet_default_config():
    cfg = FASNet().cfg
    assert cfg.widths == (32, 64, 128) and cfg.hidden == 128 and cfg.eca_kernel == 3
