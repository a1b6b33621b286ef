import numpy as np
import pytest
import torch
from torch.func import functional_call

from oracles import fd_gradcheck
from pmae.masking import make_mask, mask_index, no_mask
from pmae.model import (ModelConfig, PeriodicMAE, Tokenizer, reconstruction_targets,
                        sinusoidal_3d)

TOY = ModelConfig(D=16, enc_depth=2, dec_depth=2, heads=2, C_stem=8, T=4, H=32, W=32, seed=1)
TOL = 1e-4


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return PeriodicMAE(TOY).double()


def weights_like(shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def frames(B=1, cfg=TOY, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).uniform(size=(B, cfg.T, cfg.H, cfg.W, 3)))


def test_full_size_shapes():
    cfg = ModelConfig(T=8, H=128, W=128, C_stem=32, D=64, enc_depth=1, dec_depth=1)
    m = PeriodicMAE(cfg)
    x = torch.rand(1, 8, 128, 128, 3)
    stem = m.stem_forward(x)
    assert stem.shape == (1, 8, 32, 32, 32)
    tok = m.tokenize(stem)
    assert tok.shape == (1, 8, 8, 8, 64)
    assert m.forward_rppg(x).shape == (1, 8)


def test_encode_preserves_length(toy):
    tok = torch.randn(1, 4 * 2 * 2, 16, dtype=torch.float64)
    assert toy.encode(tok).shape == tok.shape
    assert toy.encode(tok[:, :8]).shape == (1, 8, 16)
    with pytest.raises(ValueError):
        toy.encode(tok[:, :0])


def test_stem_rejects_single_frame(toy):
    with pytest.raises(ValueError):
        toy.stem_forward(torch.rand(1, 1, 32, 32, 3, dtype=torch.float64))


def test_constant_video_has_zero_difference():
    x = torch.rand(1, 1, 16, 16, 3).expand(1, 5, 16, 16, 3)
    fused = PeriodicMAE(TOY).stem.fuse(x)
    assert torch.all(fused[..., 3:] == 0)
    assert torch.equal(fused[..., :3], x)


def test_tokenizer_zero_input_gives_pos_embed():
    tk = Tokenizer(8, 16, 4, (2, 2)).double()
    torch.nn.init.zeros_(tk.proj.bias)
    out = tk(torch.zeros(1, 4, 8, 8, 8, dtype=torch.float64))
    assert torch.allclose(out[0], tk.pos_embed.double())
    with pytest.raises(ValueError):
        tk(torch.zeros(1, 4, 6, 8, 8, dtype=torch.float64))


def test_pos_embed_injective():
    pe = sinusoidal_3d(8, 4, 4, 24).reshape(-1, 24)
    d = torch.cdist(pe, pe) + torch.eye(len(pe))
    assert d.min() > 1e-3


def test_decode_shapes_and_mask_token(toy):
    B = 2
    enc = torch.randn(B, 16, 16, dtype=torch.float64)
    pix, hid = toy.decode(enc, mask_index(no_mask(4, (2, 2))))
    assert pix.shape == (B, 4, 2, 2, 48) and hid.shape == (B, 4, 2, 2, 16)
    with pytest.raises(ValueError):
        toy.decode(enc, mask_index(no_mask(3, (2, 2))))


def test_all_masked_zeroed_decoder_is_uniform():
    m = PeriodicMAE(TOY).double()
    with torch.no_grad():
        for p in m.decoder.blocks.parameters():
            p.zero_()
        m.decoder.pos_embed.zero_()
    idx = mask_index(no_mask(4, (2, 2)))
    idx.masked_idx, idx.visible_idx = idx.visible_idx, idx.masked_idx
    pix, _ = m.decode(torch.zeros(1, 0, 16, dtype=torch.float64), idx)
    flat = pix.reshape(-1, 48)
    assert torch.allclose(flat, flat[:1].expand_as(flat))


def test_signal_head_constant(toy):
    grid = torch.randn(1, 1, 2, 2, 16, dtype=torch.float64).expand(1, 6, 2, 2, 16)
    sig = toy.signal_from_decoded(grid)
    assert sig.shape == (1, 6)
    # zero padding perturbs only the two ends
    assert torch.allclose(sig[0, 1:-1], sig[0, 1].expand(4))


def test_rppg_head_affine():
    m = PeriodicMAE(TOY).double()
    with torch.no_grad():
        m.rppg.fc2.weight.zero_()
        m.rppg.fc2.bias.fill_(0.7)
    out = m.rppg_head(torch.randn(1, 4, 2, 2, 16, dtype=torch.float64))
    assert torch.allclose(out, torch.full((1, 4), 0.7, dtype=torch.float64))
    with pytest.raises(ValueError):
        m.rppg_head(torch.randn(1, 8, 16, dtype=torch.float64))


def test_same_seed_same_params():
    a, b = PeriodicMAE(TOY), PeriodicMAE(TOY)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = PeriodicMAE(ModelConfig(**{**TOY.__dict__, "seed": 2}))
    assert not torch.equal(a.encoder.blocks[0].attn.qkv.weight, c.encoder.blocks[0].attn.qkv.weight)


def test_forward_pretrain(toy):
    plan = make_mask("periodic", 4, (2, 2), {"step": 2, "offset": 1})
    out = toy.forward_pretrain(frames(2), plan)
    assert out["pixels"].shape == (2, 4, 2, 2, 48)
    assert out["signal"].shape == (2, 4)
    assert out["index"].masked_idx.numel() == 8


def test_reconstruction_targets_normalized():
    t = reconstruction_targets(torch.rand(2, 3, 32, 32, 3, dtype=torch.float64))
    assert t.shape == (2, 3, 2, 2, 48)
    assert torch.allclose(t.mean(-1), torch.zeros(2, 3, 2, 2, dtype=torch.float64), atol=1e-9)
    raw = reconstruction_targets(torch.full((1, 2, 16, 16, 3), 0.3), normalize=False)
    assert torch.allclose(raw, torch.full_like(raw, 0.3))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(D=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(H=120)


# finite-difference checks, one per model operation

def _param_check(module, names, fn, n_probe=20):
    params = dict(module.named_parameters())
    base = {k: v.detach() for k, v in params.items()}

    def f(*vals):
        p = dict(base)
        p.update(zip(names, vals))
        return fn(lambda *a: functional_call(module, p, a))
    return fd_gradcheck(f, [base[n] for n in names], n_probe=n_probe)


def test_grad_stem(toy):
    w = weights_like((1, 4, 8, 8, 8))
    x = frames()
    assert fd_gradcheck(lambda x: (toy.stem_forward(x) * w).sum(), [x], n_probe=40) < TOL
    assert _param_check(toy.stem, ["conv1.weight", "conv2.bias"],
                        lambda call: (call(x) * w).sum()) < TOL


def test_grad_tokenize(toy):
    s = torch.randn(1, 4, 8, 8, 8, dtype=torch.float64)
    w = weights_like((1, 4, 2, 2, 16))
    assert fd_gradcheck(lambda s: (toy.tokenize(s) * w).sum(), [s], n_probe=40) < TOL
    assert _param_check(toy.tokenizer, ["proj.weight"], lambda call: (call(s) * w).sum()) < TOL


def test_grad_encode(toy):
    v = torch.randn(1, 8, 16, dtype=torch.float64)
    w = weights_like((1, 8, 16))
    assert fd_gradcheck(lambda v: (toy.encode(v) * w).sum(), [v], n_probe=40) < TOL
    assert _param_check(toy.encoder, ["blocks.0.attn.qkv.weight", "blocks.1.mlp.0.weight"],
                        lambda call: (call(v) * w).sum()) < TOL


def test_grad_decode(toy):
    plan = make_mask("periodic", 4, (2, 2), {"step": 2, "offset": 0})
    idx = mask_index(plan)
    e = torch.randn(1, 8, 16, dtype=torch.float64)
    w = weights_like((1, 4, 2, 2, 48))
    assert fd_gradcheck(lambda e: (toy.decode(e, idx)[0] * w).sum(), [e], n_probe=40) < TOL
    assert _param_check(toy.decoder, ["mask_token", "head.weight"],
                        lambda call: (call(e, idx)[0] * w).sum()) < TOL


def test_grad_signal_head(toy):
    h = torch.randn(1, 4, 2, 2, 16, dtype=torch.float64)
    w = weights_like((1, 4))
    assert fd_gradcheck(lambda h: (toy.signal_from_decoded(h) * w).sum(), [h], n_probe=40) < TOL
    assert _param_check(toy.signal_head, ["conv.weight", "conv.bias"],
                        lambda call: (call(h) * w).sum()) < TOL


def test_grad_rppg_head(toy):
    g = torch.randn(1, 4, 2, 2, 16, dtype=torch.float64)
    w = weights_like((1, 4))
    assert fd_gradcheck(lambda g: (toy.rppg_head(g) * w).sum(), [g], n_probe=40) < TOL
    assert _param_check(toy.rppg, ["fc1.weight", "fc2.weight"], lambda call: (call(g) * w).sum()) < TOL
