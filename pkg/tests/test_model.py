import numpy as np
import pytest
import torch

from callosum.model import (
    ConfigError,
    EncoderConfig,
    SurgeryError,
    count_parameters,
    export_encoder_checkpoint,
    forward,
    init_random,
    load_checkpoint_archive,
    load_snapshot,
    save_snapshot,
    snapshot_id,
    surgery_import,
    to_class_mask,
    toy_config,
)


def small_config(**kw):
    base = dict(input_px=64, embed_dim=32, depth=4, heads=2, decoder_features=4)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="module")
def toy():
    return init_random(toy_config(), seed=0).eval()


def test_forward_shape_and_range(toy):
    x = torch.rand(2, 1, 224, 224)
    out = forward(toy, x)
    assert out.shape == (2, 2, 224, 224)
    assert out.min() >= 0 and out.max() <= 1


def test_forward_zero_input_and_batch_independence(toy):
    z = forward(toy, np.zeros((1, 1, 224, 224), np.uint8))
    assert np.isfinite(z).all() and z.dtype == np.float32
    x = torch.rand(1, 1, 224, 224)
    out = forward(toy, torch.cat([x, x]))
    assert torch.allclose(out[0], out[1])


def test_forward_rejects_wrong_size(toy):
    with pytest.raises(ValueError, match="224"):
        forward(toy, torch.rand(1, 1, 128, 128))


def test_extreme_inputs_stay_in_range():
    m = init_random(small_config(), 3).eval()
    out = forward(m, torch.full((1, 1, 64, 64), 1e4))
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_init_deterministic_and_isolated():
    torch.manual_seed(99)
    before = torch.rand(1)
    a = init_random(small_config(), 7)
    torch.manual_seed(99)
    b = init_random(small_config(), 7)
    assert torch.rand(1) == before
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = init_random(small_config(), 8)
    assert not torch.equal(a.encoder.pos_embed, c.encoder.pos_embed)


@pytest.mark.parametrize(
    "kw",
    [
        {"tap_layers": (1, 2, 3, 5)},
        {"tap_layers": (1, 1, 2, 3)},
        {"tap_layers": (1, 2, 3)},
        {"input_px": 70},
        {"embed_dim": 30, "heads": 4},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_config(**kw)


def test_default_taps():
    assert EncoderConfig().tap_layers == (3, 6, 9, 12)
    assert toy_config().tap_layers == (1, 2, 3, 4)
    assert EncoderConfig().grid == 64 and toy_config().grid == 14


def _conv_block(cin, cout):
    return 9 * cin * cout + 9 * cout * cout


def _closed_form(c: EncoderConfig):
    d, p, g, f = c.embed_dim, c.token_patch_px, c.grid, c.decoder_features
    hid = int(d * c.mlp_ratio)
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * hid + hid + hid * d + d)
    enc = c.in_chans * d * p * p + d + g * g * d + c.depth * block

    def project_up(cin, cout, n):
        return 4 * cin * cout + (n - 1) * (4 * cout * cout + _conv_block(cout, cout))

    def up(cin, cout):
        return 4 * cin * cout + _conv_block(2 * cout, cout)

    dec = (_conv_block(1, f) + project_up(d, 2 * f, 3) + project_up(d, 4 * f, 2) + project_up(d, 8 * f, 1)
           + up(d, 8 * f) + up(8 * f, 4 * f) + up(4 * f, 2 * f) + up(2 * f, f) + 2 * f + 2)
    return enc + dec


@pytest.mark.parametrize("cfg", [toy_config(), small_config(embed_dim=48, heads=3, depth=8, decoder_features=6)])
def test_parameter_count_closed_form(cfg):
    assert count_parameters(init_random(cfg)) == _closed_form(cfg)


def test_to_class_mask_examples():
    prob = np.array([[[0.9, 0.3, 0.7]], [[0.1, 0.3, 0.7]]])
    assert to_class_mask(prob, 0.5).tolist() == [[1, 0, 2]]
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            to_class_mask(prob, bad)


def _fabricated_checkpoint(cfg):
    ckpt = export_encoder_checkpoint(init_random(cfg, 1))
    ckpt["image_encoder.neck.0.weight"] = torch.zeros(8, cfg.embed_dim, 1, 1)
    ckpt["image_encoder.neck.1.weight"] = torch.ones(8)
    ckpt["image_encoder.neck.1.bias"] = torch.zeros(8)
    ckpt["prompt_encoder.point_embeddings.0.weight"] = torch.zeros(1, 8)
    ckpt["prompt_encoder.mask_downscaling.0.weight"] = torch.zeros(4, 1, 2, 2)
    ckpt["mask_decoder.iou_token.weight"] = torch.zeros(1, 8)
    ckpt["image_encoder.blocks.99.attn.qkv.weight"] = torch.zeros(3)
    return ckpt


def test_surgery_partition_and_identity():
    cfg = small_config()
    ckpt = _fabricated_checkpoint(cfg)
    model, rep = surgery_import(ckpt, cfg)
    names = set(ckpt)
    parts = [set(rep.loaded), set(rep.discarded), set(rep.missing)]
    assert set.union(*parts) == names and sum(map(len, parts)) == len(names)
    assert {n for n in names if n.startswith(("prompt_encoder.", "mask_decoder.", "image_encoder.neck."))} == set(rep.discarded)
    assert rep.missing == ["image_encoder.blocks.99.attn.qkv.weight"]
    assert rep.resampled == {} and rep.uninitialized == []
    assert torch.equal(model.encoder.pos_embed, ckpt["image_encoder.pos_embed"])
    assert '"discarded"' in rep.to_text()


def test_surgery_resamples_1024_to_224():
    big = EncoderConfig(input_px=1024, embed_dim=32, depth=4, heads=2, window_size=14,
                        global_attn_layers=(1, 3), use_rel_pos=True, decoder_features=4)
    ckpt = _fabricated_checkpoint(big)
    small = EncoderConfig(**{**big.to_dict(), "input_px": 224})
    model, rep = surgery_import(ckpt, small)
    assert ckpt["image_encoder.pos_embed"].shape[1:3] == (64, 64)
    assert model.encoder.pos_embed.shape[1:3] == (14, 14)
    assert "64x64 -> 14x14" in rep.resampled["image_encoder.pos_embed"]
    assert rep.resampled["image_encoder.blocks.1.attn.rel_pos_h"] == "linear 127 -> 27"
    assert "image_encoder.blocks.0.attn.rel_pos_h" not in rep.resampled
    out = forward(model.eval(), torch.rand(1, 1, 224, 224))
    assert out.shape == (1, 2, 224, 224)


def test_pos_embed_resample_of_constant_is_constant():
    big = small_config(input_px=128)
    ckpt = export_encoder_checkpoint(init_random(big))
    ckpt["image_encoder.pos_embed"] = torch.full_like(ckpt["image_encoder.pos_embed"], 0.25)
    model, _ = surgery_import(ckpt, small_config())
    assert torch.allclose(model.encoder.pos_embed, torch.tensor(0.25))


def test_surgery_grayscale_patch_embed():
    cfg = small_config()
    ckpt = export_encoder_checkpoint(init_random(cfg, 2))
    gray, rep = surgery_import(ckpt, small_config(in_chans=1))
    rgb, _ = surgery_import(ckpt, cfg)
    x = torch.rand(1, 1, 64, 64)
    assert "image_encoder.patch_embed.proj.weight" in rep.resampled
    assert torch.allclose(gray.encoder(x)[-1], rgb.encoder(x.expand(-1, 3, -1, -1))[-1], atol=1e-5)


def test_surgery_errors():
    with pytest.raises(SurgeryError, match="no image-encoder"):
        surgery_import({"prompt_encoder.x": torch.zeros(1)}, small_config())
    ckpt = export_encoder_checkpoint(init_random(small_config()))
    with pytest.raises(SurgeryError, match="embed_dim"):
        surgery_import(ckpt, small_config(embed_dim=64, heads=2))


def test_checkpoint_archives(tmp_path):
    ckpt = _fabricated_checkpoint(small_config())
    torch.save(ckpt, tmp_path / "c.pt")
    np.savez(tmp_path / "c.npz", **{k: v.numpy() for k, v in ckpt.items()})
    for name in ("c.pt", "c.npz"):
        loaded = load_checkpoint_archive(tmp_path / name)
        assert set(loaded) == set(ckpt)
        _, rep = surgery_import(tmp_path / name, small_config())
        assert len(rep.loaded) + len(rep.discarded) + len(rep.missing) == len(ckpt)


def test_snapshot_round_trip(tmp_path):
    m = init_random(small_config(), 4)
    save_snapshot(m, tmp_path / "s.pt", {"step": 3})
    back, meta = load_snapshot(tmp_path / "s.pt")
    assert meta == {"step": 3} and back.cfg == m.cfg
    x = torch.rand(1, 1, 64, 64)
    assert torch.equal(forward(m.eval(), x), forward(back, x))
    assert snapshot_id(tmp_path / "s.pt").startswith("s.pt@")


def test_gradients_match_finite_differences_small():
    from callosum.train import bce_loss

    torch.manual_seed(0)
    m = init_random(small_config(input_px=32, embed_dim=16, heads=2, decoder_features=2), 0).double()
    x = torch.rand(1, 1, 32, 32, dtype=torch.float64)
    t = (torch.rand(1, 2, 32, 32) > 0.5).double()
    loss = bce_loss(m(x), t)
    params = dict(m.named_parameters())
    grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
    rng = np.random.default_rng(0)
    names = list(params)
    h = 1e-6
    for _ in range(20):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = bce_loss(m(x), t).item()
            p[idx] = orig - h
            down = bce_loss(m(x), t).item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[name][idx].item()
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)
