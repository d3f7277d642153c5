import numpy as np
import pytest
import torch

from rmaunet.errors import (
    BadMagic,
    ChannelMismatch,
    MissingHead,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)
from rmaunet.model import (
    DoubleConv,
    ModelConfig,
    PooledAttention,
    ResConv,
    RmauNet,
    TriAxisAttention,
    ensemble_masks,
    force_identity_gates,
    load_checkpoint,
    save_checkpoint,
)

from oracles import oracle_conv3x3

FULL_PARAM_COUNT = 28_973_041  # pinned regression value for the default config

TOY = ModelConfig(
    in_channels=3, base_filters=4, depth=1, head_resolutions=(64, 32, 16)
)


def _toy_model(seed=0, **overrides) -> RmauNet:
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**TOY.__dict__, **overrides})
    return RmauNet(cfg)


# ------------------------------------------------------------------- config


def test_config_defaults():
    cfg = ModelConfig()
    assert cfg.in_channels == 23
    assert cfg.head_resolutions == (256, 128, 64)
    assert cfg.input_size == 128


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(in_channels=-1),
        dict(depth=0),
        dict(head_resolutions=(256, 128)),
        dict(head_resolutions=(256, 128, 32)),
        dict(head_resolutions=(64, 128, 256)),
        dict(head_resolutions=(120, 60, 30)),  # 60 not divisible by 2^4
        dict(mode="classify"),
        dict(block="inception"),
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ShapeMismatch):
        ModelConfig(**kwargs)


def test_unresolved_in_channels_cannot_build():
    with pytest.raises(ShapeMismatch):
        RmauNet(ModelConfig(in_channels=0))


# ------------------------------------------------------------------- blocks


def test_double_conv_shape():
    out = DoubleConv(8, 16)(torch.randn(2, 8, 16, 16))
    assert out.shape == (2, 16, 16, 16)


def test_res_conv_shape():
    out = ResConv(8, 16)(torch.randn(2, 8, 16, 16))
    assert out.shape == (2, 16, 16, 16)


def test_conv_matches_brute_force_oracle():
    torch.manual_seed(1)
    conv = torch.nn.Conv2d(1, 1, 3, padding=1)
    x = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    conv.double()
    out = conv(x)[0, 0].detach().numpy()
    oracle = oracle_conv3x3(
        x[0, 0].numpy(),
        conv.weight[0, 0].detach().numpy(),
        float(conv.bias.detach()[0]),
    )
    assert np.allclose(out, oracle, atol=1e-5)


def test_double_conv_zero_weights_zero_output():
    block = DoubleConv(2, 3).eval()
    with torch.no_grad():
        for mod in block.modules():
            if isinstance(mod, torch.nn.Conv2d):
                mod.weight.zero_()
                mod.bias.zero_()
    out = block(torch.randn(1, 2, 8, 8))
    assert not out.abs().any()


def test_res_conv_zero_branches_is_shortcut():
    torch.manual_seed(2)
    block = ResConv(4, 4).eval()
    with torch.no_grad():
        for mod in block.modules():
            if isinstance(mod, torch.nn.Conv2d):
                mod.weight.zero_()
                mod.bias.zero_()
    x = torch.randn(1, 4, 8, 8)
    assert torch.equal(block(x), x)  # shortcut is Identity when channels match


def test_res_conv_gradients_match_finite_differences():
    torch.manual_seed(3)
    block = ResConv(2, 3).double().eval()  # eval: BN stats frozen, grads well-defined
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    block.zero_grad()
    block(x).sum().backward()

    for name, param in block.named_parameters():
        flat = param.detach().reshape(-1)
        grad = param.grad.reshape(-1)
        for idx in range(flat.numel()):
            h = 1e-6 * (1.0 + abs(float(flat[idx])))
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(block(x).sum())
                flat[idx] = orig - h
                down = float(block(x).sum())
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = float(grad[idx])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            assert rel < 1e-3, f"{name}[{idx}]: analytic {an} vs fd {fd}"


# ---------------------------------------------------------------- attention


def _np_mha(x, layer):
    """Independent numpy multi-head attention trace of PooledAttention."""
    heads, dk = layer.heads, layer.key_dim

    def lin(mod, v):
        return v @ mod.weight.detach().numpy().T + mod.bias.detach().numpy()

    q, k, v = lin(layer.q, x), lin(layer.k, x), lin(layer.v, x)
    t = x.shape[0]
    outs = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        scores = np.exp(scores - scores.max(axis=1, keepdims=True))
        scores /= scores.sum(axis=1, keepdims=True)
        outs.append(scores @ v[:, sl])
    att = np.concatenate(outs, axis=1)
    assert att.shape == (t, heads * dk)
    return lin(layer.out, att)


def test_pooled_attention_matches_numpy_trace():
    torch.manual_seed(4)
    layer = PooledAttention(dim=5, heads=2, key_dim=3).double().eval()
    x = torch.randn(1, 4, 5, dtype=torch.float64)
    got = layer(x)[0].detach().numpy()
    want = _np_mha(x[0].numpy(), layer)
    assert np.allclose(got, want, atol=1e-5)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_tri_axis_attention_matches_hand_trace():
    torch.manual_seed(5)
    att = TriAxisAttention(channels=2, height=2, width=2, heads=2, key_dim=3)
    att = att.double().eval()
    x = torch.randn(1, 2, 2, 2, dtype=torch.float64)
    got = att(x)[0].detach().numpy()

    a = x[0].numpy()  # (C, H, W)
    gate_c = _sigmoid(
        (_np_mha(a.max(axis=0), att.att_c_max) + _np_mha(a.mean(axis=0), att.att_c_avg)) / 2
    )  # (H, W)
    gate_h = _sigmoid(
        (_np_mha(a.max(axis=1), att.att_h_max) + _np_mha(a.mean(axis=1), att.att_h_avg)) / 2
    )  # (C, W)
    gate_w = _sigmoid(
        (_np_mha(a.max(axis=2), att.att_w_max) + _np_mha(a.mean(axis=2), att.att_w_avg)) / 2
    )  # (C, H)
    want = a * gate_c[None, :, :] * gate_h[:, None, :] * gate_w[:, :, None]
    assert np.allclose(got, want, atol=1e-5)


def test_tri_axis_attention_preserves_shape_and_gates_in_unit_range():
    torch.manual_seed(6)
    att = TriAxisAttention(8, 4, 4, heads=2, key_dim=4).eval()
    x = torch.randn(2, 8, 4, 4)
    out = att(x)
    assert out.shape == x.shape
    # out = x * g with g in (0,1]: magnitudes shrink, signs survive
    assert (out.abs() <= x.abs() + 1e-6).all()
    assert (out * x >= 0).all()


def test_forced_identity_gates_make_attention_transparent():
    torch.manual_seed(7)
    model = _toy_model(seed=7).eval()
    force_identity_gates(model)
    att = [m for m in model.modules() if isinstance(m, TriAxisAttention)][0]
    x = torch.randn(1, 4, 32, 32)
    assert torch.allclose(att(x), x, atol=1e-6)


def test_gated_model_with_identity_gates_equals_attention_free_model():
    model_att = _toy_model(seed=8)
    force_identity_gates(model_att)
    model_att.eval()

    model_plain = RmauNet(ModelConfig(**{**TOY.__dict__, "attention": False}))
    plain_state = {
        k: v for k, v in model_att.state_dict().items() if ".att." not in k
    }
    model_plain.load_state_dict(plain_state)
    model_plain.eval()

    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        a = model_att(x)
        b = model_plain(x)
    for res in a["masks"]:
        assert torch.allclose(a["masks"][res], b["masks"][res], atol=1e-5)
    assert torch.allclose(a["detect_logit"], b["detect_logit"], atol=1e-5)


# ------------------------------------------------------------------ forward


def test_toy_forward_shapes():
    model = _toy_model().eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 32, 32))
    assert set(out["masks"]) == {64, 32, 16}
    assert out["masks"][64].shape == (2, 64, 64)
    assert out["masks"][32].shape == (2, 32, 32)
    assert out["masks"][16].shape == (2, 16, 16)
    assert out["detect_logit"].shape == (2,)


def test_forward_probabilities_in_unit_interval():
    model = _toy_model(seed=9).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 32, 32) * 5)
    for mask in out["masks"].values():
        assert (mask >= 0).all() and (mask <= 1).all()


def test_double_resolution_head_is_nearest_upsample_of_native_head():
    model = _toy_model(seed=10).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 32, 32))
    hi, mid = out["masks"][64], out["masks"][32]
    assert torch.equal(hi, mid.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2))


def test_depth2_half_head_reads_penultimate_decoder_level():
    torch.manual_seed(11)
    model = RmauNet(
        ModelConfig(in_channels=3, base_filters=4, depth=2, head_resolutions=(64, 32, 16))
    ).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 32, 32))
    assert out["masks"][16].shape == (1, 16, 16)


def test_forward_rejects_wrong_channels():
    model = _toy_model()
    with pytest.raises(ChannelMismatch):
        model(torch.randn(1, 5, 32, 32))


def test_forward_rejects_wrong_size():
    model = _toy_model()
    with pytest.raises(ShapeMismatch):
        model(torch.randn(1, 3, 16, 16))


def test_toy_smoke_forward_backward_no_nan():
    model = _toy_model(seed=12)
    out = model(torch.randn(2, 3, 32, 32))
    loss = sum(m.mean() for m in out["masks"].values()) + out["detect_logit"].sum()
    loss.backward()
    for name, param in model.named_parameters():
        assert torch.isfinite(param.grad).all(), name


def test_final_map_channel_rule():
    # decoder level i outputs 2 * base * 2^i, so the detection head reads 2*base
    for base, depth in ((4, 1), (4, 2), (8, 3)):
        model = RmauNet(
            ModelConfig(
                in_channels=3,
                base_filters=base,
                depth=depth,
                head_resolutions=(64, 32, 16),
            )
        )
        assert model.detect.in_features == 2 * base


def test_double_block_ablation_builds_and_runs():
    torch.manual_seed(13)
    model = RmauNet(ModelConfig(**{**TOY.__dict__, "block": "double"})).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 32, 32))
    assert out["masks"][32].shape == (1, 32, 32)


def test_attention_free_model_has_fewer_parameters():
    gated = _toy_model(seed=14)
    plain = RmauNet(ModelConfig(**{**TOY.__dict__, "attention": False}))
    assert plain.parameter_count() < gated.parameter_count()


@pytest.mark.slow
def test_full_config_forward_shapes_and_parameter_count():
    torch.manual_seed(15)
    model = RmauNet(ModelConfig()).eval()
    assert model.parameter_count() == FULL_PARAM_COUNT
    assert RmauNet(ModelConfig()).parameter_count() == FULL_PARAM_COUNT
    with torch.no_grad():
        out = model(torch.randn(2, 23, 128, 128))
    assert out["masks"][256].shape == (2, 256, 256)
    assert out["masks"][128].shape == (2, 128, 128)
    assert out["masks"][64].shape == (2, 64, 64)
    assert out["detect_logit"].shape == (2,)


# ----------------------------------------------------------------- ensemble


def test_ensemble_constant_maps():
    masks = {
        64: np.full((64, 64), 0.3, np.float32),
        32: np.full((32, 32), 0.3, np.float32),
        16: np.full((16, 16), 0.3, np.float32),
    }
    assert np.allclose(ensemble_masks(masks), 0.3)


def test_ensemble_uniform_levels_average():
    masks = {
        64: np.full((64, 64), 0.2, np.float32),
        32: np.full((32, 32), 0.5, np.float32),
        16: np.full((16, 16), 0.8, np.float32),
    }
    assert np.allclose(ensemble_masks(masks), 0.5)


def test_ensemble_hand_example():
    hi = np.zeros((4, 4), np.float32)
    hi[:2, :2] = 1.0
    mid = np.full((2, 2), 0.5, np.float32)
    lo = np.array([[0.2]], np.float32)
    out = ensemble_masks({4: hi, 2: mid, 1: lo})
    want = np.array([[1.7, 0.7], [0.7, 0.7]]) / 3.0
    assert np.allclose(out, want, atol=1e-6)


def test_ensemble_output_within_input_range():
    rng = np.random.default_rng(16)
    masks = {
        64: rng.random((64, 64)).astype(np.float32),
        32: rng.random((32, 32)).astype(np.float32),
        16: rng.random((16, 16)).astype(np.float32),
    }
    out = ensemble_masks(masks)
    lo = min(m.min() for m in masks.values())
    hi = max(m.max() for m in masks.values())
    assert out.min() >= lo - 1e-6 and out.max() <= hi + 1e-6
    assert out.shape == (32, 32)
    assert out.dtype == np.float32


def test_ensemble_rejects_missing_or_misshapen_heads():
    with pytest.raises(MissingHead):
        ensemble_masks({64: np.zeros((64, 64)), 32: np.zeros((32, 32))})
    with pytest.raises(MissingHead):
        ensemble_masks(
            {64: np.zeros((64, 64)), 32: np.zeros((32, 32)), 8: np.zeros((8, 8))}
        )


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_exact(tmp_path):
    model = _toy_model(seed=17)
    path = tmp_path / "m.rmck"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.cfg == model.cfg
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            assert back.state_dict()[name].item() == 0
        else:
            assert torch.equal(back.state_dict()[name], tensor), name


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    model = _toy_model(seed=18)
    save_checkpoint(model, tmp_path / "a.rmck")
    save_checkpoint(load_checkpoint(tmp_path / "a.rmck"), tmp_path / "b.rmck")
    assert (tmp_path / "a.rmck").read_bytes() == (tmp_path / "b.rmck").read_bytes()


def test_checkpoint_roundtrip_preserves_forward(tmp_path):
    model = _toy_model(seed=19).eval()
    save_checkpoint(model, tmp_path / "m.rmck")
    back = load_checkpoint(tmp_path / "m.rmck").eval()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        a, b = model(x), back(x)
    for res in a["masks"]:
        assert torch.equal(a["masks"][res], b["masks"][res])
    assert torch.equal(a["detect_logit"], b["detect_logit"])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.rmck"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(BadMagic):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    model = _toy_model(seed=20)
    path = tmp_path / "m.rmck"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 8])
    with pytest.raises(TruncatedFile):
        load_checkpoint(path)


def test_checkpoint_unsupported_version(tmp_path):
    model = _toy_model(seed=21)
    path = tmp_path / "m.rmck"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(path)
