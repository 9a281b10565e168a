from __future__ import annotations

import hashlib

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from synthmtl.backbone import (
    AdaptationPolicy,
    BackboneSpec,
    NonFiniteError,
    ResidualBlock,
    TrainabilityMask,
    apply_adaptation_policy,
    apply_mask,
    build_backbone,
    count_trainable,
    forward_features,
    patchify,
    residual_block_forward,
    unpatchify,
)


def _hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- patchify ---------------------------------------------------------------

def test_patch_counts():
    assert patchify(torch.zeros(3, 224, 224), 16).shape == (196, 3 * 16 * 16)
    assert patchify(torch.zeros(2, 3, 32, 32), 16).shape == (2, 4, 768)


def test_patchify_non_divisible():
    with pytest.raises(ValueError):
        patchify(torch.zeros(3, 30, 32), 16)


def test_constant_image_gives_equal_patches():
    p = patchify(torch.full((3, 8, 8), 0.7), 4)
    assert torch.equal(p, p[:1].expand_as(p))


def test_patchify_row_major_oracle():
    img = torch.arange(3 * 4 * 6, dtype=torch.float64).reshape(3, 4, 6)
    p = patchify(img, 2)
    k = 0
    for py in range(2):
        for px in range(3):
            ref = img[:, 2 * py:2 * py + 2, 2 * px:2 * px + 2].reshape(-1)
            assert torch.equal(p[k], ref)
            k += 1


@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_patchify_invertible(nh, nw, p):
    img = torch.randn(2, 3, nh * p, nw * p)
    assert torch.equal(unpatchify(patchify(img, p), p, nh * p, nw * p), img)


def test_patch_embedding_equals_linear_projection():
    spec = BackboneSpec(kind="transformer", input_size=16, patch_size=4, embed_dim=8, depth=1,
                        num_heads=2, mlp_dim=16)
    emb = build_backbone(spec).blocks["patch_embed"]
    x = torch.randn(2, 3, 16, 16)
    w = emb.proj.weight.reshape(8, -1)
    manual = patchify(x, 4) @ w.T + emb.proj.bias + emb.pos_embed
    torch.testing.assert_close(emb(x), manual, atol=1e-5, rtol=1e-5)


# -- residual blocks --------------------------------------------------------

def _manual_f(x: torch.Tensor, block: ResidualBlock) -> torch.Tensor:
    gn1, _, c1, gn2, _, c2 = block.residual
    y = F.relu(F.group_norm(x, gn1.num_groups, gn1.weight, gn1.bias, gn1.eps))
    y = F.conv2d(y, c1.weight, padding=1)
    y = F.relu(F.group_norm(y, gn2.num_groups, gn2.weight, gn2.bias, gn2.eps))
    return F.conv2d(y, c2.weight, padding=1)


def test_zero_init_block_is_identity():
    block = ResidualBlock(8, zero_init=True)
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(residual_block_forward(x, block), x)


def test_zero_input_gives_f_of_zero():
    block = ResidualBlock(8)
    x = torch.zeros(1, 8, 4, 4)
    torch.testing.assert_close(residual_block_forward(x, block), block.residual(x))


def test_residual_matches_manual_oracle():
    torch.manual_seed(0)
    block = ResidualBlock(8)
    with torch.no_grad():
        for p in block.parameters():
            p.mul_(0.1)
    x = torch.randn(3, 8, 6, 6)
    torch.testing.assert_close(block(x), _manual_f(x, block) + x, atol=1e-6, rtol=0)


def test_residual_shape_mismatch():
    with pytest.raises(ValueError):
        residual_block_forward(torch.zeros(1, 4, 3, 3), ResidualBlock(8))


def test_zero_init_jacobian_is_identity_by_finite_differences():
    block = ResidualBlock(4, zero_init=True).double()
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    n = x.numel()
    eps = 1e-6
    jac = np.zeros((n, n))
    flat = x.reshape(-1)
    for i in range(n):
        d = torch.zeros(n, dtype=torch.float64)
        d[i] = eps
        plus = block((flat + d).reshape(x.shape)).reshape(-1)
        minus = block((flat - d).reshape(x.shape)).reshape(-1)
        jac[:, i] = ((plus - minus) / (2 * eps)).detach().numpy()
    err = np.linalg.norm(jac - np.eye(n)) / np.linalg.norm(np.eye(n))
    assert err <= 1e-4


# -- forward_features --------------------------------------------------------

def test_identical_images_give_identical_features():
    bb = build_backbone(BackboneSpec(input_size=16)).eval()
    x = torch.randn(1, 3, 16, 16).repeat(2, 1, 1, 1)
    f = forward_features(x, bb)
    assert torch.equal(f[0], f[1])


def test_residual_feature_shape():
    bb = build_backbone(BackboneSpec(input_size=16))
    assert forward_features(torch.randn(4, 3, 16, 16), bb).shape == (4, 64)


def test_transformer_mean_pooling_oracle():
    spec = BackboneSpec(kind="transformer", input_size=32, patch_size=16, embed_dim=8, depth=1,
                        num_heads=2, mlp_dim=8)
    bb = build_backbone(spec).eval()
    x = torch.randn(4, 3, 32, 32)
    out = forward_features(x, bb)
    assert out.shape == (4, 8)
    tokens = bb.blocks["encoder0"](bb.blocks["patch_embed"](x))
    assert tokens.shape[1] == 4
    for b in range(4):
        mean = [sum(float(tokens[b, t, d].detach()) for t in range(4)) / 4 for d in range(8)]
        np.testing.assert_allclose(out[b].detach().numpy(), mean, atol=1e-6)


def test_cls_pooling_uses_first_token():
    spec = BackboneSpec(kind="transformer", input_size=16, patch_size=8, embed_dim=8, depth=1,
                        num_heads=2, mlp_dim=8, pooling="cls")
    bb = build_backbone(spec).eval()
    x = torch.randn(2, 3, 16, 16)
    tokens = bb.blocks["encoder0"](bb.blocks["patch_embed"](x))
    torch.testing.assert_close(bb(x), tokens[:, 0])


def test_non_finite_features_are_fatal():
    bb = build_backbone(BackboneSpec(input_size=16))
    x = torch.randn(1, 3, 16, 16)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        forward_features(x, bb)


def test_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        BackboneSpec(kind="transformer", input_size=30, patch_size=8)
    with pytest.raises(ValueError):
        BackboneSpec(kind="mlp")
    spec = BackboneSpec(kind="transformer", input_size=16, patch_size=4, depth=3)
    assert BackboneSpec.from_dict(spec.to_dict()) == spec
    assert spec.blocks == ("patch_embed", "encoder0", "encoder1", "encoder2")


# -- adaptation -------------------------------------------------------------

TOY = BackboneSpec(input_size=16)


def test_policy_masks():
    lp = apply_adaptation_policy(TOY, AdaptationPolicy.LP)
    pt = apply_adaptation_policy(TOY, "PT")
    fft = apply_adaptation_policy(TOY, "fft")
    assert lp.trainable_blocks == []
    assert pt.trainable_blocks == ["block3"]
    assert fft.trainable_blocks == ["block0", "block1", "block2", "block3"]
    vit = BackboneSpec(kind="transformer", input_size=16, patch_size=8, depth=2)
    assert apply_adaptation_policy(vit, "PT").trainable_blocks == ["encoder1"]


def test_mask_must_cover_every_block():
    bb = build_backbone(TOY)
    with pytest.raises(ValueError):
        apply_mask(bb, TrainabilityMask({"block0": True}))
    with pytest.raises(ValueError):
        TrainabilityMask({"block0": True}, heads=False)


def _enumerate_trainable(bb) -> int:
    return sum(p.numel() for p in bb.parameters() if p.requires_grad)


@pytest.mark.parametrize("policy", list(AdaptationPolicy))
def test_count_trainable_matches_enumeration(policy):
    bb = build_backbone(TOY)
    mask = apply_adaptation_policy(TOY, policy)
    apply_mask(bb, mask)
    assert count_trainable(mask, bb) == _enumerate_trainable(bb)
    if policy is AdaptationPolicy.FFT:
        assert count_trainable(mask, bb) == sum(p.numel() for p in bb.parameters())
    if policy is AdaptationPolicy.PT:
        assert count_trainable(mask, bb) == sum(p.numel() for p in bb.blocks["block3"].parameters())


@given(st.lists(st.sampled_from([4, 8, 16]), min_size=2, max_size=4))
def test_count_ordering(channels):
    spec = BackboneSpec(channels=tuple(channels), input_size=16)
    bb = build_backbone(spec)
    counts = [count_trainable(apply_adaptation_policy(spec, p), bb) for p in ("LP", "PT", "FFT")]
    assert counts[0] < counts[1] < counts[2]


def test_frozen_blocks_bitwise_unchanged_after_steps():
    torch.manual_seed(0)
    bb = build_backbone(TOY)
    mask = apply_adaptation_policy(TOY, "PT")
    apply_mask(bb, mask)
    before = {n: _hash(b) for n, b in bb.blocks.items()}
    opt = torch.optim.Adam([p for p in bb.parameters() if p.requires_grad], lr=1e-2)
    for _ in range(3):
        opt.zero_grad()
        bb(torch.randn(4, 3, 16, 16)).pow(2).sum().backward()
        opt.step()
    after = {n: _hash(b) for n, b in bb.blocks.items()}
    for name in ("block0", "block1", "block2"):
        assert before[name] == after[name]
    assert before["block3"] != after["block3"]


# -- adapters -------------------------------------------------------------

def test_torchvision_resnet18_adapter():
    pytest.importorskip("torchvision")
    spec = BackboneSpec(kind="resnet18", input_size=32)
    bb = build_backbone(spec)
    assert spec.feature_dim == 512
    assert bb(torch.randn(2, 3, 32, 32)).shape == (2, 512)
    mask = apply_adaptation_policy(spec, "PT")
    assert mask.trainable_blocks == ["layer4_1"]


def test_torchvision_vit_adapter_small():
    pytest.importorskip("torchvision")
    spec = BackboneSpec(kind="vit", input_size=32, patch_size=16, depth=2, num_heads=2,
                        embed_dim=16, mlp_dim=32, pooling="cls")
    bb = build_backbone(spec)
    assert bb(torch.randn(2, 3, 32, 32)).shape == (2, 16)
    assert spec.blocks == ("patch_embed", "encoder0", "encoder1")
