"""Dual-branch model: embeddings, encoder, decoder, text fusion, heads."""

import numpy as np
import pytest

from abutmesh import autodiff as ad
from abutmesh.losses import chamfer_l2, face_feature_mse
from abutmesh.network import AbutmentParams, DualBranchNet, ModelConfig
from abutmesh.patches import PatchFeatureSet, mask_patches
from abutmesh.remesh import patch_vertex_count
from abutmesh.text import TextEmbedding

RNG = np.random.default_rng(31337)


def tiny_config(**overrides):
    base = dict(
        embed_dim=8,
        encoder_blocks=1,
        decoder_blocks=1,
        heads=2,
        text_width=16,
        base_faces=6,
        levels=1,
        mask_ratio=0.5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_pfs(cfg: ModelConfig, f_n: int | None = None, seed=0) -> PatchFeatureSet:
    rng = np.random.default_rng(seed)
    f_n = f_n if f_n is not None else cfg.base_faces
    return PatchFeatureSet(
        features=rng.standard_normal((f_n, cfg.feature_width)),
        centers=rng.standard_normal((f_n, 3)) * 10,
        vertex_rel=rng.standard_normal((f_n, patch_vertex_count(cfg.levels), 3)),
    )


def random_text(cfg: ModelConfig, seed=0, tokens=1) -> TextEmbedding:
    rng = np.random.default_rng(seed)
    return TextEmbedding(rng.standard_normal((tokens, cfg.text_width)))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(mask_ratio=1.5)
    cfg = tiny_config()
    assert cfg.feature_width == 4 * 13
    assert cfg.verts_per_patch == 6
    assert cfg.out_dim == cfg.embed_dim


def test_abutment_params_array_roundtrip():
    p = AbutmentParams(2.0, 4.5, 6.0)
    assert np.array_equal(p.as_array(), [2.0, 4.5, 6.0])
    assert AbutmentParams.from_array(p.as_array()) == p


def test_unique_parameter_names_and_namespaces():
    model = DualBranchNet(tiny_config(), seed=0)
    names = list(model.parameters())
    assert len(names) == len(set(names))
    for prefix in ("embed.", "enc.", "dec.", "fuse.", "reg."):
        assert any(n.startswith(prefix) for n in names)
    specs = model.parameter_specs()
    assert specs["embed.mlp1_w"] == "trunc_normal"
    assert specs["enc.0.ln1_g"] == "ones"
    assert specs["reg.head_t_b"] == "zeros"


def test_embed_patches_shape_and_width_check():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    x = model.embed_patches(random_pfs(cfg))
    assert x.shape == (6, 8)
    bad = random_pfs(cfg)
    bad.features = bad.features[:, :-1]
    with pytest.raises(ValueError, match="feature width"):
        model.embed_patches(bad)


def test_embed_zero_inputs_zero_biases_gives_zero():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)  # biases are zero-initialized
    pfs = PatchFeatureSet(
        features=np.zeros((6, cfg.feature_width)),
        centers=np.zeros((6, 3)),
        vertex_rel=np.zeros((6, cfg.verts_per_patch, 3)),
    )
    assert np.array_equal(model.embed_patches(pfs).data, np.zeros((6, 8)))


def test_identity_initialized_blocks_pass_input_through():
    cfg = tiny_config(encoder_blocks=2)
    model = DualBranchNet(cfg, seed=1)
    for i in range(2):
        for name in (f"enc.{i}.attn_wo", f"enc.{i}.attn_bo", f"enc.{i}.mlp_w2", f"enc.{i}.mlp_b2"):
            model[name].data = np.zeros_like(model[name].data)
    x = ad.Tensor(RNG.standard_normal((5, 8)))
    out = model.encode(x)
    assert np.array_equal(out.data, x.data)


def test_encoder_accepts_full_and_visible_batches():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    full = model.encode(ad.Tensor(RNG.standard_normal((6, 8))))
    vis = model.encode(ad.Tensor(RNG.standard_normal((3, 8))))
    assert full.shape == (6, 8) and vis.shape == (3, 8)


def test_encoder_grad_check_two_blocks():
    cfg = tiny_config(encoder_blocks=2)
    model = DualBranchNet(cfg, seed=2)
    x = ad.Tensor(RNG.standard_normal((4, 8)), requires_grad=True)
    err = ad.grad_check(lambda a: ad.mean_(ad.mul(model.encode(a), model.encode(a))), [x])
    assert err < 1e-3


def test_decode_reconstruct_shapes():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    mask = mask_patches(pfs, 0.5, seed=4)
    x = model.embed_patches(pfs)
    f_vis = model.encode(ad.take(x, mask.visible, axis=0))
    rec = model.decode_reconstruct(f_vis, mask, pfs.centers)
    assert rec.vertices.shape == (3, 6, 3)
    assert rec.face_features.shape == (3, 4, 13)
    assert np.array_equal(rec.masked_indices, mask.masked)


def test_decode_reconstruct_empty_mask():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    mask = mask_patches(pfs, 0.0, seed=4)
    x = model.embed_patches(pfs)
    f_vis = model.encode(ad.take(x, mask.visible, axis=0))
    rec = model.decode_reconstruct(f_vis, mask, pfs.centers)
    assert rec.vertices.shape == (0, 6, 3)
    assert rec.face_features.shape == (0, 4, 13)


def test_mask_token_receives_gradient():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    mask = mask_patches(pfs, 0.5, seed=4)
    rec = model.forward_reconstruction(pfs, mask)
    l_cd = ad.mean_(chamfer_l2(rec.vertices, pfs.vertex_rel[mask.masked]))
    l_re = l_cd + face_feature_mse(rec.face_features, pfs.per_face_features[mask.masked])
    l_re.backward()
    g = model["dec.mask_token"].grad
    assert g is not None and np.abs(g).max() > 0


def test_translation_only_affects_position_term():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    shifted = PatchFeatureSet(
        features=pfs.features.copy(),  # relative face centers: unchanged
        centers=pfs.centers + np.array([5.0, -2.0, 1.0]),
        vertex_rel=pfs.vertex_rel.copy(),
    )
    x1 = model.embed_patches(pfs).data
    x2 = model.embed_patches(shifted).data
    pos_w = model["embed.pos_w"].data
    expect = x1 + np.array([5.0, -2.0, 1.0]) @ pos_w
    assert np.allclose(x2, expect, atol=1e-9)


# -- text fusion


def test_fuse_shapes():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    f_e = ad.Tensor(RNG.standard_normal((6, 8)))
    f_o, f_ca = model.fuse_text(f_e, random_text(cfg))
    assert f_ca.shape == (6, 8)
    assert f_o.shape == (1, cfg.out_dim)


def test_fuse_zero_text_is_identity_on_features():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)  # projection bias is zero-initialized
    f_e = ad.Tensor(RNG.standard_normal((6, 8)))
    _, f_ca = model.fuse_text(f_e, TextEmbedding(np.zeros((1, cfg.text_width))))
    assert np.array_equal(f_ca.data, f_e.data)


def test_fuse_single_token_is_rank_one_shift():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    f_e = ad.Tensor(RNG.standard_normal((6, 8)))
    _, f_ca = model.fuse_text(f_e, random_text(cfg, seed=3))
    centred_in = f_e.data - f_e.data.mean(axis=0)
    centred_out = f_ca.data - f_ca.data.mean(axis=0)
    assert np.allclose(centred_in, centred_out, atol=1e-9)


def test_fuse_row_permutation_invariance():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    f_e = RNG.standard_normal((6, 8))
    text = random_text(cfg, seed=5, tokens=2)
    f_o1, f_ca1 = model.fuse_text(ad.Tensor(f_e), text)
    perm = np.random.default_rng(0).permutation(6)
    f_o2, f_ca2 = model.fuse_text(ad.Tensor(f_e[perm]), text)
    assert np.allclose(f_ca2.data, f_ca1.data[perm], atol=1e-9)
    assert np.allclose(f_o2.data, f_o1.data, atol=1e-9)


def test_fuse_gradient_reaches_mesh_and_projection():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    text = random_text(cfg, seed=6)
    f_e = ad.Tensor(RNG.standard_normal((4, 8)), requires_grad=True)
    proj = model["fuse.proj_w"]

    def head(fe, pw):
        proj.data = pw.data  # grad_check perturbs the second input in place
        f_o, _ = model.fuse_text(fe, text)
        return ad.mean_(ad.mul(f_o, f_o))

    err = ad.grad_check(lambda fe: head(fe, proj), [f_e])
    assert err < 1e-3
    f_o, _ = model.fuse_text(ad.Tensor(RNG.standard_normal((4, 8))), text)
    ad.mean_(ad.mul(f_o, f_o)).backward()
    assert proj.grad is not None and np.abs(proj.grad).max() > 0


def test_fuse_requires_prompt():
    model = DualBranchNet(tiny_config(), seed=0)
    with pytest.raises(ValueError, match="prompt"):
        model.fuse_text(ad.Tensor(np.zeros((3, 8))), None)


def test_fuse_width_mismatch():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    with pytest.raises(ValueError, match="text width"):
        model.fuse_text(ad.Tensor(np.zeros((3, 8))), TextEmbedding(np.zeros((1, 7))))


# -- regression path


def test_forward_regression_finite_and_shaped():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    out = model.forward_regression(random_pfs(cfg), random_text(cfg))
    assert out.shape == (3,)
    assert np.isfinite(out.data).all()
    params = model.predict_params(random_pfs(cfg), random_text(cfg))
    assert isinstance(params, AbutmentParams)


def test_series_change_changes_prediction():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    a = model.forward_regression(pfs, random_text(cfg, seed=1)).data
    b = model.forward_regression(pfs, random_text(cfg, seed=2)).data
    assert np.abs(a - b).max() > 0


def test_prediction_ignores_decoder_parameters():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs, text = random_pfs(cfg), random_text(cfg)
    before = model.forward_regression(pfs, text).data.copy()
    for name, tensor in model.parameters().items():
        if name.startswith("dec."):
            tensor.data = np.zeros_like(tensor.data)
    after = model.forward_regression(pfs, text).data
    assert np.array_equal(before, after)


def test_state_dict_roundtrip_and_strictness():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    state = model.state_dict()
    other = DualBranchNet(cfg, seed=99)
    other.load_state(state)
    for k, v in other.state_dict().items():
        assert np.array_equal(v, state[k])
    partial = {k: v for k, v in state.items() if not k.startswith("dec.")}
    with pytest.raises(ValueError, match="state mismatch"):
        other.load_state(partial, strict=True)
    missing = other.load_state(partial, strict=False)
    assert all(k.startswith("dec.") for k in missing)


def test_encoder_weights_shared_between_branches():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    text = random_text(cfg)
    mask = mask_patches(pfs, 0.5, seed=1)
    reg_before = model.forward_regression(pfs, text).data.copy()
    rec_before = model.forward_reconstruction(pfs, mask).vertices.data.copy()
    # Constant shifts of W_q are annihilated by the zero-mean layer-norm
    # input, so perturb a single entry.
    model["enc.0.attn_wq"].data[2, 3] += 0.5
    reg_after = model.forward_regression(pfs, text).data
    rec_after = model.forward_reconstruction(pfs, mask).vertices.data
    assert np.abs(reg_after - reg_before).max() > 0
    assert np.abs(rec_after - rec_before).max() > 0


def test_all_parameters_get_gradient_in_joint_step():
    cfg = tiny_config()
    model = DualBranchNet(cfg, seed=0)
    pfs = random_pfs(cfg)
    text = random_text(cfg)
    mask = mask_patches(pfs, 0.5, seed=2)
    rec = model.forward_reconstruction(pfs, mask)
    l_cd = ad.mean_(chamfer_l2(rec.vertices, pfs.vertex_rel[mask.masked]))
    l_face = face_feature_mse(rec.face_features, pfs.per_face_features[mask.masked])
    pred = model.forward_regression(pfs, text)
    d = ad.sub(pred, ad.as_tensor(np.array([2.0, 4.0, 6.0])))
    total = ad.scale(l_cd + l_face, 0.1) + ad.mean_(ad.mul(d, d))
    total.backward()
    dead = [
        name
        for name, tensor in model.parameters().items()
        if tensor.requires_grad and (tensor.grad is None or not np.abs(tensor.grad).max() > 0)
    ]
    assert dead == [], f"parameters with zero gradient: {dead}"
