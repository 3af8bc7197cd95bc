import numpy as np
import pytest

from deformpic import tensor as T
from deformpic.dataset import DatasetConfig, collate, make_record, patchify, record_plan
from deformpic.model import (VARIANTS, DeformPIC, MPMBaseline, ModelConfig, PatchHead, PointEncoder,
                             build_model, make_mask_plan, masked_patch_loss, mpm_depth)
from deformpic.nn import AdaLNZeroBlock
from deformpic.tensor import Tensor
from deformpic.train import AdamW, TrainConfig

from oracles import gradcheck, param_gradcheck

CFG = ModelConfig.preset("desk")


@pytest.fixture(scope="module")
def bank():
    dcfg = DatasetConfig(samples_per_cell=1, n_points=128, seed=5)
    samples = [make_record(dcfg, i, t, lv) for i, (t, lv) in enumerate(record_plan(dcfg))]
    return patchify(samples, CFG.m, CFG.k)


@pytest.fixture
def batch(bank):
    return collate(bank, [0, 5, 10])


# -- configuration ---------------------------------------------------------------------

def test_presets():
    p = ModelConfig.preset("paper")
    assert (p.dim, p.heads, p.den_blocks, p.dtn_blocks, p.m, p.k, p.drop_path_rate) == (384, 6, 4, 8, 64, 32, 0.1)
    assert (CFG.dim, CFG.heads, CFG.den_blocks, CFG.dtn_blocks, CFG.m, CFG.k, CFG.drop_path_rate) == \
        (64, 4, 2, 4, 16, 8, 0.0)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError, match="unknown variant"):
        ModelConfig(variant="pic")


def test_baseline_parameter_count_within_20_percent():
    ours = build_model(CFG).num_parameters()
    base = build_model(ModelConfig.preset("desk", variant="mpm_baseline")).num_parameters()
    assert abs(base - ours) / ours <= 0.2
    assert mpm_depth(CFG) == 8


# -- encoder / head -----------------------------------------------------------------------

def test_encoder_is_permutation_invariant_within_patch():
    enc = PointEncoder(16, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    patches, centers = rng.normal(size=(2, 3, 5, 3)), rng.normal(size=(2, 3, 3))
    a = enc(patches, centers).data
    b = enc(patches[:, :, rng.permutation(5)], centers).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_identical_patches_differ_only_by_position():
    enc = PointEncoder(16, np.random.default_rng(0))
    shape = np.random.default_rng(2).normal(size=(5, 3))
    centers = np.array([[[0.0, 0, 0], [1.0, 2.0, -1.0]]])
    patches = np.stack([shape + c for c in centers[0]])[None]
    tokens = enc(patches, centers).data
    pos = enc.position(centers).data
    np.testing.assert_allclose(tokens[0, 0] - pos[0, 0], tokens[0, 1] - pos[0, 1], atol=1e-5)


def test_encoder_gradient_on_toy_input():
    with T.precision(np.float64):
        enc = PointEncoder(8, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        patches, centers = rng.normal(size=(1, 2, 4, 3)), rng.normal(size=(1, 2, 3))
        params = enc.parameters()
        entries = [(i, j) for i, p in enumerate(params) for j in range(0, p.size, 3)]
        err = param_gradcheck(lambda: T.sum_axis(enc(patches, centers) * enc(patches, centers)), params, entries)
    assert err < 1e-6


def test_head_zero_output_returns_centers():
    head = PatchHead(8, 4, np.random.default_rng(0))
    head.mlp.fc2.weight.data[...] = 0.0
    centers = np.random.default_rng(1).normal(size=(2, 3, 3))
    out = head(Tensor(np.random.default_rng(2).normal(size=(2, 3, 8))), centers).data
    assert out.shape == (2, 3, 4, 3)
    np.testing.assert_allclose(out, np.repeat(centers[:, :, None], 4, axis=2), atol=1e-6)


def test_head_gradient():
    with T.precision(np.float64):
        head = PatchHead(6, 2, np.random.default_rng(0))
        centers = np.random.default_rng(1).normal(size=(2, 3))
        err = gradcheck(lambda t: head(t, centers), [np.random.default_rng(2).normal(size=(2, 6))])
    assert err < 1e-6


def test_default_head_slots_are_distinct():
    head = PatchHead(CFG.dim, CFG.k, np.random.default_rng(0))
    tok = Tensor(np.random.default_rng(1).normal(size=(1, CFG.dim)))
    out = head(tok, np.zeros((1, 3))).data[0]
    assert len(np.unique(out.round(8), axis=0)) == CFG.k


# -- DTN ---------------------------------------------------------------------------------------

def test_adaln_zero_block_is_identity_at_init():
    blk = AdaLNZeroBlock(16, 4, np.random.default_rng(0))
    h = Tensor(np.random.default_rng(1).normal(size=(2, 5, 16)))
    c = Tensor(np.random.default_rng(2).normal(size=(2, 16)))
    np.testing.assert_array_equal(blk(h, c).data, h.data)


def test_zero_task_token_gives_identity_even_when_trained():
    blk = AdaLNZeroBlock(16, 4, np.random.default_rng(0))
    blk.modulation.weight.data[...] = np.random.default_rng(3).normal(size=blk.modulation.weight.shape)
    h = Tensor(np.random.default_rng(1).normal(size=(2, 5, 16)))
    np.testing.assert_array_equal(blk(h, Tensor(np.zeros((2, 16)))).data, h.data)


def test_modulation_receives_gradient_after_one_step():
    blk = AdaLNZeroBlock(16, 4, np.random.default_rng(0))
    h = Tensor(np.random.default_rng(1).normal(size=(2, 5, 16)))
    c = Tensor(np.random.default_rng(2).normal(size=(2, 16)))
    T.backward(T.sum_axis(blk(h, c) * Tensor(np.random.default_rng(4).normal(size=(2, 5, 16)))))
    assert np.abs(blk.modulation.weight.grad).sum() > 0


def test_dtn_is_identity_before_final_norm(batch):
    model = DeformPIC(CFG)
    tokens = model.encode_query(batch)
    task = model.task_features(batch)
    np.testing.assert_array_equal(model.dtn_forward(tokens, task, final_norm=False).data, tokens.data)


def test_dtn_patch_permutation_equivariance(batch):
    model = DeformPIC(CFG)
    for blk in model.dtn:
        blk.modulation.weight.data[...] = np.random.default_rng(0).normal(0, 0.1, blk.modulation.weight.shape)
    perm = np.random.default_rng(1).permutation(CFG.m)
    task = model.task_features(batch)
    tokens = model.encode_query(batch)
    permuted = T.take(tokens, perm, axis=1)
    a = model.dtn_forward(tokens, task).data[:, perm]
    b = model.dtn_forward(permuted, task).data
    np.testing.assert_allclose(a, b, atol=1e-5)


# -- end to end ------------------------------------------------------------------------------------

def test_forward_shapes(batch):
    pred, task = DeformPIC(CFG).forward(batch)
    assert pred.shape == (3, CFG.m, CFG.k, 3) and task.shape == (3, CFG.dim)


def test_untrained_task_token_is_prompt_independent(batch):
    feats = DeformPIC(CFG).task_features(batch).data
    np.testing.assert_array_equal(feats[0], feats[1])


def test_train_and_inference_graphs_match(batch):
    model = DeformPIC(CFG)
    a = T.graph_signature(model.forward(batch, training=True)[0])
    b = T.graph_signature(model.forward(batch, training=False)[0])
    assert a == b


def test_end_to_end_gradients_on_sampled_parameters(bank):
    one = collate(bank, [7])
    with T.precision(np.float64):
        model = DeformPIC(CFG, seed=1)
        # non-zero modulation and DEN residuals so the whole network carries gradient
        rng = np.random.default_rng(2)
        for blk in model.dtn:
            blk.modulation.weight.data[...] = rng.normal(0, 0.05, blk.modulation.weight.shape)
        for blk in model.den:
            blk.mlp.fc2.weight.data[...] = rng.normal(0, 0.05, blk.mlp.fc2.weight.shape)
            blk.attn.proj.weight.data[...] = rng.normal(0, 0.05, blk.attn.proj.weight.shape)
        params = model.parameters()
        sizes = np.array([p.size for p in params])
        n = int(np.ceil(0.01 * sizes.sum()))
        flat = np.sort(rng.choice(sizes.sum(), n, replace=False))
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        entries = [(int(i), int(f - offsets[i])) for i, f in zip(owner, flat)]
        err = param_gradcheck(lambda: model.loss(one, training=False), params, entries)
    assert err < 1e-2


def test_static_den_looks_up_task_table(batch):
    model = DeformPIC(ModelConfig.preset("desk", variant="static_den"))
    feats = model.task_features(batch).data
    np.testing.assert_array_equal(feats, model.task_table.data[batch["task"]])


# -- baseline ---------------------------------------------------------------------------------------

def test_inference_mask_plan_masks_query_target_only():
    plan = make_mask_plan(CFG, 2, training=False)
    assert plan[:, 1].all() and not plan[:, 0].any()


def test_training_mask_plans():
    base = ModelConfig.preset("desk", variant="mpm_baseline")
    plan = make_mask_plan(base, 4, training=True, rng=np.random.default_rng(0))
    assert (plan.sum(-1) == round(0.7 * base.m)).all()
    consistent = ModelConfig.preset("desk", variant="mpm_consistent")
    plan = make_mask_plan(consistent, 4, training=True, rng=np.random.default_rng(0))
    assert plan[:, 1].all() and not plan[:, 0].any()


def test_zero_mask_ratio_gives_zero_loss(batch):
    model = MPMBaseline(ModelConfig.preset("desk", variant="mpm_baseline", mask_ratio=0.0))
    loss = model.loss(batch, training=True)
    assert loss.item() == 0.0
    assert masked_patch_loss(Tensor(np.ones((1, 2, 2, 3))), np.zeros((1, 2, 2, 3)), np.zeros((1, 2), bool)).item() == 0.0


def test_baseline_prediction_shape(batch):
    pred = MPMBaseline(ModelConfig.preset("desk", variant="mpm_baseline")).predict(batch)
    assert pred.shape == (3, CFG.m, CFG.k, 3)


@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_decreases_within_20_steps(variant, bank):
    model = build_model(ModelConfig.preset("desk", variant=variant), seed=0)
    opt = AdamW(model.named_parameters(), TrainConfig.preset("desk"))
    b = collate(bank, np.arange(8))
    first = None
    for step in range(20):
        model.zero_grad()
        loss = model.loss(b, training=True, step=step)
        first = loss.item() if first is None else first
        T.backward(loss)
        opt.step(1e-3)
    assert model.loss(b, training=True, step=0).item() < first
