import math

import numpy as np
import pytest
import torch

from spdrought.model import (
    CheckpointError,
    IdOutOfRange,
    ModelConfig,
    SPDroughtModel,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    init_parameters,
    load_checkpoint,
    load_model_tensors,
    masked_mae_loss,
    model_tensors,
    positional_encoding,
    save_checkpoint,
)
from spdrought.rng import SplitMix64


@pytest.fixture()
def reduced_model():
    model = build_model(ModelConfig.reduced(), init_seed=17).double()
    model.eval()
    return model


def _random_inputs(model, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    cfg = model.cfg
    series = torch.rand(batch, cfg.context_len, cfg.in_channels, generator=g, dtype=torch.float64)
    numeric = torch.rand(batch, cfg.static_numeric, generator=g, dtype=torch.float64)
    ids = torch.randint(0, cfg.n_classes, (batch,), generator=g)
    return series, numeric, ids


# -- static representation ---------------------------------------------------


def test_static_representation_length(reduced_model):
    cfg = reduced_model.cfg
    out = reduced_model.static_representation(
        torch.zeros(1, 8, dtype=torch.float64), torch.tensor([1])
    )
    assert out.shape == (1, cfg.static_out + cfg.embed_dim)


def test_static_representation_cover_only_changes_tail(reduced_model):
    cfg = reduced_model.cfg
    numeric = torch.rand(1, 8, dtype=torch.float64)
    a = reduced_model.static_representation(numeric, torch.tensor([0]))
    b = reduced_model.static_representation(numeric, torch.tensor([1]))
    assert torch.equal(a[:, : cfg.static_out], b[:, : cfg.static_out])
    assert not torch.equal(a[:, cfg.static_out :], b[:, cfg.static_out :])


def test_static_representation_zero_weights():
    model = build_model(ModelConfig.reduced(), init_seed=2).double()
    with torch.no_grad():
        for layer in (model.static_encoder.fc1, model.static_encoder.fc2):
            layer.weight.zero_()
            layer.bias.zero_()
    out = model.static_representation(torch.rand(1, 8, dtype=torch.float64), torch.tensor([0]))
    assert torch.all(out[:, : model.cfg.static_out] == 0)


def test_static_representation_id_out_of_range(reduced_model):
    with pytest.raises(IdOutOfRange):
        reduced_model.static_representation(
            torch.zeros(1, 8, dtype=torch.float64), torch.tensor([99])
        )


# -- positional encoding -------------------------------------------------------


def test_positional_encoding_t0():
    pe = positional_encoding(4, 8, dtype=torch.float64)
    assert torch.all(pe[0, 0::2] == 0.0)
    assert torch.all(pe[0, 1::2] == 1.0)


def test_positional_encoding_bounds_and_value():
    pe = positional_encoding(50, 16, dtype=torch.float64)
    assert pe.min() >= -1.0 and pe.max() <= 1.0
    assert pe[1, 0].item() == pytest.approx(math.sin(1.0), rel=1e-12)
    assert pe[1, 0].item() == pytest.approx(0.84147, abs=1e-5)


def test_positional_encoding_odd_dim_rejected():
    with pytest.raises(ValueError):
        positional_encoding(4, 7)


# -- encoder / decoder ----------------------------------------------------------


def test_encode_shapes_full_config():
    model = build_model(ModelConfig(n_classes=8), init_seed=3)
    out = model.encode_dynamic(torch.rand(100, 14))
    assert out.shape == (100, 48)
    batch = model.encode_dynamic(torch.rand(2, 100, 14))
    assert batch.shape == (2, 100, 48)


def test_encode_eval_deterministic(reduced_model):
    series, _, _ = _random_inputs(reduced_model)
    a = reduced_model.encode_dynamic(series)
    b = reduced_model.encode_dynamic(series)
    assert torch.equal(a, b)


def test_decode_shapes_full_config():
    model = build_model(ModelConfig(n_classes=8), init_seed=3)
    h = torch.rand(2, 100, 48)
    f_s = torch.rand(2, 20)
    out = model.decode_horizon(h, f_s)
    assert out.shape == (2, 26, 48)


def test_zero_static_matches_ablated_variant(reduced_model):
    series, numeric, ids = _random_inputs(reduced_model)
    encoded = reduced_model.encode_dynamic(series)
    zeros = torch.zeros(2, reduced_model.cfg.static_dim, dtype=torch.float64)
    manual = reduced_model.predict_indices(reduced_model.decode_horizon(encoded, zeros))

    import dataclasses

    ablated = SPDroughtModel(dataclasses.replace(reduced_model.cfg, use_static=False)).double()
    load_model_tensors(ablated, model_tensors(reduced_model))
    ablated.eval()
    assert torch.allclose(ablated(series, numeric, ids), manual, atol=0, rtol=0)


def test_memory_perturbation_changes_output(reduced_model):
    g = torch.Generator().manual_seed(4)
    h = torch.rand(1, reduced_model.cfg.context_len, reduced_model.cfg.d_model,
                   generator=g, dtype=torch.float64)
    f_s = torch.rand(1, reduced_model.cfg.static_dim, generator=g, dtype=torch.float64)
    base = reduced_model.decode_horizon(h, f_s)
    for t in range(0, reduced_model.cfg.context_len, 3):
        bumped = h.clone()
        bumped[0, t] += 0.35
        assert not torch.equal(reduced_model.decode_horizon(bumped, f_s), base)


def test_heads_are_independent(reduced_model):
    f = torch.rand(1, reduced_model.cfg.horizon, reduced_model.cfg.d_model, dtype=torch.float64)
    base = reduced_model.predict_indices(f)
    assert base.shape == (1, reduced_model.cfg.horizon, 3)
    with torch.no_grad():
        reduced_model.heads[2].weight += 0.5
    bumped = reduced_model.predict_indices(f)
    assert torch.equal(bumped[..., :2], base[..., :2])
    assert not torch.equal(bumped[..., 2], base[..., 2])


def test_zero_heads_zero_predictions():
    model = build_model(ModelConfig.reduced(), init_seed=2).double()
    with torch.no_grad():
        for head in model.heads:
            head.weight.zero_()
            head.bias.zero_()
    f = torch.rand(1, model.cfg.horizon, model.cfg.d_model, dtype=torch.float64)
    assert torch.all(model.predict_indices(f) == 0)


def test_forward_shapes_full_protocol():
    model = build_model(ModelConfig(n_classes=8), init_seed=1)
    out = model(torch.rand(2, 100, 14), torch.rand(2, 8), torch.tensor([0, 5]))
    assert out.shape == (2, 26, 3)


def test_forward_eval_deterministic(reduced_model):
    series, numeric, ids = _random_inputs(reduced_model)
    assert torch.equal(reduced_model(series, numeric, ids), reduced_model(series, numeric, ids))


def test_one_hot_fusion_equals_raw_center_series(reduced_model):
    g = torch.Generator().manual_seed(6)
    cfg = reduced_model.cfg
    series_members = torch.rand(2, 5, cfg.context_len, 14, generator=g, dtype=torch.float64)
    mask = torch.ones(2, 5, dtype=torch.bool)
    numeric = torch.rand(2, 8, generator=g, dtype=torch.float64)
    ids = torch.tensor([0, 1])

    import dataclasses

    bypass = SPDroughtModel(dataclasses.replace(cfg, use_fusion=False)).double()
    load_model_tensors(bypass, model_tensors(reduced_model))
    bypass.eval()
    fused_out = bypass.forward_from_neighbors(
        torch.rand(2, 9, dtype=torch.float64),
        torch.rand(2, 5, 9, dtype=torch.float64),
        torch.rand(2, 5, dtype=torch.float64) + 0.5,
        mask,
        series_members,
        numeric,
        ids,
    )
    direct = bypass(series_members[:, 0], numeric, ids)
    assert torch.equal(fused_out, direct)


def test_permutation_sensitivity(reduced_model):
    series, _, _ = _random_inputs(reduced_model, batch=1, seed=9)
    permuted = series[:, torch.randperm(reduced_model.cfg.context_len,
                                        generator=torch.Generator().manual_seed(2))]
    a = reduced_model.encode_dynamic(series)
    b = reduced_model.encode_dynamic(permuted)
    assert not torch.allclose(a, b)


def test_dropout_eval_is_identity():
    import dataclasses

    cfg = dataclasses.replace(ModelConfig.reduced(), dropout=0.1)
    with_dropout = build_model(cfg, init_seed=5).double()
    without = build_model(dataclasses.replace(cfg, dropout=0.0), init_seed=5).double()
    with_dropout.eval()
    without.eval()
    series, numeric, ids = _random_inputs(with_dropout)
    assert torch.equal(with_dropout(series, numeric, ids), without(series, numeric, ids))


def test_dropout_train_mode_masks():
    import dataclasses

    cfg = dataclasses.replace(ModelConfig.reduced(), dropout=0.5)
    model = build_model(cfg, init_seed=5).double()
    model.train()
    model.dropout_rng = SplitMix64(3)
    series, numeric, ids = _random_inputs(model)
    a = model(series, numeric, ids)
    b = model(series, numeric, ids)  # stream advanced, masks differ
    assert not torch.equal(a, b)
    model.dropout_rng = None
    with pytest.raises(RuntimeError):
        model(series, numeric, ids)


# -- loss ------------------------------------------------------------------------


def test_loss_identity_zero():
    pred = torch.rand(4, 3)
    assert masked_mae_loss(pred, pred.clone(), torch.ones(4, 3, dtype=torch.bool)).item() == 0.0


def test_loss_single_entry():
    pred = torch.zeros(26, 3)
    target = torch.zeros(26, 3)
    mask = torch.zeros(26, 3, dtype=torch.bool)
    pred[4, 1] = 0.5
    target[4, 1] = 0.2
    mask[4, 1] = True
    assert masked_mae_loss(pred, target, mask).item() == pytest.approx(0.3)


def test_loss_all_false_mask_zero_gradients(reduced_model):
    series, numeric, ids = _random_inputs(reduced_model)
    target = torch.rand(2, reduced_model.cfg.horizon, 3, dtype=torch.float64)
    mask = torch.zeros(2, reduced_model.cfg.horizon, 3, dtype=torch.bool)
    loss = masked_mae_loss(reduced_model(series, numeric, ids), target, mask)
    assert loss.item() == 0.0
    loss.backward()
    for p in reduced_model.parameters():
        if p.grad is not None:
            assert torch.all(p.grad == 0)


def test_loss_mask_linearity():
    g = torch.Generator().manual_seed(8)
    pred = torch.rand(6, 3, generator=g)
    target = torch.rand(6, 3, generator=g)
    mask_a = torch.zeros(6, 3, dtype=torch.bool)
    mask_b = torch.zeros(6, 3, dtype=torch.bool)
    mask_a[:3] = True
    mask_b[3:, 1:] = True
    union = mask_a | mask_b
    na, nb = mask_a.sum().item(), mask_b.sum().item()
    la = masked_mae_loss(pred, target, mask_a).item()
    lb = masked_mae_loss(pred, target, mask_b).item()
    lu = masked_mae_loss(pred, target, union).item()
    assert lu == pytest.approx((na * la + nb * lb) / (na + nb), rel=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        masked_mae_loss(torch.zeros(2, 3), torch.zeros(3, 2), torch.ones(2, 3, dtype=torch.bool))


# -- end-to-end gradient spot check ------------------------------------------------


def test_end_to_end_gradients_sampled(reduced_model):
    torch.manual_seed(0)
    model = reduced_model
    series, numeric, ids = _random_inputs(model, batch=1, seed=12)
    series.requires_grad_(True)
    target = torch.rand(1, model.cfg.horizon, 3, dtype=torch.float64)
    valid = torch.rand(1, model.cfg.horizon, 3) > 0.2

    loss = masked_mae_loss(model(series, numeric, ids), target, valid)
    model.zero_grad()
    loss.backward()

    def eval_loss():
        with torch.no_grad():
            return masked_mae_loss(model(series, numeric, ids), target, valid).item()

    rng = np.random.default_rng(1)
    checked = 0
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        flat = p.data.view(-1)
        gflat = p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            eps = 1e-6 * max(1.0, abs(flat[i].item()))
            orig = flat[i].item()
            flat[i] = orig + eps
            up = eval_loss()
            flat[i] = orig - eps
            dn = eval_loss()
            flat[i] = orig
            fd = (up - dn) / (2 * eps)
            auto = gflat[i].item()
            assert abs(fd - auto) <= 1e-3 * max(abs(fd), abs(auto), 1e-6), name
            checked += 1
    assert checked > 50
    # input gradient spot check
    gin = series.grad[0, 0, 0].item()
    eps = 1e-6
    with torch.no_grad():
        series[0, 0, 0] += eps
        up = masked_mae_loss(model(series, numeric, ids), target, valid).item()
        series[0, 0, 0] -= 2 * eps
        dn = masked_mae_loss(model(series, numeric, ids), target, valid).item()
        series[0, 0, 0] += eps
    fd = (up - dn) / (2 * eps)
    assert abs(fd - gin) <= 1e-3 * max(abs(fd), abs(gin), 1e-6)


# -- init ---------------------------------------------------------------------------


def test_init_deterministic_and_bounded():
    a = build_model(ModelConfig.reduced(), init_seed=77)
    b = build_model(ModelConfig.reduced(), init_seed=77)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb)
    for name, p in a.named_parameters():
        if p.dim() >= 2:
            bound = 1.0 / math.sqrt(p.shape[-1])
            assert p.abs().max() <= bound


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_randomized(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "a.weight": rng.standard_normal((4, 7)),
        "b.bias": rng.standard_normal(3),
        "scalarish": rng.standard_normal((1,)),
    }
    tensors["a.weight"][1, 2] = np.nan
    path = tmp_path / "model.spck"
    save_checkpoint(path, tensors)
    out = load_checkpoint(path)
    assert set(out) == set(tensors)
    for k in tensors:
        assert tensors[k].tobytes() == out[k].tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "model.spck"
    save_checkpoint(path, {"w": np.zeros((2, 2))})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 1
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(blob))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + bytes(blob[4:]))


def test_checkpoint_restores_model_outputs(tmp_path, reduced_model):
    series, numeric, ids = _random_inputs(reduced_model)
    expected = reduced_model(series, numeric, ids)
    path = tmp_path / "model.spck"
    save_checkpoint(path, model_tensors(reduced_model))

    fresh = SPDroughtModel(reduced_model.cfg).double()
    load_model_tensors(fresh, load_checkpoint(path))
    fresh.eval()
    assert torch.equal(fresh(series, numeric, ids), expected)


def test_checkpoint_missing_tensor_rejected(reduced_model):
    tensors = model_tensors(reduced_model)
    tensors.pop(next(iter(tensors)))
    with pytest.raises(CheckpointError):
        load_model_tensors(SPDroughtModel(reduced_model.cfg).double(), tensors)
