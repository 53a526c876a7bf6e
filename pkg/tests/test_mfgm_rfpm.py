import numpy as np
import pytest

from congestnet.errors import ConfigError
from congestnet.gradcheck import grad_check
from congestnet.grid import FeatureLayer, QueryLocation
from congestnet.mfgm import encode_unimodal, fuse_multimodal, run_mfgm, substitute_zero_meta
from congestnet.model import CongestionModel, init_params
from congestnet.qlmm import build_mask, map_location
from congestnet.rfpm import PredictionVector, binarize, predict
from congestnet.optim import OptimizerState
from congestnet.tensor import Tensor, concat_channels, mean_of, mse_loss, no_grad, precision, slice_channels
from congestnet.train import train_step

from conftest import random_layers, random_records, tiny_config


# -------------------------------------------------------------------- MFGM

def test_meta_shape_and_dtype(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    meta = run_mfgm(random_layers(cfg, rng), params, cfg)
    assert meta.shape == (8, 8, cfg.d_meta) and meta.tensor.dtype == np.float32
    assert meta.source_config_hash == cfg.config_hash()


def test_encoder_is_local(rng):
    # two 3x3 convs see at most two cells away; a far change leaves the corner untouched
    cfg = tiny_config(height=12, width=12)
    params = init_params(cfg, 0)
    layers = random_layers(cfg, rng)
    base = encode_unimodal(layers["poi"], params, cfg).tensor.value
    data = layers["poi"].data.copy()
    data[11, 11] += 1.0
    moved = encode_unimodal(FeatureLayer("poi", data, normalized=True), params, cfg).tensor.value
    assert np.array_equal(base[:9, :9], moved[:9, :9])
    assert not np.array_equal(base[9:, 9:], moved[9:, 9:])


def test_unnormalised_layer_rejected(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    with pytest.raises(ConfigError):
        encode_unimodal(random_layers(cfg, rng, normalized=False)["poi"], params, cfg)


def test_fusion_order_enforced(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    layers = random_layers(cfg, rng)
    reps = [encode_unimodal(layers[m], params, cfg) for m in ("media_text", "real_estate", "poi")]
    fuse_multimodal(reps, params, cfg)
    with pytest.raises(ConfigError):
        fuse_multimodal(reps[::-1], params, cfg)


def test_every_modality_reaches_the_meta(rng):
    cfg = tiny_config()
    params = init_params(cfg, 0)
    layers = random_layers(cfg, rng)
    base = run_mfgm(layers, params, cfg).tensor.value
    for m, layer in layers.items():
        changed = dict(layers)
        changed[m] = FeatureLayer(m, layer.data * 0.5, normalized=True)
        assert not np.array_equal(run_mfgm(changed, params, cfg).tensor.value, base), m


def test_unimodal_config_uses_one_encoder(rng):
    cfg = tiny_config(modalities=("re",))
    params = init_params(cfg, 0)
    assert not any(k.startswith("mfgm.enc_mt") or k.startswith("mfgm.enc_pi") for k in params)
    assert params["mfgm.fusion.0.kernel"].shape[2] == cfg.d_ur
    assert run_mfgm(random_layers(cfg, rng), params, cfg).shape == (8, 8, cfg.d_meta)


def test_frozen_meta_is_immutable_and_detached(rng):
    cfg = tiny_config()
    model = CongestionModel(cfg, seed=0)
    frozen = model.frozen_meta(random_layers(cfg, rng))
    assert frozen.frozen and not frozen.tensor.requires_grad
    with pytest.raises(ValueError):
        frozen.tensor.value[0, 0, 0] = 1.0


def test_zero_meta_occupies_leading_channels():
    cfg = tiny_config()
    params = init_params(cfg, 0)
    meta = substitute_zero_meta((8, 8, cfg.d_meta))
    loc = map_location(build_mask(QueryLocation(2, 5), cfg), params, cfg).tensor
    fused = concat_channels([meta.tensor, loc])
    assert not slice_channels(fused, 0, cfg.d_meta).value.any()
    np.testing.assert_array_equal(slice_channels(fused, cfg.d_meta, cfg.d_meta + cfg.d_loc).value, loc.value)


def test_zero_meta_arm_has_no_mfgm_parameters(rng):
    cfg = tiny_config(use_meta=False)
    params = init_params(cfg, 0)
    assert not any(k.startswith("mfgm.") for k in params)
    meta = run_mfgm(random_layers(cfg, rng), params, cfg)
    assert meta.frozen and not meta.tensor.value.any()


def test_qlmm_and_rfpm_init_independent_of_mfgm_variant():
    a, b = init_params(tiny_config(), 3), init_params(tiny_config(use_meta=False), 3)
    for k in b:
        assert np.array_equal(a[k].value, b[k].value), k


# -------------------------------------------------------------------- RFPM

def test_prediction_in_unit_interval(rng):
    cfg = tiny_config()
    model = CongestionModel(cfg, seed=1)
    meta = model.frozen_meta(random_layers(cfg, rng)).tensor
    for q in (QueryLocation(1, 1), QueryLocation(8, 8), QueryLocation(4, 5)):
        pred = model.predict_vector(meta, q)
        assert pred.scores.shape == (4,)
        assert np.all((pred.scores >= 0) & (pred.scores <= 1))


def test_prediction_depends_on_location(rng):
    cfg = tiny_config()
    model = CongestionModel(cfg, seed=1)
    meta = model.frozen_meta(random_layers(cfg, rng)).tensor
    a = model.predict_vector(meta, QueryLocation(1, 1)).scores
    b = model.predict_vector(meta, QueryLocation(8, 8)).scores
    assert not np.array_equal(a, b)


def test_predict_rejects_mismatched_shapes():
    cfg = tiny_config()
    params = init_params(cfg, 0)
    with pytest.raises(ConfigError):
        predict(Tensor(np.zeros((8, 8, cfg.d_meta))), Tensor(np.zeros((7, 8, cfg.d_loc))), params, cfg)
    with pytest.raises(ConfigError):
        predict(Tensor(np.zeros((8, 8, cfg.d_meta + 1))), Tensor(np.zeros((8, 8, cfg.d_loc))), params, cfg)


def test_binarize_threshold_inclusive():
    pred = PredictionVector(QueryLocation(1, 1), np.array([0.2, 0.5, 0.51, 0.49]))
    np.testing.assert_array_equal(binarize(pred), [0, 1, 1, 0])
    pred.threshold = 0.3
    np.testing.assert_array_equal(pred.binarize(), [0, 1, 1, 1])


# ------------------------------------------------------------ gradient flow

def test_gradients_reach_every_module(rng):
    cfg = tiny_config()
    model = CongestionModel(cfg, seed=0)
    layers = random_layers(cfg, rng)
    records = random_records(cfg, 4, rng)
    meta = model.meta(layers)
    for r in records:
        mse_loss(model.forward_query(meta.tensor, r.location), r.labels).backward()
    for prefix in ("mfgm.enc_mt", "mfgm.enc_re", "mfgm.enc_pi", "mfgm.fusion", "qlmm.", "rfpm.conv", "rfpm.fc"):
        grads = [p.grad for k, p in model.params.items() if k.startswith(prefix)]
        assert grads and any(np.abs(g).sum() > 0 for g in grads), prefix


def test_batched_step_matches_mean_loss_gradient(rng):
    # the detached-meta accumulation must equal backprop of the batch-mean loss
    cfg = tiny_config()
    layers = random_layers(cfg, rng)
    records = random_records(cfg, 4, rng)  # 1/4 is exact in the float32 loss seed
    with precision(np.float64):
        ref = CongestionModel(cfg, init_params(cfg, 0).astype(np.float64))
        meta = ref.meta(layers)
        losses = [mse_loss(ref.forward_query(meta.tensor, r.location), r.labels) for r in records]
        mean_of(losses).backward()
        expected = {k: p.grad.copy() for k, p in ref.params.items()}

        model = CongestionModel(cfg, init_params(cfg, 0).astype(np.float64))
        before = {k: p.value.copy() for k, p in model.params.items()}
        opt = OptimizerState("sgd", 1.0)
        train_step(model, layers, records, opt)
    for k, p in model.params.items():
        # with plain SGD at lr 1 the update is exactly minus the gradient
        np.testing.assert_allclose(before[k] - p.value, expected[k], rtol=1e-9, atol=1e-12, err_msg=k)


def test_end_to_end_gradient_check(rng):
    cfg = tiny_config()
    layers = random_layers(cfg, rng)
    records = random_records(cfg, 2, rng)
    with precision(np.float64):
        model = CongestionModel(cfg, init_params(cfg, 0).astype(np.float64))

        def closure():
            meta = model.meta(layers).tensor
            return mean_of([mse_loss(model.forward_query(meta, r.location), r.labels) for r in records])

        report = grad_check(model.params, closure, eps=1e-3)
    assert report.checked > 0.9 * model.params.count()
    assert report.worst < 1e-2, sorted(report.errors.items(), key=lambda kv: -kv[1])[:5]


def test_fast_and_full_forward_agree(rng):
    cfg = tiny_config()
    model = CongestionModel(cfg, seed=2)
    layers = random_layers(cfg, rng)
    frozen = model.frozen_meta(layers).tensor
    for q in (QueryLocation(3, 3), QueryLocation(8, 1)):
        with no_grad():
            full = model.forward_query(model.meta(layers).tensor, q).value
        assert full.tobytes() == model.predict_vector(frozen, q).scores.tobytes()
