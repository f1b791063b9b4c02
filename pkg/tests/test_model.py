import numpy as np
import pytest

from ccb.errors import SchemaVersionError, ValidationError
from ccb.model import (
    BIAS_CLIP,
    ModelConfig,
    bag_of_words,
    base_forward,
    bias_term,
    content_forward,
    context_forward,
    encode_image,
    encode_question,
    forward,
    init_params,
    joint_predict,
    load_checkpoint,
    make_batch,
    save_checkpoint,
)


@pytest.fixture
def setup(rng):
    cfg = ModelConfig(vocab_size=10, n_answers=4, d_v=5, d_q=3, d_m=6)
    params = init_params(cfg, rng)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.2, size=params[k].shape)
    tokens = [[1, 2, 3], [4, 4], [9]]
    bias = rng.dirichlet(np.ones(4), size=3)
    batch = make_batch(tokens, rng.normal(size=(3, 6, 5)), bias, cfg)
    return cfg, params, batch


def test_attention_is_a_distribution(setup, backend):
    cfg, params, batch = setup
    out, _ = forward(params, cfg, batch)
    assert np.all(out.attention >= 0)
    np.testing.assert_allclose(out.attention.sum(axis=1), 1.0, atol=1e-12)


def test_single_region_gets_full_weight(setup):
    _, params, _ = setup
    fq = encode_question(params, [1, 2])
    fv, alpha = encode_image(params, np.ones((1, 5)), fq)
    assert alpha.tolist() == [1.0]
    with pytest.raises(ValidationError):
        encode_image(params, np.ones((0, 5)), fq)


def test_pieces_compose_to_forward(setup):
    cfg, params, batch = setup
    out, cache = forward(params, cfg, batch)
    fq = np.tanh(batch.bow @ params["embed"] @ params["q_W"] + params["q_b"])
    fv, _ = encode_image(params, batch.features, fq)
    np.testing.assert_allclose(out.z_base, base_forward(params, fq, fv), atol=1e-12)
    np.testing.assert_allclose(out.z_cn, content_forward(params, out.z_base, batch.bias, True, cfg, h=cache.h),
                               atol=1e-12)
    np.testing.assert_allclose(out.z_cx, context_forward(params, fq, cache.vp.mean(axis=1)), atol=1e-12)
    np.testing.assert_allclose(out.z_p, joint_predict(out.z_cn, out.z_cx), atol=1e-12)


def test_inference_drops_bias_by_default(setup):
    cfg, params, batch = setup
    out, _ = forward(params, cfg, batch, training=False)
    np.testing.assert_array_equal(out.z_cn, out.z_base)
    keep = ModelConfig(**{**cfg.to_dict(), "inference_bias": "keep"})
    out_keep, _ = forward(params, keep, batch, training=False)
    assert not np.allclose(out_keep.z_cn, out_keep.z_base)


def test_fixed_gate_is_one(setup):
    cfg, params, batch = setup
    fixed = ModelConfig(**{**cfg.to_dict(), "ensemble_mode": "fixed_log_bias"})
    out, _ = forward(params, fixed, batch)
    np.testing.assert_array_equal(out.gate, 1.0)
    np.testing.assert_allclose(out.z_cn, out.z_base + np.log(np.clip(batch.bias, BIAS_CLIP, 1)), atol=1e-12)


def test_learned_gate_is_non_negative(setup):
    cfg, params, batch = setup
    out, _ = forward(params, cfg, batch)
    assert np.all(out.gate >= 0)


def test_bias_term_links():
    b = np.array([0.0, 0.5, 1.0])
    lg = bias_term(b, "log")
    assert lg[0] == pytest.approx(np.log(BIAS_CLIP)) and lg[2] == 0.0
    lt = bias_term(b, "logit")
    assert lt[1] == pytest.approx(0.0, abs=1e-15)
    assert lt[0] == pytest.approx(-lt[2], rel=1e-9)  # 1 - clip rounds in float64
    assert np.all(np.isfinite(lt))


def test_fusion_modes():
    z_cn = np.array([[2.0, -3.0]])
    z_cx = np.array([[0.0, 50.0]])
    np.testing.assert_allclose(joint_predict(z_cn, z_cx, "masked"), [[1.0, -3.0]])
    np.testing.assert_allclose(joint_predict(z_cn, z_cx, "literal"), [[0.0, -150.0]])
    with pytest.raises(ValidationError):
        joint_predict(z_cn, z_cx[:, :1])


def test_batch_validation():
    cfg = ModelConfig(vocab_size=5, n_answers=2, d_v=3)
    with pytest.raises(ValidationError):
        bag_of_words([[]], 5)
    with pytest.raises(ValidationError):
        bag_of_words([[5]], 5)
    with pytest.raises(ValidationError):
        make_batch([[1]], np.zeros((1, 2, 4)), np.full((1, 2), 0.5), cfg)
    with pytest.raises(ValidationError):
        ModelConfig(vocab_size=5, n_answers=2, d_v=3, fusion_mode="sum")


def test_checkpoint_round_trip_is_byte_stable(tmp_path, setup):
    cfg, params, _ = setup
    a = save_checkpoint(tmp_path / "a.ckpt", params, {"model_config": cfg.to_dict()})
    b = save_checkpoint(tmp_path / "b.ckpt", params, {"model_config": cfg.to_dict()})
    assert a.read_bytes() == b.read_bytes()
    loaded, meta = load_checkpoint(a)
    assert meta["model_config"] == cfg.to_dict()
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_checkpoint_version_checked(tmp_path, setup):
    import json
    import zipfile

    cfg, params, _ = setup
    p = save_checkpoint(tmp_path / "a.ckpt", params, {})
    with zipfile.ZipFile(p) as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(files["meta.json"])
    meta["checkpoint_version"] = 99
    files["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(p, "w") as zf:
        for n, data in files.items():
            zf.writestr(n, data)
    with pytest.raises(SchemaVersionError):
        load_checkpoint(p)
