import numpy as np
import pytest

from _oracles import LOSS_NAMES, all_losses, analytic_grads, max_grad_error, random_problem
from ccb.model import backward

N_CONFIGS = 24


@pytest.mark.parametrize("seed", range(N_CONFIGS))
def test_backprop_matches_central_differences(seed, backend):
    err, where = max_grad_error(seed)
    assert err <= 1e-4, f"{where}: relative error {err:.2e}"


def test_configs_cover_every_mode():
    seen = set()
    for seed in range(N_CONFIGS):
        cfg, _, _, s = random_problem(np.random.default_rng(seed))
        seen |= {cfg.ensemble_mode, cfg.fusion_mode, cfg.bias_link, s["weight_mode"], s["use_label"]}
    assert {"learned_mixin", "fixed_log_bias", "masked", "literal", "log", "logit",
            "per_answer", "per_instance_max", "per_instance_label", True, False} <= seen


ENCODERS = ("embed", "q_W", "q_b", "v_W", "v_b", "att_W")


def test_detached_context_does_not_reach_encoders():
    for seed in range(5):
        cfg, params, batch, s = random_problem(np.random.default_rng(seed), detach=True)
        g = analytic_grads(params, cfg, batch, s)
        for k in ENCODERS:
            assert not np.any(g["l_cx"][k]), k
        assert np.any(g["l_cx"]["cxq_W"]) and np.any(g["l_cx"]["cx_W"])


def test_attached_context_reaches_encoders():
    cfg, params, batch, s = random_problem(np.random.default_rng(0))
    g = analytic_grads(params, cfg, batch, s)
    assert np.any(g["l_cx"]["q_W"]) and np.any(g["l_cx"]["v_W"])


def test_base_loss_ignores_side_branches():
    cfg, params, batch, s = random_problem(np.random.default_rng(2))
    g = analytic_grads(params, cfg, batch, s)["l_ml"]
    for k in ("gate_w", "gate_b", "cxq_W", "cxv_W", "cx_W", "cx_b"):
        assert not np.any(g[k]), k


def test_joint_gradient_is_sum_of_parts():
    cfg, params, batch, s = random_problem(np.random.default_rng(4))
    g = analytic_grads(params, cfg, batch, s)
    for k in params:
        np.testing.assert_allclose(g["l_ccb"][k], g["l_cn"][k] + g["l_cx"][k] + g["l_p"][k],
                                   rtol=1e-12, atol=1e-14)
