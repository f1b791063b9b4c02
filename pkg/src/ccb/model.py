"""Desk-scale encoders plus the base / content / context / joint heads.

Forward and backward are written by hand in numpy (attention and BCE go
through :mod:`ccb.kernels`). Shapes use B = batch, R = regions, V = vocab,
A = number of answers.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import SchemaVersionError, ValidationError

BIAS_CLIP = 1e-8
CHECKPOINT_VERSION = 1

ENSEMBLE_MODES = ("learned_mixin", "fixed_log_bias")
FUSION_MODES = ("masked", "literal")
INFERENCE_BIAS = ("drop", "keep")
BIAS_LINKS = ("log", "logit")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_answers: int
    d_v: int
    d_q: int = 32
    d_m: int = 64
    ensemble_mode: str = "learned_mixin"
    fusion_mode: str = "masked"
    inference_bias: str = "drop"
    detach_context_encoders: bool = False
    bias_link: str = "log"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_answers", "d_v", "d_q", "d_m"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"{name} must be > 0")
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise ValidationError(f"ensemble_mode must be one of {ENSEMBLE_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValidationError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.inference_bias not in INFERENCE_BIAS:
            raise ValidationError(f"inference_bias must be one of {INFERENCE_BIAS}")
        if self.bias_link not in BIAS_LINKS:
            raise ValidationError(f"bias_link must be one of {BIAS_LINKS}")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, A, dv, dq, dm = cfg.vocab_size, cfg.n_answers, cfg.d_v, cfg.d_q, cfg.d_m
    return {
        # f_q: bag of embeddings -> tanh layer
        "embed": (V, dq), "q_W": (dq, dq), "q_b": (dq,),
        # f_v: per-region tanh projection + bilinear attention keys
        "v_W": (dv, dv), "v_b": (dv,), "att_W": (dv, dq),
        # M: projected product, C: linear classifier
        "m_Wq": (dq, dm), "m_bq": (dm,), "m_Wv": (dv, dm), "m_bv": (dm,),
        "c_W": (dm, A), "c_b": (A,),
        # learned-mixin gate
        "gate_w": (dm,), "gate_b": (1,),
        # context branch: nn_q, nn_v, C_cx
        "cxq_W": (dq, dm), "cxq_b": (dm,), "cxv_W": (dv, dm), "cxv_b": (dm,),
        "cx_W": (dm, A), "cx_b": (A,),
    }


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
        elif name == "gate_w":
            a = np.sqrt(6.0 / (shape[0] + 1))
            params[name] = rng.uniform(-a, a, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def _sigmoid(x):
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    bow: np.ndarray  # [B, V] token counts / length
    features: np.ndarray  # [B, R, d_v]
    bias: np.ndarray  # [B, A]
    labels: np.ndarray | None = None  # [B, A]
    qtypes: np.ndarray | None = None

    def __len__(self):
        return self.bow.shape[0]


def bag_of_words(tokens: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    out = np.zeros((len(tokens), vocab_size))
    for i, seq in enumerate(tokens):
        if len(seq) == 0:
            raise ValidationError(f"question {i} is empty")
        seq = np.asarray(seq, dtype=np.int64)
        if seq.min() < 0 or seq.max() >= vocab_size:
            raise ValidationError(f"question {i}: token id out of vocabulary (size {vocab_size})")
        np.add.at(out[i], seq, 1.0 / len(seq))
    return out


def make_batch(tokens, features, bias, cfg: ModelConfig, labels=None, qtypes=None) -> Batch:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[1] < 1:
        raise ValidationError("image features must be [B, R>=1, d_v]")
    if features.shape[2] != cfg.d_v:
        raise ValidationError(f"image feature dim {features.shape[2]} != d_v {cfg.d_v}")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (features.shape[0], cfg.n_answers):
        raise ValidationError(f"bias must be [B, {cfg.n_answers}], got {bias.shape}")
    return Batch(bag_of_words(tokens, cfg.vocab_size), features, bias, labels, qtypes)


# ---------------------------------------------------------------------------
# forward pieces (each accepts a batch; single instances are promoted)
# ---------------------------------------------------------------------------

def encode_question(params, question_tokens) -> np.ndarray:
    """f_q for one question (sequence of ids) or a precomputed bag-of-words matrix."""
    if isinstance(question_tokens, np.ndarray) and question_tokens.ndim == 2:
        bow = question_tokens
    else:
        bow = bag_of_words([question_tokens], params["embed"].shape[0])[0]
    return np.tanh(bow @ params["embed"] @ params["q_W"] + params["q_b"])


def encode_image(params, image_features, fq):
    """Question-conditioned soft attention over projected regions.

    Returns ``(fv, attention_weights)``; weights are non-negative and sum to 1.
    """
    x = np.asarray(image_features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x, fq = x[None], np.asarray(fq)[None]
    if x.shape[1] == 0:
        raise ValidationError("image has zero regions")
    vp = np.tanh(x @ params["v_W"] + params["v_b"])
    keys = vp @ params["att_W"]
    alpha, fv = kernels.attention_forward(vp, keys, fq)
    return (fv[0], alpha[0]) if single else (fv, alpha)


def fuse(params, fq, fv):
    return np.tanh(fq @ params["m_Wq"] + params["m_bq"]) * np.tanh(fv @ params["m_Wv"] + params["m_bv"])


def base_forward(params, fq, fv) -> np.ndarray:
    fq, fv = np.asarray(fq, dtype=np.float64), np.asarray(fv, dtype=np.float64)
    if fq.shape[-1] != params["m_Wq"].shape[0] or fv.shape[-1] != params["m_Wv"].shape[0]:
        raise ValidationError("base_forward: feature dims do not match parameters")
    if fq.shape[:-1] != fv.shape[:-1]:
        raise ValidationError("base_forward: batch shapes differ")
    return fuse(params, fq, fv) @ params["c_W"] + params["c_b"]


def bias_term(b, link: str = "log") -> np.ndarray:
    """log b (clipped at BIAS_CLIP) or its binary-ensemble form log b - log(1 - b)."""
    b = np.asarray(b, dtype=np.float64)
    if link == "log":
        return np.log(np.clip(b, BIAS_CLIP, 1.0))
    if link == "logit":
        bc = np.clip(b, BIAS_CLIP, 1.0 - BIAS_CLIP)
        return np.log(bc) - np.log1p(-bc)
    raise ValidationError(f"unknown bias_link {link!r}")


def gate_value(params, h, cfg: ModelConfig):
    if cfg.ensemble_mode == "fixed_log_bias":
        return np.ones(np.shape(h)[:-1])
    return _softplus(h @ params["gate_w"] + params["gate_b"][0])


def content_forward(params, z_base, b, training: bool, cfg: ModelConfig, *, h=None, gate=None):
    """Add the gated log-prior to the base scores (dropped at inference by default)."""
    z_base = np.asarray(z_base, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != z_base.shape:
        raise ValidationError("content_forward: bias and scores must share a shape")
    if not training and cfg.inference_bias == "drop":
        return z_base.copy()
    if gate is None:
        if cfg.ensemble_mode == "fixed_log_bias":
            gate = np.ones(z_base.shape[:-1])
        else:
            if h is None:
                raise ValidationError("learned_mixin needs the fused hidden vector h")
            gate = gate_value(params, h, cfg)
    gate = np.asarray(gate, dtype=np.float64)
    return z_base + gate[..., None] * bias_term(b, cfg.bias_link)


def context_forward(params, fq_raw, fv_raw) -> np.ndarray:
    fq_raw, fv_raw = np.asarray(fq_raw, dtype=np.float64), np.asarray(fv_raw, dtype=np.float64)
    if fq_raw.shape[-1] != params["cxq_W"].shape[0] or fv_raw.shape[-1] != params["cxv_W"].shape[0]:
        raise ValidationError("context_forward: feature dims do not match parameters")
    uq = np.tanh(fq_raw @ params["cxq_W"] + params["cxq_b"])
    uv = np.tanh(fv_raw @ params["cxv_W"] + params["cxv_b"])
    return (uq * uv) @ params["cx_W"] + params["cx_b"]


def joint_predict(z_cn, z_cx, fusion_mode: str = "masked") -> np.ndarray:
    z_cn, z_cx = np.asarray(z_cn, dtype=np.float64), np.asarray(z_cx, dtype=np.float64)
    if z_cn.shape != z_cx.shape:
        raise ValidationError(f"joint_predict: shape mismatch {z_cn.shape} vs {z_cx.shape}")
    if fusion_mode == "masked":
        return z_cn * _sigmoid(z_cx)
    if fusion_mode == "literal":
        return z_cn * z_cx
    raise ValidationError(f"unknown fusion_mode {fusion_mode!r}")


# ---------------------------------------------------------------------------
# full pass with cache
# ---------------------------------------------------------------------------

@dataclass
class BranchOutputs:
    z_base: np.ndarray
    z_cn: np.ndarray
    z_cx: np.ndarray
    z_p: np.ndarray
    attention: np.ndarray
    gate: np.ndarray


@dataclass
class _Cache:
    batch: Batch
    training: bool
    qbar: np.ndarray
    fq: np.ndarray
    vp: np.ndarray
    keys: np.ndarray
    alpha: np.ndarray
    fv: np.ndarray
    hq: np.ndarray
    hv: np.ndarray
    h: np.ndarray
    g_pre: np.ndarray
    logb: np.ndarray
    bias_on: bool
    fvg: np.ndarray
    uq: np.ndarray
    uv: np.ndarray
    mask: np.ndarray
    out: BranchOutputs = field(repr=False)


def forward(params, cfg: ModelConfig, batch: Batch, training: bool = True):
    """Run every branch; returns ``(BranchOutputs, cache)``."""
    p = params
    qbar = batch.bow @ p["embed"]
    fq = np.tanh(qbar @ p["q_W"] + p["q_b"])
    vp = np.tanh(batch.features @ p["v_W"] + p["v_b"])
    keys = vp @ p["att_W"]
    alpha, fv = kernels.attention_forward(vp, keys, fq)

    hq = np.tanh(fq @ p["m_Wq"] + p["m_bq"])
    hv = np.tanh(fv @ p["m_Wv"] + p["m_bv"])
    h = hq * hv
    z_base = h @ p["c_W"] + p["c_b"]

    g_pre = h @ p["gate_w"] + p["gate_b"][0]
    gate = _softplus(g_pre) if cfg.ensemble_mode == "learned_mixin" else np.ones(len(batch))
    logb = bias_term(batch.bias, cfg.bias_link)
    bias_on = training or cfg.inference_bias == "keep"
    z_cn = z_base + gate[:, None] * logb if bias_on else z_base.copy()

    fvg = vp.mean(axis=1)
    uq = np.tanh(fq @ p["cxq_W"] + p["cxq_b"])
    uv = np.tanh(fvg @ p["cxv_W"] + p["cxv_b"])
    z_cx = (uq * uv) @ p["cx_W"] + p["cx_b"]

    if cfg.fusion_mode == "masked":
        mask = _sigmoid(z_cx)
        z_p = z_cn * mask
    else:
        mask = z_cx
        z_p = z_cn * z_cx

    out = BranchOutputs(z_base, z_cn, z_cx, z_p, alpha, gate)
    cache = _Cache(batch, training, qbar, fq, vp, keys, alpha, fv, hq, hv, h, g_pre, logb,
                   bias_on, fvg, uq, uv, mask, out)
    return out, cache


def backward(params, cfg: ModelConfig, cache: _Cache, *, d_base=None, d_cn=None, d_cx=None, d_p=None):
    """Gradients of a scalar loss given its derivatives wrt the branch scores."""
    p, c, o = params, cache, cache.out
    zeros = np.zeros_like(o.z_base)
    d_base = zeros.copy() if d_base is None else d_base.copy()
    d_cn = zeros.copy() if d_cn is None else d_cn.copy()
    d_cx = zeros.copy() if d_cx is None else d_cx.copy()
    g = {k: np.zeros_like(v) for k, v in p.items()}

    if d_p is not None:
        if cfg.fusion_mode == "masked":
            d_cn += d_p * c.mask
            d_cx += d_p * o.z_cn * c.mask * (1.0 - c.mask)
        else:
            d_cn += d_p * o.z_cx
            d_cx += d_p * o.z_cn

    d_h = np.zeros_like(c.h)
    d_base += d_cn
    if c.bias_on and cfg.ensemble_mode == "learned_mixin":
        d_gate = (d_cn * c.logb).sum(axis=1)
        d_gpre = d_gate * _sigmoid(c.g_pre)
        g["gate_w"] = c.h.T @ d_gpre
        g["gate_b"] = np.array([d_gpre.sum()])
        d_h += d_gpre[:, None] * p["gate_w"][None, :]

    g["c_W"] = c.h.T @ d_base
    g["c_b"] = d_base.sum(axis=0)
    d_h += d_base @ p["c_W"].T
    d_mq = d_h * c.hv * (1.0 - c.hq ** 2)
    d_mv = d_h * c.hq * (1.0 - c.hv ** 2)
    g["m_Wq"] = c.fq.T @ d_mq
    g["m_bq"] = d_mq.sum(axis=0)
    g["m_Wv"] = c.fv.T @ d_mv
    g["m_bv"] = d_mv.sum(axis=0)
    d_fq = d_mq @ p["m_Wq"].T
    d_fv = d_mv @ p["m_Wv"].T

    # context branch
    u = c.uq * c.uv
    g["cx_W"] = u.T @ d_cx
    g["cx_b"] = d_cx.sum(axis=0)
    d_u = d_cx @ p["cx_W"].T
    d_cq = d_u * c.uv * (1.0 - c.uq ** 2)
    d_cv = d_u * c.uq * (1.0 - c.uv ** 2)
    g["cxq_W"] = c.fq.T @ d_cq
    g["cxq_b"] = d_cq.sum(axis=0)
    g["cxv_W"] = c.fvg.T @ d_cv
    g["cxv_b"] = d_cv.sum(axis=0)
    n_regions = c.vp.shape[1]
    d_vp = np.zeros_like(c.vp)
    if not cfg.detach_context_encoders:
        d_fq += d_cq @ p["cxq_W"].T
        d_vp += (d_cv @ p["cxv_W"].T)[:, None, :] / n_regions

    # attention
    a_vp, a_keys, a_fq = kernels.attention_backward(c.vp, c.keys, c.fq, c.alpha, d_fv)
    d_fq += a_fq
    d_vp += a_vp + a_keys @ p["att_W"].T
    g["att_W"] = np.einsum("brd,brk->dk", c.vp, a_keys)

    d_vpre = d_vp * (1.0 - c.vp ** 2)
    g["v_W"] = np.einsum("brf,brd->fd", c.batch.features, d_vpre)
    g["v_b"] = d_vpre.sum(axis=(0, 1))

    d_qpre = d_fq * (1.0 - c.fq ** 2)
    g["q_W"] = c.qbar.T @ d_qpre
    g["q_b"] = d_qpre.sum(axis=0)
    g["embed"] = c.batch.bow.T @ (d_qpre @ p["q_W"].T)
    return g


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, params: dict, meta: dict) -> Path:
    """Deterministic zip of ``meta.json`` plus one ``.npy`` per parameter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, checkpoint_version=CHECKPOINT_VERSION, param_names=sorted(params))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(params):
            arr = io.BytesIO()
            np.save(arr, np.ascontiguousarray(params[name], dtype=np.float64), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", arr.getvalue())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise SchemaVersionError(f"checkpoint_version {meta.get('checkpoint_version')!r}")
        params = {n: np.load(io.BytesIO(zf.read(f"params/{n}.npy"))) for n in meta["param_names"]}
    return params, meta
