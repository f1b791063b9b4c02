"""Mini-batch training for the CCB objective and its two baselines."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from .bias import BiasTable
from .dataset import Split
from .errors import DivergenceError, LeakageError, ValidationError
from .model import (
    Batch,
    ModelConfig,
    backward,
    bag_of_words,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("ccb", "ml_baseline", "lmh_baseline")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    r: float = 1.0
    seed: int = 0
    eval_every: int = 0
    loss_mode: str = "ccb"
    context_label: bool = True
    weight_mode: str = "per_instance_label"
    eval_head: str = "auto"
    # model
    d_q: int = 32
    d_m: int = 64
    ensemble_mode: str = "fixed_log_bias"
    fusion_mode: str = "masked"
    inference_bias: str = "drop"
    detach_context_encoders: bool = False
    bias_link: str = "logit"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.r < 0:
            raise ValidationError(f"r must be >= 0, got {self.r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"loss_mode must be one of {LOSS_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.eval_head not in ("auto", "joint", "content", "base"):
            raise ValidationError("eval_head must be auto, joint, content or base")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def model_config(self, split: Split, seed: int | None = None) -> ModelConfig:
        arr = split.arrays()
        return ModelConfig(
            vocab_size=_vocab_of(split),
            n_answers=split.answer_space.size,
            d_v=int(arr["features"].shape[2]),
            d_q=self.d_q,
            d_m=self.d_m,
            ensemble_mode=self.ensemble_mode,
            fusion_mode=self.fusion_mode,
            inference_bias=self.inference_bias,
            detach_context_encoders=self.detach_context_encoders,
            bias_link=self.bias_link,
            seed=self.seed if seed is None else seed,
        )


def _vocab_of(split: Split) -> int:
    if split.vocab_size is not None:
        return int(split.vocab_size)
    # no declared vocabulary: the largest id seen bounds it
    return int(max(max(t) for t in split.arrays()["tokens"])) + 1


@dataclass
class TrainedModel:
    params: dict
    model_config: ModelConfig
    train_config: TrainConfig
    bias_table: BiasTable
    train_split_name: str
    answers: tuple[str, ...]
    rng_state: dict = field(default_factory=dict)

    @property
    def head(self) -> str:
        if self.train_config.eval_head != "auto":
            return self.train_config.eval_head
        return {"ccb": "joint", "ml_baseline": "base", "lmh_baseline": "content"}[self.train_config.loss_mode]

    def save(self, path):
        meta = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "bias_table": self.bias_table.table.tolist(),
            "bias_source_split_name": self.bias_table.source_split_name,
            "bias_smoothing_epsilon": self.bias_table.smoothing_epsilon,
            "train_split_name": self.train_split_name,
            "answers": list(self.answers),
            "rng_state": self.rng_state,
        }
        return save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        params, meta = load_checkpoint(path)
        return cls(
            params,
            ModelConfig(**meta["model_config"]),
            TrainConfig.from_dict(meta["train_config"]),
            BiasTable(np.array(meta["bias_table"]), meta["bias_source_split_name"],
                      meta["bias_smoothing_epsilon"]),
            meta["train_split_name"],
            tuple(meta["answers"]),
            meta["rng_state"],
        )


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def objective(params, cfg: ModelConfig, tcfg: TrainConfig, batch: Batch):
    """Loss breakdown and parameter gradients of the configured objective on one batch."""
    out, cache = forward(params, cfg, batch, training=True)
    y, b = batch.labels, batch.bias
    if tcfg.loss_mode == "ccb":
        br, g = losses.ccb_loss(out.z_cn, out.z_cx, out.z_p, y, b, tcfg.r,
                                use_context_label=tcfg.context_label, weight_mode=tcfg.weight_mode)
        grads = backward(params, cfg, cache, d_cn=g["z_cn"], d_cx=g["z_cx"], d_p=g["z_p"])
    elif tcfg.loss_mode == "ml_baseline":
        l_ml, d = losses.multilabel_bce(out.z_base, y)
        br = losses.LossBreakdown(0.0, 0.0, l_ml, l_ml, len(batch), l_ml=l_ml)
        grads = backward(params, cfg, cache, d_base=d)
    else:
        l_ml, d = losses.multilabel_bce(out.z_cn, y)
        br = losses.LossBreakdown(l_ml, 0.0, 0.0, l_ml, len(batch), l_ml=l_ml)
        grads = backward(params, cfg, cache, d_cn=d)
    return br, grads


def split_batch(split: Split, idx, bow_all, bias_table: BiasTable) -> Batch:
    arr = split.arrays()
    return Batch(bow_all[idx], arr["features"][idx], bias_table.rows(arr["qtypes"][idx]),
                 arr["labels"][idx], arr["qtypes"][idx])


def train(config: TrainConfig, train_split: Split, bias_table: BiasTable, *,
          vocab_size: int | None = None, callback=None):
    """Fit a model; returns ``(TrainedModel, history)``.

    ``history`` holds one dict per optimisation step with the loss breakdown.
    ``callback(epoch, model)`` is invoked every ``eval_every`` epochs when set.
    """
    if bias_table.source_split_name != train_split.split_name:
        raise LeakageError(
            f"bias table estimated from {bias_table.source_split_name!r}, "
            f"not from the training split {train_split.split_name!r}"
        )
    if bias_table.table.shape != (train_split.qtype_table.n_types, train_split.answer_space.size):
        raise ValidationError("bias table shape does not match the training split")
    mcfg = config.model_config(train_split)
    if vocab_size is not None:
        mcfg = replace(mcfg, vocab_size=int(vocab_size))
    rng = np.random.default_rng(config.seed)
    params = init_params(mcfg, rng)
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)

    arr = train_split.arrays()
    bow_all = bag_of_words(arr["tokens"], mcfg.vocab_size)
    n = len(train_split)
    history = []
    step = 0
    model = TrainedModel(params, mcfg, config, bias_table, train_split.split_name,
                         train_split.answer_space.answers)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            br, grads = objective(params, mcfg, config, split_batch(train_split, idx, bow_all, bias_table))
            if not np.isfinite(br.l_ccb):
                raise DivergenceError(step, f"epoch {epoch}, breakdown {br.as_dict()}")
            opt.step(params, grads)
            history.append({"step": step, "epoch": epoch, **br.as_dict()})
            step += 1
        if callback is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            callback(epoch, model)
        log.debug("epoch %d loss %.4f", epoch, history[-1]["l_ccb"])
    model.rng_state = rng.bit_generator.state
    return model, history


def mean_loss(model: TrainedModel, split: Split, batch_size: int = 512) -> float:
    """Full-pass training objective on ``split`` (no parameter update)."""
    arr = split.arrays()
    bow_all = bag_of_words(arr["tokens"], model.model_config.vocab_size)
    tot, n = 0.0, len(split)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        br, _ = objective(model.params, model.model_config, model.train_config,
                          split_batch(split, idx, bow_all, model.bias_table))
        tot += br.l_ccb * len(idx)
    return tot / n
