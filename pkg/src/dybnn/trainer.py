"""Training: losses, Adam with linear learning-rate decay, and protocols.

Two protocols are supported:

* ``one-step``: train the binary model (binary activations and weights) once.
* ``two-step``: phase 1 trains with binary activations and real weights;
  phase 2 starts from phase 1's parameters (bit-identical) with the weights
  binarized, a fresh optimizer and a fresh learning-rate schedule.

Metrics are appended to a plain-text log, one record per line::

    epoch=3 phase=step2 split=test loss=0.412345 top1=0.8731
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .binconv import BINARY_WEIGHTS, REAL_WEIGHTS
from .config import ModelConfig
from .errors import InvalidConfig, NonFiniteLoss, ShapeMismatch
from .network import Model, build_model
from .serialize import load_model, save_model

log = logging.getLogger(__name__)

ONE_STEP, TWO_STEP = "one-step", "two-step"
CROSS_ENTROPY, DISTILLATION = "cross-entropy", "distillation"


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 5e-4
    batch_size: int = 64
    epochs: int = 30
    protocol: str = TWO_STEP
    loss: str = CROSS_ENTROPY
    teacher: str | None = None
    seed: int = 0
    weight_decay: float = 0.0
    eval_every: int = 1
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise InvalidConfig("train.initial_lr", "must be > 0")
        if self.epochs < 1:
            raise InvalidConfig("train.epochs", "must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("train.batch_size", "must be >= 1")
        if self.eval_every < 1:
            raise InvalidConfig("train.eval_every", "must be >= 1")
        if self.protocol not in (ONE_STEP, TWO_STEP):
            raise InvalidConfig("train.protocol", f"must be {ONE_STEP!r} or {TWO_STEP!r}")
        if self.loss not in (CROSS_ENTROPY, DISTILLATION):
            raise InvalidConfig("train.loss", f"must be {CROSS_ENTROPY!r} or {DISTILLATION!r}")
        if self.loss == DISTILLATION and not self.teacher:
            raise InvalidConfig("train.teacher", "distillation requires a teacher checkpoint")
        if self.weight_decay < 0:
            raise InvalidConfig("train.weight_decay", "must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"train.{sorted(unknown)[0]}", "unknown key")
        for key, value in d.items():
            default = cls.__dataclass_fields__[key].default
            if key == "teacher":
                ok = value is None or isinstance(value, str)
            elif isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            else:
                ok = isinstance(value, str)
            if not ok:
                raise InvalidConfig(f"train.{key}", f"unexpected value {value!r}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    ls = log_softmax(logits.astype(np.float64))
    n = len(labels)
    loss = -ls[np.arange(n), labels].mean()
    grad = np.exp(ls)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


def distillation_loss(student_logits, teacher_logits) -> float:
    """``KL(softmax(teacher) || softmax(student))`` at temperature 1, batch mean."""
    return distillation(student_logits, teacher_logits)[0]


def distillation(student_logits, teacher_logits):
    """Distillation loss and its gradient w.r.t. the student logits."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatch(
            f"student {student_logits.shape} and teacher {teacher_logits.shape} logits differ"
        )
    ls = log_softmax(student_logits.astype(np.float64))
    lt = log_softmax(teacher_logits.astype(np.float64))
    pt = np.exp(lt)
    n = len(student_logits)
    loss = float((pt * (lt - ls)).sum() / n)
    grad = (np.exp(ls) - pt) / n
    return max(loss, 0.0), grad.astype(student_logits.dtype)


# ---------------------------------------------------------------------------
# optimizer


def linear_lr(step, total_steps, initial_lr):
    """``initial_lr * (1 - step / total_steps)``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return initial_lr * (1 - step / total_steps)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def step(self, lr):
        """One Adam update, then clamp latent binary weights to [-1, 1]."""
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**st.step
        c2 = 1 - b2**st.step
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.data
            m = st.m[k] = b1 * st.m[k] + (1 - b1) * g
            v = st.v[k] = b2 * st.v[k] + (1 - b2) * g * g
            if lr:
                update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - update).astype(p.data.dtype)
            if p.clamp:
                np.clip(p.data, -1, 1, out=p.data)


# ---------------------------------------------------------------------------
# steps and loops


def activation_stats(model: Model, x) -> dict:
    """Per-layer output statistics from an inference forward pass."""
    stats = {}

    def record(name, a):
        finite = np.isfinite(a)
        stats[name] = {
            "finite_fraction": float(finite.mean()) if a.size else 1.0,
            "abs_max": float(np.abs(a[finite]).max()) if finite.any() else float("nan"),
            "mean": float(a[finite].mean()) if finite.any() else float("nan"),
        }

    with np.errstate(all="ignore"):
        h = x.astype(model.dtype, copy=False)
        if model.stem:
            h = model.stem.forward(h)
            record("stem", h)
        for i, b in enumerate(model.blocks):
            h = b.forward(h)
            record(f"blocks.{i}", h)
        if model.classifier:
            record("classifier", model.classifier.forward(h))
    return stats


def _step(model, batch, cfg, opt, lr, teacher=None):
    model.zero_grad()
    logits = model.forward(batch.images, training=True)
    if cfg.loss == DISTILLATION:
        if teacher is None:
            raise InvalidConfig("train.teacher", "distillation requires a teacher model")
        loss, grad = distillation(logits, teacher.forward(batch.images))
    else:
        loss, grad = cross_entropy(logits, batch.labels)
    if not np.isfinite(loss):
        stats = activation_stats(model, batch.images)
        bad = [k for k, v in stats.items() if v["finite_fraction"] < 1]
        where = f"first non-finite layer {bad[0]}" if bad else "activations finite"
        raise NonFiniteLoss(f"loss became {loss} at step {opt.state.step + 1} ({where})", stats)
    model.backward(grad)
    opt.step(lr)
    return loss, logits


def train_step(model: Model, batch, cfg: TrainConfig, opt: Adam, lr: float, teacher: Model | None = None):
    """Forward, loss, backward, Adam update and latent-weight clamp.

    Returns ``(loss, optimizer state)``.  Raises :class:`NonFiniteLoss` with
    per-layer activation statistics when the loss is not finite.
    """
    loss, _ = _step(model, batch, cfg, opt, lr, teacher)
    return loss, opt.state


def evaluate(model: Model, data, batch_size=256, limit=None):
    """Return ``(mean cross-entropy, top-1 accuracy)`` in inference mode."""
    if limit is not None:
        data = data.subset(limit)
    total_loss, correct, seen = 0.0, 0, 0
    for batch in data.batches(batch_size):
        logits = model.forward(batch.images)
        loss, _ = cross_entropy(logits, batch.labels)
        total_loss += loss * len(batch)
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
        seen += len(batch)
    return total_loss / max(seen, 1), correct / max(seen, 1)


class MetricsLog:
    """Append-only metrics file; ``records`` keeps every line in memory too."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []

    def write(self, epoch, phase, split, loss, top1):
        rec = {"epoch": epoch, "phase": phase, "split": split, "loss": float(loss), "top1": float(top1)}
        self.records.append(rec)
        line = f"epoch={epoch} phase={phase} split={split} loss={loss:.6f} top1={top1:.4f}"
        log.info(line)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(line + "\n")


def parse_metrics(text: str):
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = dict(kv.split("=", 1) for kv in line.split())
        out.append({"epoch": int(rec["epoch"]), "phase": rec["phase"], "split": rec["split"],
                    "loss": float(rec["loss"]), "top1": float(rec["top1"])})
    return out


def train_phase(model, train, test, cfg: TrainConfig, phase: str, metrics: MetricsLog,
                teacher=None, observer=None):
    """Run ``cfg.epochs`` epochs with Adam and a linear decay to zero.

    ``observer(event, phase, model)`` is called with ``event`` in
    ``{"start", "epoch", "end"}``.
    """
    notify = observer or (lambda event, phase, model: None)
    notify("start", phase, model)
    params = model.named_parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    steps_per_epoch = train.num_batches(cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        running, correct, count = 0.0, 0, 0
        stream = train.batches(cfg.batch_size, shuffle=True, seed=[cfg.seed, epoch, int(phase == "step2")],
                               augment=cfg.augment)
        for batch in stream:
            loss, logits = _step(model, batch, cfg, opt, linear_lr(step, total, cfg.initial_lr), teacher)
            step += 1
            running += loss * len(batch)
            correct += int((logits.argmax(axis=1) == batch.labels).sum())
            count += len(batch)
        # training top-1 is measured on the training-mode logits of each step
        metrics.write(epoch, phase, "train", running / count, correct / count)
        if test is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            loss, top1 = evaluate(model, test)
            metrics.write(epoch, phase, "test", loss, top1)
        notify("epoch", phase, model)
    notify("end", phase, model)
    return model


def _output(out_dir):
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    return out, MetricsLog(out / "metrics.log" if out else None)


def run_one_step(model_cfg: ModelConfig, train, test, cfg: TrainConfig, out_dir=None, teacher=None,
                 observer=None):
    """Train binary activations and binary weights from scratch in one phase."""
    out, metrics = _output(out_dir)
    model = build_model(model_cfg.with_seed(cfg.seed), weight_mode=BINARY_WEIGHTS)
    train_phase(model, train, test, cfg, "one-step", metrics, teacher, observer)
    if out:
        save_model(model, out / "model.dybnn")
    return model, metrics


def run_two_step(model_cfg: ModelConfig, train, test, cfg: TrainConfig, out_dir=None, teacher=None,
                 observer=None):
    """Phase 1 with real weights, phase 2 inheriting phase 1 with binary weights.

    With ``out_dir`` each phase writes ``step1/`` and ``step2/`` directories
    holding a checkpoint; the phase-2 model is loaded from the phase-1 file.
    """
    if cfg.protocol != TWO_STEP:
        raise InvalidConfig("train.protocol", "run_two_step needs protocol two-step")
    out, metrics = _output(out_dir)
    model_cfg = model_cfg.with_seed(cfg.seed)

    model = build_model(model_cfg, weight_mode=REAL_WEIGHTS)
    train_phase(model, train, test, cfg, "step1", metrics, teacher, observer)
    if out:
        (out / "step1").mkdir(parents=True, exist_ok=True)
        save_model(model, out / "step1" / "model.dybnn")
        model2 = load_model(out / "step1" / "model.dybnn", weight_mode=BINARY_WEIGHTS)
    else:
        model2 = inherit(model)
    train_phase(model2, train, test, cfg, "step2", metrics, teacher, observer)
    if out:
        (out / "step2").mkdir(parents=True, exist_ok=True)
        save_model(model2, out / "step2" / "model.dybnn")
    return model2, metrics


def inherit(model: Model, weight_mode=BINARY_WEIGHTS) -> Model:
    """Copy of ``model`` with every parameter and buffer bit-identical, new weight mode."""
    clone = build_model(model.cfg, weight_mode=weight_mode, dtype=model.dtype, kernel=model.kernel)
    clone.load_state_arrays({k: v.copy() for k, v in model.state_arrays().items()})
    return clone


def load_teacher(path) -> Model:
    """Load a teacher checkpoint for distillation (any weight mode)."""
    return load_model(path)


def train(model_cfg: ModelConfig, train_data, test_data, cfg: TrainConfig, out_dir=None, teacher=None,
          observer=None):
    """Dispatch on ``cfg.protocol``; returns ``(final model, metrics log)``."""
    run = run_two_step if cfg.protocol == TWO_STEP else run_one_step
    return run(model_cfg, train_data, test_data, cfg, out_dir, teacher, observer)
