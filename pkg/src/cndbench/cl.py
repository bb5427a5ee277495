"""Stage trainers: FineTune, MAS, LwF, ER and SSIL.

All trainers share one minibatch SGD loop with early stopping on the
stage's validation accuracy; they differ only in the loss they build per
batch.  Random streams for batch order, replay draws and dropout are
separate, so e.g. ER with an empty buffer replays FineTune exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .datasets import Split, Stage
from .models import Model, ModelSnapshot, Setting
from .tensor import Tape, Tensor


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainerConfig:
    lr: float = 0.05
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    weight_decay: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    mas_lambda: float = 1.0
    lwf_lambda: float = 1.0
    lwf_temperature: float = 2.0
    buffer_per_class: int = 25
    ssil_kd_temperature: float = 2.0
    ssil_kd_on_new: bool = True

    def validate(self) -> None:
        positive = ("lr", "batch_size", "lwf_temperature", "ssil_kd_temperature", "buffer_per_class")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("max_epochs", "early_stop_patience", "weight_decay", "mas_lambda", "lwf_lambda"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


@dataclass
class StageReport:
    stage: int
    method: str
    epochs_run: int = 0
    best_epoch: int = 0
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_val_accuracy: float = float("nan")
    test_accuracy: dict = field(default_factory=dict)  # stage index -> accuracy
    forgetting: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test_accuracy"] = {str(k): v for k, v in self.test_accuracy.items()}
        d["forgetting"] = {str(k): v for k, v in self.forgetting.items()}
        return d


# ---------------------------------------------------------------------------
# shared helpers


def head_index_for(model: Model, stage_index: int) -> int:
    return stage_index if model.setting is Setting.MULTI_HEAD else 0


def local_labels(model: Model, head_index: int, y: np.ndarray) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(model.heads[head_index].class_ids)}
    return np.array([lookup[int(c)] for c in y], dtype=np.int64)


def accuracy(model_or_snap, split: Split, head_index: int) -> float:
    if len(split) == 0:
        return float("nan")
    return float(np.mean(model_or_snap.predict(split.x, head_index) == split.y))


def _stage_rngs(cfg: TrainerConfig, stage_index: int):
    root = np.random.SeedSequence([cfg.seed, stage_index])
    order, replay, drop = root.spawn(3)
    return np.random.default_rng(order), np.random.default_rng(replay), np.random.default_rng(drop)


def _require_head(model: Model, stage: Stage) -> int:
    hi = head_index_for(model, stage.index)
    if hi >= len(model.heads) or not set(stage.class_ids) <= set(model.heads[hi].class_ids):
        raise ConfigurationError(f"no head covers stage {stage.index}; call add_head first")
    return hi


LossFn = Callable[[Model, np.ndarray, np.ndarray, np.random.Generator, np.random.Generator], Tensor]


def _fit(model: Model, stage: Stage, cfg: TrainerConfig, method: str, loss_fn: LossFn,
         post_step: Optional[Callable[[Model], float]] = None) -> StageReport:
    """Minibatch SGD with early stopping; restores the best-validation weights.

    ``post_step`` runs after every SGD step and returns an extra loss value
    to report (used by MAS for its penalty).
    """
    cfg.validate()
    if len(stage.train) == 0:
        raise ValueError(f"stage {stage.index} has no training data")
    hi = _require_head(model, stage)
    model.config.dropout = cfg.dropout
    order_rng, replay_rng, drop_rng = _stage_rngs(cfg, stage.index)
    report = StageReport(stage=stage.index, method=method)
    params = list(model.parameters().values())
    best_state, best_acc, stale = None, -1.0, 0
    n = len(stage.train)
    for epoch in range(cfg.max_epochs):
        model.set_trainable(True)
        perm = order_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            with Tape() as tape:
                loss = loss_fn(model, stage.train.x[idx], stage.train.y[idx], replay_rng, drop_rng)
            tape.backward(loss)
            # parameters off the loss path (e.g. other heads) keep no grad and are left as-is
            T.sgd_step([p for p in params if p.grad is not None], cfg.lr, cfg.weight_decay)
            extra = post_step(model) if post_step is not None else 0.0
            total += (loss.item() + extra) * len(idx)
        model.set_trainable(False)
        acc = accuracy(model, stage.val, hi) if len(stage.val) else -total
        report.train_loss.append(total / n)
        report.val_accuracy.append(acc)
        report.epochs_run = epoch + 1
        if acc > best_acc:
            best_acc, best_state, stale = acc, model.state_dict(), 0
            report.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
        report.best_val_accuracy = best_acc
    model.set_trainable(False)
    return report


def _ce_loss(model: Model, stage: Stage) -> LossFn:
    hi = head_index_for(model, stage.index)

    def loss(m, x, y, _replay, drop):
        z = m.forward_logits(m.forward_features(x, training=True, rng=drop), hi)
        return T.cross_entropy(z, local_labels(m, hi, y))

    return loss


# ---------------------------------------------------------------------------
# FineTune


def train_stage_finetune(model: Model, stage: Stage, cfg: TrainerConfig):
    return model, _fit(model, stage, cfg, "finetune", _ce_loss(model, stage))


# ---------------------------------------------------------------------------
# MAS


@dataclass
class MasState:
    omega: dict  # name -> array, >= 0
    theta_star: dict

    @classmethod
    def zeros(cls, model: Model) -> "MasState":
        state = model.state_dict()
        return cls({k: np.zeros_like(v) for k, v in state.items()}, state)

    def aligned(self, model: Model) -> "MasState":
        """Pad for parameters added since (new heads, grown rows): zero importance."""
        omega, star = {}, {}
        for k, p in model.parameters().items():
            cur = p.data
            if k not in self.omega:
                omega[k], star[k] = np.zeros_like(cur), cur.copy()
                continue
            old_o, old_s = self.omega[k], self.theta_star[k]
            if old_o.shape == cur.shape:
                omega[k], star[k] = old_o, old_s
            elif old_o.ndim == cur.ndim and old_o.shape[1:] == cur.shape[1:] and old_o.shape[0] < cur.shape[0]:
                o = np.zeros_like(cur)
                o[: old_o.shape[0]] = old_o
                s = cur.copy()
                s[: old_s.shape[0]] = old_s
                omega[k], star[k] = o, s
            else:
                raise T.DimensionError(f"MAS state for {k}: {old_o.shape} vs model {cur.shape}")
        return MasState(omega, star)


def estimate_mas_importance(model: Model, stage: Stage, state: Optional[MasState] = None) -> MasState:
    """Add ``mean_x |d ||M(x)||^2 / d theta|`` to the running importance.

    ``M(x)`` is the active head's output vector; the gradient is taken per
    input (batch of one) before the absolute value.
    """
    x_all = stage.train.x
    if len(x_all) == 0:
        raise ValueError("MAS importance needs data")
    hi = _require_head(model, stage)
    state = (state or MasState.zeros(model)).aligned(model)
    names = list(model.parameters())
    params = [model.parameters()[k] for k in names]
    acc = {k: np.zeros_like(p.data) for k, p in zip(names, params)}
    model.set_trainable(True)
    for x in x_all:
        with Tape() as tape:
            out = model.forward_logits(model.forward_features(x[None, :]), hi)
            obj = T.sum_all(T.square(out))
        for k, g in zip(names, tape.gradient(obj, params)):
            acc[k] += np.abs(g)
    model.set_trainable(False)
    n = len(x_all)
    omega = {k: state.omega[k] + acc[k] / n for k in names}
    return MasState(omega, model.state_dict())


def mas_penalty(model: Model, state: MasState) -> float:
    return float(sum((state.omega[k] * (p.data - state.theta_star[k]) ** 2).sum()
                     for k, p in model.parameters().items()))


def train_stage_mas(model: Model, stage: Stage, mas_state: Optional[MasState], cfg: TrainerConfig):
    """CE plus ``mas_lambda * sum Omega (theta - theta*)^2``; re-estimates importance afterwards.

    The quadratic penalty is applied as the exact proximal step of an SGD
    update, ``theta <- theta - c / (1 + c) * (theta - theta*)`` with
    ``c = 2 lr lambda Omega``, which stays stable for any lambda.
    """
    state = (mas_state or MasState.zeros(model)).aligned(model)
    shrink = {}
    for k, om in state.omega.items():
        c = 2.0 * cfg.lr * cfg.mas_lambda * om
        shrink[k] = c / (1.0 + c)

    def prox(m: Model) -> float:
        for k, p in m.parameters().items():
            p.data = p.data - shrink[k] * (p.data - state.theta_star[k])
        return cfg.mas_lambda * mas_penalty(m, state)

    report = _fit(model, stage, cfg, "mas", _ce_loss(model, stage), post_step=prox)
    return model, estimate_mas_importance(model, stage, state), report


# ---------------------------------------------------------------------------
# LwF


def _teacher_targets(teacher: ModelSnapshot, x: np.ndarray, head_index: int, temperature: float) -> np.ndarray:
    return T.softmax(teacher.logits(x, head_index), temperature).data


def _check_teacher(model: Model, teacher: ModelSnapshot) -> None:
    tm = teacher.model
    if tm.setting is not model.setting or tm.config.input_dim != model.config.input_dim \
            or tm.feature_dim != model.feature_dim:
        raise ConfigurationError("teacher snapshot architecture does not match the model")


def kd_loss(student_logits, teacher_logits: np.ndarray, temperature: float) -> Tensor:
    """Distillation between temperature-softened softmaxes, ``T**2``-scaled."""
    q = T.softmax(np.asarray(teacher_logits), temperature).data
    return T.soft_cross_entropy(student_logits, q, temperature)


def train_stage_lwf(model: Model, stage: Stage, prev_snapshot: Optional[ModelSnapshot], cfg: TrainerConfig):
    """New-head CE plus distillation toward ``prev_snapshot`` on every old head.

    In the shared-head setting the old classes' logit columns play the role
    of the previous heads.
    """
    ce = _ce_loss(model, stage)
    if prev_snapshot is None:
        return model, _fit(model, stage, cfg, "lwf", ce)
    _check_teacher(model, prev_snapshot)
    lam, temp = cfg.lwf_lambda, cfg.lwf_temperature
    multi = model.setting is Setting.MULTI_HEAD
    old_heads = range(prev_snapshot.num_heads) if multi else [0]
    n_old = len(prev_snapshot.model.heads[0].class_ids)

    def loss(m, x, y, replay, drop):
        feats = m.forward_features(x, training=True, rng=drop)
        hi = head_index_for(m, stage.index)
        total = T.cross_entropy(m.forward_logits(feats, hi), local_labels(m, hi, y))
        t_feats = prev_snapshot.features(x)
        for h in old_heads:
            s = m.forward_logits(feats, h)
            if not multi:
                s = T.take_cols(s, 0, n_old)
            t = prev_snapshot.model.forward_logits(t_feats, h).data
            total = T.add(total, T.scale(kd_loss(s, t, temp), lam))
        return total

    return model, _fit(model, stage, cfg, "lwf", loss)


# ---------------------------------------------------------------------------
# replay methods


@dataclass
class ReplayBuffer:
    per_class: int
    seed: int = 0
    store: dict = field(default_factory=dict)  # class -> Split
    class_stage: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(s) for s in self.store.values())

    def as_split(self, dim: int) -> tuple[Split, np.ndarray]:
        classes = sorted(self.store)
        split = Split.concat([self.store[c] for c in classes], dim)
        stages = np.concatenate([np.full(len(self.store[c]), self.class_stage[c]) for c in classes]) \
            if classes else np.zeros(0, dtype=np.int64)
        return split, stages


def update_buffer(buffer: ReplayBuffer, stage: Stage) -> ReplayBuffer:
    """Store ``per_class`` uniformly drawn training examples of each new class."""
    rng = np.random.default_rng([buffer.seed, stage.index])
    for c in stage.class_ids:
        if c in buffer.store:
            continue
        idx = np.flatnonzero(stage.train.y == c)
        if len(idx) > buffer.per_class:
            idx = np.sort(rng.choice(idx, size=buffer.per_class, replace=False))
        sp = stage.train
        buffer.store[c] = Split(sp.x[idx].copy(), sp.y[idx].copy(), sp.ids[idx].copy())
        buffer.class_stage[c] = stage.index
    return buffer


def _require_shared(model: Model, name: str) -> None:
    if model.setting is not Setting.SHARED_HEAD:
        raise ConfigurationError(f"{name} requires the shared-head setting")


def _draw_replay(buffer_split: Split, buffer_stage: np.ndarray, k: int, rng: np.random.Generator):
    take = rng.choice(len(buffer_split), size=min(k, len(buffer_split)), replace=False)
    return buffer_split.x[take], buffer_split.y[take], buffer_stage[take]


def train_stage_er(model: Model, stage: Stage, buffer: Optional[ReplayBuffer], cfg: TrainerConfig):
    """Each batch: new samples plus an equal number of replayed ones, one CE over the head."""
    _require_shared(model, "ER")
    if buffer is None or len(buffer) == 0:
        return model, _fit(model, stage, cfg, "er", _ce_loss(model, stage))
    buf, buf_stage = buffer.as_split(model.config.input_dim)

    def loss(m, x, y, replay, drop):
        rx, ry, _ = _draw_replay(buf, buf_stage, len(y), replay)
        xx, yy = np.concatenate([x, rx]), np.concatenate([y, ry])
        z = m.forward_logits(m.forward_features(xx, training=True, rng=drop), 0)
        return T.cross_entropy(z, local_labels(m, 0, yy))

    return model, _fit(model, stage, cfg, "er", loss)


def task_blocks(model: Model, stage_classes: list) -> list[tuple[int, int]]:
    """Column range of each stage's classes inside the shared head."""
    ids = model.heads[0].class_ids
    pos = {c: i for i, c in enumerate(ids)}
    blocks = []
    for classes in stage_classes:
        cols = sorted(pos[c] for c in classes)
        if cols != list(range(cols[0], cols[-1] + 1)):
            raise ConfigurationError("stage classes are not contiguous in the shared head")
        blocks.append((cols[0], cols[-1] + 1))
    return blocks


def separated_ce(logits, labels: np.ndarray, sample_stage: np.ndarray, blocks: list) -> Tensor:
    """Batch-mean CE where each row competes only within its own stage's column block.

    ``labels`` are column indices into the full head.
    """
    ce = None
    for k in np.unique(sample_stage):
        rows = np.flatnonzero(sample_stage == k)
        lo, hi = blocks[k]
        part = T.cross_entropy(T.take_cols(T.take_rows(logits, rows), lo, hi), labels[rows] - lo, reduction="sum")
        ce = part if ce is None else T.add(ce, part)
    return T.scale(ce, 1.0 / len(labels))


def train_stage_ssil(model: Model, stage: Stage, buffer: Optional[ReplayBuffer],
                     prev_snapshot: Optional[ModelSnapshot], cfg: TrainerConfig, stage_classes: list):
    """Separated softmax per task block plus task-wise distillation.

    ``stage_classes[k]`` lists the class ids of stage ``k`` for every stage
    up to and including the current one.
    """
    _require_shared(model, "SSIL")
    if buffer is None or len(buffer) == 0 or prev_snapshot is None:
        return model, _fit(model, stage, cfg, "ssil", _ce_loss(model, stage))
    _check_teacher(model, prev_snapshot)
    buf, buf_stage = buffer.as_split(model.config.input_dim)
    blocks = task_blocks(model, stage_classes[: stage.index + 1])
    temp = cfg.ssil_kd_temperature

    def loss(m, x, y, replay, drop):
        rx, ry, rs = _draw_replay(buf, buf_stage, len(y), replay)
        xx = np.concatenate([x, rx])
        yy = local_labels(m, 0, np.concatenate([y, ry]))
        ss = np.concatenate([np.full(len(y), stage.index), rs])
        z = m.forward_logits(m.forward_features(xx, training=True, rng=drop), 0)
        total = separated_ce(z, yy, ss, blocks)
        kd_rows = np.arange(len(yy)) if cfg.ssil_kd_on_new else np.arange(len(y), len(yy))
        teacher = prev_snapshot.logits(xx[kd_rows], 0)
        zk = T.take_rows(z, kd_rows)
        for lo, hi in blocks[:-1]:
            total = T.add(total, kd_loss(T.take_cols(zk, lo, hi), teacher[:, lo:hi], temp))
        return total

    return model, _fit(model, stage, cfg, "ssil", loss)
