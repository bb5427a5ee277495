"""MLP classifiers with multi-head or shared-head output layers."""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class Setting(str, Enum):
    MULTI_HEAD = "multi_head"
    SHARED_HEAD = "shared_head"


@dataclass
class ModelConfig:
    input_dim: int = 16
    hidden: tuple = (64, 64)
    feature_dim: int = 32
    head_bias: bool = True
    normalized_head: bool = False
    dropout: float = 0.0
    feature_relu: bool = True  # activation on the last feature layer


@dataclass
class Head:
    theta: Tensor
    bias: Optional[Tensor]
    normalized: bool
    class_ids: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.theta.shape[0]

    def effective_weight(self) -> Tensor:
        return T.row_normalize(self.theta) if self.normalized else self.theta


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Feature extractor ``phi`` (ReLU MLP) plus linear heads ``theta``.

    Feature layers store weights as ``[fan_in, fan_out]``; heads store
    ``theta`` as ``[k, feature_dim]`` so that ``logits = phi(x) @ theta.T``.
    """

    def __init__(self, config: ModelConfig, setting: Setting | str, seed: int = 0):
        self.config = config
        self.setting = Setting(setting)
        self._rng = np.random.default_rng(seed)
        self.feature_layers: list[tuple[Tensor, Tensor]] = []
        dims = [config.input_dim, *config.hidden, config.feature_dim]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = Tensor(_uniform(self._rng, fan_in, (fan_in, fan_out)))
            b = Tensor(_uniform(self._rng, fan_in, (fan_out,)))
            self.feature_layers.append((w, b))
        self.heads: list[Head] = []

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def class_ids(self) -> list:
        return [c for h in self.heads for c in h.class_ids]

    # -- structure -----------------------------------------------------------

    def _new_rows(self, k: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
        n = self.config.feature_dim
        theta = _uniform(self._rng, n, (k, n))
        bias = _uniform(self._rng, n, (k,)) if self.config.head_bias else None
        return theta, bias

    def add_head(self, new_class_ids) -> Head:
        """Multi-head: attach a fresh head. Shared-head: append rows to the single head."""
        new_class_ids = [int(c) for c in new_class_ids]
        if len(set(new_class_ids)) != len(new_class_ids) or set(new_class_ids) & set(self.class_ids):
            raise ValueError(f"class ids {new_class_ids} overlap existing {self.class_ids}")
        theta, bias = self._new_rows(len(new_class_ids))
        if self.setting is Setting.MULTI_HEAD or not self.heads:
            head = Head(
                Tensor(theta),
                Tensor(bias) if bias is not None else None,
                self.config.normalized_head,
                list(new_class_ids),
            )
            self.heads.append(head)
            return head
        head = self.heads[0]
        head.theta = Tensor(np.vstack([head.theta.data, theta]))
        if head.bias is not None:
            head.bias = Tensor(np.concatenate([head.bias.data, bias]))
        head.class_ids = head.class_ids + new_class_ids
        return head

    grow_head = add_head

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.feature_layers):
            params[f"feat.{i}.weight"] = w
            params[f"feat.{i}.bias"] = b
        for i, h in enumerate(self.heads):
            params[f"head.{i}.theta"] = h.theta
            if h.bias is not None:
                params[f"head.{i}.bias"] = h.bias
        return params

    def head_params(self, index: int) -> list[Tensor]:
        h = self.heads[index]
        return [h.theta] + ([h.bias] if h.bias is not None else [])

    def feature_params(self) -> list[Tensor]:
        return [p for layer in self.feature_layers for p in layer]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            raise ValueError("state dict keys do not match the model")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise DimensionError(f"{k}: {p.shape} vs {state[k].shape}")
            p.data = state[k].copy()

    # -- forward -------------------------------------------------------------

    def _check_input(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim == 1:
            x = Tensor._wrap(x.data.reshape(1, -1)) if not x.requires_grad else x
        if x.data.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise DimensionError(f"input shape {x.shape}, expected [*, {self.config.input_dim}]")
        return x

    def forward_features(self, x, training: bool = False, rng=None, return_hidden: bool = False):
        """Return ``phi(x)`` for a batch; with ``return_hidden`` also every layer output."""
        h = self._check_input(x)
        hidden = []
        last = len(self.feature_layers) - 1
        for i, (w, b) in enumerate(self.feature_layers):
            h = T.add(T.matmul(h, w), b)
            if i < last or self.config.feature_relu:
                h = T.relu(h)
            if training and self.config.dropout > 0:
                h = T.dropout(h, self.config.dropout, rng)
            hidden.append(h)
        return (h, hidden) if return_hidden else h

    def forward_logits(self, features, head_index: int = 0) -> Tensor:
        if not 0 <= head_index < len(self.heads):
            raise IndexError(f"head {head_index} does not exist ({len(self.heads)} heads)")
        feats = T.as_tensor(features)
        if feats.data.ndim == 1:
            feats = Tensor._wrap(feats.data.reshape(1, -1))
        if feats.shape[1] != self.feature_dim:
            raise DimensionError(f"features of width {feats.shape[1]}, expected {self.feature_dim}")
        head = self.heads[head_index]
        out = T.matmul(feats, T.transpose(head.effective_weight()))
        if head.bias is not None:
            out = T.add(out, head.bias)
        return out

    def logits(self, x, head_index: int = 0) -> np.ndarray:
        return self.forward_logits(self.forward_features(x), head_index).data

    def predict(self, x, head_index: int = 0) -> np.ndarray:
        """Global class ids; ``argmax`` breaks ties toward the lowest index."""
        z = self.logits(x, head_index)
        ids = np.asarray(self.heads[head_index].class_ids)
        return ids[np.argmax(z, axis=1)]

    def snapshot(self, stage: int) -> "ModelSnapshot":
        return ModelSnapshot.create(self, stage)


class ModelSnapshot:
    """Read-only deep copy of a model after a given stage."""

    def __init__(self, model: Model, stage: int):
        self.model = model
        self.stage = stage

    @classmethod
    def create(cls, model: Model, stage: int) -> "ModelSnapshot":
        m = copy.deepcopy(model)
        for p in m.parameters().values():
            p.grad = None
            p.requires_grad = False
            p.data.setflags(write=False)
        return cls(m, stage)

    @property
    def setting(self) -> Setting:
        return self.model.setting

    @property
    def num_heads(self) -> int:
        return len(self.model.heads)

    def features(self, x) -> np.ndarray:
        return self.model.forward_features(x).data

    def hidden(self, x) -> list[np.ndarray]:
        _, hidden = self.model.forward_features(x, return_hidden=True)
        return [h.data for h in hidden]

    def logits(self, x, head_index: int = 0) -> np.ndarray:
        return self.model.logits(x, head_index)

    def predict(self, x, head_index: int = 0) -> np.ndarray:
        return self.model.predict(x, head_index)

    def thaw(self) -> Model:
        """Writable copy, e.g. for resuming training from a checkpoint."""
        m = copy.deepcopy(self.model)
        for p in m.parameters().values():
            p.data = np.array(p.data)
        return m


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic  b"CNDM"            4 bytes
#   version                   u32 LE (=1)
#   descriptor length         u32 LE, then UTF-8 JSON (config, setting, heads)
#   stage index               u32 LE
#   parameter count           u32 LE
#   per parameter, in ``Model.parameters()`` order:
#       name length u32, UTF-8 name, ndim u32, ndim x u32 dims,
#       float64 LE data, row-major

MAGIC = b"CNDM"
VERSION = 1


def _descriptor(model: Model) -> dict:
    cfg = model.config
    return {
        "input_dim": cfg.input_dim,
        "hidden": list(cfg.hidden),
        "feature_dim": cfg.feature_dim,
        "head_bias": cfg.head_bias,
        "normalized_head": cfg.normalized_head,
        "dropout": cfg.dropout,
        "feature_relu": cfg.feature_relu,
        "setting": model.setting.value,
        "heads": [{"class_ids": h.class_ids, "normalized": h.normalized} for h in model.heads],
    }


def save_checkpoint(snapshot: ModelSnapshot, path) -> None:
    model = snapshot.model
    buf = io.BytesIO()
    desc = json.dumps(_descriptor(model), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(desc)))
    buf.write(desc)
    params = model.parameters()
    buf.write(struct.pack("<II", snapshot.stage, len(params)))
    for name, p in params.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelSnapshot:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError("not a checkpoint file")
    off = 4
    version, dlen = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    desc = json.loads(blob[off : off + dlen])
    off += dlen
    stage, count = struct.unpack_from("<II", blob, off)
    off += 8
    cfg = ModelConfig(
        input_dim=desc["input_dim"],
        hidden=tuple(desc["hidden"]),
        feature_dim=desc["feature_dim"],
        head_bias=desc["head_bias"],
        normalized_head=desc["normalized_head"],
        dropout=desc["dropout"],
        feature_relu=desc.get("feature_relu", True),
    )
    model = Model(cfg, desc["setting"])
    for h in desc["heads"]:
        model.add_head(h["class_ids"])
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    model.load_state_dict(state)
    return ModelSnapshot.create(model, stage)
