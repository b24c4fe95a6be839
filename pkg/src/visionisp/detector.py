"""Tiny grid-cell objectness detector, its loss, and cell-level average precision."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, MetricError, ShapeError
from .fileio import ensure_dir, read_json, read_vten, write_json, write_vten
from .tensor import ConvLayer, Tensor, adaptive_max_pool, conv2d_forward, record, relu, sigmoid, _sigmoid

POS_WEIGHT = 4.0
DEFAULT_WIDTHS = (16, 32, 32)


@dataclass
class BackboneNet:
    """Conv stages (3x3, ReLU) -> adaptive max pool to GxG -> 1x1 head.

    Pooling to the label grid keeps the head geometry fixed whatever the
    resolution delivered by the preprocessing blocks. ``offset`` is subtracted
    from the input first; 0.5 centres [0, 1] images, TVS output needs 0.
    """

    stages: list[ConvLayer]
    head: ConvLayer
    grid: int = 6
    offset: float = 0.5

    @classmethod
    def create(cls, rng: np.random.Generator, widths=DEFAULT_WIDTHS, first_stride: int = 2, grid: int = 6,
               in_channels: int = 3, dtype=np.float32, offset: float = 0.5) -> "BackboneNet":
        strides = (first_stride, 2, 1)
        if len(widths) != 3:
            raise ConfigError("backbone needs exactly three stage widths")
        stages = []
        c_in = in_channels
        for i, (c_out, s) in enumerate(zip(widths, strides)):
            w = rng.standard_normal((c_out, c_in, 3, 3)) * math.sqrt(2.0 / (9 * c_in))
            stages.append(ConvLayer(Tensor(w.astype(dtype), True, f"backbone.stage{i + 1}.weight"),
                                    Tensor(np.zeros(c_out, dtype), True, f"backbone.stage{i + 1}.bias"),
                                    stride=s, padding=1))
            c_in = c_out
        hw = rng.standard_normal((1, c_in, 1, 1)) * math.sqrt(1.0 / c_in)
        head = ConvLayer(Tensor(hw.astype(dtype), True, "backbone.head.weight"),
                         Tensor(np.zeros(1, dtype), True, "backbone.head.bias"))
        return cls(stages, head, grid, offset)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for layer in self.stages + [self.head]:
            out += layer.params
        return out

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(layer.weight.shape[0] for layer in self.stages)

    @property
    def first_stride(self) -> int:
        return int(self.stages[0].stride)

    def with_first_stride(self, stride: int) -> "BackboneNet":
        first = dataclasses.replace(self.stages[0], stride=stride)
        return dataclasses.replace(self, stages=[first] + self.stages[1:])

    def with_offset(self, offset: float) -> "BackboneNet":
        return dataclasses.replace(self, offset=offset)


def backbone_features(image: Tensor, net: BackboneNet, tap: int | None = None) -> Tensor:
    """Activations after stage ``tap`` (1-indexed); all stages when ``tap`` is None."""
    x = image - net.offset if net.offset else image
    for i, layer in enumerate(net.stages, start=1):
        if x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(f"stage {i} expects {layer.weight.shape[1]} channels, got {x.shape[1]}")
        x = relu(conv2d_forward(x, layer))
        if tap == i:
            return x
    if tap is not None:
        raise ConfigError(f"no stage {tap}; the net has {len(net.stages)}")
    return x


def backbone_logits(image: Tensor, net: BackboneNet) -> Tensor:
    feats = backbone_features(image, net)
    if feats.shape[2] < net.grid or feats.shape[3] < net.grid:
        raise ShapeError(f"feature map {feats.shape[2]}x{feats.shape[3]} is smaller than the {net.grid}x{net.grid} grid")
    pooled = adaptive_max_pool(feats, (net.grid, net.grid))
    return conv2d_forward(pooled, net.head)


def backbone_forward(image: Tensor, net: BackboneNet) -> Tensor:
    """Objectness map (N, 1, G, G) in (0, 1)."""
    return sigmoid(backbone_logits(image, net))


def detection_loss_logits(logits: Tensor, labels: np.ndarray, pos_weight: float = POS_WEIGHT) -> Tensor:
    """Mean of ``-[w*y*log(p) + (1-y)*log(1-p)]`` over cells, computed from logits."""
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    # softplus(z) = log(1 + e^z), stable form
    sp_pos = np.logaddexp(0, z)
    sp_neg = np.logaddexp(0, -z)
    n = z.size
    value = np.sum(pos_weight * y * sp_neg + (1 - y) * sp_pos) / n
    s = _sigmoid(z)

    def back(g):
        return (g * (pos_weight * y * (s - 1) + (1 - y) * s) / n,)

    return record("detection_loss", (logits,), np.asarray(value, dtype=logits.dtype), back)


def detection_loss(pred, labels, pos_weight: float = POS_WEIGHT) -> float:
    """Weighted binary cross-entropy on probabilities (clipped to [1e-6, 1-1e-6])."""
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size != y.size:
        raise ShapeError(f"prediction has {p.size} cells, labels {y.size}")
    p = np.clip(p.reshape(y.shape), 1e-6, 1 - 1e-6)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1 - y) * np.log(1 - p))))


def average_precision(preds, labels) -> float:
    """Non-interpolated area under the pooled cell-level precision-recall curve.

    Cells are ranked by score; tied scores form one threshold, so the result
    depends only on the ordering of distinct scores.
    """
    scores = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in preds]) if len(preds) else np.zeros(0)
    truth = np.concatenate([np.asarray(l).reshape(-1) for l in labels]).astype(bool) if len(labels) else np.zeros(0, bool)
    if scores.size == 0:
        raise MetricError("average precision of an empty set")
    if scores.size != truth.size:
        raise ShapeError(f"{scores.size} scores for {truth.size} labels")
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(precision * recall_gain))


def save_backbone(directory, net: BackboneNet) -> None:
    d = ensure_dir(directory)
    for i, layer in enumerate(net.stages + [net.head]):
        write_vten(d / f"backbone_{i}_weight.vten", layer.weight.data)
        write_vten(d / f"backbone_{i}_bias.vten", layer.bias.data)
    write_json(d / "backbone.json", {"widths": list(net.widths), "grid": net.grid, "first_stride": net.first_stride,
                                       "offset": net.offset})


def load_backbone(directory, dtype=np.float32) -> BackboneNet:
    d = Path(directory)
    if not (d / "backbone.json").exists():
        raise InputError(f"{directory}: no backbone.json")
    man = read_json(d / "backbone.json")
    net = BackboneNet.create(np.random.default_rng(0), tuple(man["widths"]), int(man["first_stride"]),
                             int(man["grid"]), dtype=dtype, offset=float(man.get("offset", 0.5)))
    for i, layer in enumerate(net.stages + [net.head]):
        w = read_vten(d / f"backbone_{i}_weight.vten")
        b = read_vten(d / f"backbone_{i}_bias.vten")
        if w.size != layer.weight.data.size or b.size != layer.bias.data.size:
            raise ConfigError(f"backbone layer {i} weights do not match backbone.json")
        layer.weight.data = w.reshape(layer.weight.shape).astype(dtype)
        layer.bias.data = b.reshape(layer.bias.shape).astype(dtype)
    return net
