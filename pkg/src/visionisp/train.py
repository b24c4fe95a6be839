"""End-to-end SGD training of a pipeline on scene sets, and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .detector import average_precision, detection_loss_logits
from .errors import NumericError
from .pipeline import Pipeline, PipelineConfig
from .rng import substream
from .scenes import SceneSet
from .tensor import GradTape, Tensor, _sigmoid, sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    pipeline: Pipeline
    ap_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    @property
    def final_ap(self) -> float:
        return self.ap_history[-1]


def predict(pipeline: Pipeline, images: np.ndarray, batch: int = 32, denoised: bool = False) -> np.ndarray:
    """Objectness maps (N, G, G) for preprocessed or raw images."""
    if not denoised:
        images = pipeline.denoise(images)
    out = []
    for i in range(0, len(images), batch):
        z = pipeline.logits(Tensor(images[i:i + batch]))
        out.append(_sigmoid(z.data.astype(np.float64))[:, 0])
    return np.concatenate(out) if out else np.zeros((0, pipeline.backbone.grid, pipeline.backbone.grid))


def evaluate(pipeline: Pipeline, data: SceneSet, denoised: bool = False) -> float:
    return average_precision(predict(pipeline, data.images, denoised=denoised), data.labels)


def train_end_to_end(config: PipelineConfig, train: SceneSet, val: SceneSet, pipeline: Pipeline | None = None,
                     epochs: int | None = None) -> TrainResult:
    """Jointly fit every non-frozen block by plain SGD on the detection loss.

    Validation AP is recorded after every epoch. Results are a deterministic
    function of the config (seed included) and the data.
    """
    pipe = pipeline or Pipeline.build(config)
    tr = config.raw["train"]
    epochs = tr["epochs"] if epochs is None else epochs
    lr, batch = tr["lr"], tr["batch"]
    x_train = pipe.denoise(train.images)
    x_val = pipe.denoise(val.images)
    params = pipe.trainable()
    result = TrainResult(pipe)
    for epoch in range(epochs):
        order = substream(config.seed, "shuffle", epoch).permutation(len(train))
        losses = []
        for start in range(0, len(order), batch):
            idx = np.sort(order[start:start + batch])
            with GradTape() as tape:
                logits = pipe.logits(Tensor(x_train[idx]))
                loss = detection_loss_logits(logits, train.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            for t, _ in params:
                t.grad = None
            tape.backward(loss)
            for t, scale in params:
                sgd_step([t], [t.grad], lr * scale)
            pipe.project()
            losses.append(float(loss.data))
        result.loss_history.append(float(np.mean(losses)) if losses else float("nan"))
        result.ap_history.append(evaluate(pipe, SceneSet(x_val, val.labels), denoised=True))
        log.debug("epoch %d loss %.4f val AP %.4f", epoch, result.loss_history[-1], result.ap_history[-1])
    return result
