"""Full segmenter assembly, cross-entropy loss, and the overfit smoke run.

Training is deliberately plain: full-batch gradient descent on per-pixel
cross-entropy over one synthetic scene, enough to exercise every analytic
backward in the stack and drive the model to memorize the scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import Decoder, decoder_backward, decoder_forward
from .encoder import Encoder, EncoderConfig, encoder_backward, encoder_forward
from .errors import DimensionError
from .metrics import SegmentationMap, confusion, miou, pixel_acc
from .nn import ParamModule
from .scene import SceneParams, SyntheticScene, generate_scene
from .tensor import Tensor, RngState


class Segmenter(ParamModule):
    child_names = ("encoder", "decoder")

    def __init__(self, encoder: Encoder, decoder: Decoder):
        self.encoder = encoder
        self.decoder = decoder

    @staticmethod
    def init(rng: RngState, cfg: EncoderConfig, num_classes: int,
             decoder_dim: int = 64, precision: str = "single") -> "Segmenter":
        enc = Encoder.init(rng, cfg, precision)
        dec = Decoder.init(rng, [s.dim for s in cfg.stages], num_classes,
                           decoder_dim, precision)
        return Segmenter(enc, dec)


def segmenter_forward(model: Segmenter, rgb: Tensor, depth: Tensor,
                      train: bool = False, rng: RngState | None = None):
    features, c_enc = encoder_forward(model.encoder, rgb, depth, train, rng)
    h, w = rgb.shape[0], rgb.shape[1]
    logits, c_dec = decoder_forward(model.decoder, features, h, w)
    return logits, {"enc": c_enc, "dec": c_dec}


def segmenter_backward(model: Segmenter, cache: dict, dlogits: Tensor) -> dict:
    dfeatures, g_dec = decoder_backward(model.decoder, cache["dec"], dlogits)
    g_enc = encoder_backward(model.encoder, cache["enc"], dfeatures)
    grads = {f"decoder.{k}": v for k, v in g_dec.items()}
    grads.update({f"encoder.{k}": v for k, v in g_enc.items()})
    return grads


def cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean per-pixel softmax cross-entropy; returns (loss, d_logits)."""
    h, w, k = logits.shape
    if labels.shape != (h, w):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = logits.data.reshape(-1, k).astype(np.float64)
    y = labels.reshape(-1).astype(np.int64)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    n = flat.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    dflat = np.exp(logp)
    dflat[np.arange(n), y] -= 1.0
    dflat /= n
    return loss, Tensor(dflat.reshape(h, w, k).astype(logits.data.dtype), logits.precision)


def sgd_step(model: ParamModule, grads: dict, lr: float) -> None:
    for name, t in list(model.named_params()):
        g = grads.get(name)
        if g is not None:
            model.set_param(name, Tensor(t.data - lr * g.data, t.precision))


def predict_labels(logits: Tensor) -> SegmentationMap:
    return SegmentationMap(np.argmax(logits.data, axis=2).astype(np.int32))


@dataclass
class TrainRecord:
    step: int
    loss: float
    miou: float
    pixel_acc: float


@dataclass
class TrainResult:
    records: list[TrainRecord] = field(default_factory=list)
    final_miou: float = 0.0
    final_pixel_acc: float = 0.0
    steps_run: int = 0


def smoke_train(model: Segmenter, scene: SyntheticScene, steps: int, lr: float,
                stop_at_miou: float | None = None) -> TrainResult:
    """Overfit the model to one scene with plain gradient descent.

    Raises RuntimeError (with the step index) if the loss goes non-finite.
    """
    result = TrainResult()
    labels = scene.labels.labels
    k = max(int(labels.max()) + 1, model.decoder.num_classes)

    def evaluate(logits: Tensor) -> tuple[float, float]:
        cm = confusion(scene.labels, predict_labels(logits), k)
        return miou(cm), pixel_acc(cm)

    logits, cache = segmenter_forward(model, scene.rgb, scene.depth)
    loss, dlogits = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise RuntimeError("training diverged: non-finite loss at step 0")
    m, pa = evaluate(logits)
    result.records.append(TrainRecord(0, loss, m, pa))
    for step in range(1, steps + 1):
        grads = segmenter_backward(model, cache, dlogits)
        sgd_step(model, grads, lr)
        logits, cache = segmenter_forward(model, scene.rgb, scene.depth)
        loss, dlogits = cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        m, pa = evaluate(logits)
        result.records.append(TrainRecord(step, loss, m, pa))
        result.steps_run = step
        if stop_at_miou is not None and m >= stop_at_miou:
            break
    result.final_miou = result.records[-1].miou
    result.final_pixel_acc = result.records[-1].pixel_acc
    return result
