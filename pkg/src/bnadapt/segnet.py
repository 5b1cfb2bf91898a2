"""toy-unet-v1: a three-level encoder/decoder with batch norm after every conv.

Layout (NHWC, 64x64 input)::

    enc1  conv3x3 Cin->8            + BN + ReLU   64x64
    enc2  conv3x3 8->16  stride 2   + BN + ReLU   32x32
    enc3  conv3x3 16->32 stride 2   + BN + ReLU   16x16
    dec2  up2x, conv3x3 32->16      + BN + ReLU   32x32  (+ enc2)
    dec1  up2x, conv3x3 16->8       + BN + ReLU   64x64  (+ enc1)
    head  conv1x1 8->K, softmax
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, BNMode, Conv2d, Eval, TrainSource
from .rng import stream
from .tensor import Tensor

logger = logging.getLogger(__name__)

SPEC_ID = "toy-unet-v1"
IMAGE_SIZE = 64


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 1
    num_classes: int = 4
    image_size: int = IMAGE_SIZE
    widths: tuple[int, int, int] = (8, 16, 32)
    spec_id: str = SPEC_ID

    @property
    def bn_channels(self) -> list[int]:
        w1, w2, w3 = self.widths
        return [w1, w2, w3, w2, w1]

    def param_count(self) -> int:
        w1, w2, w3 = self.widths
        convs = [(3, self.in_channels, w1), (3, w1, w2), (3, w2, w3), (3, w3, w2), (3, w2, w1), (1, w1, self.num_classes)]
        n = sum(k * k * ci * co + co for k, ci, co in convs)
        return n + 2 * sum(self.bn_channels)


class ToyUNet:
    def __init__(self, spec: NetworkSpec | None = None, seed: int = 0, dtype=np.float64) -> None:
        self.spec = spec or NetworkSpec()
        self.dtype = np.dtype(dtype)
        rng = stream(seed, "init")
        w1, w2, w3 = self.spec.widths
        cin, k = self.spec.in_channels, self.spec.num_classes
        self.convs: dict[str, Conv2d] = {
            "enc1": Conv2d(cin, w1, 3, 1, rng, dtype),
            "enc2": Conv2d(w1, w2, 3, 2, rng, dtype),
            "enc3": Conv2d(w2, w3, 3, 2, rng, dtype),
            "dec2": Conv2d(w3, w2, 3, 1, rng, dtype),
            "dec1": Conv2d(w2, w1, 3, 1, rng, dtype),
            "head": Conv2d(w1, k, 1, 1, rng, dtype),
        }
        self.bns: dict[str, BatchNorm2d] = {
            name: BatchNorm2d(c, dtype=dtype) for name, c in zip(("enc1", "enc2", "enc3", "dec2", "dec1"), self.spec.bn_channels)
        }
        self.seed = seed
        self.phase = "init"
        self.source_iters = 0
        self.adapt_iters = 0

    # -- parameters ---------------------------------------------------------

    def bn_layers(self) -> list[BatchNorm2d]:
        return list(self.bns.values())

    def bn_params(self) -> list[Tensor]:
        return [p for bn in self.bns.values() for p in bn.params()]

    def conv_params(self) -> list[Tensor]:
        return [p for c in self.convs.values() for p in c.params()]

    def params(self) -> list[Tensor]:
        return self.conv_params() + self.bn_params()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def freeze_source(self) -> None:
        for bn in self.bns.values():
            bn.freeze_source()

    @property
    def frozen(self) -> bool:
        return all(bn.frozen for bn in self.bns.values())

    # -- forward ------------------------------------------------------------

    def _block(self, name: str, x: Tensor, mode: BNMode) -> Tensor:
        return T.relu(self.bns[name](self.convs[name](x), mode))

    def logits(self, x, mode: BNMode) -> Tensor:
        x = T.as_tensor(np.asarray(x, dtype=self.dtype) if not isinstance(x, Tensor) else x)
        s = self.spec.image_size
        if x.data.ndim != 4 or x.shape[1:] != (s, s, self.spec.in_channels):
            raise ValueError(f"expected input (B, {s}, {s}, {self.spec.in_channels}), got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("input contains non-finite values")
        e1 = self._block("enc1", x, mode)
        e2 = self._block("enc2", e1, mode)
        e3 = self._block("enc3", e2, mode)
        d2 = T.add(self._block("dec2", T.upsample2x(e3), mode), e2)
        d1 = T.add(self._block("dec1", T.upsample2x(d2), mode), e1)
        return self.convs["head"](d1)

    def forward(self, x, mode: BNMode) -> Tensor:
        return T.softmax_channels(self.logits(x, mode))

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Eval-mode class map for ``images`` (N, H, W, Cin)."""
        out = []
        for i in range(0, len(images), batch_size):
            probs = self.forward(images[i : i + batch_size], Eval())
            out.append(probs.data.argmax(axis=-1).astype(np.uint8))
        return np.concatenate(out, axis=0) if out else np.zeros((0,) + images.shape[1:3], np.uint8)


def cross_entropy(probs: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    """Mean per-pixel cross-entropy of softmax output against integer labels."""
    onehot = np.eye(num_classes, dtype=probs.dtype)[labels]
    picked = T.sum_all(T.mul(T.log(T.add(probs, 1e-12)), onehot))
    n = labels.size
    return T.scale(picked, -1.0 / n)


def sgd_step(params: list[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad.astype(p.dtype, copy=False)
        p.grad = None


@dataclass
class PretrainLog:
    epoch_loss: list[float] = field(default_factory=list)


def pretrain_source(
    model: ToyUNet,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 16,
    momentum: float = 0.1,
) -> PretrainLog:
    """Supervised SGD on source data, then freeze every BN snapshot."""
    if len(images) == 0:
        raise ValueError("source dataset is empty")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    rng = stream(seed, "shuffle/source")
    mode = TrainSource(momentum)
    params = model.params()
    log = PretrainLog()
    k = model.spec.num_classes
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            probs = model.forward(images[idx], mode)
            loss = cross_entropy(probs, labels[idx], k)
            T.backward(loss)
            sgd_step(params, lr)
            model.source_iters += 1
            total += float(loss.data) * len(idx)
            count += len(idx)
        log.epoch_loss.append(total / count)
        logger.info("epoch %d  loss %.5f", epoch + 1, log.epoch_loss[-1])
    model.freeze_source()
    model.phase = "pretrained"
    return log
