"""Training objective: weighted cross entropy, margin loss and masked reconstruction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .capsules import margin_loss
from .tensor import Tensor

__all__ = [
    "LossBreakdown",
    "weighted_cross_entropy",
    "masked_mse",
    "balanced_class_weights",
    "downsample_labels",
    "one_hot",
    "total_loss",
]


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), found range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64, copy=False)


def one_hot(labels: np.ndarray, num_classes: int, axis: int = -1, dtype=np.float32) -> np.ndarray:
    labels = _check_labels(labels, num_classes)
    out = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(out, -1, axis) if axis != -1 else out


def balanced_class_weights(labels: np.ndarray, num_classes: int,
                           clip: Sequence[float] = (0.1, 10.0)) -> np.ndarray:
    """Inverse class frequency ``n / (K * n_k)``, clipped; absent classes get the upper clip."""
    labels = _check_labels(labels, num_classes)
    counts = np.bincount(labels.reshape(-1), minlength=num_classes).astype(np.float64)
    with np.errstate(divide="ignore"):
        w = labels.size / (num_classes * counts)
    w[counts == 0] = clip[1]
    return np.clip(w, *clip)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray,
                           class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean over voxels of ``-w[label] * log softmax(logits)[label]``.

    ``logits`` is ``[N, K, ...]`` and ``labels`` holds class ids shaped like
    ``logits`` without the class axis.
    """
    k = logits.shape[1]
    labels = _check_labels(labels, k)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if class_weights is None:
        class_weights = np.ones(k)
    class_weights = np.asarray(class_weights, dtype=logits.dtype)
    target = one_hot(labels, k, axis=1, dtype=logits.dtype)
    weighted = target * class_weights.reshape((1, k) + (1,) * (logits.ndim - 2))
    picked = T.sum(T.mul(T.log_softmax(logits, axis=1), weighted), axis=1)
    return T.neg(T.mean(picked))


def masked_mse(recon: Tensor, image, labels: np.ndarray) -> Tensor:
    """Squared error averaged over foreground voxels (label != 0); 0 when there are none."""
    image = T._as_tensor(image, recon.dtype)
    if recon.shape != image.shape:
        raise ValueError(f"reconstruction {recon.shape} does not match input {image.shape}")
    mask = (np.asarray(labels) != 0)
    mask = np.broadcast_to(np.expand_dims(mask, 1), recon.shape).astype(recon.dtype)
    count = mask.sum()
    if count == 0:
        return Tensor._wrap(np.zeros((), dtype=recon.dtype))
    diff = T.sub(recon, image)
    return T.scale(T.sum(T.mul(T.mul(diff, diff), mask)), 1.0 / count)


def downsample_labels(labels: np.ndarray, factor: int, num_classes: int,
                      method: str = "majority") -> np.ndarray:
    """Reduce ``[N, H, W, D]`` labels by ``factor`` per axis.

    ``majority`` takes the most frequent class of each block (ties go to the
    lowest class id); ``nearest`` samples the block centre.
    """
    labels = _check_labels(labels, num_classes)
    n, h, w, d = labels.shape
    if h % factor or w % factor or d % factor:
        raise ValueError(f"label shape {labels.shape} not divisible by {factor}")
    if method == "nearest":
        c = factor // 2
        return labels[:, c::factor, c::factor, c::factor].copy()
    if method != "majority":
        raise ValueError(f"unknown downsampling method {method!r}")
    blocks = labels.reshape(n, h // factor, factor, w // factor, factor, d // factor, factor)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(n, h // factor, w // factor,
                                                          d // factor, -1)
    counts = np.stack([(blocks == k).sum(-1) for k in range(num_classes)], axis=-1)
    return counts.argmax(-1)


@dataclass
class LossBreakdown:
    ce: Tensor
    margin: Tensor
    reconstruction: Tensor
    total: Tensor
    weights: tuple

    def as_dict(self) -> dict:
        return {
            "ce": self.ce.item(),
            "margin": self.margin.item(),
            "reconstruction": self.reconstruction.item(),
            "total": self.total.item(),
        }


def total_loss(outputs, labels: np.ndarray, image, config,
               class_weights: Optional[np.ndarray] = None,
               label_downsampling: str = "majority") -> LossBreakdown:
    """Weighted sum of the three training terms; disabled terms contribute exactly 0.

    ``config`` is a :class:`~ucaps.network.NetworkConfig` supplying the loss
    weights, margin constants and the ablation switches. With
    ``class_weights=None`` the cross entropy uses per-batch inverse class
    frequencies.
    """
    w_ce, w_margin, w_rec = config.loss_weights
    k = config.num_classes
    labels = _check_labels(labels, k)
    dtype = outputs.logits.dtype
    zero = Tensor._wrap(np.zeros((), dtype=dtype))

    if class_weights is None:
        class_weights = balanced_class_weights(labels, k)
    ce = weighted_cross_entropy(outputs.logits, labels, class_weights)
    total = T.scale(ce, w_ce)

    margin = zero
    if config.use_margin_loss:
        coarse = downsample_labels(labels, config.downsample_factor, k, label_downsampling)
        m_plus, m_minus, lam = config.margin
        margin = margin_loss(outputs.capsule_lengths, one_hot(coarse, k, dtype=dtype),
                             m_plus, m_minus, lam)
        total = T.add(total, T.scale(margin, w_margin))

    rec = zero
    if config.use_reconstruction and outputs.reconstruction is not None:
        rec = masked_mse(outputs.reconstruction, image, labels)
        total = T.add(total, T.scale(rec, w_rec))

    return LossBreakdown(ce, margin, rec, total, (w_ce, w_margin, w_rec))
