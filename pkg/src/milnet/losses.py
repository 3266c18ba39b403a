"""Bag-level losses for weak-to-strong training of the WHEN detector.

A bag is the vector of frame predictions of one recording (truncated to
its unpadded length) together with a 0/1 recording label.  Each loss
takes the predictions as a :class:`~milnet.tensor.Tensor` so gradients
flow back into the network; :func:`evaluate` wraps any of them for plain
numpy inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from milnet import tensor as tn
from milnet.tensor import Tensor

EPSILON = 1e-7


def _check_target(y):
    arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"bce: targets must lie in [0, 1], got {arr}")


def bce(x, y) -> Tensor:
    """Elementwise binary cross-entropy with x clipped to [eps, 1 - eps]."""
    _check_target(y)
    x = tn.as_tensor(x)
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=x.dtype))
    xc = tn.clip(x, EPSILON, 1 - EPSILON)
    return -(y * tn.log(xc) + (1 - y) * tn.log(1 - xc))


def _check_bag(o, label):
    if o.ndim != 1 or o.shape[0] < 1:
        raise ValueError(f"a bag needs a 1-d, non-empty prediction vector, got {o.shape}")
    if label not in (0, 1):
        raise ValueError(f"bag label must be 0 or 1, got {label!r}")


def false_strong(o: Tensor, label) -> Tensor:
    """Bag label copied onto every frame, averaged per-frame bce."""
    _check_bag(o, label)
    return tn.mean(bce(o, float(label)))


def max_squared(o: Tensor, label) -> Tensor:
    """Squared divergence of the bag maximum from the label, halved."""
    _check_bag(o, label)
    d = tn.max_(o) - float(label)
    return d * d * 0.5


def max_bce(o: Tensor, label) -> Tensor:
    """bce between the bag maximum and the label."""
    _check_bag(o, label)
    return bce(tn.max_(o), float(label))


def noisy_or(o) -> Tensor:
    """Bag probability 1 - prod(1 - o)."""
    o = tn.as_tensor(o)
    return 1 - tn.prod(1 - o)


def noisy_or_loss(o: Tensor, label) -> Tensor:
    _check_bag(o, label)
    return bce(noisy_or(o), float(label))


def mmm(o: Tensor, label, mean_ratio=0.5) -> Tensor:
    """Average of three bce terms: max against the label, mean against
    ``mean_ratio * label`` and min against 0."""
    _check_bag(o, label)
    y = float(label)
    total = bce(tn.max_(o), y) + bce(tn.mean(o), mean_ratio * y) + bce(tn.min_(o), 0.0)
    return total * (1.0 / 3.0)


LOSSES = {
    "mmm": mmm,
    "max": max_squared,
    "max_bce": max_bce,
    "noisyor": noisy_or_loss,
    "false_strong": false_strong,
}


def get_loss(token):
    try:
        return LOSSES[token]
    except KeyError:
        raise ValueError(f"unknown WHEN loss {token!r}; choose from {sorted(LOSSES)}") from None


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray


def evaluate(token, predictions, label, **kwargs) -> LossValue:
    """Loss value and d(loss)/d(predictions) for one bag given as numpy."""
    fn = get_loss(token)
    o = Tensor(np.array(predictions, dtype=np.float64), requires_grad=True)
    with tn.Tape() as tape:
        value = fn(o, label, **kwargs)
    grad = tape.backward(value, [o])[o]
    return LossValue(value.item(), grad)


def when_batch_loss(pred: Tensor, lengths, labels, token="mmm", **kwargs) -> Tensor:
    """Mean over the minibatch of the per-bag loss.

    ``pred`` is B x T; bag i uses frames ``[:lengths[i]]`` so padded
    frames never enter a max/mean/min.
    """
    fn = get_loss(token)
    if pred.ndim != 2 or len(lengths) != pred.shape[0] or len(labels) != pred.shape[0]:
        raise ValueError(f"predictions {pred.shape} vs {len(lengths)} lengths / {len(labels)} labels")
    total = None
    for i, (m, y) in enumerate(zip(lengths, labels)):
        term = fn(pred[i, :int(m)], int(y), **kwargs)
        total = term if total is None else total + term
    return total * (1.0 / pred.shape[0])


def who_batch_loss(pred: Tensor, targets) -> Tensor:
    """bce averaged over labels and minibatch."""
    targets = np.asarray(targets, dtype=pred.dtype)
    if targets.shape != pred.shape:
        raise ValueError(f"predictions {pred.shape} vs targets {targets.shape}")
    return tn.mean(bce(pred, targets))
