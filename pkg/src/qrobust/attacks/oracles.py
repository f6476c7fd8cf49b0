"""The two surfaces attacks are written against.

:class:`GradientOracle` exposes logits and input gradients of a model.
:class:`PredictOracle` wraps nothing but a probability function, so a
black-box attack handed one has no route to gradients or weights.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor, grad, no_grad
from ..model import ForwardContext, Model


class PredictOracle:
    """Counts every queried sample; safe to share between threads."""

    __slots__ = ("_predict", "_lock", "queries")

    def __init__(self, predict: Callable[[np.ndarray], np.ndarray]):
        self._predict = predict
        self._lock = threading.Lock()
        self.queries = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities for a batch."""
        x = np.asarray(x)
        with self._lock:
            self.queries += len(x)
        return np.asarray(self._predict(x), dtype=np.float64)

    def log_probs(self, x: np.ndarray) -> np.ndarray:
        return np.log(np.maximum(self(x), np.finfo(np.float64).tiny))

    def label(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self(x), axis=1)

    @classmethod
    def of(cls, model: Model) -> "PredictOracle":
        return cls(model.predict)


class GradientOracle:
    """White-box access to a frozen model (inference mode)."""

    def __init__(self, model: Model):
        self.model = model
        self.calls = 0

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.model.spec.input_shape

    def _batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.model.dtype)
        return x[None] if x.shape == self.input_shape else x

    def logits(self, x) -> np.ndarray:
        return self.model.logits(self._batch(x)).astype(np.float64)

    def predict(self, x) -> np.ndarray:
        return self.model.predict(self._batch(x)).astype(np.float64)

    def logits_vjp(self, x, v) -> np.ndarray:
        """Gradient of sum(v * logits(x)) with respect to x."""
        single = np.shape(x) == self.input_shape
        xb = self._batch(x)
        self.calls += 1
        t = Tensor(xb, requires_grad=True, dtype=self.model.dtype)
        z = self.model.forward(t, ForwardContext(training=False))
        (g,) = grad(z, t, np.asarray(v, dtype=self.model.dtype).reshape(z.shape))
        out = np.zeros(xb.shape) if g is None else g.data.astype(np.float64)
        return out[0] if single else out

    def loss_grad(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample cross-entropy and its input gradient; ``y`` holds class
        indices."""
        single = np.shape(x) == self.input_shape
        xb = self._batch(x)
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        self.calls += 1
        t = Tensor(xb, requires_grad=True, dtype=self.model.dtype)
        z = self.model.forward(t, ForwardContext(training=False))
        onehot = np.zeros(z.shape, dtype=self.model.dtype)
        onehot[np.arange(len(y)), y] = 1.0
        # summed (not averaged) so each row's gradient is its own sample's
        lp = ops.log_softmax(z, axis=-1)
        loss = ops.neg(ops.sum(lp * ops.const(onehot, z)))
        (g,) = grad(loss, t)
        with no_grad():
            per_sample = -np.sum(lp.data * onehot, axis=1).astype(np.float64)
        gd = np.zeros(xb.shape) if g is None else g.data.astype(np.float64)
        return (per_sample[0], gd[0]) if single else (per_sample, gd)
