"""Linear-softmax patch classifier with analytic loss gradients.

All functions accept a single feature vector or a 2-D batch (rows are
patches). Losses return the per-row loss and the gradient w.r.t. the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .guidelines import N_CLASSES


@dataclass
class ClassifierParams:
    weights: np.ndarray
    bias: np.ndarray
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weights_buf: np.ndarray = field(default=None, repr=False)
    bias_buf: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float)
        self.bias = np.array(self.bias, dtype=float).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[0] != N_CLASSES:
            raise ValueError(f"weights must be 4 x d, got {self.weights.shape}")
        if self.bias.shape != (N_CLASSES,):
            raise ValueError(f"bias must have 4 entries, got {self.bias.shape}")
        if self.weights_buf is None:
            self.weights_buf = np.zeros_like(self.weights)
        if self.bias_buf is None:
            self.bias_buf = np.zeros_like(self.bias)
        self.weights_buf = np.array(self.weights_buf, dtype=float)
        self.bias_buf = np.array(self.bias_buf, dtype=float).reshape(-1)
        if self.weights_buf.shape != self.weights.shape or self.bias_buf.shape != self.bias.shape:
            raise ValueError("momentum buffers must match parameter shapes")
        for arr in (self.weights, self.bias, self.weights_buf, self.bias_buf):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters must be finite")

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, n_features: int, **kw) -> "ClassifierParams":
        return cls(np.zeros((N_CLASSES, n_features)), np.zeros(N_CLASSES), **kw)

    @classmethod
    def random(cls, n_features: int, seed: int, scale: float = 0.01, **kw) -> "ClassifierParams":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (N_CLASSES, n_features)), np.zeros(N_CLASSES), **kw)

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            self.weights.copy(),
            self.bias.copy(),
            self.learning_rate,
            self.momentum,
            self.weights_buf.copy(),
            self.bias_buf.copy(),
        )

    def to_dict(self) -> dict:
        """Flat JSON-ready checkpoint; matrices are stored row-major."""
        return {
            "n_features": self.n_features,
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "weights_momentum": self.weights_buf.ravel().tolist(),
            "bias_momentum": self.bias_buf.tolist(),
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierParams":
        n = int(d["n_features"])
        return cls(
            np.asarray(d["weights"], dtype=float).reshape(N_CLASSES, n),
            np.asarray(d["bias"], dtype=float),
            float(d.get("learning_rate", 1e-3)),
            float(d.get("momentum", 0.9)),
            np.asarray(d["weights_momentum"], dtype=float).reshape(N_CLASSES, n)
            if "weights_momentum" in d
            else None,
            np.asarray(d["bias_momentum"], dtype=float) if "bias_momentum" in d else None,
        )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params: ClassifierParams, features) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(logits, probs, predicted_class)``.

    The class is the argmax of the logits (same as of the probabilities, but
    immune to softmax round-off); ties go to the lower class.
    """
    x = np.asarray(features, dtype=float)
    if x.shape[-1] != params.n_features:
        raise ValueError(f"expected {params.n_features} features, got {x.shape[-1]}")
    logits = x @ params.weights.T + params.bias
    probs = softmax(logits)
    return logits, probs, np.argmax(logits, axis=-1)


def _admissible_mask(admissible, shape) -> np.ndarray:
    """Boolean mask of admissible classes, broadcast to ``shape``.

    ``admissible`` is either a set of class indices or a boolean array.
    """
    if isinstance(admissible, np.ndarray) and admissible.dtype == bool:
        mask = admissible
    else:
        G = set(int(g) for g in admissible)
        if any(g < 0 or g >= N_CLASSES for g in G):
            raise ValueError(f"admissible classes must be in 0..3, got {sorted(G)}")
        mask = np.zeros(N_CLASSES, dtype=bool)
        mask[list(G)] = True
    mask = np.broadcast_to(mask, shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("admissible set must be nonempty")
    return mask


def pseudo_label(probs, admissible) -> np.ndarray:
    """Move the probability mass of inadmissible classes evenly onto the admissible ones."""
    p = np.asarray(probs, dtype=float)
    mask = _admissible_mask(admissible, p.shape)
    outside = np.where(mask, 0.0, p).sum(axis=-1, keepdims=True)
    size = mask.sum(axis=-1, keepdims=True)
    return np.where(mask, p + outside / size, 0.0)


def partial_loss(logits, admissible) -> Tuple[np.ndarray, np.ndarray]:
    """Partial-label cross-entropy.

    The pseudo-label is computed from the current prediction and held fixed,
    so the gradient w.r.t. the logits is simply ``p - ybar``.
    """
    z = np.asarray(logits, dtype=float)
    logp = log_softmax(z)
    p = np.exp(logp)
    target = pseudo_label(p, admissible)
    # 0 * log(p) is 0 even when p underflows
    loss = -np.where(target > 0, target * logp, 0.0).sum(axis=-1)
    return loss, p - target


def ce_loss(logits, target) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=float)
    t = np.asarray(target)
    if np.any((t < 0) | (t >= N_CLASSES)):
        raise ValueError("target must be in 0..3")
    logp = log_softmax(z)
    onehot = np.eye(N_CLASSES)[t]
    loss = -(onehot * logp).sum(axis=-1)
    return loss, np.exp(logp) - onehot


def param_grads(features, grad_logits) -> Tuple[np.ndarray, np.ndarray]:
    """Chain rule from logit gradients (rows = patches) to summed weight/bias gradients."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    g = np.atleast_2d(np.asarray(grad_logits, dtype=float))
    return g.T @ x, g.sum(axis=0)


def sgd_step(params: ClassifierParams, grads: Tuple[np.ndarray, np.ndarray]) -> ClassifierParams:
    """One SGD step with Nesterov momentum, applied in place.

    buf <- mu * buf + g ;  theta <- theta - lr * (g + mu * buf)
    """
    gw, gb = (np.asarray(g, dtype=float) for g in grads)
    if gw.shape != params.weights.shape or gb.shape != params.bias.shape:
        raise ValueError("gradient shapes do not match parameters")
    if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
        raise FloatingPointError("non-finite gradient")
    mu, lr = params.momentum, params.learning_rate
    params.weights_buf = mu * params.weights_buf + gw
    params.bias_buf = mu * params.bias_buf + gb
    params.weights = params.weights - lr * (gw + mu * params.weights_buf)
    params.bias = params.bias - lr * (gb + mu * params.bias_buf)
    if not (np.all(np.isfinite(params.weights)) and np.all(np.isfinite(params.bias))):
        raise FloatingPointError("update produced non-finite parameters")
    return params
