"""Classification heads mapping pooled features to five KL-grade scores."""
from __future__ import annotations

import numpy as np

from swinkoa import numerics as nx
from swinkoa.config import NUM_GRADES, ModelConfig
from swinkoa.nn import MLP, Module
from swinkoa.numerics import DimensionError, Tensor


class EvaluationError(ValueError):
    pass


class MultiHeadClassifier(Module):
    """Five independent one-vs-rest MLPs; head ``i`` scores grade ``i``."""

    def __init__(self, feature_dim: int, layer_sizes, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.heads = [MLP([feature_dim, *layer_sizes], rng, init="he") for _ in range(NUM_GRADES)]

    def _check(self, features: Tensor) -> None:
        if features.shape[-1] != self.feature_dim:
            raise DimensionError(f"head expects {self.feature_dim}-d features, got {features.shape[-1]}")

    def head_logit(self, features: Tensor, i: int) -> Tensor:
        """Logit of P(grade == i); shape ``(B,)``."""
        self._check(features)
        out = self.heads[i](features)
        return nx.reshape(out, out.shape[:-1])

    def __call__(self, features: Tensor) -> Tensor:
        self._check(features)
        return nx.concat([head(features) for head in self.heads], axis=-1)

    @staticmethod
    def probabilities(logits: np.ndarray) -> np.ndarray:
        return nx._stable_sigmoid(np.asarray(logits, dtype=nx.DTYPE))


class SingleHeadClassifier(Module):
    """One MLP with a 5-way output read through a softmax."""

    def __init__(self, feature_dim: int, hidden_sizes, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.mlp = MLP([feature_dim, *hidden_sizes, NUM_GRADES], rng, init="he")

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.feature_dim:
            raise DimensionError(f"head expects {self.feature_dim}-d features, got {features.shape[-1]}")
        return self.mlp(features)

    @staticmethod
    def probabilities(logits: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return nx.softmax(nx.Tensor(logits), axis=-1).data


def build_classifier(cfg: ModelConfig, rng: np.random.Generator):
    if cfg.classifier_mode == "multi-head":
        return MultiHeadClassifier(cfg.feature_dim, cfg.head_layer_sizes, rng)
    return SingleHeadClassifier(cfg.feature_dim, cfg.head_layer_sizes[:-1], rng)


def fuse_predictions(logits) -> np.ndarray | int:
    """Argmax over the five grade scores; ties go to the lowest grade.

    Accepts one score vector or a ``(B, 5)`` batch.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.shape[-1] != NUM_GRADES:
        raise EvaluationError(f"expected {NUM_GRADES} scores, got shape {z.shape}")
    if np.isnan(z).any():
        raise EvaluationError("NaN logit in prediction")
    pred = np.argmax(z, axis=-1)  # first maximum wins
    return int(pred) if z.ndim == 1 else pred
