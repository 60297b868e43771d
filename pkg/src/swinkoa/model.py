"""Encoder + classifier composition ``h = g o f``."""
from __future__ import annotations

import numpy as np

from swinkoa import numerics as nx
from swinkoa.config import ModelConfig
from swinkoa.heads import build_classifier, fuse_predictions
from swinkoa.nn import Module
from swinkoa.numerics import Tensor
from swinkoa.swin import SwinEncoder


class KOANet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg.check()
        self.encoder = SwinEncoder(cfg, rng)
        self.head = build_classifier(cfg, rng)

    def __call__(self, images) -> Tensor:
        return self.head(self.encoder(images))

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("encoder.")]

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("head.")]

    def logits(self, images, batch_size: int = 64) -> np.ndarray:
        """Inference-only scores for an image stack, ``(N, 5)``."""
        images = np.asarray(images)
        out = []
        with nx.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self(images[i:i + batch_size]).data)
        return np.concatenate(out, axis=0)

    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with nx.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.encoder(images[i:i + batch_size]).data)
        return np.concatenate(out, axis=0)

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        return fuse_predictions(self.logits(images, batch_size))

    def probabilities(self, images, batch_size: int = 64) -> np.ndarray:
        return self.head.probabilities(self.logits(images, batch_size))
