"""A trained relation model: feature extractor plus personalized distance head."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .metric import GLOBAL_USER, MetricHead, UserMetric, probability_from_distance
from .network import (LayerStack, decode_checkpoint, encode_checkpoint, forward_batch,
                      atomic_write_bytes)
from pathlib import Path


@dataclass
class RelationModel:
    stack: LayerStack
    head: MetricHead
    relation_type: str = ""
    loss: str = "log_likelihood"
    meta: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.head.rank

    def metric(self, user: str) -> UserMetric:
        return self.head.metric_for(user)

    def features(self, images, batch_size: int = 256) -> np.ndarray:
        """Feature vectors for an ``[N, C, H, W]`` array of images."""
        images = np.asarray(images, dtype=np.float64)
        out = [forward_batch(self.stack, images[s:s + batch_size]).features
               for s in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.stack.feature_dim))

    def pair_probabilities(self, user: str, xi, xj) -> np.ndarray:
        """P for rows of ``xi`` against rows of ``xj`` (broadcasting) under ``user``'s metric."""
        factor = self.head.metric_for(user).factor
        proj = (np.asarray(xi) - np.asarray(xj)) @ factor.T
        return probability_from_distance(np.sum(proj * proj, axis=-1), float(self.head.q))

    def probability(self, user: str, image_i, image_j) -> float:
        feats = self.features(np.stack([image_i, image_j]))
        return float(self.pair_probabilities(user, feats[0], feats[1]))

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta.update({"relation_type": self.relation_type, "loss": self.loss,
                     "users": sorted(self.head.factors)})
        return encode_checkpoint(self.stack, {"metric": self.head.named_params()}, meta)

    def save(self, path) -> str:
        data = self.to_bytes()
        atomic_write_bytes(path, data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RelationModel":
        ckpt = decode_checkpoint(data)
        tensors = ckpt.sections.get("metric", {})
        factors = {k[2:]: np.array(v) for k, v in tensors.items() if k.startswith("E.")}
        head = MetricHead(factors, np.array(tensors.get("q", np.zeros(()))).reshape(()))
        meta = dict(ckpt.meta)
        rel = meta.pop("relation_type", "")
        loss = meta.pop("loss", "log_likelihood")
        meta.pop("users", None)
        return cls(ckpt.stack, head, rel, loss, meta)

    @classmethod
    def load(cls, path) -> "RelationModel":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


__all__ = ["RelationModel", "GLOBAL_USER"]
