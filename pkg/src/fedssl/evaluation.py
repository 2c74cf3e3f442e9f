"""Frozen-encoder KNN evaluation with accuracy and weighted F1."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .datasets import DatasetContainer
from .errors import ConfigError, MetricError
from .model import ParamSet, forward_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 20
    metric: str = "euclidean"
    batch_size: int = 256

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.metric != "euclidean":
            raise ConfigError(f"unsupported distance metric {self.metric!r}")


@dataclass
class MetricsRecord:
    round: int
    client_id: int
    accuracy: float
    weighted_f1: float
    n_eval: int
    k: int = 20

    def to_dict(self) -> dict:
        return asdict(self)


def extract_features(params: ParamSet, container: DatasetContainer, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode encoder features for every image; no tape is recorded."""
    chunks = []
    for start in range(0, len(container), batch_size):
        idx = np.arange(start, min(start + batch_size, len(container)))
        chunks.append(forward_features(params, container.floats(idx), train=False).data)
    return np.concatenate(chunks), container.labels.copy()


def knn_classify(train_feats: np.ndarray, train_labels: Sequence[int], query_feats: np.ndarray,
                 k: int = 20, chunk: int = 64) -> np.ndarray:
    """Majority vote among the ``k`` nearest references by squared Euclidean distance.

    Distance ties go to the lower reference index; vote ties go to the
    smallest class id.
    """
    train_feats = np.asarray(train_feats, dtype=np.float64)
    query_feats = np.asarray(query_feats, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_feats) < k:
        raise ConfigError(f"KNN needs at least k={k} reference points, got {len(train_feats)}")
    n_classes = int(train_labels.max()) + 1
    preds = np.empty(len(query_feats), dtype=np.int64)
    for start in range(0, len(query_feats), chunk):
        q = query_feats[start:start + chunk]
        diff = q[:, None, :] - train_feats[None, :, :]
        dist = (diff * diff).sum(axis=-1)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for row, nn in enumerate(nearest):
            preds[start + row] = np.bincount(train_labels[nn], minlength=n_classes).argmax()
    return preds


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if len(p) != len(y):
        raise MetricError("predictions and labels differ in length")
    if len(y) == 0:
        raise MetricError("cannot score an empty prediction set")
    return float((p == y).mean())


def weighted_f1(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Support-weighted mean of per-class F1 (0 where precision and recall are both 0)."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if len(p) != len(y):
        raise MetricError("predictions and labels differ in length")
    if len(y) == 0:
        raise MetricError("cannot score an empty prediction set")
    total = 0.0
    for c in range(n_classes):
        tp = float(np.sum((p == c) & (y == c)))
        fp = float(np.sum((p == c) & (y != c)))
        fn = float(np.sum((p != c) & (y == c)))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += f1 * float(np.sum(y == c))
    return total / len(y)


def pooled_accuracy(params: ParamSet, reference: DatasetContainer, query: DatasetContainer,
                    k: int = 20, batch_size: int = 256) -> float:
    """KNN accuracy of one encoder with a single shared reference set.

    Unlike the per-client protocol, the reference set is not label-skewed, so
    the score reflects representation quality rather than shard composition.
    """
    ref_feats, ref_labels = extract_features(params, reference, batch_size)
    query_feats, _ = extract_features(params, query, batch_size)
    return accuracy(knn_classify(ref_feats, ref_labels, query_feats, k), query.labels)


def evaluate_client(params: ParamSet, shard: DatasetContainer, test: DatasetContainer,
                    cfg: KnnConfig, round_idx: int, client_id: int,
                    test_feats: np.ndarray | None = None) -> MetricsRecord:
    """Fit KNN on the client's shard features and score the global test split."""
    k = cfg.k
    if len(shard) < k:
        log.warning("client %d shard has %d samples < k=%d; shrinking k", client_id, len(shard), k)
        k = len(shard)
    ref_feats, ref_labels = extract_features(params, shard, cfg.batch_size)
    if test_feats is None:
        test_feats, _ = extract_features(params, test, cfg.batch_size)
    preds = knn_classify(ref_feats, ref_labels, test_feats, k)
    return MetricsRecord(
        round=round_idx,
        client_id=client_id,
        accuracy=accuracy(preds, test.labels),
        weighted_f1=weighted_f1(preds, test.labels, test.n_classes),
        n_eval=len(test),
        k=k,
    )


def summarize(records: Sequence[MetricsRecord]) -> tuple[dict, dict]:
    """Unweighted mean and population std across clients for both metrics."""
    mean, std = {}, {}
    for key in ("accuracy", "weighted_f1"):
        values = np.array([getattr(r, key) for r in records])
        mean[key] = float(values.mean())
        std[key] = float(values.std())
    return mean, std


def evaluate_all_clients(clients, test: DatasetContainer, cfg: KnnConfig,
                         round_idx: int = 0) -> tuple[list[MetricsRecord], dict, dict]:
    """Per-client KNN scores plus their mean and std across clients.

    ``clients`` yields objects with ``client_id``, ``params`` and ``data``
    (the local train shard). Test features are shared between clients whose
    weights are identical.
    """
    records = []
    cache: dict[str, np.ndarray] = {}
    for c in clients:
        key = c.params.digest()
        if key not in cache:
            cache[key], _ = extract_features(c.params, test, cfg.batch_size)
        records.append(evaluate_client(c.params, c.data, test, cfg, round_idx, c.client_id, cache[key]))
    mean, std = summarize(records)
    return records, mean, std
