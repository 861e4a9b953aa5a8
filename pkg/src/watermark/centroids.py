"""
Per-class feature centroids and K-means selection of the four source classes.
"""

import logging
from dataclasses import dataclass
from typing import List, Union

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

from ..core.datasets import LabeledDataset

logger = logging.getLogger(__name__)

SOURCE_CLASS_COUNT = 4


@dataclass
class ClassCentroidMap:
    """Mean penultimate feature per class."""
    centroids: np.ndarray  # class_count x feature_dim, float64
    counts: np.ndarray  # samples per class

    @property
    def class_count(self) -> int:
        return len(self.centroids)


@torch.no_grad()
def extract_class_centroids(model: nn.Module,
                            data: LabeledDataset,
                            batch_size: int = 512) -> ClassCentroidMap:
    """
    Average the model's penultimate features over each class of `data`.

    Float32 features are accumulated in float64, so the mean is the exact arithmetic mean
    for any realistic sample count.
    """
    model.eval()
    sums = None
    counts = np.bincount(data.labels.numpy(), minlength=data.class_count)
    for label in range(data.class_count):
        if counts[label] == 0:
            raise ValueError(f"class {label} has no samples in the {data.split} split")

    for start in range(0, len(data), batch_size):
        _, features = model(data.images[start:start + batch_size], return_features=True)
        features = features.double()
        if sums is None:
            sums = torch.zeros(data.class_count, features.shape[1], dtype=torch.float64)
        sums.index_add_(0, data.labels[start:start + batch_size], features)

    centroids = sums.numpy() / counts[:, None]
    return ClassCentroidMap(centroids=centroids, counts=counts)


def select_source_classes(centroids: Union[ClassCentroidMap, np.ndarray],
                          k: int = SOURCE_CLASS_COUNT,
                          seed: int = 0) -> List[int]:
    """
    Cluster the class centroids into k groups and elect one representative class per group.

    Each cluster elects the class whose centroid is nearest its center; when an earlier
    cluster already took that class the next-nearest unused class is elected instead.

    Returns:
        k distinct class ids in ascending order
    """
    points = centroids.centroids if isinstance(centroids, ClassCentroidMap) else np.asarray(centroids)
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ValueError(f"cannot select {k} source classes from {len(points)} classes")

    kmeans = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=10,
        max_iter=300,
        tol=1e-6,
        random_state=seed,
    ).fit(points)

    chosen: List[int] = []
    for cluster, center in enumerate(kmeans.cluster_centers_):
        ranking = np.argsort(np.linalg.norm(points - center, axis=1), kind="stable")
        for candidate in ranking:
            if int(candidate) not in chosen:
                if candidate != ranking[0]:
                    logger.warning(
                        "cluster %d representative %d already taken; using class %d",
                        cluster, int(ranking[0]), int(candidate),
                    )
                chosen.append(int(candidate))
                break
    return sorted(chosen)
