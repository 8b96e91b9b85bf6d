"""
Domain-gap metrics over latent clouds.

Each image is embedded through one of four paths ({raw, aligned} x
{E_V, policy feature}); per-domain clouds are then compared pairwise with
the energy distance or an RBF-kernel MMD, and projected to 2-D for plots.
"""
import itertools
from dataclasses import dataclass, field
from typing import Any, Literal, Optional

import numpy as np
import torch
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.metrics.pairwise import euclidean_distances, rbf_kernel

from ..middleware.error_handler import ParameterError
from ..utils.logger import get_logger
from .aligner import VisualAligner
from .datasets import images_to_tensor
from .policy import FeatureExtractor
from .vlm import EncoderAdapter

logger = get_logger(__name__)

Metric = Literal["energy", "mmd"]
Space = Literal["policy", "embedding"]


@dataclass
class GapReport:
    domains: list[str]
    metric: str
    space: str
    aligned: bool
    stats: dict[str, dict[str, float]]
    pairwise: dict[tuple[str, str], float]
    gap: float
    projection: np.ndarray                   # (N, 2)
    labels: list[str] = field(default_factory=list)

    def distance(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        return self.pairwise[(a, b)] if (a, b) in self.pairwise else self.pairwise[(b, a)]

    def mean_pairwise(self, names: list[str]) -> float:
        """Mean distance over all pairs drawn from `names`."""
        pairs = list(itertools.combinations(names, 2))
        if not pairs:
            raise ParameterError("mean pairwise distance needs at least 2 domains")
        return float(np.mean([self.distance(a, b) for a, b in pairs]))

    def gap_to(self, reference: str, others: list[str]) -> float:
        """Mean distance between `reference` and each domain in `others`."""
        return float(np.mean([self.distance(reference, o) for o in others]))

    def projection_rows(self) -> list[dict[str, Any]]:
        return [
            {"domain": label, "x": float(x), "y": float(y)}
            for label, (x, y) in zip(self.labels, self.projection)
        ]


# ============================================================================
# Distances
# ============================================================================

def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (never negative)."""
    xy = euclidean_distances(x, y).mean()
    xx = euclidean_distances(x, x).mean()
    yy = euclidean_distances(y, y).mean()
    return float(max(0.0, 2.0 * xy - xx - yy))


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    pooled = np.concatenate([x, y])
    d = euclidean_distances(pooled, pooled)
    positive = d[d > 0]
    return float(np.median(positive)) if len(positive) else 1.0


def mmd_rbf(x: np.ndarray, y: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Biased squared MMD with an RBF kernel; bandwidth from the pooled median distance."""
    sigma = bandwidth or median_bandwidth(x, y)
    gamma = 1.0 / (2.0 * sigma ** 2)
    value = rbf_kernel(x, x, gamma=gamma).mean() + rbf_kernel(y, y, gamma=gamma).mean() \
        - 2.0 * rbf_kernel(x, y, gamma=gamma).mean()
    return float(max(0.0, value))


DISTANCES = {"energy": energy_distance, "mmd": mmd_rbf}


def project_2d(points: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    if method == "pca":
        return PCA(n_components=2, svd_solver="full").fit_transform(points)
    if method == "tsne":
        perplexity = float(min(30, max(2, len(points) // 4)))
        return TSNE(n_components=2, init="pca", random_state=seed, perplexity=perplexity).fit_transform(points)
    raise ParameterError(f"unknown projection {method!r}")


def gap_from_clouds(
    clouds: dict[str, np.ndarray],
    metric: Metric = "energy",
    projection: str = "pca",
    seed: int = 0,
    space: str = "embedding",
    aligned: bool = False,
) -> GapReport:
    """Gap report for precomputed latent clouds (one (n, d) array per domain)."""
    if len(clouds) < 2:
        raise ParameterError(f"domain gap needs at least 2 domains, got {len(clouds)}")
    if metric not in DISTANCES:
        raise ParameterError(f"unknown gap metric {metric!r}")
    names = list(clouds)
    arrays = {n: np.asarray(clouds[n], dtype=np.float64) for n in names}
    dist = DISTANCES[metric]
    pairwise = {(a, b): dist(arrays[a], arrays[b]) for a, b in itertools.combinations(names, 2)}

    stats = {}
    for name, cloud in arrays.items():
        centered = cloud - cloud.mean(axis=0)
        stats[name] = {
            "n": float(len(cloud)),
            "mean_norm": float(np.linalg.norm(cloud.mean(axis=0))),
            "spread": float(np.mean(np.sum(centered ** 2, axis=1))),
        }

    stacked = np.concatenate([arrays[n] for n in names])
    labels = [n for n in names for _ in range(len(arrays[n]))]
    return GapReport(
        domains=names,
        metric=metric,
        space=space,
        aligned=aligned,
        stats=stats,
        pairwise=pairwise,
        gap=float(np.mean(list(pairwise.values()))),
        projection=project_2d(stacked, projection, seed),
        labels=labels,
    )


# ============================================================================
# Embedding paths
# ============================================================================

@torch.no_grad()
def embed_images(
    images: np.ndarray,
    aligner: Optional[VisualAligner],
    space: Space,
    encoder: Optional[EncoderAdapter] = None,
    extractor: Optional[FeatureExtractor] = None,
    batch_size: int = 64,
) -> np.ndarray:
    """(N, H, W, 3) images -> (N, d) latents through the chosen path."""
    if space == "embedding" and encoder is None:
        raise ParameterError("embedding-space gap needs the VLM image encoder")
    if space == "policy" and extractor is None:
        raise ParameterError("policy-space gap needs the feature extractor")
    out = []
    for s in range(0, len(images), batch_size):
        x = images_to_tensor(images[s:s + batch_size])
        if aligner is not None:
            x = aligner(x)
        z = encoder.encode_images(x) if space == "embedding" else extractor.encode(x)
        out.append(z.double().cpu().numpy())
    return np.concatenate(out)


def domain_gap(
    images_by_domain: dict[str, np.ndarray],
    aligner: Optional[VisualAligner],
    space: Space,
    metric: Metric = "energy",
    projection: str = "pca",
    seed: int = 0,
    min_samples: int = 50,
    encoder: Optional[EncoderAdapter] = None,
    extractor: Optional[FeatureExtractor] = None,
) -> GapReport:
    """
    Embed every domain's images and compare the clouds.

    `aligner=None` is the raw (identity-map) path.
    """
    if len(images_by_domain) < 2:
        raise ParameterError(f"domain gap needs at least 2 domains, got {len(images_by_domain)}")
    for name, images in images_by_domain.items():
        if len(images) < min_samples:
            raise ParameterError(f"domain {name!r} has {len(images)} images; at least {min_samples} required")
    clouds = {
        name: embed_images(images, aligner, space, encoder, extractor)
        for name, images in images_by_domain.items()
    }
    report = gap_from_clouds(clouds, metric, projection, seed, space=space, aligned=aligner is not None)
    logger.info(f"{'aligned' if report.aligned else 'raw'} {space} gap ({metric}): {report.gap:.4f}")
    return report
