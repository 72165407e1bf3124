"""Deployment-side metrics and analysis probes.

Top-1 accuracy for classification; CMC rank rates and mean average precision
for embedding retrieval (gallery ranked by ascending Euclidean distance);
exact training-cost arithmetic; and a loss-landscape probe that measures how
quickly the cross-entropy rises along random unit directions away from a
trained parameter vector.

The environment variable SRDL_THREADS caps the worker threads used for
per-direction landscape evaluation; directions are independent and results
are identical at any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .data import Dataset
from .errors import ContractViolation
from .losses import EPS, softmax_rows
from .model import Checkpoint, forward_logits


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index wins ties) is the label."""
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) != len(labels) or len(labels) == 0:
        raise ContractViolation(
            f"need aligned (n, C) logits and n labels, got {logits.shape} and {labels.shape}"
        )
    predicted = logits.argmax(axis=1) + 1
    return float((predicted == labels).mean())


@dataclass
class RetrievalSet:
    """Probe and gallery embeddings with identity ids and optional camera tags.

    A gallery item is a truth match for a probe when their ids are equal;
    with camera tags present, same-id same-camera gallery items are excluded
    from ranking when the evaluator is asked to.
    """

    probe_embeddings: np.ndarray
    probe_ids: np.ndarray
    gallery_embeddings: np.ndarray
    gallery_ids: np.ndarray
    probe_cams: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None

    def __post_init__(self):
        self.probe_embeddings = np.asarray(self.probe_embeddings, dtype=np.float64)
        self.gallery_embeddings = np.asarray(self.gallery_embeddings, dtype=np.float64)
        self.probe_ids = np.asarray(self.probe_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if self.probe_embeddings.shape[1] != self.gallery_embeddings.shape[1]:
            raise ContractViolation(
                f"embedding dims disagree: probe {self.probe_embeddings.shape[1]} vs "
                f"gallery {self.gallery_embeddings.shape[1]}"
            )
        for pid in self.probe_ids:
            if not (self.gallery_ids == pid).any():
                raise ContractViolation(f"probe id {pid} has no truth match in the gallery")

    def __len__(self):
        return len(self.probe_ids)


def _ranked_matches(rset: RetrievalSet, exclude_same_camera: bool):
    """Per probe: boolean truth-match flags of the gallery in ranked order."""
    d = np.linalg.norm(
        rset.probe_embeddings[:, None, :] - rset.gallery_embeddings[None, :, :], axis=2
    )
    for i in range(len(rset)):
        keep = np.ones(len(rset.gallery_ids), dtype=bool)
        if exclude_same_camera and rset.probe_cams is not None and rset.gallery_cams is not None:
            keep = ~(
                (rset.gallery_ids == rset.probe_ids[i])
                & (rset.gallery_cams == rset.probe_cams[i])
            )
        order = np.argsort(d[i][keep], kind="stable")
        matches = (rset.gallery_ids[keep][order] == rset.probe_ids[i])
        if not matches.any():
            raise ContractViolation(
                f"probe {i} has no truth match after camera exclusion"
            )
        yield matches


def cmc(rset: RetrievalSet, ranks: list[int], exclude_same_camera: bool = False) -> dict[int, float]:
    """Rank-k rates: fraction of probes whose first truth match is at rank <= k."""
    if not ranks or any(k < 1 for k in ranks):
        raise ContractViolation(f"ranks must be positive, got {ranks}")
    first_hits = [int(np.nonzero(m)[0][0]) + 1 for m in _ranked_matches(rset, exclude_same_camera)]
    return {k: float(np.mean([h <= k for h in first_hits])) for k in ranks}


def mean_average_precision(rset: RetrievalSet, exclude_same_camera: bool = False) -> float:
    """Mean over probes of the area under each probe's precision-recall curve.

    AP per probe is the mean, over its truth-match positions r (1-based in
    the ranking), of precision@r.
    """
    aps = []
    for matches in _ranked_matches(rset, exclude_same_camera):
        positions = np.nonzero(matches)[0] + 1
        hits = np.arange(1, len(positions) + 1)
        aps.append(float((hits / positions).mean()))
    return float(np.mean(aps))


def trcost(forward_flops: int, epochs: int, train_size: int) -> int:
    """Exact forward-FLOPs x epochs x training-set-size as a python int."""
    if forward_flops <= 0 or epochs <= 0 or train_size <= 0:
        raise ContractViolation("trcost factors must all be positive")
    return int(forward_flops) * int(epochs) * int(train_size)


@dataclass
class PerturbationSpec:
    """Random-ray probe description: direction count, magnitude grid, seed.

    Explicit directions may be supplied instead of sampled ones; each must
    have unit Euclidean norm within 1e-9.
    """

    num_directions: int = 20
    d_grid: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    seed: int = 0
    directions: np.ndarray | None = None

    def __post_init__(self):
        self.d_grid = tuple(float(d) for d in self.d_grid)
        if self.num_directions < 1:
            raise ContractViolation("need at least one direction")
        if not self.d_grid or self.d_grid[0] != 0.0:
            raise ContractViolation(f"magnitude grid must start at 0, got {self.d_grid}")
        if list(self.d_grid) != sorted(self.d_grid):
            raise ContractViolation(f"magnitude grid must be ascending, got {self.d_grid}")

    def sample_directions(self, dim: int) -> np.ndarray:
        """Unit directions: i.i.d. uniform [-1, 1] coordinates, normalized."""
        if self.directions is not None:
            dirs = np.asarray(self.directions, dtype=np.float64)
            if dirs.ndim != 2 or dirs.shape[1] != dim:
                raise ContractViolation(
                    f"directions must be (k, {dim}), got {dirs.shape}"
                )
            norms = np.linalg.norm(dirs, axis=1)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise ContractViolation("every direction must have unit norm within 1e-9")
            return dirs
        rng = np.random.default_rng(self.seed)
        dirs = rng.uniform(-1.0, 1.0, size=(self.num_directions, dim))
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def mean_cross_entropy(params, ds: Dataset, batch_size: int = 256) -> float:
    """Mean plain-softmax cross-entropy of a model on a dataset."""
    total = 0.0
    feats = ds.features.astype(params.dtype, copy=False)
    for start in range(0, len(ds), batch_size):
        x = tz.Tensor(feats[start : start + batch_size])
        logits = forward_logits(params, x).data.astype(np.float64)
        p = softmax_rows(logits)
        idx = ds.labels[start : start + batch_size] - 1
        picked = np.clip(p[np.arange(len(idx)), idx], EPS, None)
        total += float(-np.log(picked).sum())
    return total / len(ds)


def _worker_count() -> int:
    cap = os.environ.get("SRDL_THREADS")
    if cap is not None:
        try:
            return max(1, int(cap))
        except ValueError as e:
            raise ContractViolation(f"SRDL_THREADS must be an integer, got {cap!r}") from e
    return min(4, os.cpu_count() or 1)


def landscape_sweep(ckpt: Checkpoint, ds: Dataset, spec: PerturbationSpec) -> np.ndarray:
    """Loss curves along random rays: entry [i, j] is the mean cross-entropy
    at parameters theta + d_grid[j] * direction_i.

    The checkpoint's parameters are read-only here; they are bit-identical
    after the sweep.
    """
    base = ckpt.params
    theta = base.to_vector().astype(np.float64)
    dirs = spec.sample_directions(theta.size)
    grid = np.asarray(spec.d_grid)

    def one_direction(v):
        row = np.empty(len(grid))
        for j, d in enumerate(grid):
            perturbed = base.from_vector((theta + d * v).astype(base.dtype))
            row[j] = mean_cross_entropy(perturbed, ds)
        return row

    workers = _worker_count()
    curves = np.empty((len(dirs), len(grid)))
    if workers == 1:
        for i, v in enumerate(dirs):
            curves[i] = one_direction(v)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, row in enumerate(pool.map(one_direction, dirs)):
                curves[i] = row
    return curves


def write_sweep_csv(curves: np.ndarray, d_grid, path):
    """One row per (direction, d, loss)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("direction,d,loss\n")
        for i, row in enumerate(curves):
            for d, loss in zip(d_grid, row):
                f.write(f"{i},{d:.10g},{loss:.12g}\n")
