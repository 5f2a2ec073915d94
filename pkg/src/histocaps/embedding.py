"""Class-capsule features, exact t-SNE, and conv feature-map export."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .capsnet import CLASS_NAMES, Network, conv_features, forward
from .preprocess import DatasetManifest, write_image
from .tensor import make_rng
from .training import PatchSource

CLASS_COLORS = {"normal": "#1b9e77", "benign": "#d95f02", "insitu": "#7570b3", "invasive": "#e7298a"}


@dataclass(frozen=True)
class FeatureRow:
    patch_id: str
    label: str
    feature: np.ndarray


def extract_features(
    network: Network, manifest: DatasetManifest, *, aggregate: bool = False, chunk: int = 64
) -> list[FeatureRow]:
    """Concatenated class-capsule vectors, one row per patch.

    With ``aggregate`` the rows are averaged per source image and keyed by
    the image id instead.
    """
    source = PatchSource(manifest, manifest.records, network.config.input_side)
    feats = []
    for start in range(0, len(source), chunk):
        idx = np.arange(start, min(start + chunk, len(source)))
        _, cache = forward(network, source[idx])
        feats.append(cache.outputs.reshape(len(idx), -1))
    features = np.concatenate(feats) if feats else np.zeros((0, network.config.class_capsules * network.config.class_capsule_dim))
    rows = [FeatureRow(r.patch_id, r.class_label, f) for r, f in zip(manifest.records, features)]
    if not aggregate:
        return rows
    grouped: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        grouped.setdefault(r.source_image, []).append(i)
    labels = manifest.images()
    return [FeatureRow(image, labels[image], features[idx].mean(axis=0)) for image, idx in grouped.items()]


# --------------------------------------------------------------------------
# t-SNE


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 100.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 4.0
    exaggeration_iters: int = 50
    seed: int = 0


def squared_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_distribution(d: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Gaussian conditional over distances ``d`` and its entropy in bits."""
    logits = -beta * (d - d.min())
    p = np.exp(logits)
    total = p.sum()
    p /= total
    # H = log Z + beta * E[d - d_min]
    h_nats = np.log(total) + beta * np.dot(p, d - d.min())
    return p, h_nats / np.log(2.0)


def conditional_affinities(
    X: np.ndarray,
    perplexity: float,
    tol: float = 1e-5,
    max_iter: int = 200,
    min_dist: float = 1e-12,
    strict: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row conditionals p(j|i) and their realized entropies (bits).

    Each row's Gaussian precision is found by bisection so the entropy hits
    log2(perplexity).  Rows that cannot get within 1e-3 bits (e.g. all
    neighbors equidistant) raise unless ``strict`` is False.
    """
    n = len(X)
    if n < 4:
        raise ValueError("t-SNE needs at least 4 points")
    if not 1 < perplexity < n - 1:
        raise ValueError(f"perplexity must lie in (1, {n - 1}), got {perplexity}")
    D = np.maximum(squared_distances(X), min_dist)
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    H = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        beta, lo, hi = 1.0 / max(np.median(d), min_dist), 0.0, np.inf
        for _ in range(max_iter):
            p, h = _row_distribution(d, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        if strict and abs(h - target) > 1e-3:
            raise ValueError(f"perplexity {perplexity} unattainable for point {i} (entropy {h:.4f} bits)")
        P[i, np.arange(n) != i] = p
        H[i] = h
    return P, H


def tsne_affinities(X: np.ndarray, perplexity: float = 30.0) -> np.ndarray:
    """Symmetrized joint probabilities p_ij = (p(j|i) + p(i|j)) / 2N."""
    P, _ = conditional_affinities(X, perplexity)
    return (P + P.T) / (2.0 * len(P))


def _student_q(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne_embed(P: np.ndarray, cfg: TsneConfig = TsneConfig(), dims: int = 2) -> tuple[np.ndarray, list[float]]:
    """Gradient descent with momentum (and per-coordinate gains) on KL(P||Q).

    Returns the embedding and the KL trace: entry 0 is the initial layout,
    entry t the layout after t updates.  KL always uses the unexaggerated P.
    """
    n = len(P)
    rng = make_rng(cfg.seed)
    Y = rng.normal(0.0, 1e-4, size=(n, dims))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    Q, num = _student_q(Y)
    trace = [kl_divergence(P, Q)]
    for it in range(cfg.iterations):
        Pe = P * cfg.exaggeration if it < cfg.exaggeration_iters else P
        W = (Pe - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        momentum = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
        Q, num = _student_q(Y)
        trace.append(kl_divergence(P, Q))
    return Y, trace


# --------------------------------------------------------------------------
# output


def write_features_tsv(rows: Sequence[FeatureRow], path: str | os.PathLike) -> None:
    dim = len(rows[0].feature) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["patch_id", "label", *(f"f{i}" for i in range(dim))])
        for r in rows:
            w.writerow([r.patch_id, r.label, *(repr(float(x)) for x in r.feature)])


def write_embedding_tsv(ids: Sequence[str], labels: Sequence[str], Y: np.ndarray, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["patch_id", "label", *(f"x{i}" for i in range(Y.shape[1]))])
        for pid, label, y in zip(ids, labels, Y):
            w.writerow([pid, label, *(repr(float(v)) for v in y)])


def write_svg_scatter(Y: np.ndarray, labels: Sequence[str], path: str | os.PathLike, size: int = 600) -> None:
    """Minimal SVG scatter plot with one color per class and a legend."""
    margin = 40
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pts = margin + (Y - lo) / span * (size - 2 * margin)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 140}" height="{size}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for (x, y), label in zip(pts, labels):
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="{CLASS_COLORS.get(label, "#666")}" fill-opacity="0.7"/>')
    for i, name in enumerate(CLASS_NAMES):
        ly = margin + 22 * i
        parts.append(f'<circle cx="{size + 20}" cy="{ly}" r="6" fill="{CLASS_COLORS[name]}"/>')
        parts.append(f'<text x="{size + 32}" y="{ly + 5}" font-family="sans-serif" font-size="14">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def export_feature_maps(network: Network, image: np.ndarray, layer: int, out_dir: str | os.PathLike) -> list[Path]:
    """Write every map of conv ``layer`` (1-based) as an 8-bit grayscale PNG.

    ``image`` is ``uint8 [H, W, 3]`` or float ``[3, H, W]``.  Each map is
    min-max stretched to 0..255; a constant map becomes uniform 128.
    """
    n_layers = len(network.config.conv)
    if not 1 <= layer <= n_layers:
        raise IndexError(f"conv layer {layer} out of range 1..{n_layers}")
    image = np.asarray(image)
    x = image.transpose(2, 0, 1).astype(np.float32) / 255.0 if image.dtype == np.uint8 else image
    maps, _, _ = conv_features(network, x[None], upto=layer)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fmap in enumerate(maps[0]):
        lo, hi = float(fmap.min()), float(fmap.max())
        if hi > lo:
            gray = np.rint((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            gray = np.full(fmap.shape, 128, dtype=np.uint8)
        path = out_dir / f"layer{layer}_map{i:03d}.png"
        write_image(path, gray)
        paths.append(path)
    return paths
