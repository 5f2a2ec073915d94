"""Adam training, image-level cross-validation and majority-vote evaluation."""

from __future__ import annotations

import csv
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .capsnet import (
    CLASS_NAMES,
    MarginLossConfig,
    Network,
    NetworkConfig,
    build_network,
    forward,
    loss_and_gradients,
    predict_classes,
)
from .checkpoint import save_checkpoint
from .preprocess import DatasetManifest, PatchRecord, read_image
from .tensor import derive_seed, make_rng

log = logging.getLogger(__name__)

N_CLASSES = len(CLASS_NAMES)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# --------------------------------------------------------------------------
# data


def load_patch(path: str | os.PathLike, side: int) -> np.ndarray:
    """Read a patch as ``[3, side, side]`` floats in [0, 1], resizing if needed."""
    pixels = read_image(path)
    if pixels.shape[0] != side or pixels.shape[1] != side:
        pixels = np.asarray(PILImage.fromarray(pixels).resize((side, side), PILImage.BILINEAR))
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


class PatchSource:
    """Indexable patch tensors for a list of records; cached when small."""

    def __init__(self, manifest: DatasetManifest, records: Sequence[PatchRecord], side: int, cache_bytes: int = 2 << 30):
        self.manifest = manifest
        self.records = list(records)
        self.side = side
        self.labels = np.array([r.class_index for r in self.records], dtype=np.int64)
        self._cache = None
        if len(self.records) * 3 * side * side * 4 <= cache_bytes:
            self._cache = self._load(range(len(self.records)))

    def _load(self, indices) -> np.ndarray:
        return np.stack([load_patch(self.manifest.path_of(self.records[i]), self.side) for i in indices])

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, indices) -> np.ndarray:
        if self._cache is not None:
            return self._cache[indices]
        return self._load(np.atleast_1d(indices))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    losses: list[float]
    stop_step: int
    stop_reason: str  # "threshold" or "max_steps"
    window_loss: float

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "loss"])
            for step, loss in enumerate(self.losses, start=1):
                w.writerow([step, repr(loss)])


def train(
    network: Network,
    manifest: DatasetManifest,
    *,
    stop_loss: float | None = 0.1,
    max_steps: int = 10000,
    batch_size: int = 16,
    window: int = 50,
    seed: int = 0,
    lr: float = 1e-4,
    loss_cfg: MarginLossConfig = MarginLossConfig(),
) -> tuple[Network, TrainReport]:
    """Mini-batch margin-loss minimization with Adam.

    Stops at the first step where the mean loss over the last ``window``
    mini-batches drops below ``stop_loss`` (``None`` disables the check),
    otherwise after ``max_steps``.  Batches are drawn from successive seeded
    permutations of the training patches.
    """
    if not manifest.records:
        raise ValueError("training manifest is empty")
    if max_steps < 1 or batch_size < 1 or window < 1:
        raise ValueError("max_steps, batch_size and window must be positive")
    data = PatchSource(manifest, manifest.records, network.config.input_side)
    rng = make_rng(seed)
    state = AdamState(lr=lr)
    order = np.empty(0, dtype=np.int64)
    recent: deque[float] = deque(maxlen=window)
    losses: list[float] = []
    reason, window_loss = "max_steps", float("nan")
    for step in range(1, max_steps + 1):
        while order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(data))])
        idx, order = order[:batch_size], order[batch_size:]
        loss, grads, _ = loss_and_gradients(network, data[idx], data.labels[idx], loss_cfg)
        adam_step(network.params, grads, state)
        network.touch()
        losses.append(loss)
        recent.append(loss)
        window_loss = float(np.mean(recent))
        if step % 100 == 0:
            log.debug("step %d loss %.4f window %.4f", step, loss, window_loss)
        if stop_loss is not None and len(recent) == window and window_loss < stop_loss:
            reason = "threshold"
            break
    return network, TrainReport(losses, len(losses), reason, window_loss)


# --------------------------------------------------------------------------
# prediction


def patch_norms(network: Network, patches: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [forward(network, patches[i : i + chunk])[0] for i in range(0, len(patches), chunk)]
    return np.concatenate(out, axis=0)


def vote(norms: np.ndarray) -> tuple[int, np.ndarray]:
    """Plurality vote over per-patch argmax classes.

    Ties go to the class with the larger summed norm over all patches, then
    to the lowest class index.
    """
    norms = np.asarray(norms)
    if norms.ndim != 2 or norms.shape[0] == 0:
        raise ValueError("need at least one patch to vote")
    votes = np.bincount(predict_classes(norms), minlength=norms.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    sums = norms.sum(axis=0)
    winner = int(tied[np.argmax(sums[tied])])
    return winner, votes


def predict_image(network: Network, patches: np.ndarray) -> tuple[int, np.ndarray]:
    """Majority-vote class and vote counts for all patches of one image."""
    if len(patches) == 0:
        raise ValueError("empty patch set")
    return vote(patch_norms(network, np.asarray(patches)))


def evaluate_images(network: Network, manifest: DatasetManifest) -> dict[str, tuple[int, np.ndarray]]:
    """Image id -> (predicted class, votes), in image-id order."""
    by_image: dict[str, list[PatchRecord]] = {}
    for rec in manifest.records:
        by_image.setdefault(rec.source_image, []).append(rec)
    out = {}
    for image_id in sorted(by_image):
        source = PatchSource(manifest, by_image[image_id], network.config.input_side)
        out[image_id] = predict_image(network, source[np.arange(len(source))])
    return out


# --------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]

    @property
    def percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, 100.0 * self.counts / np.where(rows > 0, rows, 1), np.nan)

    def write_csv(self, path: str | os.PathLike) -> None:
        write_matrix_csv(path, counts=self.counts, percentages=self.percentages)


def write_matrix_csv(path, counts: np.ndarray | None = None, percentages: np.ndarray | None = None) -> None:
    """Rows ``kind,true_class,<four predicted classes>`` for counts and/or percentages."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "true_class", *CLASS_NAMES])
        if counts is not None:
            for name, row in zip(CLASS_NAMES, counts):
                w.writerow(["count", name, *(int(x) for x in row)])
        if percentages is not None:
            for name, row in zip(CLASS_NAMES, percentages):
                w.writerow(["percent", name, *(f"{x:.6f}" for x in row)])


def read_matrix_csv(path) -> dict[str, np.ndarray]:
    out: dict[str, list[list[float]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            out.setdefault(row[0], []).append([float(x) for x in row[2:]])
    return {k: np.array(v) for k, v in out.items()}


def metrics_from_percentages(percentages: np.ndarray) -> tuple[np.ndarray, float]:
    """Sensitivities (diagonal) and macro accuracy of a row-normalized % matrix."""
    sens = np.diag(np.asarray(percentages, dtype=np.float64)).copy()
    return sens, float(np.nanmean(sens))


def confusion_and_metrics(
    preds: Sequence[int] | None = None, truths: Sequence[int] | None = None, *, percentages: np.ndarray | None = None
):
    """Returns (ConfusionMatrix, row-normalized %, per-class sensitivity %, macro accuracy %).

    Given an already row-normalized ``percentages`` matrix (e.g. a published
    mean matrix) instead of predictions, the ConfusionMatrix is None.
    """
    if percentages is not None:
        pct = np.asarray(percentages, dtype=np.float64)
        if pct.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"expected a {N_CLASSES}x{N_CLASSES} matrix, got {pct.shape}")
        sens, macro = metrics_from_percentages(pct)
        return None, pct, sens, macro
    if preds is None or truths is None:
        raise ValueError("need predictions and truths, or percentages")
    preds, truths = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"{len(preds)} predictions for {len(truths)} truths")
    if preds.size == 0:
        raise ValueError("no predictions")
    if preds.min() < 0 or truths.min() < 0 or max(preds.max(), truths.max()) >= N_CLASSES:
        raise ValueError("class index out of range")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    cm = ConfusionMatrix(counts)
    pct = cm.percentages
    sens, macro = metrics_from_percentages(pct)
    return cm, pct, sens, macro


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldPlan:
    folds: list[list[str]]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self) -> dict[str, int]:
        return {image: i for i, fold in enumerate(self.folds) for image in fold}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["image_id", "fold"])
            for image, i in sorted(self.fold_of().items()):
                w.writerow([image, i])


def split_folds(image_ids: Sequence[str], labels: Sequence[str], k: int, seed: int) -> FoldPlan:
    """Class-stratified partition of whole images into ``k`` folds.

    Each class's images are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes stay within one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(image_ids) != len(labels):
        raise ValueError("image_ids and labels differ in length")
    if len(set(image_ids)) != len(image_ids):
        raise ValueError("duplicate image ids")
    by_class: dict[str, list[str]] = {}
    for image, label in zip(image_ids, labels):
        by_class.setdefault(label, []).append(image)
    for label, members in by_class.items():
        if len(members) < k:
            raise ValueError(f"class {label!r} has {len(members)} images, fewer than k={k}")
    rng = make_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    pos = 0
    for label in sorted(by_class):
        members = sorted(by_class[label])
        for j in rng.permutation(len(members)):
            folds[pos % k].append(members[j])
            pos += 1
    return FoldPlan([sorted(f) for f in folds], seed)


@dataclass
class CrossValResult:
    plan: FoldPlan
    matrices: list[ConfusionMatrix]
    reports: list[TrainReport]
    checkpoints: list[Path]
    mean_percentages: np.ndarray
    leakage: list[set[str]]  # per fold: test images that contributed training patches (always empty)

    @property
    def macro_accuracies(self) -> list[float]:
        return [metrics_from_percentages(m.percentages)[1] for m in self.matrices]

    @property
    def mean_macro_accuracy(self) -> float:
        return metrics_from_percentages(self.mean_percentages)[1]


def cross_validate(
    manifest: DatasetManifest,
    config: NetworkConfig,
    out_dir: str | os.PathLike,
    *,
    k: int = 5,
    seed: int = 0,
    precision: str = "single",
    **train_kwargs,
) -> CrossValResult:
    """k-fold cross-validation over whole images.

    Writes ``fold{i}.capn``, ``fold{i}_confusion.csv``, ``fold{i}_train.csv``,
    ``folds.csv`` and ``mean_confusion.csv`` into ``out_dir``.  The mean
    matrix averages the row-normalized fold matrices.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = manifest.images()
    plan = split_folds(list(images), list(images.values()), k, seed)
    plan.write_csv(out_dir / "folds.csv")
    matrices, reports, checkpoints, leakage = [], [], [], []
    for i, test_ids in enumerate(plan.folds):
        test_set = set(test_ids)
        train_ids = [im for im in images if im not in test_set]
        train_manifest = manifest.subset(train_ids)
        leaked = {r.source_image for r in train_manifest.records} & test_set
        if leaked:
            raise RuntimeError(f"fold {i}: test images {sorted(leaked)} leaked into training")
        leakage.append(leaked)
        network = build_network(config, make_rng(derive_seed(seed, "init", i)), precision)
        network, report = train(network, train_manifest, seed=derive_seed(seed, "train", i), **train_kwargs)
        log.info("fold %d: %s after %d steps (window loss %.4f)", i, report.stop_reason, report.stop_step, report.window_loss)
        results = evaluate_images(network, manifest.subset(test_ids))
        preds = [results[im][0] for im in sorted(test_ids)]
        truths = [CLASS_NAMES.index(images[im]) for im in sorted(test_ids)]
        cm, _, _, macro = confusion_and_metrics(preds, truths)
        log.info("fold %d: image-wise macro accuracy %.2f%%", i, macro)
        ckpt = out_dir / f"fold{i}.capn"
        save_checkpoint(network, ckpt)
        cm.write_csv(out_dir / f"fold{i}_confusion.csv")
        report.write_csv(out_dir / f"fold{i}_train.csv")
        matrices.append(cm)
        reports.append(report)
        checkpoints.append(ckpt)
    mean_pct = np.nanmean(np.stack([m.percentages for m in matrices]), axis=0)
    write_matrix_csv(out_dir / "mean_confusion.csv", percentages=mean_pct)
    return CrossValResult(plan, matrices, reports, checkpoints, mean_pct, leakage)
