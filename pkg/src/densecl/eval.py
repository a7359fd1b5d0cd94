"""What the encoder learned: correspondence accuracy against crop geometry, a kNN
probe on global embeddings, and the mutual-match panel export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from densecl.augment import AugmentConfig, ground_truth_correspondence, make_view_pair, pair_rng
from densecl.encoder import DenseCLNet, images_to_tensor
from densecl.errors import DataError, StorageError
from densecl.matcher import MatchStrategy, extract_correspondence, mutual_matches

MATCH_HEADER = ("cell_a", "cell_b", "sim", "ax", "ay", "bx", "by")


@dataclass(frozen=True)
class MatchRecord:
    cell_a: int
    cell_b: int
    similarity: float
    pixel_a: tuple
    pixel_b: tuple


@dataclass(frozen=True)
class CorrespondenceScore:
    accuracy: float  # within one grid cell (Chebyshev)
    exact_accuracy: float
    n_evaluated: int
    mean_valid: float  # valid query cells per pair


@dataclass(frozen=True)
class EvalReport:
    correspondence_accuracy: float
    mean_valid_matches: float
    knn_accuracy: float
    num_images: int


def _features(net: DenseCLNet, views, batch_size: int = 128) -> torch.Tensor:
    was_training = net.training
    net.eval()
    out = []
    try:
        with torch.no_grad():
            for s in range(0, len(views), batch_size):
                out.append(net.backbone(images_to_tensor(views[s:s + batch_size])))
    finally:
        net.train(was_training)
    return torch.cat(out)


def eval_pairs(images: Sequence[np.ndarray], n_pairs: int, seed: int, cfg: AugmentConfig,
               photometric: bool = False):
    if len(images) == 0:
        raise DataError("evaluation dataset is empty")
    cfg = cfg if photometric else cfg.geometric_only()
    pick = np.random.default_rng([seed, 0xE7A1]).integers(len(images), size=n_pairs)
    return [make_view_pair(images[i], pair_rng(seed, p, int(i)), cfg, int(i))
            for p, i in enumerate(pick)]


def correspondence_accuracy(net: DenseCLNet, images: Sequence[np.ndarray], S: int, n_pairs: int,
                            seed: int, cfg: AugmentConfig, photometric: bool = False,
                            pairs=None) -> CorrespondenceScore:
    """Fraction of query cells whose max-sim-F match lies within one grid cell of
    the geometric ground truth; cells whose ground truth falls outside the other
    view are excluded."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    pairs = pairs if pairs is not None else eval_pairs(images, n_pairs, seed, cfg, photometric)
    fa = _features(net, [p.view_a for p in pairs])
    fb = _features(net, [p.view_b for p in pairs])
    pred = extract_correspondence(MatchStrategy.MAX_SIM_F, fa, fb, None, None, S).numpy()
    correct = exact = total = 0
    for p, c in zip(pairs, pred):
        gt, valid = ground_truth_correspondence(p.geom_a, p.geom_b, S)
        if not valid.any():
            continue
        g, c = gt[valid], c[valid]
        cheb = np.maximum(np.abs(g // S - c // S), np.abs(g % S - c % S))
        correct += int((cheb <= 1).sum())
        exact += int((cheb == 0).sum())
        total += int(valid.sum())
    if total == 0:
        return CorrespondenceScore(0.0, 0.0, 0, 0.0)
    return CorrespondenceScore(correct / total, exact / total, total, total / len(pairs))


def embed_images(net: DenseCLNet, images: Sequence[np.ndarray], out_size: int,
                 batch_size: int = 128) -> torch.Tensor:
    """Global embeddings of whole images resized to ``out_size``."""
    from densecl.augment import crop_resize

    views = []
    for img in images:
        h, w = img.shape[:2]
        same = (h, w) == (out_size, out_size)
        views.append(img if same else crop_resize(img, 0, 0, w, h, out_size))
    was_training = net.training
    net.eval()
    out = []
    try:
        with torch.no_grad():
            for s in range(0, len(views), batch_size):
                x = images_to_tensor(views[s:s + batch_size])
                out.append(net.global_head(net.backbone(x)))
    finally:
        net.train(was_training)
    return torch.cat(out)


def knn_predict(train_emb: torch.Tensor, train_labels: np.ndarray, test_emb: torch.Tensor,
                k: int) -> np.ndarray:
    """Majority vote among the ``k`` most cosine-similar training embeddings.

    Vote ties resolve to the smallest class id.
    """
    if len(train_emb) == 0 or len(test_emb) == 0:
        raise DataError("kNN probe needs non-empty train and test sets")
    k = min(k, len(train_emb))
    sims = test_emb.double() @ train_emb.double().T
    # stable sort keeps lower training indices first among equal similarities
    nn_idx = torch.sort(sims, dim=1, descending=True, stable=True).indices[:, :k].numpy()
    labels = np.asarray(train_labels)
    n_classes = int(labels.max()) + 1
    votes = np.zeros((len(test_emb), n_classes), dtype=np.int64)
    for row, idx in enumerate(nn_idx):
        np.add.at(votes[row], labels[idx], 1)
    return votes.argmax(axis=1)


def knn_probe(net: DenseCLNet, train_images, train_labels, test_images, test_labels, k: int,
              out_size: int) -> float:
    """Accuracy of :func:`knn_predict`; test labels are only read by the scorer."""
    train_labels = np.asarray(train_labels)
    if len(train_images) == 0 or len(test_images) == 0:
        raise DataError("kNN probe needs non-empty train and test sets")
    classes, counts = np.unique(train_labels, return_counts=True)
    if len(classes) < 2:
        raise DataError("kNN probe needs at least two classes")
    if counts.min() < k:
        raise DataError(f"kNN probe needs >= k={k} training images per class, "
                        f"smallest class has {counts.min()}")
    pred = knn_predict(embed_images(net, train_images, out_size), train_labels,
                       embed_images(net, test_images, out_size), k)
    return _score(pred, test_labels)


def _score(pred: np.ndarray, labels) -> float:
    return float((pred == np.asarray(labels)).mean())


# --- visualization ----------------------------------------------------------

_STOPS = np.array([[40, 80, 220], [240, 220, 40], [220, 40, 40]], dtype=np.float64)


def similarity_color(sim: float) -> tuple:
    """Blue (-1) -> yellow (0) -> red (+1)."""
    t = (min(max(sim, -1.0), 1.0) + 1.0)
    i = min(int(t), 1)
    f = t - i
    c = _STOPS[i] * (1 - f) + _STOPS[i + 1] * f
    return tuple(int(round(x)) for x in c)


def _cell_center(idx: int, side: int, stride: float) -> tuple:
    r, c = divmod(idx, side)
    return ((c + 0.5) * stride, (r + 0.5) * stride)


def render_panel(view_a: np.ndarray, view_b: np.ndarray, records: Sequence[MatchRecord],
                 scale: int = 4) -> tuple[np.ndarray, int]:
    """Views side by side, one line per match. Returns (RGB uint8 panel, lines drawn)."""
    h, w = view_a.shape[:2]
    panel = np.concatenate([view_a, view_b], axis=1)
    img = Image.fromarray(np.clip(np.round(panel * 255), 0, 255).astype(np.uint8))
    img = img.resize((2 * w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    lines = 0
    for rec in records:
        ax, ay = rec.pixel_a
        bx, by = rec.pixel_b
        draw.line([(ax * scale, ay * scale), ((bx + w) * scale, by * scale)],
                  fill=similarity_color(rec.similarity), width=1)
        lines += 1
    return np.asarray(img), lines


def write_match_table(path, records: Sequence[MatchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MATCH_HEADER)
        for r in records:
            wr.writerow([r.cell_a, r.cell_b, f"{r.similarity:.6f}", f"{r.pixel_a[0]:.2f}",
                         f"{r.pixel_a[1]:.2f}", f"{r.pixel_b[0]:.2f}", f"{r.pixel_b[1]:.2f}"])


def export_matches(net: DenseCLNet, image: np.ndarray, threshold: float = 0.9,
                   panel_path=None, table_path=None, seed: int = 0,
                   cfg: Optional[AugmentConfig] = None):
    """Two geometric views of ``image``, mutual backbone matches at ``threshold``.

    Returns ``(panel, records)``; writes the panel (.png or .ppm) and the CSV
    table when paths are given.
    """
    cfg = (cfg or AugmentConfig()).geometric_only()
    pair = make_view_pair(image, pair_rng(seed, 0, 0), cfg, 0)
    feats = _features(net, [pair.view_a, pair.view_b])
    side = feats.shape[-1]
    stride = pair.view_a.shape[1] / side
    records = [
        MatchRecord(i, j, sim, _cell_center(i, side, stride), _cell_center(j, side, stride))
        for i, j, sim in mutual_matches(feats[0], feats[1], threshold)
    ]
    panel, lines = render_panel(pair.view_a, pair.view_b, records)
    assert lines == len(records)
    try:
        if panel_path is not None:
            Image.fromarray(panel).save(panel_path)
        if table_path is not None:
            write_match_table(table_path, records)
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot write visualization output: {exc}") from exc
    return panel, records
