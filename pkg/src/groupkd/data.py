"""Synthetic identity datasets, IDX file ingestion, and pair-based
verification with fold-wise threshold selection."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FPR_TARGETS = (1e-1, 1e-2, 1e-3)
NUM_FOLDS = 10


@dataclass
class SyntheticSpec:
    num_classes: int = 256
    feature_dim: int = 64
    samples_per_class: int = 100
    noise_sigma: float = 0.4
    center_scale: float = 4.0
    seed: int = 0
    eval_classes: int = 64           # held-out identities, disjoint from training
    eval_samples_per_class: int = 20
    # identity lives in a low-dim latent space and is observed through a fixed
    # random nonlinear map; recovering it rewards model capacity
    latent_dim: int = 16
    mixing_hidden: int = 256
    mixing_depth: int = 2
    mixing: bool = True
    # optional identity-irrelevant latent dimensions (pose/illumination
    # stand-ins) folded into the mixing input
    nuisance_dim: int = 0
    nuisance_sigma: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray


@dataclass
class PairList:
    index_a: np.ndarray
    index_b: np.ndarray
    same: np.ndarray          # bool
    fold_assignment: np.ndarray

    def __len__(self):
        return self.index_a.size

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index_a", "index_b", "same", "fold"])
            for a, b, s, fold in zip(self.index_a, self.index_b,
                                     self.same, self.fold_assignment):
                w.writerow([int(a), int(b), int(s), int(fold)])


@dataclass
class VerificationReport:
    accuracy: float
    tpr_at_fpr: dict  # target fpr -> tpr; unattainable targets absent
    threshold: float


def _sample_class(rng, centers, noise_sigma, counts):
    xs, ys = [], []
    for c, center in enumerate(centers):
        xs.append(center + rng.normal(0.0, noise_sigma, size=(counts, center.size)))
        ys.append(np.full(counts, c))
    return np.concatenate(xs), np.concatenate(ys)


def generate(spec):
    """Gaussian blobs around class centers drawn uniformly on a sphere.

    With mixing enabled (the default) the blobs live in a latent identity
    space and are pushed through a fixed random one-hidden-layer relu map to
    the observed feature space, so extracting identity takes real feature
    learning instead of a near-identity transform.  Eval identities are
    disjoint from training identities (open-set split); eval labels restart
    at 0.
    """
    rng = np.random.default_rng(spec.seed)
    blob_dim = spec.latent_dim if spec.mixing else spec.feature_dim
    total = spec.num_classes + spec.eval_classes
    centers = rng.normal(size=(total, blob_dim))
    centers *= spec.center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    if spec.mixing:
        dims = [blob_dim + spec.nuisance_dim] + [spec.mixing_hidden] * spec.mixing_depth
        Ws = [rng.normal(size=(dout, din)) / np.sqrt(din)
              for din, dout in zip(dims[:-1], dims[1:])]
        W_out = (rng.normal(size=(spec.feature_dim, spec.mixing_hidden))
                 / np.sqrt(spec.mixing_hidden))

        def observe(z):
            if spec.nuisance_dim:
                noise = rng.normal(0.0, spec.nuisance_sigma,
                                   size=(z.shape[0], spec.nuisance_dim))
                z = np.concatenate([z, noise], axis=1)
            h = z
            for W in Ws:
                h = np.maximum(h @ W.T, 0.0)
            return h @ W_out.T
    else:
        observe = lambda z: z
    train_x, train_y = _sample_class(
        rng, centers[: spec.num_classes], spec.noise_sigma, spec.samples_per_class
    )
    train_x = observe(train_x)
    if spec.eval_classes:
        eval_x, eval_y = _sample_class(
            rng, centers[spec.num_classes :], spec.noise_sigma,
            spec.eval_samples_per_class,
        )
        eval_x = observe(eval_x)
    else:
        eval_x = np.empty((0, spec.feature_dim))
        eval_y = np.empty(0, dtype=int)
    return Dataset(train_x, train_y, eval_x, eval_y)


# --- IDX format --------------------------------------------------------------

def load_idx(images_path, labels_path):
    """Parse big-endian IDX images/labels; pixels mapped to (v - 127.5) / 128."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise ValueError("truncated IDX image file")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad IDX image magic {magic:#010x}")
        raw = f.read(n * rows * cols)
        if len(raw) < n * rows * cols:
            raise ValueError("truncated IDX image file")
    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError("truncated IDX label file")
        magic, n_labels = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad IDX label magic {magic:#010x}")
        raw_labels = f.read(n_labels)
        if len(raw_labels) < n_labels:
            raise ValueError("truncated IDX label file")
    if n != n_labels:
        raise ValueError(f"image count {n} != label count {n_labels}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    features = (pixels.astype(np.float64) - 127.5) / 128.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return features, labels


def write_idx(images, labels, images_path, labels_path):
    """Inverse of load_idx for uint8 (N, rows, cols) images."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


# --- pair-based verification -------------------------------------------------

def make_pairs(labels, num_pairs, seed):
    """Half same-identity, half different-identity pairs, folds round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    rich = [c for c, idx in by_class.items() if idx.size >= 2]
    if not rich:
        raise ValueError("no class has two samples; cannot build positive pairs")
    if len(by_class) < 2:
        raise ValueError("need at least two classes for negative pairs")

    n_pos = num_pairs // 2
    n_neg = num_pairs - n_pos
    seen = set()

    def draw(sampler, count):
        out = []
        attempts = 0
        while len(out) < count:
            pair = sampler()
            key = (min(pair), max(pair))
            attempts += 1
            # fall back to replacement when distinct pairs run out
            if key in seen and attempts < 50 * count:
                continue
            seen.add(key)
            out.append(pair)
        return out

    classes = np.array(rich)
    all_classes = np.array(sorted(by_class))

    def pos_sampler():
        idx = by_class[rng.choice(classes)]
        a, b = rng.choice(idx, size=2, replace=False)
        return int(a), int(b)

    def neg_sampler():
        ca, cb = rng.choice(all_classes, size=2, replace=False)
        return int(rng.choice(by_class[ca])), int(rng.choice(by_class[cb]))

    positives = draw(pos_sampler, n_pos)
    negatives = draw(neg_sampler, n_neg)

    # interleave so round-robin folds stay balanced within +/- 1
    pairs, flags = [], []
    for i in range(max(n_pos, n_neg)):
        if i < n_pos:
            pairs.append(positives[i])
            flags.append(True)
        if i < n_neg:
            pairs.append(negatives[i])
            flags.append(False)
    pairs = np.array(pairs)
    return PairList(
        index_a=pairs[:, 0],
        index_b=pairs[:, 1],
        same=np.array(flags),
        # consecutive pos/neg duos share a fold, keeping folds balanced
        fold_assignment=(np.arange(len(pairs)) // 2) % NUM_FOLDS,
    )


def _accuracy_at(sims, same, t):
    return np.mean((sims >= t) == same)


def _best_threshold(sims, same):
    """Threshold (from the observed similarities) maximizing accuracy;
    smallest such threshold on ties."""
    candidates = np.unique(sims)
    pos = np.sort(sims[same])
    neg = np.sort(sims[~same])
    tp = pos.size - np.searchsorted(pos, candidates, side="left")  # pos >= t
    tn = np.searchsorted(neg, candidates, side="left")             # neg <  t
    # argmax takes the first (smallest) candidate on ties
    return candidates[np.argmax(tp + tn)]


def verify(embeddings, pairs):
    """10-fold cross-validated best-threshold accuracy plus TPR@FPR points."""
    E = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    E = E / norms
    sims = np.sum(E[pairs.index_a] * E[pairs.index_b], axis=1)
    same = pairs.same

    accs = []
    for fold in range(NUM_FOLDS):
        test = pairs.fold_assignment == fold
        if not test.any():
            continue
        t = _best_threshold(sims[~test], same[~test])
        accs.append(_accuracy_at(sims[test], same[test], t))

    pos = np.sort(sims[same])
    neg = np.sort(sims[~same])[::-1]
    tpr_at_fpr = {}
    for target in FPR_TARGETS:
        if neg.size < 1.0 / target:
            continue  # unresolvable at this pair count; do not extrapolate
        m = int(np.floor(target * neg.size))
        t = neg[m] if m < neg.size else -np.inf
        tpr_at_fpr[target] = float(np.mean(pos > t))

    return VerificationReport(
        accuracy=float(np.mean(accs)),
        tpr_at_fpr=tpr_at_fpr,
        threshold=float(_best_threshold(sims, same)),
    )
