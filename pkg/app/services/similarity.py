import numpy as np


def cosine_to(rows, anchor) -> np.ndarray:
    """Cosine similarity of every row to one anchor vector; zero-norm pairs score 0."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    anchor = np.asarray(anchor, dtype=np.float64)
    denom = np.linalg.norm(rows, axis=1) * np.linalg.norm(anchor)
    dots = rows @ anchor
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def same_class_distance(zs, ys, zt, yt) -> float:
    """Mean Euclidean distance over every same-class (source, target) embedding pair."""
    ys, yt = np.asarray(ys), np.asarray(yt)
    total, count = 0.0, 0
    for c in np.intersect1d(ys, yt):
        d = pairwise_distances(np.asarray(zs)[ys == c], np.asarray(zt)[yt == c])
        total += float(d.sum())
        count += d.size
    if count == 0:
        raise ValueError("source and target share no class")
    return total / count


def mean_cosine_to_class_centroid(zs, ys, zt, yt) -> float:
    """Average cosine similarity of target embeddings to their class's source centroid."""
    ys, yt = np.asarray(ys), np.asarray(yt)
    sims = [cosine_to(np.asarray(zt)[yt == c], np.asarray(zs)[ys == c].mean(axis=0))
            for c in np.intersect1d(ys, yt)]
    if not sims:
        raise ValueError("source and target share no class")
    return float(np.concatenate(sims).mean())


def pca_2d(z: np.ndarray) -> np.ndarray:
    """Project rows of ``z`` onto their two leading principal axes."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"PCA needs at least two row vectors, got shape {z.shape}")
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    # fix the sign so projections are reproducible
    signs = np.sign(axes[np.arange(axes.shape[0]), np.abs(axes).argmax(axis=1)])
    axes = axes * signs[:, None]
    out = centered @ axes.T
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((out.shape[0], 2 - out.shape[1]))])
    return out
