"""Brute-force reference implementations shared by the unit and acceptance tests."""

from collections import deque
from itertools import product

import numpy as np


def flood_fill_labels(mask):
    """Breadth-first component labelling with full (8 / 26) connectivity."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=int)
    offsets = [d for d in product((-1, 0, 1), repeat=mask.ndim) if any(d)]
    n = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        n += 1
        labels[start] = n
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for d in offsets:
                nb = tuple(c + o for c, o in zip(cur, d))
                if all(0 <= c < s for c, s in zip(nb, mask.shape)) and mask[nb] and not labels[nb]:
                    labels[nb] = n
                    queue.append(nb)
    return labels, n


def voxel_oracle(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += bool(p and g)
        fp += bool(p and not g)
        fn += bool(g and not p)
    n_pred, n_gt = tp + fp, tp + fn
    dsc = 1.0 if n_pred + n_gt == 0 else 2 * tp / (2 * tp + fp + fn)
    ppv = 1.0 if n_pred == 0 else tp / n_pred
    tpr = 1.0 if n_gt == 0 else tp / n_gt
    vd = (0.0 if n_pred == 0 else float("nan")) if n_gt == 0 else abs(n_pred - n_gt) / n_gt
    return dsc, ppv, tpr, vd


def lesion_oracle(pred, gt):
    gl, ng = flood_fill_labels(gt)
    pl, npred = flood_fill_labels(pred)
    hit_gt = {gl[i] for i in zip(*np.nonzero(gl)) if pred[i]}
    hit_pred = {pl[i] for i in zip(*np.nonzero(pl)) if gt[i]}
    ltpr = 1.0 if ng == 0 else len(hit_gt) / ng
    lfpr = 0.0 if npred == 0 else (npred - len(hit_pred)) / npred
    return ltpr, lfpr


def corr_oracle(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = len(a)
    cov = sum((x - a.mean()) * (y - b.mean()) for x, y in zip(a, b)) / n
    return cov / (a.std() * b.std())


def same_partition(labels_a, labels_b):
    """True when two label images describe the same components up to renumbering."""
    if not np.array_equal(labels_a > 0, labels_b > 0):
        return False
    pairs = set(zip(labels_a[labels_a > 0].tolist(), labels_b[labels_b > 0].tolist()))
    return len(pairs) == len({a for a, _ in pairs}) == len({b for _, b in pairs})


def ssim_oracle(f, g, window=11, sigma=1.5, c1=None, c2=None):
    """Per-window SSIM with explicit loops over a reflect-padded image."""
    r = window // 2
    t = np.arange(-r, r + 1)
    w = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * sigma**2))
    w /= w.sum()
    L = max(f.max(), g.max()) - min(f.min(), g.min())
    c1 = (0.01 * L) ** 2 if c1 is None else c1
    c2 = (0.03 * L) ** 2 if c2 is None else c2
    vals = []
    for n in range(f.shape[0]):
        for c in range(f.shape[1]):
            fp = np.pad(f[n, c], r, mode="reflect")
            gp = np.pad(g[n, c], r, mode="reflect")
            for i in range(f.shape[2]):
                for j in range(f.shape[3]):
                    a = fp[i:i + window, j:j + window]
                    b = gp[i:i + window, j:j + window]
                    ma, mb = (w * a).sum(), (w * b).sum()
                    va = (w * a * a).sum() - ma * ma
                    vb = (w * b * b).sum() - mb * mb
                    cov = (w * a * b).sum() - ma * mb
                    vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))
