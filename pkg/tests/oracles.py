"""Independent float64 brute-force references used as test oracles.

Everything here is written with plain loops (or numpy.linalg for the
eigendecomposition), deliberately sharing no code with the package.
"""

import numpy as np


def conv2d_ref(x, w, b=None, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, co, i, j] = np.sum(patch * w[co])
            if b is not None:
                out[n, co] += b[co]
    return out


def pairwise_sqdist_ref(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[0]))
    for m in range(a.shape[0]):
        for n in range(b.shape[0]):
            out[m, n] = np.sum((a[m] - b[n]) ** 2)
    return out


def grid_distances_ref(grid, protos):
    """grid: (Hg, Wg, D); protos: (N, D) -> (N, Hg, Wg)."""
    grid = np.asarray(grid, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    N = protos.shape[0]
    Hg, Wg, _ = grid.shape
    out = np.zeros((N, Hg, Wg))
    for n in range(N):
        for i in range(Hg):
            for j in range(Wg):
                out[n, i, j] = np.sum((grid[i, j] - protos[n]) ** 2)
    return out


def evidence_ref(d, eps):
    d = np.asarray(d, dtype=np.float64)
    return np.log((d + 1.0) / (d + eps))


def crsent_ref(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for b in range(logits.shape[0]):
        z = logits[b]
        p = np.exp(z - z.max())
        p /= p.sum()
        total += -np.log(p[labels[b]])
    return total / logits.shape[0]


def clst_ref(grids, labels, protos, class_of):
    """grids: (B, Hg, Wg, D); min over own-class protos of min over cells."""
    total = 0.0
    for b in range(len(grids)):
        own = [j for j in range(len(protos)) if class_of[j] == labels[b]]
        best = np.inf
        for j in own:
            for i in range(grids[b].shape[0]):
                for k in range(grids[b].shape[1]):
                    d = np.sum((np.asarray(grids[b][i, k], dtype=np.float64)
                                - np.asarray(protos[j], dtype=np.float64)) ** 2)
                    best = min(best, d)
        total += best
    return total / len(grids)


def sep_ref(grids, labels, protos, class_of):
    total = 0.0
    for b in range(len(grids)):
        other = [j for j in range(len(protos)) if class_of[j] != labels[b]]
        best = np.inf
        for j in other:
            for i in range(grids[b].shape[0]):
                for k in range(grids[b].shape[1]):
                    d = np.sum((np.asarray(grids[b][i, k], dtype=np.float64)
                                - np.asarray(protos[j], dtype=np.float64)) ** 2)
                    best = min(best, d)
        total += -best
    return total / len(grids)


def reject_ref(protos, antitypes, eps, reduction="antitype_max", active=None):
    protos = np.asarray(protos, dtype=np.float64)
    antitypes = np.asarray(antitypes, dtype=np.float64)
    if len(antitypes) == 0:
        return 0.0
    if active is None:
        active = [True] * len(protos)
    idx = [j for j in range(len(protos)) if active[j]]
    sims = np.zeros((len(antitypes), len(idx)))
    for s in range(len(antitypes)):
        for jj, j in enumerate(idx):
            d = np.sum((protos[j] - antitypes[s]) ** 2)
            sims[s, jj] = np.log((d + 1.0) / (d + eps))
    if reduction == "antitype_max":
        return float(sims.max(axis=1).sum())
    if reduction == "prototype_max":
        return float(sims.max(axis=0).sum())
    if reduction == "global_max":
        return float(sims.max())
    raise ValueError(reduction)


def con_count_ref(protos):
    count = 0
    for row in np.asarray(protos):
        for v in row:
            if v > 1.0 or v < 0.0:
                count += 1
    return count


def con_surrogate_ref(protos):
    total = 0.0
    for row in np.asarray(protos, dtype=np.float64):
        for v in row:
            total += max(0.0, v - 1.0) ** 2 + max(0.0, -v) ** 2
    return total


def l1_ref(w, class_of):
    w = np.asarray(w, dtype=np.float64)
    total = 0.0
    for n in range(w.shape[0]):
        for k in range(w.shape[1]):
            if class_of[n] != k:
                total += abs(w[n, k])
    return total


def bilinear_ref(src, out_h, out_w):
    """Half-pixel-centre bilinear upsampling with edge clamping."""
    src = np.asarray(src, dtype=np.float64)
    sh, sw = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = (i + 0.5) * sh / out_h - 0.5
            x = (j + 0.5) * sw / out_w - 0.5
            y = min(max(y, 0.0), sh - 1.0)
            x = min(max(x, 0.0), sw - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, sh - 1), min(x0 + 1, sw - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (src[y0, x0] * (1 - fy) * (1 - fx)
                         + src[y0, x1] * (1 - fy) * fx
                         + src[y1, x0] * fy * (1 - fx)
                         + src[y1, x1] * fy * fx)
    return out


def pca_ref(x, k=3):
    """Top-k projection via dense symmetric eigendecomposition."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order]
    for i in range(comps.shape[1]):
        j = np.argmax(np.abs(comps[:, i]))
        if comps[j, i] < 0:
            comps[:, i] = -comps[:, i]
    return xc @ comps, evals[order]


def fd_grad(f, arrays, index, h=1e-3):
    """Central finite differences of scalar f w.r.t. arrays[index].

    Perturbed inputs are rounded to float32 first and the quotient uses
    the actually-achieved delta, which keeps the oracle honest about the
    32-bit pipeline it probes.
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    target = arrays[index]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi = np.float32(np.float64(orig) + h)
        lo = np.float32(np.float64(orig) - h)
        flat[i] = hi
        fp = float(f(*arrays))
        flat[i] = lo
        fm = float(f(*arrays))
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (np.float64(hi) - np.float64(lo))
    return grad


def assert_grads_close(analytic, fd, rtol=1e-3, atol=1e-4):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    err = np.abs(analytic - fd)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(fd)) + atol
    worst = np.max(err - bound)
    assert np.all(err <= bound), f"gradient mismatch, worst excess {worst:.3e}"
