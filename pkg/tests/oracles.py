"""Deliberately naive reference implementations used as test oracles.

Everything here is written with plain loops over indices and shares no code
with the package, so agreement is meaningful.
"""

import math

import numpy as np


def circ(i, j, B):
    d = abs(i - j)
    return min(d, B - d)


def smooth(M, h):
    B = len(M)
    out = np.zeros((B, B))
    for i in range(B):
        for j in range(B):
            acc = 0.0
            for di in range(-h, h + 1):
                for dj in range(-h, h + 1):
                    acc += M[(i + di) % B][(j + dj) % B]
            out[i, j] = acc / (2 * h + 1) ** 2
    return out


def _pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    sx = math.sqrt(sum((x - mx) ** 2 for x in xs) / n)
    sy = math.sqrt(sum((y - my) ** 2 for y in ys) / n)
    return sxy, sx, sy


def scc(A, Bm, h=1, lo=1, hi=None):
    A, Bm = smooth(A, h), smooth(Bm, h)
    B = len(A)
    hi = B // 2 if hi is None else hi
    num = den = 0.0
    for s in range(lo, hi + 1):
        xs, ys = [], []
        for i in range(B):
            for j in range(i, B):
                if circ(i, j, B) == s:
                    xs.append(A[i][j])
                    ys.append(Bm[i][j])
        if len(xs) < 2:
            continue
        sxy, sx, sy = _pearson(xs, ys)
        if sx == 0 or sy == 0:
            continue
        w = len(xs) * sx * sy
        num += w * sxy / (sx * sy)
        den += w
    return num / den


def pcc(A, Bm):
    B = len(A)
    xs = [A[i][j] for i in range(B) for j in range(i + 1, B)]
    ys = [Bm[i][j] for i in range(B) for j in range(i + 1, B)]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    num = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    den = math.sqrt(sum((x - mx) ** 2 for x in xs) * sum((y - my) ** 2 for y in ys))
    return num / den


def ps(M):
    B = len(M)
    out = []
    for s in range(B // 2 + 1):
        vals = [M[i][j] for i in range(B) for j in range(B) if circ(i, j, B) == s]
        out.append(sum(vals) / len(vals))
    return np.array(out)


def beads(conf):
    """Flat list of present bead coordinates in chain order (parental first)."""
    out = []
    for chain, mask in ((conf.coords_parental, conf.mask_parental),
                        (conf.coords_replicated, conf.mask_replicated)):
        for b in range(chain.shape[0]):
            for k in range(chain.shape[1]):
                if mask[b][k]:
                    out.append(((0 if chain is conf.coords_parental else 1), b, k,
                                tuple(float(v) for v in chain[b][k])))
    return out


def drmsd(a, b, prefactor="printed"):
    pa = {(c, i, k): x for c, i, k, x in beads(a)}
    pb = {(c, i, k): x for c, i, k, x in beads(b)}
    keys = sorted(set(pa) & set(pb))
    L = len(keys)
    tot = 0.0
    for u in range(L):
        for v in range(u + 1, L):
            da = math.dist(pa[keys[u]], pa[keys[v]])
            db = math.dist(pb[keys[u]], pb[keys[v]])
            tot += (da - db) ** 2
    pref = 2.0 / (L * (L - 2)) if prefactor == "printed" else 2.0 / (L * (L - 1))
    return math.sqrt(pref * tot)


def mean_pairwise_drmsd(members, prefactor="printed"):
    n = len(members)
    vals = [drmsd(members[i], members[j], prefactor) for i in range(n) for j in range(i + 1, n)]
    return sum(vals) / len(vals)


def contacts(conf, threshold):
    B = conf.coords_parental.shape[0]
    M = np.zeros((B, B))
    bl = beads(conf)
    for _, i, _, x in bl:
        for _, j, _, y in bl:
            if math.dist(x, y) < threshold:
                M[i, j] = 1.0
    for i in range(B):
        M[i, i] = 1.0
    return M


def top_k_pairs(M, k, min_sep=3):
    B = len(M)
    cand = [(-M[i][j], i, j) for i in range(B) for j in range(i + 1, B)
            if circ(i, j, B) >= min_sep and M[i][j] > 0]
    cand.sort()
    return [(i, j) for _, i, j in cand[:k]]
