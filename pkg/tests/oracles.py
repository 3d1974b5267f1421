"""Independent reference implementations used as test oracles.

Geometry is re-derived in arbitrary precision with mpmath, nearest neighbors
with an extended-precision numpy brute force, and the all-zero-curvature model
as a plain Euclidean forward pass in numpy. None of these import the package
math they check.
"""

from __future__ import annotations

import zlib

import mpmath as mp
import numpy as np

mp.mp.dps = 40


# ---------------------------------------------------------------- geometry


def tan_k(u, k):
    u, k = mp.mpf(u), mp.mpf(k)
    if k < 0:
        return mp.tanh(mp.sqrt(-k) * u) / mp.sqrt(-k)
    if k > 0:
        return mp.tan(mp.sqrt(k) * u) / mp.sqrt(k)
    return u


def arctan_k(u, k):
    u, k = mp.mpf(u), mp.mpf(k)
    if k < 0:
        return mp.atanh(mp.sqrt(-k) * u) / mp.sqrt(-k)
    if k > 0:
        return mp.atan(mp.sqrt(k) * u) / mp.sqrt(k)
    return u


def _vec(x):
    return [mp.mpf(float(v)) for v in np.ravel(x)]


def _dot(a, b):
    return mp.fsum(p * q for p, q in zip(a, b))


def _norm(a):
    return mp.sqrt(_dot(a, a))


def mobius_add(x, y, k):
    x, y, k = _vec(x), _vec(y), mp.mpf(k)
    xy, x2, y2 = _dot(x, y), _dot(x, x), _dot(y, y)
    den = 1 - 2 * k * xy + k * k * x2 * y2
    return [((1 - 2 * k * xy - k * y2) * a + (1 + k * x2) * b) / den for a, b in zip(x, y)]


def exp_map(x, v, k):
    v = _vec(v)
    vn = _norm(v)
    if vn == 0:
        return _vec(x)
    lam = 2 / (1 + mp.mpf(k) * _dot(_vec(x), _vec(x)))
    t = tan_k(lam * vn / 2, k)
    return mobius_add(x, [t * a / vn for a in v], k)


def log_map(x, y, k):
    u = mobius_add([-a for a in _vec(x)], y, k)
    un = _norm(u)
    if un == 0:
        return [mp.mpf(0)] * len(u)
    lam = 2 / (1 + mp.mpf(k) * _dot(_vec(x), _vec(x)))
    return [2 / lam * arctan_k(un, k) * a / un for a in u]


def distance(x, y, k):
    return 2 * arctan_k(_norm(mobius_add([-a for a in _vec(x)], y, k)), k)


def as_float(v):
    return np.array([float(a) for a in v])


# ------------------------------------------------------- nearest neighbours


def _ld_mobius_add(x, y, k):
    xy = (x * y).sum(-1, keepdims=True)
    x2 = (x * x).sum(-1, keepdims=True)
    y2 = (y * y).sum(-1, keepdims=True)
    num = (1 - 2 * k * xy - k * y2) * x + (1 + k * x2) * y
    return num / (1 - 2 * k * xy + k * k * x2 * y2)


def _ld_arctan_k(u, k):
    if k < 0:
        s = np.sqrt(np.longdouble(-k))
        return np.arctanh(s * u) / s
    if k > 0:
        s = np.sqrt(np.longdouble(k))
        return np.arctan(s * u) / s
    return u


def brute_force_knn(key_p, key_w, cand_p, cand_w, kappas, K, exclude=None):
    """Top-K candidate rows by attention-weighted product distance, in extended precision.

    Returns (rows, distances) sorted by distance then row.
    """
    key_p = np.asarray(key_p, dtype=np.longdouble)
    cand_p = np.asarray(cand_p, dtype=np.longdouble)
    total = np.zeros(len(cand_p), dtype=np.longdouble)
    for m, k in enumerate(kappas):
        k = np.longdouble(k)
        u = _ld_mobius_add(-key_p[m][None, :], cand_p[:, m], k)
        d = 2 * _ld_arctan_k(np.sqrt((u * u).sum(-1)), k)
        total += (np.longdouble(key_w[m]) + np.asarray(cand_w, dtype=np.longdouble)[:, m]) * d
    if exclude is not None:
        total[exclude] = np.inf
    order = sorted(range(len(total)), key=lambda j: (total[j], j))
    order = [j for j in order if np.isfinite(total[j])][:K]
    return order, total


# ------------------------------------------------------ Euclidean forward


def _hash(field, token, buckets):
    return zlib.crc32(f"{field}\x1f{token}".encode()) % buckets


FIELDS = {
    "query": ("id", "category", "terms"),
    "item": ("id", "category", "title", "brand", "shop"),
    "ad": ("id", "category", "title", "bid_words", "brand", "shop"),
}
TYPES = ("query", "item", "ad")


def _tokens(rec, field):
    if field == "id":
        return [rec.id]
    if field == "category":
        return [rec.category]
    return list(rec.features.get(field, ()))


def euclidean_forward(params, records, neighbors, M, d, buckets, pairs, radius=1.0, temperature=5.0):
    """Plain-vector model: hashed mean features, one mean-aggregation layer,
    subspace mixing, linear edge maps, softmax weights, weighted 2-norm distance.

    ``params`` maps parameter names to numpy arrays; ``neighbors[n][t]`` lists
    the sampled neighbors of n of type t; ``pairs`` holds (u, v, relation, r_type_u, r_type_v).
    Returns the similarities for ``pairs``.
    """
    def init(n):
        rec = records[n]
        t = rec.type.value
        fields = FIELDS[t]
        slots = min(len(fields), d)
        base, extra = divmod(d, slots)
        bounds, s = [], 0
        for j in range(slots):
            w = base + (1 if j < extra else 0)
            bounds.append((s, s + w))
            s += w
        out = np.zeros((M, d))
        for m in range(M):
            table = params[f"feat.{t}_{m}"]
            for j, f in enumerate(fields):
                toks = _tokens(rec, f)
                if not toks:
                    continue
                mean = np.mean([table[_hash(f, tok, buckets)] for tok in toks], axis=0)
                lo, hi = bounds[j % slots]
                out[m, lo:hi] += mean[lo:hi]
        return out

    h0 = {n: init(n) for n in records}

    def layer(n):
        t = records[n].type.value
        blocks = []
        for tt in TYPES:
            nb = neighbors.get(n, {}).get(tt, [])
            blocks.append(np.mean([h0[u] for u in nb], axis=0) if nb else np.zeros((M, d)))
        blocks.append(h0[n])
        agg = np.concatenate(blocks, axis=-1)
        return np.stack([params[f"gcn.{t}_{m}_1"] @ agg[m] for m in range(M)])

    def fuse(n, h):
        t = records[n].type.value
        pooled = h.mean(0)
        return np.stack([params[f"fuse.{t}_{m}"] @ np.concatenate([pooled, h[m]]) for m in range(M)])

    final = {n: fuse(n, layer(n)) for n in records}

    def proj(n):
        t = records[n].type.value
        p = np.stack([params[f"proj.{t}_{m}"] @ final[n][m] for m in range(M)])
        logits = params[f"attn.{t}"] @ p.reshape(-1)
        w = np.exp(logits - logits.max())
        return p, w / w.sum()

    sims = []
    for u, v in pairs:
        pu, wu = proj(u)
        pv, wv = proj(v)
        dist = sum((wu[m] + wv[m]) * 2 * np.linalg.norm(pu[m] - pv[m]) for m in range(M))
        sims.append(1 / (1 + np.exp(-temperature * (radius - dist))))
    return np.array(sims)
