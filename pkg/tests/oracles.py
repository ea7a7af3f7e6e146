"""Independent reference implementations for cross-checking the library.

Everything here is deliberately written as plain scalar loops over Python
floats so it shares no code path with the package.
"""

from __future__ import annotations

import math


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def l2norm(v):
    return math.sqrt(sum(x * x for x in v))


def normalize(v):
    n = l2norm(v)
    return [x / n for x in v]


def softmax_row(row, scale=1.0):
    scaled = [scale * x for x in row]
    m = max(scaled)
    exps = [math.exp(x - m) for x in scaled]
    total = sum(exps)
    return [e / total for e in exps]


def attend(x, z, q, k, v, o):
    """Residual single-head attention, row by row."""
    d = len(q)
    xq = matmul(x, q)
    zk = matmul(z, k)
    zv = matmul(z, v)
    out = []
    for i in range(len(x)):
        logits = [dot(xq[i], zk[j]) for j in range(len(z))]
        weights = softmax_row(logits, 1.0 / math.sqrt(d))
        mixed = [0.0] * d
        for j, w in enumerate(weights):
            for t in range(d):
                mixed[t] += w * zv[j][t]
        projected = matmul([mixed], o)[0]
        out.append([x[i][t] + projected[t] for t in range(d)])
    return out


def max_pool(v, d_out):
    n = len(v)
    out = []
    for i in range(d_out):
        lo = i * n // d_out
        hi = (i + 1) * n // d_out
        out.append(max(v[lo:hi]))
    return out


def hinge(x):
    return x if x > 0 else 0.0


def loss_pretrain(mined, z_vecs, x_vecs, margin):
    """Triple loop over (label, positives, negatives)."""
    total = 0.0
    for label, pos, neg in mined:
        z = z_vecs[label]
        for i in pos:
            for j in neg:
                total += hinge(dot(z, x_vecs[j]) - dot(z, x_vecs[i]) + margin)
    return total


def loss_finetune(batch, adapted, classifiers, margin):
    """Double loop over (datapoint, positive labels, negative labels)."""
    total = 0.0
    for i, pos, neg in batch:
        for l in pos:
            total += 1.0 - dot(adapted[(i, l)], classifiers[l])
        for k in neg:
            total += hinge(dot(adapted[(i, k)], classifiers[k]) - margin)
    return total


def shortlist_by_max_representative(entry_vectors, entry_labels, x, cap):
    """Brute-force augmented retrieval: per-label max inner product."""
    best = {}
    for vec, label in zip(entry_vectors, entry_labels):
        sim = dot(vec, x)
        if label not in best or sim > best[label]:
            best[label] = sim
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:cap]


def precision_at_k(preds, gt, k):
    vals = []
    for ranked, pos in zip(preds, gt):
        pos = set(int(p) for p in pos)
        hits = sum(1 for label, _ in ranked[:k] if label in pos)
        vals.append(hits / k)
    return sum(vals) / len(vals) if vals else 0.0


def ndcg_at_k(preds, gt, k):
    vals = []
    for ranked, pos in zip(preds, gt):
        pos = set(int(p) for p in pos)
        if not pos:
            continue
        dcg = 0.0
        for r, (label, _) in enumerate(ranked[:k], start=1):
            if label in pos:
                dcg += 1.0 / math.log2(r + 1)
        ideal = 0.0
        for r in range(1, min(k, len(pos)) + 1):
            ideal += 1.0 / math.log2(r + 1)
        vals.append(dcg / ideal)
    return sum(vals) / len(vals) if vals else 0.0


def recall_at_k(preds, gt, k):
    vals = []
    for ranked, pos in zip(preds, gt):
        pos = set(int(p) for p in pos)
        if not pos:
            continue
        hits = sum(1 for label, _ in ranked[:k] if label in pos)
        vals.append(hits / len(pos))
    return sum(vals) / len(vals) if vals else 0.0


def auc(preds, gt, n_labels):
    """Explicit pair loop; unranked labels score -inf."""
    vals = []
    for ranked, pos in zip(preds, gt):
        pos = set(int(p) for p in pos)
        neg = [l for l in range(n_labels) if l not in pos]
        if not pos or not neg:
            continue
        score = {label: s for label, s in ranked}
        wins = 0.0
        for p in pos:
            sp = score.get(p, -math.inf)
            for q in neg:
                sq = score.get(q, -math.inf)
                if sp > sq:
                    wins += 1.0
                elif sp == sq:
                    wins += 0.5
        vals.append(wins / (len(pos) * len(neg)))
    return sum(vals) / len(vals) if vals else 0.0
