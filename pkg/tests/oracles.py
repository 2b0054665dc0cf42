"""Independent reference computations (pure Python, no torch, no numpy)."""

import math


def gauss(x, y, sigmas):
    d2 = sum((a - b) ** 2 for a, b in zip(x, y))
    return sum(math.exp(-d2 / (2 * s * s)) for s in sigmas) / len(sigmas)


def mmd2_loops(xs, xt, sigmas):
    """Biased MMD^2 written as literal nested loops over every index."""
    ns, nt = len(xs), len(xt)
    a = 0.0
    for i in range(ns):
        for j in range(ns):
            a += gauss(xs[i], xs[j], sigmas)
    b = 0.0
    for i in range(nt):
        for j in range(nt):
            b += gauss(xt[i], xt[j], sigmas)
    c = 0.0
    for i in range(ns):
        for j in range(nt):
            c += gauss(xs[i], xt[j], sigmas)
    return a / ns ** 2 + b / nt ** 2 - 2 * c / (ns * nt)


def median_low_distance(points):
    d = sorted(
        math.sqrt(sum((a - b) ** 2 for a, b in zip(points[i], points[j])))
        for i in range(len(points)) for j in range(i + 1, len(points))
    )
    if not d:
        return 1.0
    m = d[(len(d) - 1) // 2]
    return m if m > 0 else 1.0


def cdd_compositional(xs, ys, xt, yt, mask, sigmas):
    """Partition by label, call the loop oracle per (c, c') pair, average."""
    tgt = [(x, y) for x, y, m in zip(xt, yt, mask) if m]
    classes = sorted(set(ys) | {y for _, y in tgt})
    S = {c: [x for x, y in zip(xs, ys) if y == c] for c in classes}
    T = {c: [x for x, y in tgt if y == c] for c in classes}
    usable = [c for c in classes if S[c] and T[c]]
    intra = [mmd2_loops(S[c], T[c], sigmas) for c in usable]
    inter = [mmd2_loops(S[c], T[d], sigmas) for c in usable for d in usable if c != d]
    intra_v = sum(intra) / len(intra) if intra else 0.0
    inter_v = sum(inter) / len(inter) if inter else 0.0
    return intra_v - inter_v, intra_v, inter_v


def macro_f1_confusion(pred, true):
    classes = sorted(set(pred) | set(true))
    idx = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(pred, true):
        cm[idx[t]][idx[p]] += 1
    f1s = []
    for i in range(k):
        tp = cm[i][i]
        col = sum(cm[r][i] for r in range(k))
        row = sum(cm[i])
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return sum(f1s) / k
