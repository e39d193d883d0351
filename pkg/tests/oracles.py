"""Plain-Python reference implementations shared by the tests.

Written independently of the vectorized package code: explicit loops and
exhaustive threshold sweeps.
"""


def ref_ece(conf, correct, n_bins):
    bins = [[] for _ in range(n_bins)]
    for c, ok in zip(conf, correct):
        b = 0
        while b < n_bins - 1 and not c <= (b + 1) / n_bins:
            b += 1
        bins[b].append((c, ok))
    total = 0.0
    for members in bins:
        if members:
            mc = sum(c for c, _ in members) / len(members)
            acc = sum(1.0 for _, ok in members if ok) / len(members)
            total += len(members) / len(conf) * abs(acc - mc)
    return total


def ref_aurc(conf, correct):
    n = len(conf)
    order = sorted(range(n), key=lambda i: (-conf[i], i))

    def area(errs):
        s, e = 0.0, 0
        for j, err in enumerate(errs, start=1):
            e += err
            s += e / j
        return s / n

    aurc = area([0 if correct[i] else 1 for i in order])
    opt = area(sorted(0 if ok else 1 for ok in correct))
    return aurc, aurc - opt


def ref_fpr95(conf, correct):
    pos = [c for c, ok in zip(conf, correct) if ok]
    neg = [c for c, ok in zip(conf, correct) if not ok]
    best = None
    for t in sorted(set(conf), reverse=True):
        if 100 * sum(1 for c in pos if c >= t) >= 95 * len(pos):
            best = t
            break
    return sum(1 for c in neg if c >= best) / len(neg)


def ref_aupr(conf, correct):
    score = [-c for c in conf]
    n_pos = sum(1 for ok in correct if not ok)
    area, r_prev = 0.0, 0.0
    for t in sorted(set(score), reverse=True):
        sel = [i for i in range(len(score)) if score[i] >= t]
        tp = sum(1 for i in sel if not correct[i])
        r = tp / n_pos
        area += (r - r_prev) * (tp / len(sel))
        r_prev = r
    return area


def brute_force_delta(losses, eta):
    """Zero the m largest losses, visiting ties lowest index first."""
    b = len(losses)
    m = int(round(eta * b))
    ranked = sorted(range(b), key=lambda i: (-losses[i], i))
    delta = [1] * b
    for i in ranked[:m]:
        delta[i] = 0
    return delta
