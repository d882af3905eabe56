"""Independent reference implementations used to cross-check the package.

These deliberately use a different algorithmic shape than the production code
(quadratic enumeration, explicit precision/recall arrays) and must stay
decoupled from the implementations they verify.
"""

from a2clpt.evaluator import iou


def brute_force_runs(row, min_len):
    """O(l^2) enumeration of maximal strictly-positive runs of ``row``."""
    l = len(row)
    out = []
    for s in range(1, l + 1):
        for e in range(s, l + 1):
            if all(row[t - 1] > 0 for t in range(s, e + 1)) \
                    and (s == 1 or row[s - 2] <= 0) \
                    and (e == l or row[e] <= 0) \
                    and e - s + 1 >= min_len:
                out.append((s, e))
    return out


def pr_curve_oracle(dets, gts, thr):
    """AP via explicit precision/recall arrays and the sum of
    precision * recall-increment over detection ranks."""
    if not gts:
        return 0.0
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i][1].confidence, dets[i][1].start, dets[i][0]))
    taken = set()
    flags = []
    for i in order:
        vid, d = dets[i]
        candidates = []
        for g, (gvid, span) in enumerate(gts):
            if g in taken or gvid != vid:
                continue
            ov = iou((d.start, d.end), span)
            if ov >= thr and ov > 0:
                candidates.append((ov, -g))
        if candidates:
            best = max(candidates)
            taken.add(-best[1])
            flags.append(True)
        else:
            flags.append(False)
    ap = 0.0
    tp = 0
    prev_recall = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
        recall = tp / len(gts)
        ap += (recall - prev_recall) * (tp / rank)
        prev_recall = recall
    return ap
