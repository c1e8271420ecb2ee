"""Slow, loop-based reference implementations used as oracles.

Everything here is written independently of the library's vectorized paths:
plain Python loops and direct restatements of each rule.
"""

from __future__ import annotations

import math

import numpy as np

from ovdist.geometry import Box, Detection


def iou_ref(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms_ref(dets, iou_threshold):
    """O(n^2) greedy suppression, pure python."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].category, dets[i].box.x1))
    kept = []
    for i in order:
        d = dets[i]
        ok = True
        for k in kept:
            if k.category == d.category and iou_ref(k.box, d.box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(d)
    return kept


def bilinear_ref(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize, scalar loops."""
    in_h, in_w = src.shape[:2]
    out = np.zeros((out_h, out_w, src.shape[2]), dtype=np.float64)
    for i in range(out_h):
        sy = (i + 0.5) * in_h / out_h - 0.5
        sy = max(sy, 0.0)
        y0 = min(int(math.floor(sy)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = (j + 0.5) * in_w / out_w - 0.5
            sx = max(sx, 0.0)
            x0 = min(int(math.floor(sx)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = (1 - fx) * src[y0, x0] + fx * src[y0, x1]
            bot = (1 - fx) * src[y1, x0] + fx * src[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bot
    return out


def assign_ref(layout, gt_boxes, gt_labels, top_k=9):
    """Direct restatement of the adaptive assignment rules with loops."""
    n = layout.count
    g = len(gt_boxes)
    labels = [-1] * n
    matched = [-1] * n
    ious_out = [0.0] * n
    if g == 0:
        return labels, matched, ious_out
    boxes = [Box(*layout.boxes[i]) for i in range(n)]
    gts = [Box(*gt_boxes[j]) for j in range(g)]
    best = [-1.0] * n
    for j in range(g):
        gt = gts[j]
        gcx, gcy = gt.center
        candidates = []
        for slc in layout.level_slices:
            idx = list(range(slc.start, slc.stop))
            dists = []
            for a in idx:
                dx = layout.centers[a, 0] - gcx
                dy = layout.centers[a, 1] - gcy
                dists.append(np.sqrt(dx * dx + dy * dy))
            order = sorted(range(len(idx)), key=lambda t: dists[t])
            k = min(top_k, len(idx))
            # emulate a stable sort on equal distances
            order = sorted(range(len(idx)), key=lambda t: (dists[t], t))[:k]
            candidates.extend(idx[t] for t in order)
        cand_ious = [iou_ref(boxes[a], gt) for a in candidates]
        m = sum(cand_ious) / len(cand_ious)
        if len(cand_ious) > 1:
            var = sum((v - m) ** 2 for v in cand_ious) / (len(cand_ious) - 1)
            s = math.sqrt(var)
        else:
            s = 0.0
        thr = m + s
        for a, v in zip(candidates, cand_ious):
            cx, cy = layout.centers[a]
            inside = gt.x1 <= cx <= gt.x2 and gt.y1 <= cy <= gt.y2
            if v >= thr and inside and v > best[a]:
                best[a] = v
                matched[a] = j
                labels[a] = int(gt_labels[j])
                ious_out[a] = v
    return labels, matched, ious_out


def match_ref(dets, gts, iou_threshold, category_agnostic=False):
    """Greedy matching restated with explicit loops."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].category, dets[i].box.x1))
    taken = [False] * len(gts)
    flags = []
    for i in order:
        d = dets[i]
        best, best_v = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            if not category_agnostic and g.category_id != d.category:
                continue
            v = iou_ref(d.box, g.box)
            if v >= iou_threshold and v > best_v:
                best, best_v = j, v
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, taken


def average_precision_ref(flags, scores, total_gt):
    """AP as the mean over recall steps of the best precision at or past
    each step (equivalent all-point formulation, derived separately)."""
    if total_gt == 0 or not flags:
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: (-scores[i], i))
    f = [flags[i] for i in order]
    precisions = []
    tp = 0
    for k, flag in enumerate(f, start=1):
        if flag:
            tp += 1
        precisions.append(tp / k)
    ap = 0.0
    tp_total = sum(f)
    for j in range(1, tp_total + 1):
        # best precision among prefixes holding at least j true positives
        best = 0.0
        tp = 0
        for k, flag in enumerate(f):
            if flag:
                tp += 1
            if tp >= j:
                best = max(best, max(precisions[k:]))
                break
        ap += best
    return ap / total_gt


def pool_ref(level_map: np.ndarray, grid: int, mode: str) -> list[np.ndarray]:
    """Nested-loop patch pooling with independently recomputed cell bounds."""
    d, h, w = level_map.shape

    def bounds(extent):
        out = []
        for k in range(grid):
            s = (k * extent) // grid
            e = ((k + 1) * extent) // grid
            s = min(s, extent - 1)
            if e <= s:
                e = s + 1
            out.append((s, e))
        return out

    rows = []
    for y0, y1 in bounds(h):
        for x0, x1 in bounds(w):
            vals = np.zeros(d)
            for c in range(d):
                acc = []
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        acc.append(level_map[c, y, x])
                vals[c] = max(acc) if mode == "max" else sum(acc) / len(acc)
            rows.append(vals)
    return rows


def attention_ref(caption: np.ndarray, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scalar-loop cosine cross attention."""
    m = patches.shape[0]
    cn = math.sqrt(sum(float(v) ** 2 for v in caption))
    cos = []
    for i in range(m):
        pn = math.sqrt(sum(float(v) ** 2 for v in patches[i]))
        if pn == 0.0:
            cos.append(0.0)
        else:
            cos.append(float(np.dot(patches[i], caption)) / (pn * cn))
    mx = max(cos)
    exps = [math.exp(c - mx) for c in cos]
    z = sum(exps)
    weights = np.array([e / z for e in exps])
    agg = np.zeros_like(caption, dtype=np.float64)
    for i in range(m):
        agg += weights[i] * patches[i]
    return agg, weights
