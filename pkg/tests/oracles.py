"""Brute-force reference implementations used only by the tests."""

import math


def minkowski_closing(active: set, n: int, dilation: int, erosion: int) -> set:
    """Closing over integer index sets on the unbounded line, then restricted to [0, n)."""
    def element(size):
        if size <= 1:
            return {0}
        return set(range(-(size // 2), size - size // 2))

    dil = {a + b for a in active for b in element(dilation)}
    lo, hi = min(dil, default=0) - erosion - 1, max(dil, default=0) + erosion + 1
    ero = {t for t in range(lo, hi + 1) if all(t + b in dil for b in element(erosion))}
    return {t for t in ero if 0 <= t < n}


def brute_tagging(predicted, reference):
    clips = sorted(set(predicted) | set(reference))
    labels = sorted({l for s in list(predicted.values()) + list(reference.values()) for l in s})
    tp = fp = fn = 0
    for clip in clips:
        for lab in labels:
            p = lab in predicted.get(clip, ())
            r = lab in reference.get(clip, ())
            tp += p and r
            fp += p and not r
            fn += r and not p
    return tp, fp, fn


def brute_segments(predicted, reference, durations, classes, resolution=1.0):
    """Segment-by-segment tables built with explicit interval-overlap tests."""
    counts = dict(tp=0, fp=0, fn=0, s=0, d=0, i=0, n=0)
    for clip, duration in durations.items():
        n_seg = max(1, math.ceil(duration / resolution - 1e-9))
        for k in range(n_seg):
            lo, hi = k * resolution, (k + 1) * resolution
            ref = {c for c in classes if any(e.label == c and e.onset < hi and e.offset > lo
                                             for e in reference.get(clip, ()))}
            est = {c for c in classes if any(e.label == c and e.onset < hi and e.offset > lo
                                             for e in predicted.get(clip, ()))}
            tp, fp, fn = len(ref & est), len(est - ref), len(ref - est)
            counts["tp"] += tp
            counts["fp"] += fp
            counts["fn"] += fn
            counts["s"] += min(fn, fp)
            counts["d"] += max(0, fn - fp)
            counts["i"] += max(0, fp - fn)
            counts["n"] += len(ref)
    return counts
