"""Independent oracle implementations used by the test suite.

These are deliberately written as plain-Python brute force, separate from
the library code paths they validate.
"""

from __future__ import annotations

import math

import numpy as np


def gap_oracle(preds: dict[str, list[tuple[int, float]]],
               truth: dict[str, frozenset[int] | set[int]],
               cap: int | None = None) -> float:
    """Brute-force global average precision.

    Ranks all (confidence, video, label) rows by descending confidence with
    (video id, label) tie-break, then recomputes the precision at every hit
    by rescanning the prefix.
    """
    total_positives = 0
    for labels in truth.values():
        n = len(labels)
        if cap is not None:
            n = min(n, cap)
        total_positives += n
    if total_positives == 0:
        return 0.0
    rows = []
    for vid, pairs in preds.items():
        for label, conf in pairs:
            rows.append((conf, vid, label))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    score = 0.0
    for i, (conf, vid, label) in enumerate(rows):
        if label in truth[vid]:
            hits = 0
            for conf2, vid2, label2 in rows[: i + 1]:
                if label2 in truth[vid2]:
                    hits += 1
            score += (hits / (i + 1)) / total_positives
    return score


def moe_reference(gate_in, expert_in, Wg, bg, We, be, vocab_size, num_experts):
    """Scalar-loop mixture head: per-label softmax gate over E+1 logits
    (last gate is a null expert), sigmoid experts, weighted sum."""
    batch = gate_in.shape[0]
    out = np.zeros((batch, vocab_size))
    for b in range(batch):
        for v in range(vocab_size):
            glogits = []
            for e in range(num_experts + 1):
                col = v * (num_experts + 1) + e
                s = bg[col]
                for i in range(gate_in.shape[1]):
                    s += gate_in[b, i] * Wg[i, col]
                glogits.append(s)
            m = max(glogits)
            exps = [math.exp(g - m) for g in glogits]
            z = sum(exps)
            p = 0.0
            for e in range(num_experts):
                col = v * num_experts + e
                s = be[col]
                for i in range(expert_in.shape[1]):
                    s += expert_in[b, i] * We[i, col]
                p += (exps[e] / z) * (1.0 / (1.0 + math.exp(-s)))
            out[b, v] = p
    return out


def moments_oracle(frames):
    """Direct-summation central moments."""
    n = len(frames)
    dim = len(frames[0])
    mean = [sum(f[d] for f in frames) / n for d in range(dim)]
    std = [math.sqrt(sum((f[d] - mean[d]) ** 2 for f in frames) / n) for d in range(dim)]
    x3 = [sum((f[d] - mean[d]) ** 3 for f in frames) / n for d in range(dim)]
    return np.array(mean), np.array(std), np.array(x3)


def two_pass_moments_oracle(vectors):
    """Mean and population std of a list of vectors, two passes."""
    n = len(vectors)
    dim = len(vectors[0])
    mean = [sum(v[d] for v in vectors) / n for d in range(dim)]
    std = [math.sqrt(sum((v[d] - mean[d]) ** 2 for v in vectors) / n) for d in range(dim)]
    return np.array(mean), np.array(std)


def frequency_baseline(train_truth: dict, holdout_ids, top_k: int = 20):
    """Class-prior predictor: the same top-k most frequent training labels,
    with confidences proportional to frequency, for every holdout video."""
    counts: dict[int, int] = {}
    for labels in train_truth.values():
        for label in labels:
            counts[label] = counts.get(label, 0) + 1
    ranked = sorted(counts, key=lambda l: (-counts[l], l))[:top_k]
    n = len(train_truth)
    pairs = [(label, counts[label] / n) for label in ranked]
    return {vid: list(pairs) for vid in holdout_ids}


def random_gap_instance(rng: np.random.Generator, vocab_size: int = 20,
                        max_videos: int = 10, max_labels: int = 8,
                        top_k: int = 5):
    """A random small GAP instance with deliberate confidence ties and the
    occasional truth-only video."""
    num_videos = int(rng.integers(1, max_videos + 1))
    truth = {}
    preds = {}
    for i in range(num_videos):
        vid = f"v{i:03d}"
        n_labels = int(rng.integers(0, max_labels + 1))
        truth[vid] = frozenset(
            int(v) for v in rng.choice(vocab_size, size=n_labels, replace=False)
        )
        if rng.random() < 0.85:  # some videos stay truth-only
            n_preds = int(rng.integers(1, top_k + 1))
            labels = rng.choice(vocab_size, size=n_preds, replace=False)
            confs = np.round(rng.random(n_preds), 1)  # coarse grid forces ties
            pairs = sorted(
                [(int(l), float(c)) for l, c in zip(labels, confs)],
                key=lambda p: (-p[1], p[0]),
            )
            preds[vid] = pairs
    return preds, truth
