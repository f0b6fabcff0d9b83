"""Open-set scoring, FAR/FRR, EER calibration and report export."""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .dataprep import CATEGORIES
from .errors import UndefinedMetricError
from .hnmloss import batch_pair_types, similarity_matrix
from .sampler import batch_tensors, build_batches
from .siamese import embed

TYPES = (1, 2, 3, 4)
SWEEP_RESOLUTION = 512
HISTOGRAM_BINS = 40


@dataclass(frozen=True)
class ScoredPair:
    score: float
    pair_type: int
    row_phrase: str
    col_phrase: str
    same_speaker: bool

    @property
    def positive(self):
        return self.pair_type == 1


@dataclass
class ScoreTable:
    """Column store of scored pairs."""

    scores: np.ndarray
    types: np.ndarray
    row_phrase: np.ndarray
    col_phrase: np.ndarray
    row_speaker: np.ndarray
    col_speaker: np.ndarray

    def __len__(self):
        return len(self.scores)

    def __iter__(self):
        for i in range(len(self)):
            yield ScoredPair(float(self.scores[i]), int(self.types[i]), str(self.row_phrase[i]),
                             str(self.col_phrase[i]), bool(self.row_speaker[i] == self.col_speaker[i]))

    @property
    def positive(self):
        return self.types == 1

    @property
    def same_speaker(self):
        return self.row_speaker == self.col_speaker

    @classmethod
    def concat(cls, parts):
        if not parts:
            return cls(*(np.array([], dtype=d) for d in (float, np.int8, str, str, str, str)))
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("scores", "types", "row_phrase", "col_phrase", "row_speaker", "col_speaker")))

    def save(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["score", "type", "row_speaker", "col_speaker", "row_phrase", "col_phrase"])
            for row in zip(self.scores, self.types, self.row_speaker, self.col_speaker,
                           self.row_phrase, self.col_phrase):
                w.writerow([repr(float(row[0])), int(row[1]), *row[2:]])

    @classmethod
    def load(cls, path):
        cols = {k: [] for k in ("score", "type", "row_speaker", "col_speaker", "row_phrase", "col_phrase")}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                for k in cols:
                    cols[k].append(row[k])
        return cls(np.array(cols["score"], dtype=float), np.array(cols["type"], dtype=np.int8),
                   np.array(cols["row_phrase"]), np.array(cols["col_phrase"]),
                   np.array(cols["row_speaker"]), np.array(cols["col_speaker"]))


# --------------------------------------------------------------------------
# scoring


def score_batch(params, batch, clips, length=50):
    x1, x2 = batch_tensors(batch, clips, length)
    n = len(batch)
    z = embed(np.concatenate([x1, x2]), params)
    s = similarity_matrix(z[:n], z[n:]).astype(np.float64)
    types = batch_pair_types(batch.keys)
    speakers = np.array([k[0] for k in batch.keys])
    phrases = np.array([k[1] for k in batch.keys])
    rows, cols = np.indices((n, n))
    return ScoreTable(s.ravel(), types.ravel(), phrases[rows.ravel()], phrases[cols.ravel()],
                      speakers[rows.ravel()], speakers[cols.ravel()])


def score_pairs(params, pairs, n, clips, length=50, seed=0):
    """Embed both branches per evaluation batch and score all N^2 combinations."""
    batches = build_batches(pairs, n, seed=seed, training=False)
    return ScoreTable.concat([score_batch(params, b, clips, length) for b in batches])


def score_dataset(checkpoint, pairs, n, clips, seed=0):
    return score_pairs(checkpoint.params, pairs, n, clips, checkpoint.arch.frames, seed)


def split_scores(table):
    return table.scores[table.positive], table.scores[~table.positive]


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    threshold: float
    far: float
    frr: float
    tp: int
    fp: int
    tn: int
    fn: int
    type_errors: dict = field(default_factory=dict)

    def lines(self):
        out = [
            f"threshold: {self.threshold:.6f}",
            f"FAR: {100 * self.far:.4f}%",
            f"FRR: {100 * self.frr:.4f}%",
            f"TP: {self.tp}",
            f"FP: {self.fp}",
            f"TN: {self.tn}",
            f"FN: {self.fn}",
        ]
        for t, e in sorted(self.type_errors.items()):
            out.append(f"type {t} error: {100 * e:.4f}%")
        return out


def _as_arrays(scored):
    if isinstance(scored, ScoreTable):
        return scored.scores, scored.positive, scored.types
    scored = list(scored)
    scores = np.array([p.score for p in scored], dtype=float)
    types = np.array([p.pair_type for p in scored], dtype=np.int8)
    return scores, types == 1, types


def compute_far_frr(scored, threshold):
    """Accept iff score >= threshold; FRR = FN/(TP+FN), FAR = FP/(TN+FP)."""
    scores, positive, types = _as_arrays(scored)
    if not positive.any() or positive.all():
        raise UndefinedMetricError("FAR and FRR need at least one positive and one negative pair")
    accept = scores >= threshold
    tp = int(np.sum(accept & positive))
    fn = int(np.sum(~accept & positive))
    fp = int(np.sum(accept & ~positive))
    tn = int(np.sum(~accept & ~positive))
    errors = {}
    for t in TYPES:
        mask = types == t
        if mask.any():
            wrong = ~accept[mask] if t == 1 else accept[mask]
            errors[t] = float(wrong.mean())
    return MetricReport(float(threshold), fp / (tn + fp), fn / (tp + fn), tp, fp, tn, fn, errors)


def find_eer_threshold(positive_scores, negative_scores):
    """Threshold minimising |FAR - FRR| over every distinct score and +-inf.

    Ties go to the lowest threshold.  Returns ``(threshold, (FAR + FRR) / 2)``.
    """
    pos = np.sort(np.asarray(positive_scores, dtype=float))
    neg = np.sort(np.asarray(negative_scores, dtype=float))
    if not len(pos) or not len(neg):
        raise UndefinedMetricError("EER needs positive and negative scores")
    cand = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]])
    fn = np.searchsorted(pos, cand, side="left").astype(np.int64)  # pos < t rejected
    fp = len(neg) - np.searchsorted(neg, cand, side="left").astype(np.int64)  # neg >= t accepted
    gap = np.abs(fp * len(pos) - fn * len(neg))  # |FAR - FRR| scaled by P*N, exact
    best = int(np.argmin(gap))
    n_pos, n_neg = len(pos), len(neg)
    # (FAR + FRR) / 2 as one integer ratio, so it is rounded exactly once
    eer = (int(fp[best]) * n_pos + int(fn[best]) * n_neg) / (2 * n_pos * n_neg)
    return float(cand[best]), eer


def brute_force_eer(positive_scores, negative_scores):
    """Reference sweep with exact fractions; slow, for verification."""
    pos, neg = list(positive_scores), list(negative_scores)
    best = None
    for t in [-math.inf] + sorted(set(pos) | set(neg)) + [math.inf]:
        frr = Fraction(sum(1 for s in pos if s < t), len(pos))
        far = Fraction(sum(1 for s in neg if s >= t), len(neg))
        key = abs(far - frr)
        if best is None or key < best[0]:
            best = (key, t, (far + frr) / 2)
    return best[1], float(best[2])


def sweep_thresholds(resolution=SWEEP_RESOLUTION):
    return np.linspace(-1.0, 1.0, resolution)


def far_frr_curve(scored, thresholds=None):
    thresholds = sweep_thresholds() if thresholds is None else np.asarray(thresholds, float)
    scores, positive, _ = _as_arrays(scored)
    pos, neg = np.sort(scores[positive]), np.sort(scores[~positive])
    if not len(pos) or not len(neg):
        raise UndefinedMetricError("curve needs positive and negative scores")
    frr = np.searchsorted(pos, thresholds, side="left") / len(pos)
    far = (len(neg) - np.searchsorted(neg, thresholds, side="left")) / len(neg)
    return thresholds, far, frr


def type_breakdown(scored, thresholds=None):
    """Misclassified fraction within each pair type at every threshold.

    Returns ``(thresholds, {type: errors}, notes)``; empty types are omitted
    and named in ``notes``.
    """
    thresholds = sweep_thresholds() if thresholds is None else np.asarray(thresholds, float)
    scores, _, types = _as_arrays(scored)
    curves, notes = {}, []
    for t in TYPES:
        s = np.sort(scores[types == t])
        if not len(s):
            notes.append(f"type {t}: no pairs")
            continue
        below = np.searchsorted(s, thresholds, side="left")
        wrong = below if t == 1 else len(s) - below
        curves[t] = wrong / len(s)
    return thresholds, curves, notes


def type_error_counts(scored, threshold):
    scores, _, types = _as_arrays(scored)
    accept = scores >= threshold
    return {t: int(np.sum(~accept[types == t]) if t == 1 else np.sum(accept[types == t]))
            for t in TYPES}


def word_category_diff(a, b):
    """Categories whose words differ between two phrase abbreviations, or "None"."""
    diff = tuple(c for c, x, y in zip(CATEGORIES, a, b) if x != y)
    return diff or "None"


def _false_accepts(table, threshold):
    mask = (table.scores >= threshold) & ~table.positive
    return [(a, b, same) for a, b, same in
            zip(table.row_phrase[mask], table.col_phrase[mask], table.same_speaker[mask])]


def rank_phrase_pairs(errors, k=20):
    """``errors``: iterable of (phrase_a, phrase_b, same_speaker) false accepts."""
    counts = {True: Counter(), False: Counter()}
    for a, b, same in errors:
        counts[bool(same)][tuple(sorted((str(a), str(b))))] += 1
    ranked = {}
    for same, c in counts.items():
        ranked["same" if same else "different"] = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return ranked


def confused_phrases(table, threshold, k=20):
    return rank_phrase_pairs(_false_accepts(table, threshold), k)


def word_category_errors(table, threshold):
    counts = {"same": Counter(), "different": Counter()}
    for a, b, same in _false_accepts(table, threshold):
        diff = word_category_diff(a, b)
        label = diff if diff == "None" else "+".join(diff)
        counts["same" if same else "different"][label] += 1
    return counts


# --------------------------------------------------------------------------
# export


def histogram(scored, bins=HISTOGRAM_BINS):
    scores, _, types = _as_arrays(scored)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    clipped = np.clip(scores, -1.0, 1.0)
    counts = {t: np.histogram(clipped[types == t], bins=edges)[0] for t in TYPES}
    return edges, counts


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_report(table, threshold, out_dir, resolution=SWEEP_RESOLUTION, bins=HISTOGRAM_BINS, k=20):
    """Write the CSV report files and summary.txt; returns the MetricReport."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = sweep_thresholds(resolution)

    _, far, frr = far_frr_curve(table, thresholds)
    _write_csv(out / "far_frr_curve.csv", ["threshold", "far", "frr"],
               ([f"{t:.6f}", f"{a:.6f}", f"{r:.6f}"] for t, a, r in zip(thresholds, far, frr)))

    edges, counts = histogram(table, bins)
    stacked = np.cumsum([counts[t] for t in TYPES], axis=0)
    totals = {t: counts[t].sum() for t in TYPES}
    header = (["bin_low", "bin_high"] + [f"count_type{t}" for t in TYPES]
              + [f"stacked_type{t}" for t in TYPES] + [f"normalized_type{t}" for t in TYPES])
    rows = []
    for i in range(bins):
        row = [f"{edges[i]:.4f}", f"{edges[i + 1]:.4f}"]
        row += [int(counts[t][i]) for t in TYPES]
        row += [int(stacked[j][i]) for j in range(len(TYPES))]
        row += [f"{counts[t][i] / totals[t]:.6f}" if totals[t] else "0" for t in TYPES]
        rows.append(row)
    _write_csv(out / "score_histograms.csv", header, rows)

    _, curves, notes = type_breakdown(table, thresholds)
    present = [t for t in TYPES if t in curves]
    _write_csv(out / "type_error_curves.csv", ["threshold"] + [f"type{t}_error" for t in present],
               ([f"{thr:.6f}"] + [f"{curves[t][i]:.6f}" for t in present]
                for i, thr in enumerate(thresholds)))

    ranked = confused_phrases(table, threshold, k)
    _write_csv(out / "confused_phrases.csv", ["speakers", "rank", "phrase_a", "phrase_b", "count"],
               ([rel, r + 1, a, b, c] for rel in ("same", "different")
                for r, ((a, b), c) in enumerate(ranked[rel])))

    cats = word_category_errors(table, threshold)
    _write_csv(out / "word_category_errors.csv", ["speakers", "categories", "count"],
               ([rel, label, c] for rel in ("same", "different")
                for label, c in sorted(cats[rel].items(), key=lambda kv: (-kv[1], kv[0]))))

    report = compute_far_frr(table, threshold)
    lines = report.lines() + [f"pairs: {len(table)}"] + [f"note: {n}" for n in notes]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report


def write_threshold(path, threshold, eer):
    Path(path).write_text(f"threshold={threshold!r}\neer={eer!r}\n", encoding="utf-8")


def read_threshold(path):
    text = Path(path).read_text(encoding="utf-8")
    values = dict(line.split("=", 1) for line in text.split() if "=" in line)
    if "threshold" in values:
        return float(values["threshold"])
    return float(text.strip())
