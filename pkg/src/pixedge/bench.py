"""Boundary benchmark: threshold sweep, thinning, matching and ODS/OIS/AP.

Detections are matched one-to-one against each annotator's boundary map
within ``tol_fraction * image_diagonal`` pixels.  Precision counts a detected
pixel as correct if any annotator matched it; recall sums matched boundary
pixels over all annotators.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import ContractError
from .imagecore import as_map

DEFAULT_TOL = 0.0075
DEFAULT_THRESHOLDS = tuple(k / 100 for k in range(1, 100))
RECALL_LEVELS = np.arange(1, 101) / 100.0


# ------------------------------------------------------------ thinning


def _neighbours(img):
    """P2..P9 (N, NE, E, SE, S, SW, W, NW) of every pixel, zero outside."""
    p = np.pad(img, 1)
    h, w = img.shape
    at = lambda dy, dx: p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    return [at(-1, 0), at(-1, 1), at(0, 1), at(1, 1), at(1, 0), at(1, -1), at(0, -1), at(-1, -1)]


def zhang_suen(mask):
    """Zhang-Suen thinning of a boolean mask to a one-pixel skeleton."""
    img = np.asarray(mask, dtype=bool).copy()
    while True:
        changed = False
        for step in (0, 1):
            n = [q.astype(np.uint8) for q in _neighbours(img)]
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            count = sum(n)
            seq = n + [n[0]]
            transitions = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.uint8) for i in range(8))
            if step == 0:
                c1 = (p2 & p4 & p6) == 0
                c2 = (p4 & p6 & p8) == 0
            else:
                c1 = (p2 & p4 & p8) == 0
                c2 = (p2 & p6 & p8) == 0
            kill = img & (count >= 2) & (count <= 6) & (transitions == 1) & c1 & c2
            if kill.any():
                img &= ~kill
                changed = True
        if not changed:
            return img


def threshold_and_thin(edge_map, t):
    """Binarize at ``v >= t`` and thin the result."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"threshold {t} outside [0, 1]")
    return zhang_suen(as_map(edge_map) >= t)


# ------------------------------------------------------------ matching


def max_distance(shape, tol_fraction=DEFAULT_TOL):
    return tol_fraction * math.hypot(shape[0], shape[1])


def _candidate_pairs(det_pts, gt_pts, max_dist):
    if len(det_pts) == 0 or len(gt_pts) == 0:
        return np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0)
    sdm = cKDTree(det_pts).sparse_distance_matrix(cKDTree(gt_pts), max_dist, output_type="ndarray")
    return sdm["i"].astype(np.intp), sdm["j"].astype(np.intp), sdm["v"]


def greedy_match(det_pts, gt_pts, max_dist):
    """Distance-ordered greedy matching, then augmenting-path repair.

    Pairs are taken in ascending distance order.  Greedy choices can strand
    pixels (a chain shifted by one pixel loses its end), so each unmatched
    detection then searches for an augmenting path; the count reaches the
    maximum while most pairs keep their greedy partner.  Returns boolean
    masks over det and gt points.
    """
    di, gi, dist = _candidate_pairs(det_pts, gt_pts, max_dist)
    det_mate = np.full(len(det_pts), -1, np.intp)
    gt_mate = np.full(len(gt_pts), -1, np.intp)
    order = np.lexsort((gi, di, dist))
    # coincident pixels are each other's unique nearest partner, so they come first
    for k in order:
        a, b = di[k], gi[k]
        if det_mate[a] < 0 and gt_mate[b] < 0:
            det_mate[a], gt_mate[b] = b, a
    # candidate partners of each detection, nearest first
    by_det = np.lexsort((gi, dist, di))
    starts = np.searchsorted(di[by_det], np.arange(len(det_pts) + 1))
    adj = [gi[by_det[starts[a] : starts[a + 1]]] for a in range(len(det_pts))]
    for a in np.flatnonzero(det_mate < 0):
        if len(adj[a]):
            _augment(a, adj, det_mate, gt_mate)
    return det_mate >= 0, gt_mate >= 0


def _augment(root, adj, det_mate, gt_mate):
    """Breadth-first search for an augmenting path from an unmatched detection."""
    came_from = {}  # gt point -> detection that reached it
    frontier = [root]
    while frontier:
        nxt = []
        for a in frontier:
            for b in adj[a]:
                if b in came_from:
                    continue
                came_from[b] = a
                if gt_mate[b] < 0:
                    # flip the path back to the root
                    while True:
                        a = came_from[b]
                        prev = det_mate[a]
                        det_mate[a], gt_mate[b] = b, a
                        if a == root:
                            return True
                        b = prev
                nxt.append(gt_mate[b])
        frontier = nxt
    return False


def exact_match(det_pts, gt_pts, max_dist):
    """Maximum-cardinality matching with minimal total distance among maxima."""
    di, gi, dist = _candidate_pairs(det_pts, gt_pts, max_dist)
    det_used = np.zeros(len(det_pts), bool)
    gt_used = np.zeros(len(gt_pts), bool)
    if len(di) == 0:
        return det_used, gt_used
    rows, ri = np.unique(di, return_inverse=True)
    cols, ci = np.unique(gi, return_inverse=True)
    # any missed match costs more than every admissible distance combined
    penalty = dist.sum() + 1.0
    cost = np.full((len(rows), len(cols)), penalty)
    cost[ri, ci] = dist
    r, c = linear_sum_assignment(cost)
    ok = cost[r, c] < penalty
    det_used[rows[r[ok]]] = True
    gt_used[cols[c[ok]]] = True
    return det_used, gt_used


MATCHERS = {"greedy": greedy_match, "exact": exact_match}


def correspond(det, gt, max_dist, matcher="greedy"):
    """One-to-one matching of boundary pixels within ``max_dist``.

    Returns boolean maps ``(matched_det, matched_gt)`` of the same shape.
    """
    d = np.asarray(det, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if d.shape != g.shape:
        raise ContractError(f"detection {d.shape} and ground truth {g.shape} differ")
    dp, gp = np.argwhere(d), np.argwhere(g)
    du, gu = MATCHERS[matcher](dp, gp, max_dist)
    md = np.zeros_like(d)
    mg = np.zeros_like(g)
    md[tuple(dp[du].T)] = True
    mg[tuple(gp[gu].T)] = True
    return md, mg


# ------------------------------------------------------------ PR tables


def precision_recall_f(matched_det, total_det, matched_gt, total_gt):
    """Elementwise P, R, F with P = 1 for empty detections and F = 0 when P + R = 0."""
    md, td, mg, tg = (np.asarray(v, dtype=np.float64) for v in (matched_det, total_det, matched_gt, total_gt))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(td > 0, md / np.where(td > 0, td, 1), 1.0)
        r = np.where(tg > 0, mg / np.where(tg > 0, tg, 1), 0.0)
        s = p + r
        f = np.where(s > 0, 2 * p * r / np.where(s > 0, s, 1), 0.0)
    return p, r, f


@dataclass
class PRTable:
    """Counts per threshold for one image (or summed over a dataset)."""

    thresholds: np.ndarray
    matched_det: np.ndarray
    total_det: np.ndarray
    matched_gt: np.ndarray
    total_gt: np.ndarray
    image_id: str = ""

    def prf(self):
        return precision_recall_f(self.matched_det, self.total_det, self.matched_gt, self.total_gt)

    def best(self):
        """Index of the best-F threshold; the lowest threshold wins ties."""
        return int(np.argmax(self.prf()[2]))


@dataclass
class PRPoint:
    threshold: float
    matched_det: int
    total_det: int
    matched_gt: int
    total_gt: int
    precision: float
    recall: float
    f: float


@dataclass
class BenchReport:
    pr_curve: list
    ods: float
    ods_threshold: float
    ois: float
    ap: float
    per_image: list = field(default_factory=list, repr=False)


def evaluate_image(edge_map, gts, thresholds=DEFAULT_THRESHOLDS, tol_fraction=DEFAULT_TOL,
                   matcher="greedy", image_id=""):
    """PR counts of one soft edge map against its annotators at every threshold."""
    e = as_map(edge_map)
    gts = [as_map(g) > 0.5 for g in gts]
    if not gts:
        raise ContractError("need at least one annotator map")
    if any(g.shape != e.shape for g in gts):
        raise ContractError("annotator maps must match the edge map dims")
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ContractError("thresholds must be sorted ascending")
    max_dist = max_distance(e.shape, tol_fraction)
    n = len(th)
    md, td, mg = np.zeros(n, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64)
    tg = np.full(n, sum(int(g.sum()) for g in gts), np.int64)
    for k, t in enumerate(th):
        det = threshold_and_thin(e, t)
        td[k] = det.sum()
        any_match = np.zeros_like(det)
        for g in gts:
            m_det, m_gt = correspond(det, g, max_dist, matcher)
            any_match |= m_det
            mg[k] += m_gt.sum()
        md[k] = any_match.sum()
    return PRTable(th, md, td, mg, tg, image_id)


def average_precision(precision, recall, levels=RECALL_LEVELS):
    """Mean interpolated precision at ``levels``; 0 past the highest recall reached."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    interp = np.zeros(len(levels))
    for i, lv in enumerate(levels):
        ok = r >= lv - 1e-12
        if ok.any():
            interp[i] = p[ok].max()
    return float(interp.mean())


def summarize(tables):
    """Fold per-image PR tables into dataset-level ODS, OIS and AP."""
    tables = list(tables)
    if not tables:
        raise ContractError("cannot summarize an empty dataset")
    th = tables[0].thresholds
    if any(not np.array_equal(t.thresholds, th) for t in tables):
        raise ContractError("all images must share one threshold grid")
    sums = [sum(getattr(t, a) for t in tables) for a in ("matched_det", "total_det", "matched_gt", "total_gt")]
    p, r, f = precision_recall_f(*sums)
    k = int(np.argmax(f))
    curve = [
        PRPoint(float(th[i]), int(sums[0][i]), int(sums[1][i]), int(sums[2][i]), int(sums[3][i]),
                float(p[i]), float(r[i]), float(f[i]))
        for i in range(len(th))
    ]
    picks = [t.best() for t in tables]
    best_counts = [sum(int(getattr(t, a)[i]) for t, i in zip(tables, picks))
                   for a in ("matched_det", "total_det", "matched_gt", "total_gt")]
    ois = float(precision_recall_f(*best_counts)[2])
    return BenchReport(curve, float(f[k]), float(th[k]), ois, average_precision(p, r), tables)


# ------------------------------------------------------------ reports


def _fmt(v):
    return f"{v:.6f}"


def write_report(report, out_dir):
    """Write ``pr.tsv`` and ``summary.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["threshold\tprecision\trecall\tf"]
    lines += [f"{_fmt(q.threshold)}\t{_fmt(q.precision)}\t{_fmt(q.recall)}\t{_fmt(q.f)}" for q in report.pr_curve]
    (out / "pr.tsv").write_text("\n".join(lines) + "\n")
    summary = "ods\tods_threshold\tois\tap\n" + "\t".join(
        _fmt(v) for v in (report.ods, report.ods_threshold, report.ois, report.ap)) + "\n"
    (out / "summary.tsv").write_text(summary)


def read_summary(path):
    head, values = Path(path).read_text().splitlines()[:2]
    return dict(zip(head.split("\t"), map(float, values.split("\t"))))


TABLE_ROWS = ("ODS", "OIS", "AP")


def _short(v):
    s = f"{v:.3f}"
    return s[1:] if s.startswith("0.") else s


def format_table(results, columns):
    """Tab-separated measures-by-detector table.

    ``results[column]`` is ``(ods, ois, ap)``.  Numbers use three decimals
    with the leading zero dropped (``.741``).
    """
    lines = ["\t" + "\t".join(columns)]
    for i, row in enumerate(TABLE_ROWS):
        lines.append(row + "\t" + "\t".join(_short(results[c][i]) for c in columns))
    return "\n".join(lines) + "\n"


def format_table_latex(results, columns):
    """The same table as LaTeX ``tabular`` rows."""
    lines = [" & " + " & ".join(columns) + r" \\"]
    for i, row in enumerate(TABLE_ROWS):
        lines.append(row + " & " + " & ".join(_short(results[c][i]) for c in columns) + r" \\")
    return "\n".join(lines) + "\n"
