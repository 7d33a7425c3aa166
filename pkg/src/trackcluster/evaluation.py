"""Clustering metrics (WCP, PCR), method comparison tables and PCA export."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .data import UNKNOWN, ClusterAssignment

POLICIES = ("exclude", "count_wrong")


def _clusters(assign: ClusterAssignment) -> Dict[int, List[int]]:
    out: Dict[int, List[int]] = {}
    for tid in sorted(assign):
        c = assign[tid]
        if c != UNKNOWN:
            out.setdefault(c, []).append(tid)
    return out


def _check_truth(assign, truth):
    for tid, c in assign.items():
        if c != UNKNOWN and truth.get(tid) is None:
            raise KeyError(f"missing truth label for track {tid}")


def wcp(assign: ClusterAssignment, truth: Mapping[int, Optional[int]],
        policy: str = "exclude") -> float:
    """Weighted cluster purity: tracks in their cluster's majority identity / evaluated tracks.

    ``exclude`` drops Unknown tracks; ``count_wrong`` keeps them in the
    denominator as impure tracks.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    _check_truth(assign, truth)
    clusters = _clusters(assign)
    correct = sum(Counter(truth[t] for t in members).most_common(1)[0][1]
                  for members in clusters.values())
    n_eval = sum(len(m) for m in clusters.values())
    if policy == "count_wrong":
        n_eval += sum(1 for c in assign.values() if c == UNKNOWN)
    return correct / n_eval if n_eval else 0.0


def pcr_counts(assign: ClusterAssignment, truth: Mapping[int, Optional[int]]) -> tuple:
    pred = len(_clusters(assign))
    gt = len({v for v in truth.values() if v is not None})
    if gt == 0:
        raise ValueError("truth has no identities")
    return pred, gt


def pcr(assign: ClusterAssignment, truth: Mapping[int, Optional[int]]) -> float:
    """Predicted (non-Unknown) cluster count over ground-truth identity count."""
    pred, gt = pcr_counts(assign, truth)
    return pred / gt


@dataclass
class EvalReport:
    wcp: float
    pcr: float
    pcr_pred: int
    pcr_gt: int
    pcr_fraction: str
    unknown_policy: str
    n_unknown: int
    clusters: List[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["cluster_id", "size", "majority_identity", "majority_count", "purity"])
        for row in self.clusters:
            w.writerow([row["cluster_id"], row["size"], row["majority_identity"],
                        row["majority_count"], repr(row["purity"])])
        w.writerow([])
        w.writerow(["wcp", "pcr", "pcr_pred", "pcr_gt", "unknown_policy", "n_unknown"])
        w.writerow([repr(self.wcp), repr(self.pcr), self.pcr_pred, self.pcr_gt,
                    self.unknown_policy, self.n_unknown])
        return buf.getvalue()


def evaluate(assign: ClusterAssignment, truth: Mapping[int, Optional[int]],
             policy: str = "exclude") -> EvalReport:
    w = wcp(assign, truth, policy)
    pred, gt = pcr_counts(assign, truth)
    rows = []
    for cid, members in sorted(_clusters(assign).items()):
        ident, count = Counter(truth[t] for t in members).most_common(1)[0]
        rows.append({"cluster_id": cid, "size": len(members), "majority_identity": ident,
                     "majority_count": count, "purity": count / len(members)})
    frac = Fraction(pred, gt)
    return EvalReport(w, pred / gt, pred, gt, f"{frac.numerator}/{frac.denominator}", policy,
                      sum(1 for c in assign.values() if c == UNKNOWN), rows)


@dataclass
class Method:
    name: str
    similarity: str
    run: Callable[[], ClusterAssignment]


COLUMNS = ("method", "similarity", "wcp", "pcr_pred", "pcr_gt")


@dataclass
class CompareTable:
    rows: List[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: r[k] for k in COLUMNS})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([{k: r[k] for k in COLUMNS} for r in self.rows], indent=1)

    def format(self) -> str:
        lines = [f"{'method':<12}{'similarity':<14}{'wcp':>8}  pcr (pred/gt)"]
        for r in self.rows:
            lines.append(f"{r['method']:<12}{r['similarity']:<14}{100 * r['wcp']:>7.2f}%  "
                         f"{r['pcr_pred'] / r['pcr_gt']:.3f} ({r['pcr_pred']}/{r['pcr_gt']})")
        return "\n".join(lines)


def compare_report(truth: Mapping[int, Optional[int]], methods: Sequence[Method],
                   policy: str = "exclude") -> CompareTable:
    """One row per method: name, similarity, WCP and PCR counts."""
    rows = []
    for m in methods:
        assign = m.run()
        pred, gt = pcr_counts(assign, truth)
        rows.append({"method": m.name, "similarity": m.similarity,
                     "wcp": wcp(assign, truth, policy), "pcr_pred": pred, "pcr_gt": gt,
                     "assignment": assign})
    return CompareTable(rows)


def pca2d(embeds) -> np.ndarray:
    """Project rows onto their top two principal components.

    Each component's largest-magnitude loading is made positive. Rank-0
    input maps every point to the origin.
    """
    X = np.atleast_2d(np.asarray(embeds, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    out = np.zeros((X.shape[0], 2))
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    for i in range(min(2, vt.shape[0])):
        if s[i] <= tol or s[i] == 0:
            continue
        v = vt[i]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, i] = Xc @ v
    return out


def write_pca_csv(path, coords, track_ids, cluster_ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "track_id", "cluster_id"])
        for (x, y), t, c in zip(coords, track_ids, cluster_ids):
            w.writerow([repr(float(x)), repr(float(y)), t, c])
