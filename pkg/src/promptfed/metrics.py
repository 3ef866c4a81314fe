"""Evaluation: accuracy triple, k-means oracle, congruence, stability, discrepancy."""

from __future__ import annotations

import csv
import io
import json
from math import comb
from pathlib import Path

import numpy as np

from .numerics import DegenerateInputError


def accuracies_from(predict, client_tests, global_test):
    """(global, mean local, worst local) accuracy for a ``predict(X) -> labels`` callable."""
    if len(global_test.y) == 0 or not client_tests:
        raise ValueError("empty test set")
    glob = float(np.mean(predict(global_test.X) == global_test.y))
    local = []
    for sh in client_tests:
        if len(sh.y) == 0:
            raise ValueError(f"client {sh.client_id} has an empty test shard")
        local.append(float(np.mean(predict(sh.X) == sh.y)))
    return glob, float(np.mean(local)), float(np.min(local))


def accuracies(state, backbone, client_tests, global_test, prompts="both"):
    from .server import infer

    return accuracies_from(lambda X: infer(state, backbone, X, prompts), client_tests, global_test)


def local_accuracies(state, backbone, client_tests, prompts="both"):
    from .server import infer

    return [float(np.mean(infer(state, backbone, sh.X, prompts) == sh.y)) for sh in client_tests]


# ---------------------------------------------------------------------------
# Centralised spherical k-means (oracle for congruence)
# ---------------------------------------------------------------------------


def _unit(X):
    X = np.asarray(X, dtype=np.float64)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("zero-norm feature")
    return X / n


def _kmeans_once(U, G, iters, rng):
    n = len(U)
    centres = [U[rng.integers(n)]]
    for _ in range(1, G):
        d = 1.0 - np.max(U @ np.array(centres).T, axis=1)
        d = np.clip(d, 0.0, None)
        p = d / d.sum() if d.sum() > 0 else np.full(n, 1.0 / n)
        centres.append(U[rng.choice(n, p=p)])
    C = np.array(centres)
    labels = None
    for _ in range(iters):
        new = (U @ C.T).argmax(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for g in range(G):
            members = U[labels == g]
            if len(members) == 0:
                far = np.argmin((U * C[labels]).sum(axis=1))
                C[g] = U[far]
                labels[far] = g
                continue
            m = members.sum(axis=0)
            nm = np.linalg.norm(m)
            C[g] = m / nm if nm > 0 else members[0]
    labels = (U @ C.T).argmax(axis=1)
    return labels, float((U * C[labels]).sum())


def kmeans_oracle(features, G, iters=100, seed=0, n_init=5):
    """Lloyd's algorithm under cosine distance; best of ``n_init`` k-means++ starts."""
    U = _unit(features)
    if G > len(U):
        raise ValueError(f"G={G} exceeds the number of points {len(U)}")
    if G == 1:
        return np.zeros(len(U), dtype=np.int64)
    rng = np.random.default_rng(seed)
    best, best_obj = None, -np.inf
    for _ in range(n_init):
        labels, obj = _kmeans_once(U, G, iters, rng)
        if obj > best_obj + 1e-12:
            best, best_obj = labels, obj
    return best.astype(np.int64)


def purity(labels, reference, weighting="mass"):
    """Share of each ``labels`` cluster held by its majority ``reference`` value.

    ``mass``: pooled over all points (sum of row maxima of the count matrix / n).
    ``row``: unweighted mean of per-cluster majority fractions.
    """
    labels = np.asarray(labels)
    reference = np.asarray(reference)
    if len(labels) == 0 or len(labels) != len(reference):
        raise ValueError("label vectors must be non-empty and of equal length")
    _, li = np.unique(labels, return_inverse=True)
    _, ri = np.unique(reference, return_inverse=True)
    M = np.zeros((li.max() + 1, ri.max() + 1))
    np.add.at(M, (li, ri), 1.0)
    if weighting == "mass":
        return float(M.max(axis=1).sum() / len(labels))
    if weighting == "row":
        return float((M.max(axis=1) / M.sum(axis=1)).mean())
    raise ValueError(f"unknown weighting {weighting!r}")


def congruence(select_labels, oracle_labels, class_labels, weighting="mass"):
    """Overlap of the learned grouping with the oracle, normalised by oracle quality.

    Overlap: for each learned group, the share taken by its dominant oracle
    cluster (rows of the contingency matrix are learned groups). Quality: the
    same statistic for oracle clusters against class labels.
    """
    overlap = purity(select_labels, oracle_labels, weighting)
    quality = purity(oracle_labels, class_labels, weighting)
    return overlap / quality


def selection_stability(history):
    """Per-group (mean, population std) of selection counts; ``history`` is (rounds, G)."""
    H = np.asarray(history, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 2:
        raise ValueError("need at least two rounds of history")
    return H.mean(axis=0), H.std(axis=0)


def client_selection_std(reports, client_id, last=None):
    """Per-group std of one client's selection counts over the rounds it took part in."""
    rows = [r.client_counts[client_id] for r in reports if client_id in r.client_counts]
    if last:
        rows = rows[-last:]
    if len(rows) < 2:
        return None
    return selection_stability(rows)[1]


# ---------------------------------------------------------------------------
# Discrepancy over a finite hypothesis set
# ---------------------------------------------------------------------------


def hypothesis_grid(dim, n_classes, count=64, seed=0):
    """Random linear classifiers with unit-norm weight columns and small biases."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        W = rng.normal(size=(dim, n_classes))
        W /= np.linalg.norm(W, axis=0, keepdims=True)
        out.append((W, rng.normal(scale=0.1, size=n_classes)))
    return out


def zero_one_loss(h, X, y):
    W, b = h
    return float(np.mean((np.asarray(X) @ W + b).argmax(axis=1) != np.asarray(y)))


def empirical_discrepancy(a, b, hypotheses):
    """``max_h |L_a(h) - L_b(h)|`` under 0/1 loss; ``a`` and ``b`` are (X, y) pairs."""
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    return max(abs(zero_one_loss(h, *a) - zero_one_loss(h, *b)) for h in hypotheses)


def sign_test(diffs):
    """One-sided sign test p-value for ``diffs > 0`` (zeros dropped)."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n, k = len(d), int((d > 0).sum())
    if n == 0:
        return 1.0
    return sum(comb(n, j) for j in range(k, n + 1)) / 2 ** n


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def append_round_log(path, report, echo=None):
    d = report.to_dict()
    if echo is not None:
        d["config"] = echo
    with open(path, "a") as f:
        f.write(json.dumps(d, sort_keys=True) + "\n")


def read_round_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def summary_csv(rows, fields=None) -> str:
    """Rows of dicts -> CSV text; floats written with repr for exact reproduction."""
    fields = fields or list(rows[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
