"""Supervised contrastive losses, the rank-contrast baseline and influence
clustering.

All SupCon-family losses share one core: cosine-similarity logits over an
interleaved two-view batch, log-sum-exp stabilized, with positive sets drawn
from one label channel. The hierarchical content loss sums the core over
category levels with a 1/l^2 penalty; the influence and identity losses reuse
it with cluster and user-id labels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor, interleave_rows, normalize_rows, stream


def pair_views(view1: Tensor, view2: Tensor) -> Tensor:
    """Stack two dropout views so rows 2k, 2k+1 are a positive pair."""
    return interleave_rows(view1, view2)


def pair_labels(labels: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(labels), 2, axis=0)


def _sim_logits(features: Tensor, tau: float):
    """Stabilized cosine-similarity logits and the off-diagonal mask."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    n = features.data.shape[0]
    fhat = normalize_rows(features)
    sims = (fhat @ fhat.T) / tau
    offdiag = 1.0 - np.eye(n)
    # per-anchor max over A(i), detached: only shifts both log terms
    shift = np.where(offdiag > 0, sims.data, -np.inf).max(axis=1, keepdims=True)
    logits = sims - Tensor(shift)
    return logits, offdiag


def _log_probs(features: Tensor, tau: float):
    """Shared part of every SupCon-family loss: per-pair log softmax values.

    The denominator ranges over all of A(i), so it does not depend on which
    pairs are positives; losses differing only in their positive mask can
    reuse one log-probability graph.
    """
    logits, offdiag = _sim_logits(features, tau)
    exp_all = logits.exp() * Tensor(offdiag)
    log_denom = exp_all.sum(axis=1, keepdims=True).log()
    return logits - log_denom, offdiag


def _apply_pos_mask(log_prob: Tensor, offdiag: np.ndarray,
                    pos_mask: np.ndarray) -> Tensor:
    """Anchor-averaged positive log probability.

    Averaging over anchors (rather than summing) keeps the loss scale
    batch-size independent, so the joint loss weights need no retuning when
    the batch size changes; reference implementations of the supervised
    contrastive loss use the same reduction.
    """
    n = pos_mask.shape[0]
    counts = pos_mask.sum(axis=1)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / n
    per_anchor = (log_prob * Tensor(pos_mask * offdiag)).sum(axis=1)
    return -(per_anchor * Tensor(weights)).sum()


def supcon_core(features: Tensor, pos_mask: np.ndarray, tau: float) -> Tensor:
    """-(1/n) sum_i (1/|P(i)|) sum_{p in P(i)} log softmax fraction.

    pos_mask is a boolean (n x n) matrix of positive pairs, diagonal excluded.
    Anchors with an empty positive set contribute zero.
    """
    log_prob, offdiag = _log_probs(features, tau)
    return _apply_pos_mask(log_prob, offdiag, pos_mask)


def _label_pos_mask(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    eq = labels[:, None] == labels[None, :]
    np.fill_diagonal(eq, False)
    return eq.astype(np.float64)


def supcon_loss(features: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """SupCon over one label channel of an interleaved view batch."""
    return supcon_core(features, _label_pos_mask(labels), tau)


def level_penalty(l: int) -> float:
    """Per-level penalty 1/l^2, levels counted from 1 (coarsest)."""
    return 1.0 / (l * l)


def crd_loss(features: Tensor, level_labels: np.ndarray, tau: float) -> Tensor:
    """Hierarchical content-relevance loss over the post representation.

    level_labels is (n x L), coarse to fine; each level contributes a SupCon
    term scaled by level_penalty(l) / L.
    """
    n, L = level_labels.shape
    log_prob, offdiag = _log_probs(features, tau)
    total = None
    for l in range(1, L + 1):
        mask = _label_pos_mask(level_labels[:, l - 1])
        term = _apply_pos_mask(log_prob, offdiag, mask)
        term = term * (level_penalty(l) / L)
        total = term if total is None else total + term
    return total


def uisd_loss(features: Tensor, cluster_ids: np.ndarray, tau: float) -> Tensor:
    """Influence-similarity loss over the user representation."""
    return supcon_loss(features, cluster_ids, tau)


def uid_loss(features: Tensor, user_index: np.ndarray, tau: float) -> Tensor:
    """User-identity loss over the barriered popularity representation."""
    return supcon_loss(features, user_index, tau)


def rnc_loss(features: Tensor, cont_labels: np.ndarray, tau: float = 2.0) -> Tensor:
    """Rank-contrast baseline: for each anchor i and candidate j, the
    denominator ranges over samples at least as label-distant as j.

    Implemented as a custom op over the similarity matrix; the gradient with
    respect to the logits is closed-form and O(n^2 log n).
    """
    n = features.data.shape[0]
    if n < 2:
        raise ConfigError("rnc needs at least 2 rows")
    labels = np.asarray(cont_labels, dtype=np.float64)
    dist = np.abs(labels[:, None] - labels[None, :])

    fhat = normalize_rows(features)
    sims = (fhat @ fhat.T) / tau

    def core(s_tensor: Tensor) -> Tensor:
        s = s_tensor.data
        # 1/|A(i)| from the formula plus a 1/n anchor average (same
        # batch-size-independent reduction as the other losses)
        inv_a = 1.0 / ((n - 1) * n)
        loss = 0.0
        grad = np.zeros_like(s)
        for i in range(n):
            others = np.delete(np.arange(n), i)
            d_row = dist[i, others]
            s_row = s[i, others]
            order = np.argsort(-d_row, kind="stable")  # distance descending
            sd, ss = d_row[order], s_row[order]
            m = ss.max()
            e = np.exp(ss - m)
            cums = np.cumsum(e)
            # group ties so all equal distances enter the same suffix set
            logz = np.empty(len(others))
            start = 0
            while start < len(others):
                end = start
                while end + 1 < len(others) and sd[end + 1] == sd[start]:
                    end += 1
                logz[start:end + 1] = m + np.log(cums[end])
                start = end + 1
            loss += inv_a * np.sum(logz - ss)
            # dL/ds_ik = inv_a * (-1 + exp(s_ik) * sum over j with
            # dist_ij <= dist_ik of 1/Z_ij)
            invz = np.exp(-(logz - m)) / 1.0  # 1 / (Z_ij * e^{-m}) scale
            # suffix-accumulate 1/Z over ties: j qualifies when its distance
            # is <= the candidate's, i.e. it sits at or after the candidate's
            # tie group in the descending order
            w = np.zeros(len(others))
            acc = 0.0
            end = len(others) - 1
            while end >= 0:
                start2 = end
                while start2 - 1 >= 0 and sd[start2 - 1] == sd[end]:
                    start2 -= 1
                acc += invz[start2:end + 1].sum()
                w[start2:end + 1] = acc
                end = start2 - 1
            grad[i, others[order]] = inv_a * (-1.0 + e * w)
        return Tensor(np.float64(loss), (s_tensor,), lambda g: (g * grad,))

    return core(sims)


# -- influence clustering ---------------------------------------------------

@dataclass
class InfluenceClustering:
    centroids: np.ndarray      # ascending
    assignment: dict           # user_id -> cluster id
    transform: str             # "log2" or "raw"

    def assign_value(self, follower_count: float) -> int:
        x = _influence_value(follower_count, self.transform)
        return int(np.argmin(np.abs(self.centroids - x)))


def _influence_value(count: float, transform: str) -> float:
    if transform == "log2":
        return float(np.log2(1.0 + max(0.0, count)))
    return float(count)


def kmeans_1d(values: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
              tol: float = 1e-9) -> tuple:
    """Lloyd's algorithm with k-means++ seeding on 1-D data.

    Returns (centroids sorted ascending, labels indexed by sorted centroid).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("k-means on empty input")
    distinct = np.unique(values)
    if distinct.size < k:
        warnings.warn(f"reducing k from {k} to {distinct.size} distinct values")
        k = distinct.size
    rng = stream(seed, "kmeans")

    # k-means++ over distinct values to avoid duplicate seeds
    centroids = [distinct[rng.integers(distinct.size)]]
    for _ in range(1, k):
        d2 = np.min((distinct[:, None] - np.array(centroids)[None, :]) ** 2, axis=1)
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(distinct.size, 1.0 / distinct.size)
        centroids.append(distinct[rng.choice(distinct.size, p=probs)])
    centroids = np.array(centroids)

    for _ in range(max_iter):
        labels = np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)
        new = centroids.copy()
        for c in range(k):
            members = values[labels == c]
            if members.size:
                new[c] = members.mean()
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break

    order = np.argsort(centroids)
    rank = np.empty(k, dtype=np.intp)
    rank[order] = np.arange(k)
    labels = rank[np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)]
    return centroids[order], labels


def cluster_influence(follower_counts: dict, k: int, seed: int = 0,
                      transform: str = "log2") -> InfluenceClustering:
    """Cluster users into k influence levels by (transformed) follower count."""
    uids = sorted(follower_counts)
    vals = np.array([_influence_value(follower_counts[u], transform) for u in uids])
    centroids, labels = kmeans_1d(vals, k, seed=seed)
    return InfluenceClustering(centroids=centroids,
                               assignment={u: int(l) for u, l in zip(uids, labels)},
                               transform=transform)
