"""Training objectives with hand-derived gradients.

Per branch and stream: a row-softmax attention over the T-CAM aggregates the
embedded features into one vector per class; that aggregate anchors a hinge
against its own center and the nearest negative center, and a second hinge
separates it from a flatter, background-leaning aggregate. Classification is a
top-k-pooled cross-entropy per T-CAM.

All gradients treat discrete selections (top-k sets, nearest-negative indices,
hinges at exactly zero) as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .centers import TripletStats, nearest_negative
from .numkit import (
    angular_distance,
    angular_distance_grad,
    as_matrix,
    softmax_rows,
    softmax_rows_backward,
    topk_indices,
)

# Aggregates with a norm at or below this are skipped (angular distance
# undefined); the skip count is surfaced in the loss breakdown.
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class TripletHyper:
    """Margins, second-hinge weight, and attention temperature for one branch."""

    m1: float
    m2: float
    gamma: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.m1 <= math.pi:
            raise ValueError(f"m1 must be in [0, pi], got {self.m1}")
        if not 0.0 <= self.m2 <= math.pi:
            raise ValueError(f"m2 must be in [0, pi], got {self.m2}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")


@dataclass
class BranchLossInput:
    """Everything one branch x stream needs: embedded features (E x l), its
    T-CAM (N_c x l), the multi-hot labels, its center set, and hyperparameters."""

    xe: np.ndarray
    c: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    hyper: TripletHyper


@dataclass
class BranchLossResult:
    atcl: float
    nt: float
    aclpt: float
    g_xe: np.ndarray
    g_c: np.ndarray
    triplets: list[TripletStats]
    skipped: int


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss terms (already batch-averaged)."""

    atcl: float
    nt: float
    aclpt: float
    cls_rgb: float
    cls_rgb_adv: float
    cls_flow: float
    cls_flow_adv: float
    cls_final: float
    cls_total: float
    total: float
    degenerate_skips: int = 0

    FIELDS = ("atcl", "nt", "aclpt", "cls_rgb", "cls_rgb_adv", "cls_flow",
              "cls_flow_adv", "cls_final", "cls_total", "total")


def attention(c) -> np.ndarray:
    """Row-wise softmax of the T-CAM: one pmf over time per class."""
    return softmax_rows(c, 1.0)


def tempered_attention(c, beta: float) -> np.ndarray:
    """Row-wise softmax of beta * T-CAM; flatter than :func:`attention` for
    beta < 1, hence more weight on background time steps."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must be in (0, 1], got {beta}")
    return softmax_rows(c, beta)


def aggregate(xe, a: np.ndarray, cls: int) -> np.ndarray:
    """Attention-weighted sum of embedded feature columns for one class."""
    xe = as_matrix(xe)
    return xe @ a[cls]


def atcl_loss(aggregates: np.ndarray, labels, centers: np.ndarray, m1: float):
    """Hinge sum over labeled classes of (own-center distance) - (nearest
    negative distance) + m1.

    Returns (value, gradient wrt the aggregate rows, per-class parts), where
    parts are (cls, neg, theta_pos, theta_neg, margin) tuples.
    """
    if centers.shape[0] < 2:
        raise ValueError("the triplet loss needs at least 2 classes (no negative center exists)")
    labels = np.asarray(labels).astype(bool)
    value = 0.0
    grad = np.zeros_like(aggregates)
    parts = []
    for j in np.flatnonzero(labels):
        agg = aggregates[j]
        if np.linalg.norm(agg) <= DEGENERATE_NORM:
            raise ValueError(f"aggregate for labeled class {j} has zero norm")
        theta_pos = angular_distance(agg, centers[j])
        neg = nearest_negative(agg, centers, j)
        theta_neg = angular_distance(agg, centers[neg])
        margin = theta_pos - theta_neg + m1
        value += max(0.0, margin)
        if margin > 0.0:
            grad[j] += angular_distance_grad(agg, centers[j]) - angular_distance_grad(agg, centers[neg])
        parts.append((int(j), neg, theta_pos, theta_neg, margin))
    return value, grad, parts


def nt_loss(aggregates: np.ndarray, tempered: np.ndarray, labels, centers: np.ndarray, m2: float):
    """Hinge sum over labeled classes of (own-center distance of the sharp
    aggregate) - (own-center distance of the tempered aggregate) + m2.

    Returns (value, grad wrt aggregates, grad wrt tempered aggregates, parts)
    with parts as (cls, theta_pos, theta_tempered, margin) tuples.
    """
    if centers.shape[0] < 2:
        raise ValueError("the triplet loss needs at least 2 classes")
    labels = np.asarray(labels).astype(bool)
    value = 0.0
    g_agg = np.zeros_like(aggregates)
    g_temp = np.zeros_like(tempered)
    parts = []
    for j in np.flatnonzero(labels):
        agg, temp = aggregates[j], tempered[j]
        if np.linalg.norm(agg) <= DEGENERATE_NORM or np.linalg.norm(temp) <= DEGENERATE_NORM:
            raise ValueError(f"aggregate for labeled class {j} has zero norm")
        theta_pos = angular_distance(agg, centers[j])
        theta_temp = angular_distance(temp, centers[j])
        margin = theta_pos - theta_temp + m2
        value += max(0.0, margin)
        if margin > 0.0:
            g_agg[j] += angular_distance_grad(agg, centers[j])
            g_temp[j] -= angular_distance_grad(temp, centers[j])
        parts.append((int(j), theta_pos, theta_temp, margin))
    return value, g_agg, g_temp, parts


def aclpt_loss(inp: BranchLossInput) -> BranchLossResult:
    """Both hinge losses for one branch x stream, with gradients wrt the
    embedded features and the T-CAM, plus the per-class stats the center
    update consumes. Labeled classes whose aggregate collapses to zero norm
    are skipped and counted."""
    xe = as_matrix(inp.xe)
    c = as_matrix(inp.c, cols=xe.shape[1])
    hyper = inp.hyper
    labels = np.asarray(inp.labels).astype(bool)
    if c.shape[0] != labels.size or inp.centers.shape[0] != labels.size:
        raise ValueError("T-CAM rows, label length, and center count must agree")

    att = attention(c)
    t_att = tempered_attention(c, hyper.beta)
    aggregates = att @ xe.T
    tempered = t_att @ xe.T

    usable = labels.copy()
    skipped = 0
    for j in np.flatnonzero(labels):
        if (np.linalg.norm(aggregates[j]) <= DEGENERATE_NORM
                or np.linalg.norm(tempered[j]) <= DEGENERATE_NORM):
            usable[j] = False
            skipped += 1

    atcl_v, g_agg_atcl, atcl_parts = atcl_loss(aggregates, usable, inp.centers, hyper.m1)
    nt_v, g_agg_nt, g_temp_nt, nt_parts = nt_loss(aggregates, tempered, usable, inp.centers, hyper.m2)

    g_agg = g_agg_atcl + hyper.gamma * g_agg_nt
    g_temp = hyper.gamma * g_temp_nt

    g_xe = g_agg.T @ att + g_temp.T @ t_att
    g_c = softmax_rows_backward(att, g_agg @ xe)
    g_c += softmax_rows_backward(t_att, g_temp @ xe, scale=hyper.beta)

    triplets = []
    for (j, neg, theta_pos, theta_neg, atcl_margin), (j2, _, theta_temp, nt_margin) in zip(atcl_parts, nt_parts):
        assert j == j2
        triplets.append(TripletStats(
            cls=j,
            agg=aggregates[j].copy(),
            tempered_agg=tempered[j].copy(),
            theta_pos=theta_pos,
            theta_tempered=theta_temp,
            neg=neg,
            theta_neg=theta_neg,
            atcl_margin=atcl_margin,
            nt_margin=nt_margin,
        ))
    return BranchLossResult(
        atcl=atcl_v,
        nt=nt_v,
        aclpt=atcl_v + hyper.gamma * nt_v,
        g_xe=g_xe,
        g_c=g_c,
        triplets=triplets,
        skipped=skipped,
    )


def a2clpt_total(inputs) -> tuple[float, list[BranchLossResult]]:
    """Sum of the branch losses over the four branch x stream combinations.

    Adversarial branches pass the original (unmasked) embedded features with
    their own T-CAMs and center sets.
    """
    results = [aclpt_loss(inp) for inp in inputs]
    return sum(r.aclpt for r in results), results


def cls_loss(c, labels, s: float):
    """Top-k-pooled softmax cross-entropy against the l1-normalized labels.

    Per-class scores average the k = ceil(l/s) largest T-CAM entries; the
    gradient flows only through those entries. Returns (value, grad wrt c).
    """
    c = as_matrix(c)
    labels = np.asarray(labels, dtype=np.float64)
    if not np.any(labels):
        raise ValueError("classification loss needs at least one labeled class")
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    n_c, l = c.shape
    k = int(math.ceil(l / s))
    selections = []
    scores = np.empty(n_c)
    for j in range(n_c):
        idx = topk_indices(c[j], k)
        selections.append(idx)
        scores[j] = c[j, idx].mean()
    z = scores - scores.max()
    log_p = z - math.log(np.exp(z).sum())
    q = labels / labels.sum()
    value = float(-(q * log_p).sum())
    g_scores = np.exp(log_p) - q
    g_c = np.zeros_like(c)
    for j in range(n_c):
        g_c[j, selections[j]] = g_scores[j] / k
    return value, g_c


def cls_total(c_r, c_ra, c_o, c_oa, c_final, labels, s: float) -> float:
    """Sum of the five per-T-CAM classification losses."""
    return float(sum(cls_loss(c, labels, s)[0] for c in (c_r, c_ra, c_o, c_oa, c_final)))
