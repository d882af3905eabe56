"""Class centers on the unit sphere, one set per branch and stream, and their
count-smoothed averaged-gradient update.

The centers are deliberately kept out of the Adam parameter set: they move by
plain gradient descent on an averaged gradient, followed by renormalization to
unit length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numkit import SIN_FLOOR, angular_distance

# One center set per branch x stream, in fixed serialization order.
SET_NAMES = ("rgb_first", "rgb_adv", "flow_first", "flow_adv")

UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class TripletStats:
    """Per-sample, per-labeled-class measurements consumed by the center update.

    ``agg`` is the attention-weighted video aggregate, ``tempered_agg`` its
    flatter (background-leaning) counterpart. The margins are the pre-hinge
    values: a margin > 0 means the corresponding hinge is active.
    """

    cls: int
    agg: np.ndarray
    tempered_agg: np.ndarray
    theta_pos: float
    theta_tempered: float
    neg: int
    theta_neg: float
    atcl_margin: float
    nt_margin: float


@dataclass(frozen=True)
class CenterBank:
    """Four unit-row center matrices (num_classes x embed_dim each)."""

    rgb_first: np.ndarray
    rgb_adv: np.ndarray
    flow_first: np.ndarray
    flow_adv: np.ndarray

    def sets(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SET_NAMES}

    @property
    def num_classes(self) -> int:
        return self.rgb_first.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.rgb_first.shape[1]

    def validate(self) -> None:
        shape = self.rgb_first.shape
        for name, c in self.sets().items():
            if c.shape != shape:
                raise ValueError(f"center set {name} has shape {c.shape}, expected {shape}")
            norms = np.linalg.norm(c, axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL):
                worst = float(np.abs(norms - 1.0).max())
                raise ValueError(f"center set {name} is not unit-norm (max deviation {worst:.3e})")


def init_centers(rng: np.random.Generator, num_classes: int, embed_dim: int) -> CenterBank:
    """Random unit-vector centers, one independent draw per set."""

    def one() -> np.ndarray:
        c = rng.standard_normal((num_classes, embed_dim))
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    return CenterBank(one(), one(), one(), one())


def nearest_negative(vec: np.ndarray, centers: np.ndarray, cls: int) -> int:
    """Index of the center nearest to ``vec`` in angle, excluding ``cls``.

    Ties resolve to the lowest index.
    """
    n_c = centers.shape[0]
    if n_c < 2:
        raise ValueError("nearest negative center requires at least 2 classes")
    theta = np.array([angular_distance(vec, centers[k]) for k in range(n_c)])
    theta[cls] = np.inf
    return int(np.argmin(theta))


def center_grads(
    per_sample_stats: Sequence[Sequence[TripletStats]],
    batch_size: int,
    num_classes: int,
    embed_dim: int,
    gamma: float,
    gamma_scales_nt: bool = True,
) -> np.ndarray:
    """Averaged center gradient for one center set over a batch.

    Three roles contribute per center k, each gated by its hinge and averaged
    with the count-smoothed denominator 1 + (number of active contributions):
    anchor pulls from samples labeled k, negative pushes from samples whose
    nearest negative is k, and the background-separation term from samples
    labeled k with the second hinge active. The result carries the 1/batch
    prefactor.
    """
    num = np.zeros((3, num_classes, embed_dim))
    cnt = np.zeros((3, num_classes))
    for stats in per_sample_stats:
        for t in stats:
            agg_hat = t.agg / np.linalg.norm(t.agg)
            inv_pos = 1.0 / max(math.sin(t.theta_pos), SIN_FLOOR)
            if t.atcl_margin > 0.0:
                num[0, t.cls] -= agg_hat * inv_pos
                cnt[0, t.cls] += 1.0
                num[1, t.neg] += agg_hat / max(math.sin(t.theta_neg), SIN_FLOOR)
                cnt[1, t.neg] += 1.0
            if t.nt_margin > 0.0:
                temp_hat = t.tempered_agg / np.linalg.norm(t.tempered_agg)
                w = gamma if gamma_scales_nt else 1.0
                num[2, t.cls] += w * (
                    -agg_hat * inv_pos
                    + temp_hat / max(math.sin(t.theta_tempered), SIN_FLOOR)
                )
                cnt[2, t.cls] += 1.0
    return (num / (1.0 + cnt)[:, :, None]).sum(axis=0) / batch_size


def center_grads_reference(
    per_sample_classes: Sequence[Sequence[tuple[int, np.ndarray, np.ndarray]]],
    centers: np.ndarray,
    m1: float,
    m2: float,
    gamma: float,
    batch_size: int,
    gamma_scales_nt: bool = True,
) -> np.ndarray:
    """Naive per-sample-derivative implementation of the center update.

    Works directly from (class, aggregate, tempered aggregate) triples and the
    raw center matrix, recomputing every distance, nearest negative, and hinge
    with plain loops. Used to cross-check :func:`center_grads`.
    """
    n_c, dim = centers.shape
    delta = np.zeros((n_c, dim))
    w_nt = gamma if gamma_scales_nt else 1.0
    for k in range(n_c):
        g1_sum = np.zeros(dim)
        g2_sum = np.zeros(dim)
        h_sum = np.zeros(dim)
        g1_n = g2_n = h_n = 0
        for stats in per_sample_classes:
            for (j, agg, tempered) in stats:
                norm_agg = float(np.linalg.norm(agg))
                d_pos = angular_distance(agg, centers[j])
                dists = [angular_distance(agg, centers[kk]) for kk in range(n_c)]
                neg = min((d, kk) for kk, d in enumerate(dists) if kk != j)[1]
                atcl = d_pos - dists[neg] + m1
                nt = d_pos - angular_distance(tempered, centers[j]) + m2
                if j == k and atcl > 0.0:
                    g1_sum += -agg / (max(math.sin(angular_distance(agg, centers[k])), SIN_FLOOR) * norm_agg)
                    g1_n += 1
                if neg == k and atcl > 0.0:
                    g2_sum += agg / (max(math.sin(angular_distance(agg, centers[k])), SIN_FLOOR) * norm_agg)
                    g2_n += 1
                if j == k and nt > 0.0:
                    norm_t = float(np.linalg.norm(tempered))
                    h_sum += w_nt * (
                        -agg / (max(math.sin(d_pos), SIN_FLOOR) * norm_agg)
                        + tempered / (max(math.sin(angular_distance(tempered, centers[k])), SIN_FLOOR) * norm_t)
                    )
                    h_n += 1
        delta[k] = (g1_sum / (1 + g1_n) + g2_sum / (1 + g2_n) + h_sum / (1 + h_n)) / batch_size
    return delta


def update_centers(
    bank: CenterBank,
    deltas: Mapping[str, np.ndarray],
    lr_rgb: float,
    lr_flow: float,
) -> CenterBank:
    """One descent step ``c <- c - lr * delta`` per set, rows renormalized.

    RGB-stream sets use ``lr_rgb``, flow-stream sets ``lr_flow``. Returns a new
    bank; raises if a row would renormalize from zero.
    """
    updated = {}
    for name, c in bank.sets().items():
        lr = lr_rgb if name.startswith("rgb") else lr_flow
        d = deltas[name]
        if d.shape != c.shape:
            raise ValueError(f"delta for {name} has shape {d.shape}, expected {c.shape}")
        stepped = c - lr * d
        norms = np.linalg.norm(stepped, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError(f"center update produced a zero row in set {name}")
        updated[name] = stepped / norms
    return CenterBank(**updated)
