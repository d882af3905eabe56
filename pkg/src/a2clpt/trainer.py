"""End-to-end optimization: batched forward/backward with hand-derived
gradients, Adam with decoupled weight decay for the network parameters, the
averaged-gradient rule for the center bank, deterministic shuffling and
logging, and a finite-difference verification harness for every gradient.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as losses
from .centers import (
    SET_NAMES,
    CenterBank,
    center_grads,
    center_grads_reference,
    init_centers,
    update_centers,
)
from .data import Dataset, VideoSample
from .loss import BranchLossInput, LossBreakdown, TripletHyper, cls_loss
from .model import (
    Checkpoint,
    Params,
    adversarial_tcam_backward,
    embed_backward,
    forward_all,
    fuse_backward,
    init_params,
    save_checkpoint,
    tcam_backward,
    zero_grads,
)
from .numkit import fd_gradient, grad_rel_errors

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Parameter name suffixes subject to decoupled weight decay (weights only;
# biases and the fusion weights are exempt).
_DECAY_SUFFIXES = (".w1", ".w2", ".kernel")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    gamma: float = 0.6
    beta_range: tuple[float, float] = (0.001, 0.1)
    m1: float = 2.0
    m2: float = 1.0
    s: float = 8.0
    s_a: float = 40.0
    omega: float = 0.6
    batch_size: int = 8
    adam_lr: float = 1e-3
    weight_decay: float = 5e-4
    center_lr_rgb: float = 0.1
    center_lr_flow: float = 0.2
    iterations: int = 2000
    seed: int = 1
    checkpoint_every: int = 500
    embed_dim: int | None = None
    kernel_size: int = 1
    two_branch: bool = True
    center_gamma_scaled: bool = True

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        lo, hi = self.beta_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"beta_range must satisfy 0 < lo <= hi <= 1, got {self.beta_range}")
        # TripletHyper re-validates margins/gamma/beta at use; check early too.
        TripletHyper(self.m1, self.m2, self.gamma, hi)
        for name in ("s", "s_a"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("batch_size", "iterations", "kernel_size"):
            if getattr(self, name) < (1 if name != "iterations" else 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("adam_lr", "center_lr_rgb", "center_lr_flow"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class IterationRecord:
    iteration: int
    breakdown: LossBreakdown
    grad_norm: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[IterationRecord] = field(default_factory=list)

    HEADER = ("iteration",) + LossBreakdown.FIELDS + ("grad_norm",)

    def lines(self) -> list[str]:
        """Deterministic serialization; wall time is intentionally excluded."""
        out = ["\t".join(self.HEADER)]
        for r in self.records:
            vals = [f"{getattr(r.breakdown, name):.17g}" for name in LossBreakdown.FIELDS]
            out.append("\t".join([str(r.iteration)] + vals + [f"{r.grad_norm:.17g}"]))
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        return path


def forward_backward(
    batch: list[VideoSample],
    params: Params,
    bank: CenterBank,
    cfg: TrainConfig,
    betas: np.ndarray,
):
    """One batch pass. Returns (LossBreakdown, parameter grads keyed like
    ``params.named_arrays()``, raw center deltas keyed by set name).

    Loss terms and gradients are batch means; the branch-loss contributions to
    the parameter gradients already carry the alpha weight. The center deltas
    are the plain averaged-gradient formula, NOT scaled by alpha; the training
    loop applies alpha at update time.
    """
    if not batch:
        raise ValueError("batch must not be empty")
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (len(batch),):
        raise ValueError(f"need one beta per sample, got {betas.shape} for batch of {len(batch)}")
    for sample in batch:
        if not np.any(sample.labels):
            raise ValueError(f"video {sample.id}: training sample has no labels")

    n = len(batch)
    grads = zero_grads(params)
    stats = {name: [] for name in SET_NAMES}
    sums = {name: 0.0 for name in LossBreakdown.FIELDS}
    skips = 0

    for sample, beta in zip(batch, betas):
        fwd = forward_all(sample.rgb, sample.flow, params, cfg.s_a, cfg.two_branch)
        hyper = TripletHyper(cfg.m1, cfg.m2, cfg.gamma, float(beta))

        # Classification losses (adversarial terms only in two-branch mode).
        cls_vals = {}
        g_c = {}
        tcam_tags = [("cls_rgb", fwd.c_rgb), ("cls_flow", fwd.c_flow)]
        if cfg.two_branch:
            tcam_tags += [("cls_rgb_adv", fwd.c_rgb_adv), ("cls_flow_adv", fwd.c_flow_adv)]
        for tag, c in tcam_tags:
            v, g = cls_loss(c, sample.labels, cfg.s)
            cls_vals[tag] = v
            g_c[tag] = g
        v_final, g_cf = cls_loss(fwd.c_final, sample.labels, cfg.s)
        cls_vals["cls_final"] = v_final

        # Fusion backward seeds the four branch T-CAM gradients.
        g_w_rgb, g_w_flow, g_cr, g_cra, g_co, g_coa = fuse_backward(
            fwd.c_rgb, fwd.c_rgb_adv, fwd.c_flow, fwd.c_flow_adv, params.fusion, g_cf)
        grads["fusion.w_rgb"] += g_w_rgb
        grads["fusion.w_flow"] += g_w_flow
        g_cr += g_c["cls_rgb"]
        g_co += g_c["cls_flow"]
        if cfg.two_branch:
            g_cra += g_c["cls_rgb_adv"]
            g_coa += g_c["cls_flow_adv"]

        # Branch hinge losses; adversarial branches reuse the original
        # embedded features of their stream.
        branch_plan = [
            ("rgb_first", fwd.rgb.xe, fwd.c_rgb, g_cr, "rgb"),
            ("flow_first", fwd.flow.xe, fwd.c_flow, g_co, "flow"),
        ]
        if cfg.two_branch:
            branch_plan += [
                ("rgb_adv", fwd.rgb.xe, fwd.c_rgb_adv, g_cra, "rgb"),
                ("flow_adv", fwd.flow.xe, fwd.c_flow_adv, g_coa, "flow"),
            ]
        g_xe = {"rgb": np.zeros_like(fwd.rgb.xe), "flow": np.zeros_like(fwd.flow.xe)}
        atcl_sum = nt_sum = aclpt_sum = 0.0
        for set_name, xe, c, g_c_acc, stream in branch_plan:
            res = losses.aclpt_loss(BranchLossInput(xe, c, sample.labels, bank.sets()[set_name], hyper))
            stats[set_name].append(res.triplets)
            g_c_acc += cfg.alpha * res.g_c
            g_xe[stream] += cfg.alpha * res.g_xe
            atcl_sum += res.atcl
            nt_sum += res.nt
            aclpt_sum += res.aclpt
            skips += res.skipped
        if not cfg.two_branch:
            stats["rgb_adv"].append([])
            stats["flow_adv"].append([])

        # Head backwards feed the embedding gradients.
        for stream, first_head, adv_head, cache, g_first, g_adv, masks in (
            ("rgb", params.head_rgb, params.head_rgb_adv, fwd.rgb, g_cr, g_cra, fwd.masks_rgb),
            ("flow", params.head_flow, params.head_flow_adv, fwd.flow, g_co, g_coa, fwd.masks_flow),
        ):
            gk, gb, gx = tcam_backward(cache.xe, first_head, g_first)
            grads[f"head.{stream}.first.kernel"] += gk
            grads[f"head.{stream}.first.bias"] += gb
            g_xe[stream] += gx
            if cfg.two_branch:
                gk, gb, gx = adversarial_tcam_backward(cache.xe, adv_head, masks, g_adv)
                grads[f"head.{stream}.adv.kernel"] += gk
                grads[f"head.{stream}.adv.bias"] += gb
                g_xe[stream] += gx

        for stream, emb, cache in (("rgb", params.embed_rgb, fwd.rgb), ("flow", params.embed_flow, fwd.flow)):
            gw1, gb1, gw2, gb2 = embed_backward(cache, emb, g_xe[stream])
            grads[f"embed.{stream}.w1"] += gw1
            grads[f"embed.{stream}.b1"] += gb1
            grads[f"embed.{stream}.w2"] += gw2
            grads[f"embed.{stream}.b2"] += gb2

        sums["atcl"] += atcl_sum
        sums["nt"] += nt_sum
        sums["aclpt"] += aclpt_sum
        for tag in ("cls_rgb", "cls_rgb_adv", "cls_flow", "cls_flow_adv", "cls_final"):
            sums[tag] += cls_vals.get(tag, 0.0)

    for g in grads.values():
        g /= n

    cls_tot = sum(sums[t] for t in ("cls_rgb", "cls_rgb_adv", "cls_flow", "cls_flow_adv", "cls_final"))
    breakdown = LossBreakdown(
        atcl=sums["atcl"] / n,
        nt=sums["nt"] / n,
        aclpt=sums["aclpt"] / n,
        cls_rgb=sums["cls_rgb"] / n,
        cls_rgb_adv=sums["cls_rgb_adv"] / n,
        cls_flow=sums["cls_flow"] / n,
        cls_flow_adv=sums["cls_flow_adv"] / n,
        cls_final=sums["cls_final"] / n,
        cls_total=cls_tot / n,
        total=cfg.alpha * sums["aclpt"] / n + cls_tot / n,
        degenerate_skips=skips,
    )
    dim = params.embed_dim
    deltas = {
        name: center_grads(stats[name], n, params.num_classes, dim, cfg.gamma, cfg.center_gamma_scaled)
        for name in SET_NAMES
    }
    return breakdown, grads, deltas


def batch_loss(batch, params, bank, cfg, betas) -> float:
    """Total loss of one batch; shares the exact code path of forward_backward."""
    return forward_backward(batch, params, bank, cfg, betas)[0].total


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: Params) -> AdamState:
    arrays = params.named_arrays()
    return AdamState(
        m={name: np.zeros_like(a) for name, a in arrays.items()},
        v={name: np.zeros_like(a) for name, a in arrays.items()},
    )


def adam_step(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
) -> None:
    """In-place Adam update with bias correction; weight decay is decoupled
    and applied only to weight matrices (never biases or fusion weights)."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, theta in arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay > 0.0 and name.endswith(_DECAY_SUFFIXES):
            step = step + lr * weight_decay * theta
        theta -= step


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def train(ds: Dataset, cfg: TrainConfig, out_dir=None):
    """Seeded end-to-end training. Deterministic given the seed: the same seed
    reproduces initialization, shuffling, beta draws, checkpoints, and logs
    bit for bit. Returns (params, bank, log)."""
    cfg.validate()
    ds.validate(require_labels=True)
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    embed_dim = cfg.embed_dim if cfg.embed_dim is not None else ds.feature_dim
    params = init_params(rng, ds.feature_dim, ds.num_classes, embed_dim, cfg.kernel_size, cfg.omega)
    bank = init_centers(rng, ds.num_classes, embed_dim)
    state = init_adam(params)
    log = TrainLog()
    arrays = params.named_arrays()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    order: list[int] = []
    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(ds)))
        take = min(cfg.batch_size, len(order))
        idx, order = order[:take], order[take:]
        batch = [ds.samples[i] for i in idx]
        betas = rng.uniform(cfg.beta_range[0], cfg.beta_range[1], size=take)
        t0 = time.perf_counter()
        breakdown, grads, deltas = forward_backward(batch, params, bank, cfg, betas)
        adam_step(arrays, grads, state, cfg.adam_lr, cfg.weight_decay)
        bank = update_centers(
            bank,
            {name: cfg.alpha * d for name, d in deltas.items()},
            cfg.center_lr_rgb,
            cfg.center_lr_flow,
        )
        log.records.append(IterationRecord(it, breakdown, global_grad_norm(grads), time.perf_counter() - t0))
        if out_dir is not None and cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{it:06d}.bin",
                            Checkpoint(params, bank, cfg.s, cfg.s_a, cfg.two_branch))
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", Checkpoint(params, bank, cfg.s, cfg.s_a, cfg.two_branch))
        log.write(out_dir / "train_log.tsv")
    return params, bank, log


# --- gradient verification harness ------------------------------------------


@dataclass
class GroupResult:
    max_err: float
    worst_coord: int
    worst_fd: float
    worst_analytic: float


@dataclass
class GradCheckReport:
    groups: dict[str, GroupResult]
    instances: int
    skipped_degenerate: int

    def max_err(self) -> float:
        return max(g.max_err for g in self.groups.values())

    def passed(self, tol: float) -> bool:
        return all(g.max_err < tol for g in self.groups.values())

    def lines(self, tol: float) -> list[str]:
        out = [f"{'group':32s} {'max rel err':>12s} {'worst coord':>12s} {'fd':>13s} {'analytic':>13s}  status"]
        for name in sorted(self.groups):
            g = self.groups[name]
            status = "ok" if g.max_err < tol else "FAIL"
            out.append(f"{name:32s} {g.max_err:12.3e} {g.worst_coord:12d} "
                       f"{g.worst_fd:13.5e} {g.worst_analytic:13.5e}  {status}")
        out.append(f"instances checked: {self.instances} (degenerate draws skipped: {self.skipped_degenerate})")
        return out


def make_check_instance(seed, num_classes=3, feature_dim=6, embed_dim=6, length=7,
                        batch=2, kernel_size=1, beta=0.05, two_branch=True):
    """Random small training instance for gradient verification. The returned
    config fixes beta (per-sample randomness is a training-only concern) and
    uses small pooling ratios so that top-k selection and adversarial masking
    are non-trivial even at short lengths."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(
        s=3.0,
        s_a=3.0,
        batch_size=batch,
        embed_dim=embed_dim,
        kernel_size=kernel_size,
        two_branch=two_branch,
        iterations=0,
    )
    samples = []
    for i in range(batch):
        labels = np.zeros(num_classes)
        labels[i % num_classes] = 1.0
        if rng.random() < 0.4:
            labels[(i + 1) % num_classes] = 1.0
        samples.append(VideoSample(
            id=f"check{i}",
            rgb=rng.standard_normal((feature_dim, length)),
            flow=rng.standard_normal((feature_dim, length)),
            labels=labels,
            gt_segments=(),
        ))
    params = init_params(rng, feature_dim, num_classes, embed_dim, kernel_size)
    bank = init_centers(rng, num_classes, embed_dim)
    betas = np.full(batch, beta)
    return samples, params, bank, cfg, betas


# Margins an instance must clear so that finite-difference probes cannot flip
# any discrete selection (top-k sets, nearest negatives, hinges, ReLU signs).
_MARGIN_SELECT = 1e-3
_MARGIN_RELU = 3e-4
_MARGIN_ANGLE = 1e-3

# Analytic gradient coordinates below this (but nonzero) sit under the
# finite-difference noise floor and cannot be verified; such instances are
# redrawn. Exact zeros are fine: they are structural and reproduce exactly.
_FD_TINY = 2e-5


def _row_selection_stable(row: np.ndarray, k: int) -> bool:
    """True when the top-k selection of ``row`` cannot flip under a small
    perturbation. Exact ties at 0 come from frozen dead feature columns and
    are stable as long as no live value sits near 0."""
    if k <= 0 or k >= row.size:
        return True
    v = np.sort(row)[::-1]
    if v[k - 1] - v[k] > _MARGIN_SELECT:
        return True
    if v[k - 1] == 0.0 and v[k] == 0.0:
        live = row[row != 0.0]
        return live.size == 0 or np.abs(live).min() > _MARGIN_SELECT
    return False


def instance_is_degenerate(batch, params, bank, cfg, betas) -> bool:
    """True when any discrete selection sits too close to its boundary for
    finite-difference checking to be trustworthy."""
    for sample, beta in zip(batch, betas):
        fwd = forward_all(sample.rgb, sample.flow, params, cfg.s_a, cfg.two_branch)
        for cache in (fwd.rgb, fwd.flow):
            # note z2 can sit exactly at 0 (dead h1 columns with zero bias);
            # a bias probe then straddles the ReLU kink, so reject those too
            if np.abs(cache.z1).min() < _MARGIN_RELU or np.abs(cache.z2).min() < _MARGIN_RELU:
                return True
        tcams = [fwd.c_rgb, fwd.c_flow, fwd.c_final]
        if cfg.two_branch:
            tcams += [fwd.c_rgb_adv, fwd.c_flow_adv]
        l = sample.length
        k_cls = int(math.ceil(l / cfg.s))
        for c in tcams:
            for row in c:
                if not _row_selection_stable(row, k_cls):
                    return True
        k_a = int(math.floor(l / cfg.s_a))
        if cfg.two_branch:
            for c_first in (fwd.c_rgb, fwd.c_flow):
                for row in c_first:
                    if not _row_selection_stable(row, k_a):
                        return True
        hyper = TripletHyper(cfg.m1, cfg.m2, cfg.gamma, float(beta))
        plan = [(fwd.rgb.xe, fwd.c_rgb, "rgb_first"), (fwd.flow.xe, fwd.c_flow, "flow_first")]
        if cfg.two_branch:
            plan += [(fwd.rgb.xe, fwd.c_rgb_adv, "rgb_adv"), (fwd.flow.xe, fwd.c_flow_adv, "flow_adv")]
        for xe, c, set_name in plan:
            res = losses.aclpt_loss(BranchLossInput(xe, c, sample.labels, bank.sets()[set_name], hyper))
            if res.skipped:
                return True
            for t in res.triplets:
                if abs(t.atcl_margin) < _MARGIN_SELECT or abs(t.nt_margin) < _MARGIN_SELECT:
                    return True
                for theta in (t.theta_pos, t.theta_tempered, t.theta_neg):
                    if not _MARGIN_ANGLE < theta < math.pi - _MARGIN_ANGLE:
                        return True
                # runner-up negative must not be a near tie with the chosen one
                centers = bank.sets()[set_name]
                dists = sorted(
                    losses.angular_distance(t.agg, centers[kk])
                    for kk in range(centers.shape[0]) if kk != t.cls
                )
                if len(dists) > 1 and dists[1] - dists[0] < _MARGIN_SELECT:
                    return True
                if np.linalg.norm(t.agg) < _MARGIN_SELECT or np.linalg.norm(t.tempered_agg) < _MARGIN_SELECT:
                    return True
    return False


def gradcheck(seed: int = 0, instances: int = 20, eps: float = 1e-5,
              num_classes=3, feature_dim=6, embed_dim=6, length=7, batch=2,
              beta=0.05, two_branch=True) -> GradCheckReport:
    """Finite-difference verification of every analytic gradient.

    Checks all parameter groups against central differences of the total
    loss, the branch- and classification-loss gradients wrt T-CAM entries,
    the hinge gradients wrt both aggregates, and the center deltas against
    the naive reference implementation. Kernel size alternates between 1 and
    3 across instances.
    """
    groups: dict[str, GroupResult] = {}
    skipped = 0

    def record(name: str, fd: np.ndarray, analytic: np.ndarray) -> None:
        errs = grad_rel_errors(fd, analytic)
        i = int(np.argmax(errs))
        cur = groups.get(name)
        if cur is None or errs[i] > cur.max_err:
            groups[name] = GroupResult(float(errs[i]), i, float(fd.ravel()[i]),
                                       float(np.asarray(analytic).ravel()[i]))

    done = 0
    attempt = 0
    while done < instances:
        kernel_size = 1 if done % 2 == 0 else 3
        samples, params, bank, cfg, betas = make_check_instance(
            [seed, done, attempt], num_classes, feature_dim, embed_dim, length,
            batch, kernel_size, beta, two_branch)
        attempt += 1
        if attempt > 200 * instances:
            raise RuntimeError("could not draw a non-degenerate check instance")
        if instance_is_degenerate(samples, params, bank, cfg, betas):
            skipped += 1
            continue

        breakdown, grads, deltas = forward_backward(samples, params, bank, cfg, betas)

        # Loss-level gradients on the rgb first branch of the first sample.
        sample = samples[0]
        fwd = forward_all(sample.rgb, sample.flow, params, cfg.s_a, cfg.two_branch)
        hyper = TripletHyper(cfg.m1, cfg.m2, cfg.gamma, float(betas[0]))
        res = losses.aclpt_loss(BranchLossInput(fwd.rgb.xe, fwd.c_rgb, sample.labels, bank.rgb_first, hyper))
        g_cls = cls_loss(fwd.c_rgb, sample.labels, cfg.s)[1]
        att = losses.attention(fwd.c_rgb)
        t_att = losses.tempered_attention(fwd.c_rgb, hyper.beta)
        agg0 = att @ fwd.rgb.xe.T
        temp0 = t_att @ fwd.rgb.xe.T
        _, g1, _ = losses.atcl_loss(agg0, sample.labels, bank.rgb_first, cfg.m1)
        _, g2, g2t, _ = losses.nt_loss(agg0, temp0, sample.labels, bank.rgb_first, cfg.m2)
        g_agg = g1 + cfg.gamma * g2
        g_temp = cfg.gamma * g2t

        def in_band(a: np.ndarray) -> bool:
            mags = np.abs(np.asarray(a).ravel())
            return bool(np.any((mags > 0.0) & (mags < _FD_TINY)))

        if any(in_band(a) for a in grads.values()) or any(
                in_band(a) for a in (res.g_c, g_cls, g_agg, g_temp)):
            skipped += 1
            continue

        arrays = params.named_arrays()
        for name, base in arrays.items():
            shape = base.shape
            ref = base.copy()

            def f(vec, _name=name, _shape=shape, _ref=ref):
                arrays[_name][...] = vec.reshape(_shape)
                try:
                    return batch_loss(samples, params, bank, cfg, betas)
                finally:
                    arrays[_name][...] = _ref
            fd = fd_gradient(f, ref.ravel(), eps)
            record(name, fd, grads[name])

        def f_tcam(vec):
            return losses.aclpt_loss(BranchLossInput(
                fwd.rgb.xe, vec.reshape(fwd.c_rgb.shape), sample.labels, bank.rgb_first, hyper)).aclpt
        record("loss.branch_tcam", fd_gradient(f_tcam, fwd.c_rgb.ravel(), eps), res.g_c)

        def f_cls(vec):
            return cls_loss(vec.reshape(fwd.c_rgb.shape), sample.labels, cfg.s)[0]
        record("loss.cls_tcam", fd_gradient(f_cls, fwd.c_rgb.ravel(), eps), g_cls)

        def f_agg(vec):
            agg = vec.reshape(agg0.shape)
            v1 = losses.atcl_loss(agg, sample.labels, bank.rgb_first, cfg.m1)[0]
            v2 = losses.nt_loss(agg, temp0, sample.labels, bank.rgb_first, cfg.m2)[0]
            return v1 + cfg.gamma * v2
        record("loss.aggregate", fd_gradient(f_agg, agg0.ravel(), eps), g_agg)

        def f_temp(vec):
            return cfg.gamma * losses.nt_loss(agg0, vec.reshape(temp0.shape),
                                              sample.labels, bank.rgb_first, cfg.m2)[0]
        record("loss.tempered_aggregate", fd_gradient(f_temp, temp0.ravel(), eps), g_temp)

        # Center deltas against the naive reference (not finite differences).
        stats = {name: [] for name in SET_NAMES}
        raw = {name: [] for name in SET_NAMES}
        for smp, b in zip(samples, betas):
            fw = forward_all(smp.rgb, smp.flow, params, cfg.s_a, cfg.two_branch)
            hy = TripletHyper(cfg.m1, cfg.m2, cfg.gamma, float(b))
            plan = [("rgb_first", fw.rgb.xe, fw.c_rgb), ("flow_first", fw.flow.xe, fw.c_flow)]
            if cfg.two_branch:
                plan += [("rgb_adv", fw.rgb.xe, fw.c_rgb_adv), ("flow_adv", fw.flow.xe, fw.c_flow_adv)]
            for set_name, xe, c in plan:
                r = losses.aclpt_loss(BranchLossInput(xe, c, smp.labels, bank.sets()[set_name], hy))
                stats[set_name].append(r.triplets)
                raw[set_name].append([(t.cls, t.agg, t.tempered_agg) for t in r.triplets])
        worst = 0.0
        for set_name in SET_NAMES:
            got = center_grads(stats[set_name], len(samples), num_classes, embed_dim,
                               cfg.gamma, cfg.center_gamma_scaled)
            want = center_grads_reference(raw[set_name], bank.sets()[set_name], cfg.m1, cfg.m2,
                                          cfg.gamma, len(samples), cfg.center_gamma_scaled)
            worst = max(worst, float(np.abs(got - want).max()))
        cur = groups.get("centers.delta_vs_reference")
        if cur is None or worst > cur.max_err:
            groups["centers.delta_vs_reference"] = GroupResult(worst, -1, math.nan, math.nan)
        done += 1

    return GradCheckReport(groups, instances, skipped)
