"""Network forward and backward passes: two-stream fully-connected embeddings
with ReLU, per-branch 1-D convolutional scoring heads, class-wise adversarial
erasing of the most salient time steps, and the learned per-class fusion of
the four score maps.

Backwards are exact analytic chain-rule counterparts of the forwards. The
adversarial column selection is a constant during differentiation: erased
columns contribute no gradient to the embedded features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .centers import SET_NAMES, CenterBank
from .numkit import as_matrix, topk_indices

CKPT_MAGIC = "A2CLPT-CKPT v1"


@dataclass
class StreamEmbedding:
    """Two fully-connected layers with ReLU for one stream."""

    w1: np.ndarray  # embed_dim x feature_dim
    b1: np.ndarray
    w2: np.ndarray  # embed_dim x embed_dim
    b2: np.ndarray


@dataclass
class ConvHead:
    """1-D conv over time producing one score row per class."""

    kernel: np.ndarray  # num_classes x embed_dim x kernel_size
    bias: np.ndarray


@dataclass
class Fusion:
    """Learned per-class stream weights plus the fixed adversarial mix-in."""

    w_rgb: np.ndarray
    w_flow: np.ndarray
    omega: float


@dataclass
class Params:
    embed_rgb: StreamEmbedding
    embed_flow: StreamEmbedding
    head_rgb: ConvHead
    head_rgb_adv: ConvHead
    head_flow: ConvHead
    head_flow_adv: ConvHead
    fusion: Fusion

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor, in fixed order."""
        out: dict[str, np.ndarray] = {}
        for stream, emb in (("rgb", self.embed_rgb), ("flow", self.embed_flow)):
            out[f"embed.{stream}.w1"] = emb.w1
            out[f"embed.{stream}.b1"] = emb.b1
            out[f"embed.{stream}.w2"] = emb.w2
            out[f"embed.{stream}.b2"] = emb.b2
        for name, head in self.heads().items():
            out[f"head.{name}.kernel"] = head.kernel
            out[f"head.{name}.bias"] = head.bias
        out["fusion.w_rgb"] = self.fusion.w_rgb
        out["fusion.w_flow"] = self.fusion.w_flow
        return out

    def heads(self) -> dict[str, ConvHead]:
        return {
            "rgb.first": self.head_rgb,
            "rgb.adv": self.head_rgb_adv,
            "flow.first": self.head_flow,
            "flow.adv": self.head_flow_adv,
        }

    @property
    def num_classes(self) -> int:
        return self.head_rgb.kernel.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embed_rgb.w2.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.embed_rgb.w1.shape[1]


def zero_grads(params: Params) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a) for name, a in params.named_arrays().items()}


def init_params(
    rng: np.random.Generator,
    feature_dim: int,
    num_classes: int,
    embed_dim: int | None = None,
    kernel_size: int = 1,
    omega: float = 0.6,
) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, fusion weights at 1."""
    e = embed_dim if embed_dim is not None else feature_dim
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def embedding():
        return StreamEmbedding(
            w1=uniform((e, feature_dim), feature_dim),
            b1=np.zeros(e),
            w2=uniform((e, e), e),
            b2=np.zeros(e),
        )

    def head():
        return ConvHead(
            kernel=uniform((num_classes, e, kernel_size), e * kernel_size),
            bias=np.zeros(num_classes),
        )

    return Params(
        embed_rgb=embedding(),
        embed_flow=embedding(),
        head_rgb=head(),
        head_rgb_adv=head(),
        head_flow=head(),
        head_flow_adv=head(),
        fusion=Fusion(np.ones(num_classes), np.ones(num_classes), omega),
    )


@dataclass
class EmbedCache:
    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    xe: np.ndarray


def embed_forward(x, emb: StreamEmbedding) -> EmbedCache:
    x = as_matrix(x, rows=emb.w1.shape[1])
    z1 = emb.w1 @ x + emb.b1[:, None]
    h1 = np.maximum(z1, 0.0)
    z2 = emb.w2 @ h1 + emb.b2[:, None]
    xe = np.maximum(z2, 0.0)
    return EmbedCache(x, z1, h1, z2, xe)


def embed(x, emb: StreamEmbedding) -> np.ndarray:
    """Column-wise ReLU(w2 @ ReLU(w1 @ x + b1) + b2)."""
    return embed_forward(x, emb).xe


def embed_backward(cache: EmbedCache, emb: StreamEmbedding, g_xe: np.ndarray):
    """Gradients of a scalar wrt (w1, b1, w2, b2) given its gradient wrt xe."""
    g_z2 = g_xe * (cache.z2 > 0)
    g_w2 = g_z2 @ cache.h1.T
    g_b2 = g_z2.sum(axis=1)
    g_h1 = emb.w2.T @ g_z2
    g_z1 = g_h1 * (cache.z1 > 0)
    g_w1 = g_z1 @ cache.x.T
    g_b1 = g_z1.sum(axis=1)
    return g_w1, g_b1, g_w2, g_b2


def tcam(xe, head: ConvHead) -> np.ndarray:
    """1-D cross-correlation along time with zero padding of (kappa-1)/2,
    plus per-class bias. Produces a num_classes x l score matrix."""
    xe = as_matrix(xe, rows=head.kernel.shape[1])
    n_c, e, kappa = head.kernel.shape
    if kappa % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kappa}")
    l = xe.shape[1]
    if kappa == 1:
        return head.kernel[:, :, 0] @ xe + head.bias[:, None]
    pad = (kappa - 1) // 2
    xp = np.zeros((e, l + 2 * pad))
    xp[:, pad:pad + l] = xe
    c = np.tile(head.bias[:, None], (1, l))
    for u in range(kappa):
        c += head.kernel[:, :, u] @ xp[:, u:u + l]
    return c


def tcam_backward(xe: np.ndarray, head: ConvHead, g_c: np.ndarray):
    """Gradients wrt (kernel, bias, xe) of a scalar given its gradient wrt the T-CAM."""
    n_c, e, kappa = head.kernel.shape
    l = xe.shape[1]
    g_bias = g_c.sum(axis=1)
    if kappa == 1:
        g_kernel = (g_c @ xe.T)[:, :, None]
        g_xe = head.kernel[:, :, 0].T @ g_c
        return g_kernel, g_bias, g_xe
    pad = (kappa - 1) // 2
    xp = np.zeros((e, l + 2 * pad))
    xp[:, pad:pad + l] = xe
    g_kernel = np.zeros_like(head.kernel)
    g_xp = np.zeros_like(xp)
    for u in range(kappa):
        g_kernel[:, :, u] = g_c @ xp[:, u:u + l].T
        g_xp[:, u:u + l] += head.kernel[:, :, u].T @ g_c
    return g_kernel, g_bias, g_xp[:, pad:pad + l]


def mask_column_indices(row: np.ndarray, s_a: float) -> np.ndarray:
    """Time indices (0-based, sorted) of the floor(l/s_a) largest scores in
    ``row``; ties break toward the lower time index."""
    if s_a < 1:
        raise ValueError(f"s_a must be >= 1, got {s_a}")
    k_a = int(math.floor(row.size / s_a))
    if k_a == 0:
        return np.empty(0, dtype=np.intp)
    return np.sort(topk_indices(row, k_a))


def adversarial_mask(xe, c_first: np.ndarray, cls: int, s_a: float) -> np.ndarray:
    """Copy of ``xe`` with the columns holding the top floor(l/s_a) first-branch
    scores of class ``cls`` zeroed out."""
    xe = as_matrix(xe)
    out = xe.copy()
    out[:, mask_column_indices(c_first[cls], s_a)] = 0.0
    return out


def adversarial_tcam(xe, c_first: np.ndarray, head_adv: ConvHead, s_a: float):
    """Adversarial-branch T-CAM: row j comes from the conv applied to the
    class-j masked features. Returns (tcam, per-class masked column indices)."""
    xe = as_matrix(xe, rows=head_adv.kernel.shape[1])
    n_c = head_adv.kernel.shape[0]
    if c_first.shape != (n_c, xe.shape[1]):
        raise ValueError(f"first-branch T-CAM shape {c_first.shape} inconsistent with {(n_c, xe.shape[1])}")
    rows = np.empty((n_c, xe.shape[1]))
    masks = []
    for j in range(n_c):
        idx = mask_column_indices(c_first[j], s_a)
        xm = xe.copy()
        xm[:, idx] = 0.0
        rows[j] = tcam(xm, head_adv)[j]
        masks.append(idx)
    return rows, masks


def adversarial_tcam_backward(xe: np.ndarray, head_adv: ConvHead, masks, g_c: np.ndarray):
    """Backward of adversarial_tcam at fixed masks. Masked columns receive no
    feature gradient; the selection itself carries none."""
    n_c, e, kappa = head_adv.kernel.shape
    l = xe.shape[1]
    pad = (kappa - 1) // 2
    g_kernel = np.zeros_like(head_adv.kernel)
    g_bias = np.zeros_like(head_adv.bias)
    g_xe = np.zeros_like(xe)
    for j in range(n_c):
        g_row = g_c[j]
        xm = xe.copy()
        xm[:, masks[j]] = 0.0
        xp = np.zeros((e, l + 2 * pad))
        xp[:, pad:pad + l] = xm
        g_bias[j] += g_row.sum()
        g_xp = np.zeros((e, l + 2 * pad))
        for u in range(kappa):
            g_kernel[j, :, u] += xp[:, u:u + l] @ g_row
            g_xp[:, u:u + l] += np.outer(head_adv.kernel[j, :, u], g_row)
        g_xm = g_xp[:, pad:pad + l]
        g_xm[:, masks[j]] = 0.0
        g_xe += g_xm
    return g_kernel, g_bias, g_xe


def fuse(c_r, c_ra, c_o, c_oa, fusion: Fusion) -> np.ndarray:
    """Per-class weighted sum: w_rgb*(c_r + omega*c_ra) + w_flow*(c_o + omega*c_oa)."""
    c_r = as_matrix(c_r)
    for other in (c_ra, c_o, c_oa):
        if np.shape(other) != c_r.shape:
            raise ValueError(f"T-CAM shape mismatch: {np.shape(other)} vs {c_r.shape}")
    return (fusion.w_rgb[:, None] * (c_r + fusion.omega * c_ra)
            + fusion.w_flow[:, None] * (c_o + fusion.omega * c_oa))


def fuse_backward(c_r, c_ra, c_o, c_oa, fusion: Fusion, g_cf: np.ndarray):
    """Gradients wrt (w_rgb, w_flow) and the four branch T-CAMs."""
    g_w_rgb = ((c_r + fusion.omega * c_ra) * g_cf).sum(axis=1)
    g_w_flow = ((c_o + fusion.omega * c_oa) * g_cf).sum(axis=1)
    g_cr = fusion.w_rgb[:, None] * g_cf
    g_cra = fusion.omega * g_cr
    g_co = fusion.w_flow[:, None] * g_cf
    g_coa = fusion.omega * g_co
    return g_w_rgb, g_w_flow, g_cr, g_cra, g_co, g_coa


@dataclass
class ForwardCache:
    rgb: EmbedCache
    flow: EmbedCache
    c_rgb: np.ndarray
    c_rgb_adv: np.ndarray
    c_flow: np.ndarray
    c_flow_adv: np.ndarray
    c_final: np.ndarray
    masks_rgb: list | None
    masks_flow: list | None


def forward_all(x_rgb, x_flow, params: Params, s_a: float, two_branch: bool = True) -> ForwardCache:
    """Full single-pass forward to the final T-CAM. With ``two_branch`` off the
    adversarial T-CAMs are zero and the fusion reduces to the first branches."""
    fr = embed_forward(x_rgb, params.embed_rgb)
    fo = embed_forward(x_flow, params.embed_flow)
    c_r = tcam(fr.xe, params.head_rgb)
    c_o = tcam(fo.xe, params.head_flow)
    if two_branch:
        c_ra, masks_r = adversarial_tcam(fr.xe, c_r, params.head_rgb_adv, s_a)
        c_oa, masks_o = adversarial_tcam(fo.xe, c_o, params.head_flow_adv, s_a)
    else:
        c_ra, c_oa = np.zeros_like(c_r), np.zeros_like(c_o)
        masks_r = masks_o = None
    c_f = fuse(c_r, c_ra, c_o, c_oa, params.fusion)
    return ForwardCache(fr, fo, c_r, c_ra, c_o, c_oa, c_f, masks_r, masks_o)


# --- checkpoint serialization -----------------------------------------------
#
# Versioned binary blob: a magic line, then named sections. Each section is an
# ASCII header line "<name> <ndim> <dim0> <dim1> ..." followed by the raw
# little-endian float64 payload in C order.


@dataclass
class Checkpoint:
    params: Params
    bank: CenterBank
    s: float
    s_a: float
    two_branch: bool


def _checkpoint_entries(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    entries = dict(ckpt.params.named_arrays())
    for name, c in ckpt.bank.sets().items():
        entries[f"centers.{name}"] = c
    entries["fusion.omega"] = np.asarray(ckpt.params.fusion.omega, dtype=np.float64)
    entries["hyper.s"] = np.asarray(float(ckpt.s))
    entries["hyper.s_a"] = np.asarray(float(ckpt.s_a))
    entries["hyper.two_branch"] = np.asarray(1.0 if ckpt.two_branch else 0.0)
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode("ascii"))
        for name, arr in _checkpoint_entries(ckpt).items():
            arr = np.asarray(arr, dtype=np.float64)  # keeps 0-d scalars 0-d
            dims = " ".join(str(d) for d in arr.shape)
            header = f"{name} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
            fh.write(header.encode("ascii"))
            fh.write(arr.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic {magic!r})")
        entries: dict[str, np.ndarray] = {}
        while True:
            header = fh.readline()
            if not header:
                break
            parts = header.decode("ascii").split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2:2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated section {name}")
            entries[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def take(name: str) -> np.ndarray:
        if name not in entries:
            raise ValueError(f"{path}: missing checkpoint section {name}")
        return entries[name]

    def embedding(stream: str) -> StreamEmbedding:
        return StreamEmbedding(*(take(f"embed.{stream}.{p}") for p in ("w1", "b1", "w2", "b2")))

    def head(name: str) -> ConvHead:
        return ConvHead(take(f"head.{name}.kernel"), take(f"head.{name}.bias"))

    params = Params(
        embed_rgb=embedding("rgb"),
        embed_flow=embedding("flow"),
        head_rgb=head("rgb.first"),
        head_rgb_adv=head("rgb.adv"),
        head_flow=head("flow.first"),
        head_flow_adv=head("flow.adv"),
        fusion=Fusion(take("fusion.w_rgb"), take("fusion.w_flow"), float(take("fusion.omega"))),
    )
    bank = CenterBank(**{name: take(f"centers.{name}") for name in SET_NAMES})
    return Checkpoint(
        params=params,
        bank=bank,
        s=float(take("hyper.s")),
        s_a=float(take("hyper.s_a")),
        two_branch=bool(float(take("hyper.two_branch"))),
    )
