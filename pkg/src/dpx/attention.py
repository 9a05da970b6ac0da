"""Baseline attention variants over token grids.

Five mechanisms share one multi-head machinery: self-attention, full
cross-attention (quadratic in token count), shifted-window cross-attention,
local (neighborhood) cross-attention, and pixel-wise cross-attention. The
windowed/local/pixel-wise variants execute their restricted algorithm
directly (per-window batches, per-query gathered key sets) rather than
masking a dense score matrix, so instrumented FLOP tallies reflect what
each mechanism actually costs and perturbations outside a receptive field
are bitwise invisible.

Multi-head convention: channels split into ``heads`` groups, attention per
head, heads concatenated, then an output projection. The output projection
is zero-initialized so a freshly initialized branch contributes exactly
zero to its residual connection.

Each variant exposes
  * ``<name>_branch``          pre-residual branch output(s) + cache,
  * ``<name>_forward``         branch plus residual, returns grids + cache,
  * ``<name>``                 forward without cache (convenience),
  * ``<name>_backward``        cotangents of the forward's outputs -> input
                               cotangents plus parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Linear, ParamModule, linear_backward, linear_forward, merge_grads, softmax_backward
from .tensor import (
    Tensor,
    RngState,
    batched_matmul,
    masked_softmax,
    meter_report,
    reshape,
    scale,
    softmax,
    transpose,
)

VARIANTS = ("self", "ca", "swca", "lca", "pwca", "dsim")


@dataclass(frozen=True)
class AttentionConfig:
    """Geometry-independent attention hyperparameters."""

    dim: int
    heads: int = 8
    window: int = 7
    radius: int = 1
    n_noise: int = 1

    def __post_init__(self):
        if self.dim <= 0 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")
        if self.n_noise < 0:
            raise ConfigError(f"n_noise must be >= 0, got {self.n_noise}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


class TokenGrid:
    """H x W spatial grid of N = H*W tokens, feature matrix [N, d].

    Token k sits at (k // W, k % W); features are row-major over the grid.
    """

    __slots__ = ("h", "w", "feat")

    def __init__(self, h: int, w: int, feat: Tensor):
        if feat.ndim != 2 or feat.shape[0] != h * w:
            raise DimensionError(
                f"token grid: feature shape {feat.shape} inconsistent with {h}x{w}"
            )
        self.h = h
        self.w = w
        self.feat = feat

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def dim(self) -> int:
        return self.feat.shape[1]

    def with_feat(self, feat: Tensor) -> "TokenGrid":
        return TokenGrid(self.h, self.w, feat)


def _check_pair(x: TokenGrid, y: TokenGrid) -> None:
    if (x.h, x.w, x.dim) != (y.h, y.w, y.dim):
        raise DimensionError(
            f"modalities disagree: {x.h}x{x.w}x{x.dim} vs {y.h}x{y.w}x{y.dim}"
        )


class QkvoParams(ParamModule):
    """Query/key/value projections plus the (zero-init) output projection."""

    child_names = ("w_q", "w_k", "w_v", "w_o")

    def __init__(self, w_q: Linear, w_k: Linear, w_v: Linear, w_o: Linear):
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o

    @staticmethod
    def init(rng: RngState, d: int, precision: str = "single",
             zero_out: bool = True) -> "QkvoParams":
        return QkvoParams(
            Linear.init(rng, d, d, precision=precision),
            Linear.init(rng, d, d, precision=precision),
            Linear.init(rng, d, d, precision=precision),
            Linear.init(rng, d, d, precision=precision, zero=zero_out),
        )


class PixelwiseParams(ParamModule):
    """Pixel-wise cross-attention parameters: projections plus optional
    learnable noise key/value tokens appended (post-projection) to each
    pixel's singleton key set."""

    child_names = ("proj",)
    param_names = ("noise_k_rgb", "noise_v_rgb", "noise_k_depth", "noise_v_depth")

    def __init__(self, proj: QkvoParams, noise_k_rgb=None, noise_v_rgb=None,
                 noise_k_depth=None, noise_v_depth=None):
        self.proj = proj
        self.noise_k_rgb = noise_k_rgb
        self.noise_v_rgb = noise_v_rgb
        self.noise_k_depth = noise_k_depth
        self.noise_v_depth = noise_v_depth

    @staticmethod
    def init(rng: RngState, cfg: AttentionConfig, precision: str = "single",
             zero_out: bool = True) -> "PixelwiseParams":
        proj = QkvoParams.init(rng, cfg.dim, precision, zero_out)
        if cfg.n_noise == 0:
            return PixelwiseParams(proj)
        mk = lambda: rng.trunc_normal((cfg.n_noise, cfg.dim), std=0.02, precision=precision)
        return PixelwiseParams(proj, mk(), mk(), mk(), mk())


# ---------------------------------------------------------------------------
# Head plumbing
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[N, d] -> [heads, N, d/heads]"""
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    """[heads, N, dh] -> [N, heads*dh]"""
    h, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * dh))


# ---------------------------------------------------------------------------
# Dense core: full-set attention over [B, Nq, dh] head batches
# ---------------------------------------------------------------------------


def _dense_core(qh: Tensor, kh: Tensor, vh: Tensor, att_scale: float,
                mask: np.ndarray | None) -> tuple[Tensor, dict]:
    scores = batched_matmul(qh, transpose(kh, (0, 2, 1)))
    scores = scale(scores, att_scale)
    if mask is None:
        att = softmax(scores, axis=-1)
    else:
        att = masked_softmax(scores, mask, axis=-1)
    out = batched_matmul(att, vh)
    return out, {"qh": qh, "kh": kh, "vh": vh, "att": att, "scale": att_scale}


def _dense_core_backward(cache: dict, dout: Tensor):
    qh, kh, vh, att = cache["qh"], cache["kh"], cache["vh"], cache["att"]
    datt = batched_matmul(dout, transpose(vh, (0, 2, 1)))
    dvh = batched_matmul(transpose(att, (0, 2, 1)), dout)
    dscores = softmax_backward(att, datt, axis=-1)
    dscores = scale(dscores, cache["scale"])
    dqh = batched_matmul(dscores, kh)
    dkh = batched_matmul(transpose(dscores, (0, 2, 1)), qh)
    return dqh, dkh, dvh


# ---------------------------------------------------------------------------
# Per-key core: each query owns a private key/value set [N, L, d]
# ---------------------------------------------------------------------------


def _per_key_core(cfg: AttentionConfig, q: Tensor, keys: Tensor, values: Tensor,
                  mask: np.ndarray | None) -> tuple[Tensor, dict]:
    """Attention of q[n] over its own key set keys[n]; no token ever sees
    another query's keys, which is the locality guarantee."""
    n, d = q.shape
    L = keys.shape[1]
    h, dh = cfg.heads, cfg.head_dim
    qh = q.data.reshape(n, h, dh)
    kh = keys.data.reshape(n, L, h, dh)
    vh = values.data.reshape(n, L, h, dh)
    scores = np.einsum("nhc,nlhc->nhl", qh, kh)
    meter_report(muls=n * L * d, adds=n * L * d)
    scores = scores * np.asarray(cfg.scale, dtype=scores.dtype)
    meter_report(muls=n * h * L)
    st = Tensor(scores, q.precision)
    if mask is None:
        att = softmax(st, axis=-1)
    else:
        att = masked_softmax(st, np.broadcast_to(mask[:, None, :], scores.shape), axis=-1)
    out = np.einsum("nhl,nlhc->nhc", att.data, vh)
    meter_report(muls=n * L * d, adds=n * L * d)
    cache = {"qh": qh, "kh": kh, "vh": vh, "att": att, "cfg": cfg, "L": L}
    return Tensor(out.reshape(n, d), q.precision), cache


def _per_key_core_backward(cache: dict, dout: Tensor):
    qh, kh, vh, att = cache["qh"], cache["kh"], cache["vh"], cache["att"]
    cfg: AttentionConfig = cache["cfg"]
    n, h, dh = qh.shape
    L = cache["L"]
    do = dout.data.reshape(n, h, dh)
    datt = np.einsum("nhc,nlhc->nhl", do, vh)
    dv = np.einsum("nhl,nhc->nlhc", att.data, do)
    ds = softmax_backward(att, Tensor(datt, dout.precision), axis=-1).data
    ds = ds * np.asarray(cfg.scale, dtype=ds.dtype)
    dq = np.einsum("nhl,nlhc->nhc", ds, kh)
    dk = np.einsum("nhl,nhc->nlhc", ds, qh)
    p = dout.precision
    return (
        Tensor(dq.reshape(n, h * dh), p),
        Tensor(dk.reshape(n, L, h * dh), p),
        Tensor(dv.reshape(n, L, h * dh), p),
    )


# ---------------------------------------------------------------------------
# Self-attention
# ---------------------------------------------------------------------------


def self_attention_branch(cfg: AttentionConfig, params: QkvoParams,
                          x: TokenGrid) -> tuple[Tensor, dict]:
    if x.dim != cfg.dim:
        raise DimensionError(f"self_attention: grid dim {x.dim} != config dim {cfg.dim}")
    q, cq = linear_forward(params.w_q, x.feat)
    k, ck = linear_forward(params.w_k, x.feat)
    v, cv = linear_forward(params.w_v, x.feat)
    o, core = _dense_core(
        _split_heads(q, cfg.heads), _split_heads(k, cfg.heads),
        _split_heads(v, cfg.heads), cfg.scale, None,
    )
    proj, co = linear_forward(params.w_o, _merge_heads(o))
    cache = {"cq": cq, "ck": ck, "cv": cv, "core": core, "co": co, "heads": cfg.heads}
    return proj, cache


def self_attention_branch_backward(params: QkvoParams, cache: dict, dproj: Tensor):
    dmerged, go = linear_backward(params.w_o, cache["co"], dproj)
    h = cache["heads"]
    dqh, dkh, dvh = _dense_core_backward(cache["core"], _split_heads(dmerged, h))
    dq, gq = linear_backward(params.w_q, cache["cq"], _merge_heads(dqh))
    dk, gk = linear_backward(params.w_k, cache["ck"], _merge_heads(dkh))
    dv, gv = linear_backward(params.w_v, cache["cv"], _merge_heads(dvh))
    grads: dict = {}
    merge_grads(grads, gq, "w_q.")
    merge_grads(grads, gk, "w_k.")
    merge_grads(grads, gv, "w_v.")
    merge_grads(grads, go, "w_o.")
    return dq + dk + dv, grads


def self_attention_forward(cfg: AttentionConfig, params: QkvoParams,
                           x: TokenGrid) -> tuple[TokenGrid, dict]:
    proj, cache = self_attention_branch(cfg, params, x)
    return x.with_feat(proj + x.feat), cache


def self_attention(cfg: AttentionConfig, params: QkvoParams, x: TokenGrid) -> TokenGrid:
    return self_attention_forward(cfg, params, x)[0]


def self_attention_backward(params: QkvoParams, cache: dict, dy: Tensor):
    dx, grads = self_attention_branch_backward(params, cache, dy)
    return dy + dx, grads


# ---------------------------------------------------------------------------
# Full cross-attention (every query sees all N tokens of the other modality)
# ---------------------------------------------------------------------------


def cross_attention_branch(cfg: AttentionConfig, params: QkvoParams,
                           x: TokenGrid, y: TokenGrid):
    _check_pair(x, y)
    h = cfg.heads
    caches = {"heads": h}
    projs = []
    for tag, src, other in (("r", x, y), ("d", y, x)):
        q, cq = linear_forward(params.w_q, src.feat)
        k, ck = linear_forward(params.w_k, other.feat)
        v, cv = linear_forward(params.w_v, other.feat)
        o, core = _dense_core(
            _split_heads(q, h), _split_heads(k, h), _split_heads(v, h),
            cfg.scale, None,
        )
        proj, co = linear_forward(params.w_o, _merge_heads(o))
        projs.append(proj)
        caches[tag] = {"cq": cq, "ck": ck, "cv": cv, "core": core, "co": co}
    return projs[0], projs[1], caches


def cross_attention_branch_backward(params: QkvoParams, caches: dict,
                                    dpr: Tensor, dpd: Tensor):
    h = caches["heads"]
    grads: dict = {}
    acc = {}
    for tag, dout in (("r", dpr), ("d", dpd)):
        c = caches[tag]
        dmerged, go = linear_backward(params.w_o, c["co"], dout)
        dqh, dkh, dvh = _dense_core_backward(c["core"], _split_heads(dmerged, h))
        dq, gq = linear_backward(params.w_q, c["cq"], _merge_heads(dqh))
        dk, gk = linear_backward(params.w_k, c["ck"], _merge_heads(dkh))
        dv, gv = linear_backward(params.w_v, c["cv"], _merge_heads(dvh))
        acc[tag] = (dq, dk + dv)
        merge_grads(grads, gq, "w_q.")
        merge_grads(grads, gk, "w_k.")
        merge_grads(grads, gv, "w_v.")
        merge_grads(grads, go, "w_o.")
    dx = acc["r"][0] + acc["d"][1]
    dy = acc["d"][0] + acc["r"][1]
    return dx, dy, grads


def cross_attention_forward(cfg: AttentionConfig, params: QkvoParams,
                            x: TokenGrid, y: TokenGrid):
    pr, pd, caches = cross_attention_branch(cfg, params, x, y)
    return x.with_feat(pr + x.feat), y.with_feat(pd + y.feat), caches


def cross_attention(cfg: AttentionConfig, params: QkvoParams,
                    x: TokenGrid, y: TokenGrid) -> tuple[TokenGrid, TokenGrid]:
    yr, yd, _ = cross_attention_forward(cfg, params, x, y)
    return yr, yd


def cross_attention_backward(params: QkvoParams, caches: dict, dyr: Tensor, dyd: Tensor):
    dx, dy, grads = cross_attention_branch_backward(params, caches, dyr, dyd)
    return dyr + dx, dyd + dy, grads


# ---------------------------------------------------------------------------
# Shifted-window cross-attention
# ---------------------------------------------------------------------------


def window_blocks(h: int, w: int, win: int, shifted: bool) -> np.ndarray:
    """Token indices per window, [n_windows, win*win], -1 where padded.

    A shifted call offsets the partition by win//2 (padding the top-left),
    so alternate calls tile the grid with staggered windows.
    """
    off = win // 2 if shifted else 0
    hp = ((h + off + win - 1) // win) * win
    wp = ((w + off + win - 1) // win) * win
    pad = np.full((hp, wp), -1, dtype=np.int64)
    pad[off:off + h, off:off + w] = np.arange(h * w, dtype=np.int64).reshape(h, w)
    blocks = (
        pad.reshape(hp // win, win, wp // win, win)
        .transpose(0, 2, 1, 3)
        .reshape(-1, win * win)
    )
    return blocks


def _gather_windows(feat: Tensor, blocks: np.ndarray) -> np.ndarray:
    valid = blocks >= 0
    g = feat.data[blocks.clip(min=0)]
    g[~valid] = 0.0
    return g


def _scatter_windows(dwin: np.ndarray, blocks: np.ndarray, n: int) -> np.ndarray:
    valid = blocks >= 0
    out = np.zeros((n, dwin.shape[-1]), dtype=dwin.dtype)
    out[blocks[valid]] = dwin[valid]
    return out


def _windowed_direction(cfg: AttentionConfig, params: QkvoParams, src: TokenGrid,
                        other: TokenGrid, blocks: np.ndarray):
    h, dh = cfg.heads, cfg.head_dim
    nw, ws = blocks.shape
    q, cq = linear_forward(params.w_q, src.feat)
    k, ck = linear_forward(params.w_k, other.feat)
    v, cv = linear_forward(params.w_v, other.feat)

    def to_batches(t: Tensor) -> Tensor:
        g = _gather_windows(t, blocks)  # [nw, ws, d]
        g = g.reshape(nw, ws, h, dh).transpose(0, 2, 1, 3).reshape(nw * h, ws, dh)
        return Tensor(g, t.precision)

    valid = blocks >= 0
    mask = valid[:, :, None] & valid[:, None, :]
    mask = np.repeat(mask[:, None, :, :], h, axis=1).reshape(nw * h, ws, ws)
    o, core = _dense_core(to_batches(q), to_batches(k), to_batches(v), cfg.scale, mask)
    ow = o.data.reshape(nw, h, ws, dh).transpose(0, 2, 1, 3).reshape(nw, ws, h * dh)
    flat = _scatter_windows(ow, blocks, src.n)
    proj, co = linear_forward(params.w_o, Tensor(flat, src.feat.precision))
    cache = {"cq": cq, "ck": ck, "cv": cv, "core": core, "co": co}
    return proj, cache


def _windowed_direction_backward(cfg: AttentionConfig, params: QkvoParams,
                                 cache: dict, blocks: np.ndarray, dproj: Tensor):
    h, dh = cfg.heads, cfg.head_dim
    nw, ws = blocks.shape
    dflat, go = linear_backward(params.w_o, cache["co"], dproj)
    dwin = _gather_windows(dflat, blocks)
    dwin = dwin.reshape(nw, ws, h, dh).transpose(0, 2, 1, 3).reshape(nw * h, ws, dh)
    dqh, dkh, dvh = _dense_core_backward(cache["core"], Tensor(dwin, dproj.precision))

    def from_batches(t: Tensor) -> Tensor:
        g = t.data.reshape(nw, h, ws, dh).transpose(0, 2, 1, 3).reshape(nw, ws, h * dh)
        return Tensor(_scatter_windows(g, blocks, dproj.shape[0]), dproj.precision)

    dq, gq = linear_backward(params.w_q, cache["cq"], from_batches(dqh))
    dk, gk = linear_backward(params.w_k, cache["ck"], from_batches(dkh))
    dv, gv = linear_backward(params.w_v, cache["cv"], from_batches(dvh))
    grads: dict = {}
    merge_grads(grads, gq, "w_q.")
    merge_grads(grads, gk, "w_k.")
    merge_grads(grads, gv, "w_v.")
    merge_grads(grads, go, "w_o.")
    return dq, dk, dv, grads


def shifted_window_cross_attention_branch(cfg: AttentionConfig, params: QkvoParams,
                                          x: TokenGrid, y: TokenGrid,
                                          shifted: bool = False):
    _check_pair(x, y)
    if cfg.window > min(x.h, x.w):
        raise ConfigError(f"window {cfg.window} exceeds grid min side {min(x.h, x.w)}")
    blocks = window_blocks(x.h, x.w, cfg.window, shifted)
    pr, cr = _windowed_direction(cfg, params, x, y, blocks)
    pd, cd = _windowed_direction(cfg, params, y, x, blocks)
    return pr, pd, {"r": cr, "d": cd, "blocks": blocks, "cfg": cfg}


def shifted_window_cross_attention_branch_backward(params: QkvoParams, caches: dict,
                                                   dpr: Tensor, dpd: Tensor):
    cfg, blocks = caches["cfg"], caches["blocks"]
    dqr, dkr, dvr, g1 = _windowed_direction_backward(cfg, params, caches["r"], blocks, dpr)
    dqd, dkd, dvd, g2 = _windowed_direction_backward(cfg, params, caches["d"], blocks, dpd)
    dx = dqr + dkd + dvd
    dy = dqd + dkr + dvr
    grads: dict = {}
    merge_grads(grads, g1, "")
    merge_grads(grads, g2, "")
    return dx, dy, grads


def shifted_window_cross_attention_forward(cfg: AttentionConfig, params: QkvoParams,
                                           x: TokenGrid, y: TokenGrid,
                                           shifted: bool = False):
    pr, pd, caches = shifted_window_cross_attention_branch(cfg, params, x, y, shifted)
    return x.with_feat(pr + x.feat), y.with_feat(pd + y.feat), caches


def shifted_window_cross_attention(cfg: AttentionConfig, params: QkvoParams,
                                   x: TokenGrid, y: TokenGrid, shifted: bool = False):
    yr, yd, _ = shifted_window_cross_attention_forward(cfg, params, x, y, shifted)
    return yr, yd


def shifted_window_cross_attention_backward(params: QkvoParams, caches: dict,
                                            dyr: Tensor, dyd: Tensor):
    dx, dy, grads = shifted_window_cross_attention_branch_backward(params, caches, dyr, dyd)
    return dyr + dx, dyd + dy, grads


# ---------------------------------------------------------------------------
# Local (neighborhood) cross-attention
# ---------------------------------------------------------------------------


def neighbor_indices(h: int, w: int, r: int) -> np.ndarray:
    """[N, (2r+1)^2] token indices of each token's clipped neighborhood,
    -1 where the window sticks out past the border."""
    if r < 0:
        raise ConfigError(f"radius must be >= 0, got {r}")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    ni = ii.reshape(-1, 1) + di.reshape(1, -1)
    nj = jj.reshape(-1, 1) + dj.reshape(1, -1)
    inside = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
    idx = np.where(inside, ni * w + nj, -1)
    return idx.astype(np.int64)


def _gather_rows(feat: Tensor, idx: np.ndarray) -> np.ndarray:
    valid = idx >= 0
    g = feat.data[idx.clip(min=0)]
    g[~valid] = 0.0
    return g


def _scatter_rows(dg: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    valid = idx >= 0
    out = np.zeros((n, dg.shape[-1]), dtype=dg.dtype)
    np.add.at(out, idx[valid], dg[valid])
    return out


def _local_direction(cfg: AttentionConfig, params: QkvoParams, src: TokenGrid,
                     other: TokenGrid, idx: np.ndarray):
    q, cq = linear_forward(params.w_q, src.feat)
    k, ck = linear_forward(params.w_k, other.feat)
    v, cv = linear_forward(params.w_v, other.feat)
    keys = Tensor(_gather_rows(k, idx), k.precision)
    values = Tensor(_gather_rows(v, idx), v.precision)
    o, core = _per_key_core(cfg, q, keys, values, idx >= 0)
    proj, co = linear_forward(params.w_o, o)
    cache = {"cq": cq, "ck": ck, "cv": cv, "core": core, "co": co}
    return proj, cache


def _local_direction_backward(cfg, params, cache, idx, dproj: Tensor):
    do_in, go = linear_backward(params.w_o, cache["co"], dproj)
    dq_core, dkeys, dvalues = _per_key_core_backward(cache["core"], do_in)
    n = dproj.shape[0]
    dk_flat = Tensor(_scatter_rows(dkeys.data, idx, n), dproj.precision)
    dv_flat = Tensor(_scatter_rows(dvalues.data, idx, n), dproj.precision)
    dq, gq = linear_backward(params.w_q, cache["cq"], dq_core)
    dk, gk = linear_backward(params.w_k, cache["ck"], dk_flat)
    dv, gv = linear_backward(params.w_v, cache["cv"], dv_flat)
    grads: dict = {}
    merge_grads(grads, gq, "w_q.")
    merge_grads(grads, gk, "w_k.")
    merge_grads(grads, gv, "w_v.")
    merge_grads(grads, go, "w_o.")
    return dq, dk, dv, grads


def local_cross_attention_branch(cfg: AttentionConfig, params: QkvoParams,
                                 x: TokenGrid, y: TokenGrid):
    _check_pair(x, y)
    idx = neighbor_indices(x.h, x.w, cfg.radius)
    pr, cr = _local_direction(cfg, params, x, y, idx)
    pd, cd = _local_direction(cfg, params, y, x, idx)
    return pr, pd, {"r": cr, "d": cd, "idx": idx, "cfg": cfg}


def local_cross_attention_branch_backward(params: QkvoParams, caches: dict,
                                          dpr: Tensor, dpd: Tensor):
    cfg, idx = caches["cfg"], caches["idx"]
    dqr, dkr, dvr, g1 = _local_direction_backward(cfg, params, caches["r"], idx, dpr)
    dqd, dkd, dvd, g2 = _local_direction_backward(cfg, params, caches["d"], idx, dpd)
    dx = dqr + dkd + dvd
    dy = dqd + dkr + dvr
    grads: dict = {}
    merge_grads(grads, g1, "")
    merge_grads(grads, g2, "")
    return dx, dy, grads


def local_cross_attention_forward(cfg: AttentionConfig, params: QkvoParams,
                                  x: TokenGrid, y: TokenGrid):
    pr, pd, caches = local_cross_attention_branch(cfg, params, x, y)
    return x.with_feat(pr + x.feat), y.with_feat(pd + y.feat), caches


def local_cross_attention(cfg: AttentionConfig, params: QkvoParams,
                          x: TokenGrid, y: TokenGrid):
    yr, yd, _ = local_cross_attention_forward(cfg, params, x, y)
    return yr, yd


def local_cross_attention_backward(params: QkvoParams, caches: dict,
                                   dyr: Tensor, dyd: Tensor):
    dx, dy, grads = local_cross_attention_branch_backward(params, caches, dyr, dyd)
    return dyr + dx, dyd + dy, grads


# ---------------------------------------------------------------------------
# Pixel-wise cross-attention
# ---------------------------------------------------------------------------


def _broadcast_noise(noise: Tensor, n: int) -> np.ndarray:
    return np.broadcast_to(noise.data[None, :, :], (n, *noise.shape)).copy()


def _pixelwise_direction(cfg: AttentionConfig, params: PixelwiseParams,
                         src: TokenGrid, other: TokenGrid,
                         noise_k: Tensor | None, noise_v: Tensor | None):
    q, cq = linear_forward(params.proj.w_q, src.feat)
    k, ck = linear_forward(params.proj.w_k, other.feat)
    v, cv = linear_forward(params.proj.w_v, other.feat)
    n = src.n
    k_set = k.data[:, None, :]
    v_set = v.data[:, None, :]
    if noise_k is not None:
        k_set = np.concatenate([_broadcast_noise(noise_k, n), k_set], axis=1)
        v_set = np.concatenate([_broadcast_noise(noise_v, n), v_set], axis=1)
    o, core = _per_key_core(cfg, q, Tensor(k_set, q.precision),
                            Tensor(v_set, q.precision), None)
    proj, co = linear_forward(params.proj.w_o, o)
    cache = {"cq": cq, "ck": ck, "cv": cv, "core": core, "co": co,
             "has_noise": noise_k is not None}
    return proj, cache


def _pixelwise_direction_backward(cfg, params, cache, dproj: Tensor, n_noise: int):
    do_in, go = linear_backward(params.proj.w_o, cache["co"], dproj)
    dq_core, dk_set, dv_set = _per_key_core_backward(cache["core"], do_in)
    if cache["has_noise"]:
        dnk = Tensor(dk_set.data[:, :n_noise, :].sum(axis=0), dproj.precision)
        dnv = Tensor(dv_set.data[:, :n_noise, :].sum(axis=0), dproj.precision)
        dk_tok = Tensor(dk_set.data[:, n_noise, :], dproj.precision)
        dv_tok = Tensor(dv_set.data[:, n_noise, :], dproj.precision)
    else:
        dnk = dnv = None
        dk_tok = Tensor(dk_set.data[:, 0, :], dproj.precision)
        dv_tok = Tensor(dv_set.data[:, 0, :], dproj.precision)
    dq, gq = linear_backward(params.proj.w_q, cache["cq"], dq_core)
    dk, gk = linear_backward(params.proj.w_k, cache["ck"], dk_tok)
    dv, gv = linear_backward(params.proj.w_v, cache["cv"], dv_tok)
    grads: dict = {}
    merge_grads(grads, gq, "proj.w_q.")
    merge_grads(grads, gk, "proj.w_k.")
    merge_grads(grads, gv, "proj.w_v.")
    merge_grads(grads, go, "proj.w_o.")
    return dq, dk, dv, dnk, dnv, grads


def pixelwise_cross_attention_branch(cfg: AttentionConfig, params: PixelwiseParams,
                                     x: TokenGrid, y: TokenGrid):
    """Each query attends only to the other modality's token at its own
    location, plus any noise tokens: strict per-pixel receptive field."""
    _check_pair(x, y)
    pr, cr = _pixelwise_direction(cfg, params, x, y,
                                  params.noise_k_depth, params.noise_v_depth)
    pd, cd = _pixelwise_direction(cfg, params, y, x,
                                  params.noise_k_rgb, params.noise_v_rgb)
    return pr, pd, {"r": cr, "d": cd}


def pixelwise_cross_attention_branch_backward(cfg: AttentionConfig,
                                              params: PixelwiseParams,
                                              caches: dict, dpr: Tensor, dpd: Tensor):
    nn_ = cfg.n_noise
    dqr, dkd, dvd, dnk_d, dnv_d, g1 = _pixelwise_direction_backward(
        cfg, params, caches["r"], dpr, nn_)
    dqd, dkr, dvr, dnk_r, dnv_r, g2 = _pixelwise_direction_backward(
        cfg, params, caches["d"], dpd, nn_)
    dx = dqr + dkr + dvr
    dy = dqd + dkd + dvd
    grads: dict = {}
    merge_grads(grads, g1, "")
    merge_grads(grads, g2, "")
    if dnk_d is not None:
        grads["noise_k_depth"] = dnk_d
        grads["noise_v_depth"] = dnv_d
        grads["noise_k_rgb"] = dnk_r
        grads["noise_v_rgb"] = dnv_r
    return dx, dy, grads


def pixelwise_cross_attention_forward(cfg: AttentionConfig, params: PixelwiseParams,
                                      x: TokenGrid, y: TokenGrid):
    pr, pd, caches = pixelwise_cross_attention_branch(cfg, params, x, y)
    return x.with_feat(pr + x.feat), y.with_feat(pd + y.feat), caches


def pixelwise_cross_attention(cfg: AttentionConfig, params: PixelwiseParams,
                              x: TokenGrid, y: TokenGrid):
    yr, yd, _ = pixelwise_cross_attention_forward(cfg, params, x, y)
    return yr, yd


def pixelwise_cross_attention_backward(cfg: AttentionConfig, params: PixelwiseParams,
                                       caches: dict, dyr: Tensor, dyd: Tensor):
    dx, dy, grads = pixelwise_cross_attention_branch_backward(cfg, params, caches, dyr, dyd)
    return dyr + dx, dyd + dy, grads
