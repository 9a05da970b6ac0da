"""Differential-shared inter-modal fusion with pixel-aware cross-attention.

Pipeline, per token (all stages strictly per-pixel):

1. Relation discriminators score each pixel: a difference score for each
   modality (two-layer MLP on the signed feature difference, one MLP per
   direction) and a single shared similarity score (MLP on the RGB-first
   concatenation). Scores land in [0, 1]; the softmax variant normalizes
   each pixel's score vector over channels.
2. A shared linear stage produces Q/K/V projections of both modalities
   (``lt_q``/``lt_k``/``lt_v``). Keys of each modality are built from its
   own ``lt_q`` output, gated elementwise by the difference score (scaled
   by a learnable per-channel factor alpha) and by the similarity score
   (scaled by beta): a two-entry per-pixel key set.
3. Values pair a differential entry (own minus other projection) with the
   complementary modality's projection, ordered like the keys.
4. Learnable noise tokens are prepended to every pixel's key/value set,
   then ``w_k``/``w_v`` project all entries; queries are ``w_q`` of the
   raw branch features.
5. Pixel-aware cross-attention: each RGB query attends over the depth
   branch's key set at the same location and retrieves from the RGB-side
   value set (whose "shared" entry is the depth projection), and vice
   versa, followed by a zero-initialized output projection and the
   residual. Attention never crosses spatial locations.

The key/value pairing in step 5 is fixed by the reduction requirement:
with the difference branch ablated, no noise, and identity ``lt``
projections the module must collapse exactly to single-key pixel-wise
cross-attention (keys -> lt_q of the other branch, value -> the other
branch's features).

Ablation switches mirror the architecture study: ``enable_difference``
and ``enable_similarity`` drop the corresponding key/value entry (with
both off, a single ungated key/value entry remains and the module is
plain pixel-wise cross-attention); ``enable_learning_factor`` freezes
alpha/beta at 1 and removes them from the parameter set;
``discriminator_variant`` switches the MLPs' final activation between
row softmax and elementwise sigmoid.

``lt_k`` is part of the projection stage and the checkpoint format but is
not consumed by the key construction (keys come from ``lt_q``, as the
mechanism defines them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, TokenGrid, _per_key_core, _per_key_core_backward
from .errors import ConfigError, DimensionError, StateError
from .nn import (
    Linear,
    Mlp2,
    ParamModule,
    linear_backward,
    linear_forward,
    merge_grads,
    mlp2_backward,
    mlp2_forward,
)
from .tensor import Tensor, RngState, concat, meter_report, ones, reshape

DISCRIMINATOR_VARIANTS = ("mlp2_softmax", "mlp2_sigmoid")


@dataclass(frozen=True)
class DsimConfig:
    dim: int
    heads: int = 8
    n_noise: int = 1
    enable_difference: bool = True
    enable_similarity: bool = True
    enable_learning_factor: bool = True
    discriminator_variant: str = "mlp2_softmax"

    def __post_init__(self):
        if self.dim <= 0 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.n_noise < 0:
            raise ConfigError(f"n_noise must be >= 0, got {self.n_noise}")
        if self.discriminator_variant not in DISCRIMINATOR_VARIANTS:
            raise ConfigError(
                f"discriminator_variant must be one of {DISCRIMINATOR_VARIANTS}"
            )

    @property
    def n_entries(self) -> int:
        """Constructed key/value entries per pixel (before noise)."""
        return max(1, int(self.enable_difference) + int(self.enable_similarity))

    @property
    def keys_per_pixel(self) -> int:
        return self.n_noise + self.n_entries

    @property
    def final_activation(self) -> str:
        return "softmax" if self.discriminator_variant == "mlp2_softmax" else "sigmoid"

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(dim=self.dim, heads=self.heads, n_noise=self.n_noise)


class RelationDiscriminators(ParamModule):
    """The two difference discriminators and the shared similarity one."""

    child_names = ("f_d_rgb", "f_d_depth", "f_s")

    def __init__(self, f_d_rgb: Mlp2 | None, f_d_depth: Mlp2 | None, f_s: Mlp2 | None):
        self.f_d_rgb = f_d_rgb
        self.f_d_depth = f_d_depth
        self.f_s = f_s


class DsimParams(ParamModule):
    param_names = (
        "alpha_rgb", "beta_rgb", "alpha_depth", "beta_depth",
        "noise_k_rgb", "noise_v_rgb", "noise_k_depth", "noise_v_depth",
    )
    child_names = ("disc", "lt_q", "lt_k", "lt_v", "w_q", "w_k", "w_v", "w_o")

    def __init__(self, cfg: DsimConfig, disc: RelationDiscriminators,
                 lt_q: Linear, lt_k: Linear, lt_v: Linear,
                 w_q: Linear, w_k: Linear, w_v: Linear, w_o: Linear,
                 alpha_rgb=None, beta_rgb=None, alpha_depth=None, beta_depth=None,
                 noise_k_rgb=None, noise_v_rgb=None,
                 noise_k_depth=None, noise_v_depth=None):
        self.cfg = cfg
        self.disc = disc
        self.lt_q = lt_q
        self.lt_k = lt_k
        self.lt_v = lt_v
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o
        self.alpha_rgb = alpha_rgb
        self.beta_rgb = beta_rgb
        self.alpha_depth = alpha_depth
        self.beta_depth = beta_depth
        self.noise_k_rgb = noise_k_rgb
        self.noise_v_rgb = noise_v_rgb
        self.noise_k_depth = noise_k_depth
        self.noise_v_depth = noise_v_depth

    @property
    def heads(self) -> int:
        return self.cfg.heads

    @staticmethod
    def init(rng: RngState, cfg: DsimConfig, precision: str = "single") -> "DsimParams":
        d = cfg.dim
        act = cfg.final_activation
        f_d_rgb = f_d_depth = f_s = None
        if cfg.enable_difference:
            f_d_rgb = Mlp2.init(rng, d, d, d, act, precision)
            f_d_depth = Mlp2.init(rng, d, d, d, act, precision)
        if cfg.enable_similarity:
            f_s = Mlp2.init(rng, 2 * d, d, d, act, precision)
        disc = RelationDiscriminators(f_d_rgb, f_d_depth, f_s)
        lin = lambda: Linear.init(rng, d, d, precision=precision)
        factors = {}
        if cfg.enable_learning_factor:
            if cfg.enable_difference:
                factors["alpha_rgb"] = ones((d,), precision)
                factors["alpha_depth"] = ones((d,), precision)
            if cfg.enable_similarity:
                factors["beta_rgb"] = ones((d,), precision)
                factors["beta_depth"] = ones((d,), precision)
        noise = {}
        if cfg.n_noise > 0:
            for name in ("noise_k_rgb", "noise_v_rgb", "noise_k_depth", "noise_v_depth"):
                noise[name] = rng.trunc_normal((cfg.n_noise, d), std=0.02,
                                               precision=precision)
        return DsimParams(
            cfg, disc, lin(), lin(), lin(), lin(), lin(), lin(),
            Linear.init(rng, d, d, precision=precision, zero=True),
            **factors, **noise,
        )


# ---------------------------------------------------------------------------
# Stage 1: relation scores
# ---------------------------------------------------------------------------


def _relation_scores_fwd(params: DsimParams, xr: Tensor, xd: Tensor):
    if xr.shape != xd.shape:
        raise DimensionError(f"relation scores: shapes {xr.shape} vs {xd.shape}")
    cfg = params.cfg
    cache: dict = {}
    d_r = d_d = s = None
    if cfg.enable_difference:
        diff_r = xr - xd
        diff_d = xd - xr
        d_r, cache["c_dr"] = mlp2_forward(params.disc.f_d_rgb, diff_r)
        d_d, cache["c_dd"] = mlp2_forward(params.disc.f_d_depth, diff_d)
    if cfg.enable_similarity:
        cat = concat([xr, xd], axis=1)
        s, cache["c_s"] = mlp2_forward(params.disc.f_s, cat)
    return d_r, d_d, s, cache


def _relation_scores_bwd(params: DsimParams, cache: dict,
                         dd_r: Tensor | None, dd_d: Tensor | None, ds: Tensor | None,
                         dxr: np.ndarray, dxd: np.ndarray, grads: dict):
    cfg = params.cfg
    if cfg.enable_similarity and ds is not None:
        dcat, g = mlp2_backward(params.disc.f_s, cache["c_s"], ds)
        merge_grads(grads, g, "disc.f_s.")
        d = dxr.shape[1]
        dxr += dcat.data[:, :d]
        dxd += dcat.data[:, d:]
    if cfg.enable_difference and dd_r is not None:
        ddiff_r, g1 = mlp2_backward(params.disc.f_d_rgb, cache["c_dr"], dd_r)
        ddiff_d, g2 = mlp2_backward(params.disc.f_d_depth, cache["c_dd"], dd_d)
        merge_grads(grads, g1, "disc.f_d_rgb.")
        merge_grads(grads, g2, "disc.f_d_depth.")
        dxr += ddiff_r.data - ddiff_d.data
        dxd += ddiff_d.data - ddiff_r.data


def relation_scores(params: DsimParams, xr: TokenGrid, xd: TokenGrid):
    """Difference scores for each modality and the shared similarity score.

    Returns (D_r, D_d, S); entries are None for disabled branches.
    """
    d_r, d_d, s, _ = _relation_scores_fwd(params, xr.feat, xd.feat)
    return d_r, d_d, s


# ---------------------------------------------------------------------------
# Stage 2+3: gated keys and differential values
# ---------------------------------------------------------------------------


def _gate_entry(q_lt: Tensor, score: Tensor, factor: Tensor | None):
    """factor (*) q_lt (*) score, with per-channel factor broadcast over rows."""
    if factor is not None:
        out = factor.data * q_lt.data * score.data
        meter_report(muls=2 * q_lt.size)
    else:
        out = q_lt.data * score.data
        meter_report(muls=q_lt.size)
    return out


def _gate_entry_bwd(g: np.ndarray, q_lt: Tensor, score: Tensor,
                    factor: Tensor | None):
    """Returns (d_factor or None, d_q_lt, d_score)."""
    if factor is not None:
        dfact = (g * q_lt.data * score.data).sum(axis=0)
        dq = g * factor.data * score.data
        dsc = g * factor.data * q_lt.data
        return dfact, dq, dsc
    return None, g * score.data, g * q_lt.data


def _build_keys_fwd(params: DsimParams, q_lt_r: Tensor, q_lt_d: Tensor,
                    d_r, d_d, s):
    """Per-pixel key sets [N, E, d] for both modalities (noise not included)."""
    cfg = params.cfg
    ent_r, ent_d = [], []
    if cfg.enable_difference:
        ent_r.append(_gate_entry(q_lt_r, d_r, params.alpha_rgb))
        ent_d.append(_gate_entry(q_lt_d, d_d, params.alpha_depth))
    if cfg.enable_similarity:
        ent_r.append(_gate_entry(q_lt_r, s, params.beta_rgb))
        ent_d.append(_gate_entry(q_lt_d, s, params.beta_depth))
    if not ent_r:
        ent_r.append(q_lt_r.data)
        ent_d.append(q_lt_d.data)
    k_r = Tensor(np.stack(ent_r, axis=1), q_lt_r.precision)
    k_d = Tensor(np.stack(ent_d, axis=1), q_lt_d.precision)
    return k_r, k_d


def build_keys(params: DsimParams, q_lt_r: Tensor, q_lt_d: Tensor,
               d_r: Tensor | None, d_d: Tensor | None, s: Tensor | None):
    if q_lt_r.shape != q_lt_d.shape:
        raise DimensionError(f"build_keys: shapes {q_lt_r.shape} vs {q_lt_d.shape}")
    for name, t in (("d_r", d_r), ("d_d", d_d), ("s", s)):
        if t is not None and t.shape != q_lt_r.shape:
            raise DimensionError(
                f"build_keys: score {name} shape {t.shape} != {q_lt_r.shape}"
            )
    return _build_keys_fwd(params, q_lt_r, q_lt_d, d_r, d_d, s)


def _build_values_fwd(params: DsimParams, v_lt_r: Tensor, v_lt_d: Tensor):
    """Value sets [N, E, d]: differential entry first, then the
    complementary modality's projection as the shared entry."""
    cfg = params.cfg
    ent_r, ent_d = [], []
    if cfg.enable_difference:
        ent_r.append((v_lt_r - v_lt_d).data)
        ent_d.append((v_lt_d - v_lt_r).data)
    if cfg.enable_similarity or not ent_r:
        ent_r.append(v_lt_d.data)
        ent_d.append(v_lt_r.data)
    v_r = Tensor(np.stack(ent_r, axis=1), v_lt_r.precision)
    v_d = Tensor(np.stack(ent_d, axis=1), v_lt_d.precision)
    return v_r, v_d


def build_values(params: DsimParams, v_lt_r: Tensor, v_lt_d: Tensor):
    if v_lt_r.shape != v_lt_d.shape:
        raise DimensionError(f"build_values: shapes {v_lt_r.shape} vs {v_lt_d.shape}")
    return _build_values_fwd(params, v_lt_r, v_lt_d)


# ---------------------------------------------------------------------------
# Stage 4: noise injection and projections
# ---------------------------------------------------------------------------


def _project_set(layer: Linear, entries: Tensor):
    """Apply a linear layer along channels of a [N, L, d] entry set."""
    n, L, d = entries.shape
    flat = reshape(entries, (n * L, d))
    out, c = linear_forward(layer, flat)
    return reshape(out, (n, L, layer.d_out)), c


def _assemble_fwd(params: DsimParams, xr: Tensor, xd: Tensor,
                  k_r: Tensor, k_d: Tensor, v_r: Tensor, v_d: Tensor):
    cfg = params.cfg
    n = xr.shape[0]
    cache: dict = {"n": n}
    q_r, cache["cq_r"] = linear_forward(params.w_q, xr)
    q_d, cache["cq_d"] = linear_forward(params.w_q, xd)

    def with_noise(entries: Tensor, noise: Tensor | None) -> Tensor:
        if noise is None:
            return entries
        bc = np.broadcast_to(noise.data[None, :, :], (n, *noise.shape))
        return Tensor(np.concatenate([bc, entries.data], axis=1), entries.precision)

    kfull_r = with_noise(k_r, params.noise_k_rgb)
    kfull_d = with_noise(k_d, params.noise_k_depth)
    vfull_r = with_noise(v_r, params.noise_v_rgb)
    vfull_d = with_noise(v_d, params.noise_v_depth)
    kp_r, cache["ck_r"] = _project_set(params.w_k, kfull_r)
    kp_d, cache["ck_d"] = _project_set(params.w_k, kfull_d)
    vp_r, cache["cv_r"] = _project_set(params.w_v, vfull_r)
    vp_d, cache["cv_d"] = _project_set(params.w_v, vfull_d)
    return (q_r, kp_r, vp_r), (q_d, kp_d, vp_d), cache


def assemble_qkv(params: DsimParams, xr: Tensor, xd: Tensor,
                 k_r: Tensor, k_d: Tensor, v_r: Tensor, v_d: Tensor):
    """Prepend noise tokens and apply the final Q/K/V projections.

    Returns ((Q'_r, K'_r, V'_r), (Q'_d, K'_d, V'_d)); per-pixel key extent
    becomes n_noise + E.
    """
    if k_r.shape != k_d.shape or v_r.shape != v_d.shape or k_r.shape != v_r.shape:
        raise DimensionError(
            f"assemble_qkv: entry sets disagree {k_r.shape}/{k_d.shape}/{v_r.shape}/{v_d.shape}"
        )
    out_r, out_d, _ = _assemble_fwd(params, xr, xd, k_r, k_d, v_r, v_d)
    return out_r, out_d


def _project_set_bwd(layer: Linear, cache, dset: Tensor):
    n, L, d = dset.shape
    dflat, g = linear_backward(layer, cache, reshape(dset, (n * L, d)))
    return reshape(dflat, (n, L, layer.d_in)), g


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------


def dsim_branch_forward(params: DsimParams, xr: Tensor, xd: Tensor):
    """Pre-residual branch outputs (proj_r, proj_d) plus the backward cache."""
    if xr.shape != xd.shape:
        raise DimensionError(f"dsim: modality shapes differ {xr.shape} vs {xd.shape}")
    cfg = params.cfg
    cache: dict = {"xr": xr, "xd": xd}
    d_r, d_d, s, cache["scores"] = _relation_scores_fwd(params, xr, xd)
    cache["d_r"], cache["d_d"], cache["s"] = d_r, d_d, s
    q_lt_r, cache["cql_r"] = linear_forward(params.lt_q, xr)
    q_lt_d, cache["cql_d"] = linear_forward(params.lt_q, xd)
    v_lt_r, cache["cvl_r"] = linear_forward(params.lt_v, xr)
    v_lt_d, cache["cvl_d"] = linear_forward(params.lt_v, xd)
    cache["q_lt_r"], cache["q_lt_d"] = q_lt_r, q_lt_d
    k_r, k_d = _build_keys_fwd(params, q_lt_r, q_lt_d, d_r, d_d, s)
    v_r, v_d = _build_values_fwd(params, v_lt_r, v_lt_d)
    (q_r, kp_r, vp_r), (q_d, kp_d, vp_d), asm = _assemble_fwd(
        params, xr, xd, k_r, k_d, v_r, v_d)
    cache["asm"] = asm
    att_cfg = cfg.attention_config()
    # queries attend the other branch's keys, retrieve from their own
    # value set (whose shared entry is the other branch's projection)
    o_r, cache["core_r"] = _per_key_core(att_cfg, q_r, kp_d, vp_r, None)
    o_d, cache["core_d"] = _per_key_core(att_cfg, q_d, kp_r, vp_d, None)
    proj_r, cache["co_r"] = linear_forward(params.w_o, o_r)
    proj_d, cache["co_d"] = linear_forward(params.w_o, o_d)
    return proj_r, proj_d, cache


def paca_forward(params: DsimParams, xr: TokenGrid, xd: TokenGrid):
    """Pixel-aware cross-attention outputs with residuals (grids in, grids out)."""
    if (xr.h, xr.w) != (xd.h, xd.w):
        raise DimensionError(
            f"paca: geometries differ {xr.h}x{xr.w} vs {xd.h}x{xd.w}"
        )
    proj_r, proj_d, cache = dsim_branch_forward(params, xr.feat, xd.feat)
    return xr.with_feat(proj_r + xr.feat), xd.with_feat(proj_d + xd.feat), cache


def dsim_branch_backward(params: DsimParams, cache: dict, dpr: Tensor, dpd: Tensor):
    """Backward of dsim_branch_forward: input cotangents + parameter grads."""
    if cache is None or "core_r" not in cache:
        raise StateError("dsim backward called without a forward cache")
    cfg = params.cfg
    grads: dict = {}
    prec = dpr.precision
    do_r, g = linear_backward(params.w_o, cache["co_r"], dpr)
    merge_grads(grads, g, "w_o.")
    do_d, g = linear_backward(params.w_o, cache["co_d"], dpd)
    merge_grads(grads, g, "w_o.")
    dq_r, dkp_d, dvp_r = _per_key_core_backward(cache["core_r"], do_r)
    dq_d, dkp_r, dvp_d = _per_key_core_backward(cache["core_d"], do_d)

    asm = cache["asm"]
    dxr = np.zeros_like(cache["xr"].data)
    dxd = np.zeros_like(cache["xd"].data)

    # w_q
    dx, g = linear_backward(params.w_q, asm["cq_r"], dq_r)
    merge_grads(grads, g, "w_q.")
    dxr += dx.data
    dx, g = linear_backward(params.w_q, asm["cq_d"], dq_d)
    merge_grads(grads, g, "w_q.")
    dxd += dx.data

    # w_k / w_v over entry sets, then strip the noise rows
    nn_ = cfg.n_noise

    def strip_noise(dfull: Tensor, noise_name: str):
        if nn_ == 0:
            return dfull
        dnoise = Tensor(dfull.data[:, :nn_, :].sum(axis=0), prec)
        merge_grads(grads, {noise_name: dnoise}, "")
        return Tensor(dfull.data[:, nn_:, :], prec)

    dkfull_r, g = _project_set_bwd(params.w_k, asm["ck_r"], dkp_r)
    merge_grads(grads, g, "w_k.")
    dk_r = strip_noise(dkfull_r, "noise_k_rgb")
    dkfull_d, g = _project_set_bwd(params.w_k, asm["ck_d"], dkp_d)
    merge_grads(grads, g, "w_k.")
    dk_d = strip_noise(dkfull_d, "noise_k_depth")
    dvfull_r, g = _project_set_bwd(params.w_v, asm["cv_r"], dvp_r)
    merge_grads(grads, g, "w_v.")
    dv_r = strip_noise(dvfull_r, "noise_v_rgb")
    dvfull_d, g = _project_set_bwd(params.w_v, asm["cv_d"], dvp_d)
    merge_grads(grads, g, "w_v.")
    dv_d = strip_noise(dvfull_d, "noise_v_depth")

    # value entries -> lt_v outputs
    dvlt_r = np.zeros_like(dxr)
    dvlt_d = np.zeros_like(dxd)
    e = 0
    if cfg.enable_difference:
        gd_r = dv_r.data[:, e, :]
        gd_d = dv_d.data[:, e, :]
        dvlt_r += gd_r - gd_d
        dvlt_d += gd_d - gd_r
        e += 1
    if cfg.enable_similarity or e == 0:
        dvlt_d += dv_r.data[:, e, :]
        dvlt_r += dv_d.data[:, e, :]

    # key entries -> lt_q outputs, scores, factors
    q_lt_r, q_lt_d = cache["q_lt_r"], cache["q_lt_d"]
    d_r, d_d, s = cache["d_r"], cache["d_d"], cache["s"]
    dqlt_r = np.zeros_like(dxr)
    dqlt_d = np.zeros_like(dxd)
    dd_r = dd_d = ds = None
    e = 0
    if cfg.enable_difference:
        df, dq, dsc = _gate_entry_bwd(dk_r.data[:, e, :], q_lt_r, d_r, params.alpha_rgb)
        if df is not None:
            merge_grads(grads, {"alpha_rgb": Tensor(df, prec)}, "")
        dqlt_r += dq
        dd_r = Tensor(dsc, prec)
        df, dq, dsc = _gate_entry_bwd(dk_d.data[:, e, :], q_lt_d, d_d, params.alpha_depth)
        if df is not None:
            merge_grads(grads, {"alpha_depth": Tensor(df, prec)}, "")
        dqlt_d += dq
        dd_d = Tensor(dsc, prec)
        e += 1
    if cfg.enable_similarity:
        ds_acc = np.zeros_like(dxr)
        df, dq, dsc = _gate_entry_bwd(dk_r.data[:, e, :], q_lt_r, s, params.beta_rgb)
        if df is not None:
            merge_grads(grads, {"beta_rgb": Tensor(df, prec)}, "")
        dqlt_r += dq
        ds_acc += dsc
        df, dq, dsc = _gate_entry_bwd(dk_d.data[:, e, :], q_lt_d, s, params.beta_depth)
        if df is not None:
            merge_grads(grads, {"beta_depth": Tensor(df, prec)}, "")
        dqlt_d += dq
        ds_acc += dsc
        ds = Tensor(ds_acc, prec)
    if not cfg.enable_difference and not cfg.enable_similarity:
        dqlt_r += dk_r.data[:, 0, :]
        dqlt_d += dk_d.data[:, 0, :]

    # lt projections back to inputs
    dx, g = linear_backward(params.lt_q, cache["cql_r"], Tensor(dqlt_r, prec))
    merge_grads(grads, g, "lt_q.")
    dxr += dx.data
    dx, g = linear_backward(params.lt_q, cache["cql_d"], Tensor(dqlt_d, prec))
    merge_grads(grads, g, "lt_q.")
    dxd += dx.data
    dx, g = linear_backward(params.lt_v, cache["cvl_r"], Tensor(dvlt_r, prec))
    merge_grads(grads, g, "lt_v.")
    dxr += dx.data
    dx, g = linear_backward(params.lt_v, cache["cvl_d"], Tensor(dvlt_d, prec))
    merge_grads(grads, g, "lt_v.")
    dxd += dx.data

    # discriminators back to inputs
    _relation_scores_bwd(params, cache["scores"], dd_r, dd_d, ds, dxr, dxd, grads)
    return Tensor(dxr, prec), Tensor(dxd, prec), grads


def dsim_backward(params: DsimParams, cache: dict, dyr: Tensor, dyd: Tensor):
    """Backward of paca_forward (includes the residual connections)."""
    dxr, dxd, grads = dsim_branch_backward(params, cache, dyr, dyd)
    return dyr + dxr, dyd + dxd, grads
