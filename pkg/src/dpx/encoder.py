"""Dual-branch hierarchical encoder built from intra/inter interaction blocks.

Each stage embeds (stage 1) or merges (stages 2-4) the token grid with an
overlapped strided projection, then applies a run of blocks. Inside a
block, only the layer norms are modality-specific; the self-attention,
the inter-modal module, and the feed-forward net are single parameter
sets applied to both branches. Block wiring (pre-norm residuals):

    s = x + drop_path(SA(LN1(x)))              per modality, shared SA
    t = s + drop_path(Inter(LN2(s_r), LN2(s_d)))   bimodal, optional
    u = t + drop_path(FFN(t))                  per modality, shared FFN

The inter-modal module is pluggable so cost/quality comparisons vary only
the mechanism: full, shifted-window, local, or pixel-wise cross-attention,
the differential-shared module, or nothing (baseline). Shifted-window
blocks alternate the partition offset with block depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as att
from .attention import AttentionConfig, TokenGrid, QkvoParams, PixelwiseParams
from .dsim import DsimConfig, DsimParams, dsim_branch_forward, dsim_branch_backward
from .errors import ConfigError, DimensionError
from .nn import (
    DropPathConfig,
    LayerNorm,
    Linear,
    Mlp2,
    ParamModule,
    drop_path_backward,
    drop_path_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    merge_grads,
    mlp2_backward,
    mlp2_forward,
)
from .tensor import Tensor, RngState

MODEL_VARIANTS = ("baseline", "ca", "swca", "lca", "pwca", "dsim")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchSpec:
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    patch: PatchSpec

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"stage depth must be >= 1, got {self.depth}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"stage dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple[StageConfig, ...]
    variant: str = "dsim"
    window: int = 7
    radius: int = 1
    n_noise: int = 1
    ffn_ratio: int = 4
    drop_path: float = 0.0
    enable_paca: bool = True
    enable_similarity: bool = True
    enable_difference: bool = True
    enable_learning_factor: bool = True
    discriminator_variant: str = "mlp2_softmax"

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"encoder needs exactly 4 stages, got {len(self.stages)}")
        dims = [s.dim for s in self.stages]
        if any(a > b for a, b in zip(dims, dims[1:])):
            raise ConfigError(f"stage dims must be non-decreasing, got {dims}")
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {MODEL_VARIANTS}"
            )

    @property
    def total_depth(self) -> int:
        return sum(s.depth for s in self.stages)

    def dsim_config(self, stage: StageConfig) -> DsimConfig:
        return DsimConfig(
            dim=stage.dim, heads=stage.heads, n_noise=self.n_noise,
            enable_difference=self.enable_difference,
            enable_similarity=self.enable_similarity,
            enable_learning_factor=self.enable_learning_factor,
            discriminator_variant=self.discriminator_variant,
        )

    def attention_config(self, stage: StageConfig) -> AttentionConfig:
        return AttentionConfig(
            dim=stage.dim, heads=stage.heads, window=self.window,
            radius=self.radius, n_noise=self.n_noise,
        )


_MERGE = PatchSpec(3, 2, 1)

PRESETS = {
    # criterion defaults: stage depths 3/6/4/3 with 8 heads per stage
    "default": dict(
        depths=(3, 6, 4, 3), dims=(8, 16, 32, 64), heads=(8, 8, 8, 8),
        first_patch=PatchSpec(7, 4, 3),
    ),
    # desk-scale training config: finer stage-1 stride keeps the decoder's
    # logit grid at H/2 so small scenes can be overfit to tight boundaries
    "toy": dict(
        depths=(1, 1, 1, 1), dims=(8, 16, 32, 64), heads=(2, 2, 4, 8),
        first_patch=PatchSpec(3, 2, 1),
    ),
    "mit-b3-like": dict(
        depths=(3, 6, 4, 3), dims=(64, 128, 320, 512), heads=(8, 8, 8, 8),
        first_patch=PatchSpec(7, 4, 3),
    ),
    "mit-b5-like": dict(
        depths=(3, 6, 40, 3), dims=(64, 128, 320, 512), heads=(8, 8, 8, 8),
        first_patch=PatchSpec(7, 4, 3),
    ),
}


def preset_config(name: str = "default", **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    p = PRESETS[name]
    stages = tuple(
        StageConfig(depth, dim, heads, p["first_patch"] if i == 0 else _MERGE)
        for i, (depth, dim, heads) in enumerate(zip(p["depths"], p["dims"], p["heads"]))
    )
    return EncoderConfig(stages=stages, **overrides)


def stage_geometries(cfg: EncoderConfig, h: int, w: int) -> list[tuple[int, int]]:
    """Token-grid geometry after each stage's embed/merge; raises ConfigError
    naming the stage when the incoming geometry is not divisible by its stride."""
    geoms = []
    for i, st in enumerate(cfg.stages):
        k, s, p = st.patch.kernel, st.patch.stride, st.patch.padding
        if h % s != 0 or w % s != 0:
            raise ConfigError(
                f"stage {i + 1}: geometry {h}x{w} not divisible by stride {s}"
            )
        h = (h + 2 * p - k) // s + 1
        w = (w + 2 * p - k) // s + 1
        if h < 1 or w < 1:
            raise ConfigError(f"stage {i + 1}: geometry collapsed to {h}x{w}")
        geoms.append((h, w))
    return geoms


# ---------------------------------------------------------------------------
# Overlapped patch embedding / merging
# ---------------------------------------------------------------------------


class PatchEmbed(ParamModule):
    """Strided overlapping-window linear projection of an H x W x C map."""

    child_names = ("proj",)

    def __init__(self, patch: PatchSpec, c_in: int, proj: Linear):
        self.patch = patch
        self.c_in = c_in
        self.proj = proj

    @staticmethod
    def init(rng: RngState, patch: PatchSpec, c_in: int, d: int,
             precision: str = "single") -> "PatchEmbed":
        k = patch.kernel
        return PatchEmbed(patch, c_in, Linear.init(rng, k * k * c_in, d, precision=precision))

    def out_geometry(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.patch.kernel, self.patch.stride, self.patch.padding
        if h % s != 0 or w % s != 0:
            raise ConfigError(f"patch embed: geometry {h}x{w} not divisible by stride {s}")
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"patch embed: output geometry {oh}x{ow} invalid")
        return oh, ow


def _col_indices(h: int, w: int, patch: PatchSpec) -> tuple[np.ndarray, int, int, int, int]:
    """Flattened padded-pixel index per (token, window position)."""
    k, s, p = patch.kernel, patch.stride, patch.padding
    hp, wp = h + 2 * p, w + 2 * p
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    oi = np.arange(oh) * s
    oj = np.arange(ow) * s
    di = np.arange(k)
    rows = (oi[:, None] + di[None, :])  # [oh, k]
    cols = (oj[:, None] + di[None, :])  # [ow, k]
    idx = (rows[:, None, :, None] * wp + cols[None, :, None, :])  # [oh, ow, k, k]
    return idx.reshape(oh * ow, k * k), oh, ow, hp, wp


def patch_embed_forward(embed: PatchEmbed, image: Tensor) -> tuple[TokenGrid, dict]:
    if image.ndim != 3 or image.shape[2] != embed.c_in:
        raise DimensionError(
            f"patch embed: image {image.shape} incompatible with {embed.c_in} channels"
        )
    h, w, c = image.shape
    oh, ow = embed.out_geometry(h, w)
    p = embed.patch.padding
    padded = np.pad(image.data, ((p, p), (p, p), (0, 0)))
    idx, _, _, hp, wp = _col_indices(h, w, embed.patch)
    cols = padded.reshape(hp * wp, c)[idx]  # [N, k*k, C]
    n = oh * ow
    cols2 = Tensor(cols.reshape(n, -1), image.precision)
    y, c_lin = linear_forward(embed.proj, cols2)
    cache = {"c_lin": c_lin, "idx": idx, "hw": (h, w), "hpwp": (hp, wp), "c": c}
    return TokenGrid(oh, ow, y), cache


def patch_embed_backward(embed: PatchEmbed, cache: dict, dy: Tensor):
    """Returns (d_image, grads)."""
    dcols, g = linear_backward(embed.proj, cache["c_lin"], dy)
    h, w = cache["hw"]
    hp, wp = cache["hpwp"]
    c = cache["c"]
    idx = cache["idx"]
    dpad = np.zeros((hp * wp, c), dtype=dcols.data.dtype)
    np.add.at(dpad, idx.reshape(-1), dcols.data.reshape(-1, idx.shape[1], c).reshape(-1, c))
    dpad = dpad.reshape(hp, wp, c)
    p = embed.patch.padding
    dimg = dpad[p:p + h, p:p + w, :]
    grads: dict = {}
    merge_grads(grads, g, "proj.")
    return Tensor(dimg, dy.precision), grads


def merge_forward(embed: PatchEmbed, grid: TokenGrid) -> tuple[TokenGrid, dict]:
    img = Tensor(grid.feat.data.reshape(grid.h, grid.w, grid.dim), grid.feat.precision)
    out, cache = patch_embed_forward(embed, img)
    return out, cache


def merge_backward(embed: PatchEmbed, cache: dict, dy: Tensor):
    dimg, grads = patch_embed_backward(embed, cache, dy)
    h, w, d = dimg.shape
    return Tensor(dimg.data.reshape(h * w, d), dimg.precision), grads


# ---------------------------------------------------------------------------
# Pluggable inter-modal module
# ---------------------------------------------------------------------------


class InterModule(ParamModule):
    """One cross-modal mechanism behind a uniform branch interface."""

    child_names = ("mod",)

    def __init__(self, kind: str, mod, att_cfg: AttentionConfig | None = None,
                 shifted: bool = False):
        self.kind = kind
        self.mod = mod
        self.att_cfg = att_cfg
        self.shifted = shifted

    @staticmethod
    def init(rng: RngState, kind: str, cfg: EncoderConfig, stage: StageConfig,
             precision: str = "single", shifted: bool = False) -> "InterModule":
        acfg = cfg.attention_config(stage)
        if kind == "dsim":
            return InterModule(kind, DsimParams.init(rng, cfg.dsim_config(stage), precision))
        if kind == "pwca":
            return InterModule(kind, PixelwiseParams.init(rng, acfg, precision), acfg)
        if kind in ("ca", "swca", "lca"):
            return InterModule(kind, QkvoParams.init(rng, stage.dim, precision),
                               acfg, shifted)
        raise ConfigError(f"unknown inter-modal kind {kind!r}")

    def _effective_cfg(self, h: int, w: int) -> AttentionConfig:
        if self.kind == "swca" and self.att_cfg.window > min(h, w):
            return replace(self.att_cfg, window=min(h, w))
        return self.att_cfg

    def branch(self, xr: Tensor, xd: Tensor, h: int, w: int):
        gr, gd = TokenGrid(h, w, xr), TokenGrid(h, w, xd)
        if self.kind == "dsim":
            return dsim_branch_forward(self.mod, xr, xd)
        cfg = self._effective_cfg(h, w)
        if self.kind == "ca":
            return att.cross_attention_branch(cfg, self.mod, gr, gd)
        if self.kind == "swca":
            return att.shifted_window_cross_attention_branch(cfg, self.mod, gr, gd,
                                                             self.shifted)
        if self.kind == "lca":
            return att.local_cross_attention_branch(cfg, self.mod, gr, gd)
        if self.kind == "pwca":
            return att.pixelwise_cross_attention_branch(cfg, self.mod, gr, gd)
        raise ConfigError(f"unknown inter-modal kind {self.kind!r}")

    def branch_backward(self, cache, dpr: Tensor, dpd: Tensor, h: int, w: int):
        if self.kind == "dsim":
            dxr, dxd, g = dsim_branch_backward(self.mod, cache, dpr, dpd)
        elif self.kind == "ca":
            dxr, dxd, g = att.cross_attention_branch_backward(self.mod, cache, dpr, dpd)
        elif self.kind == "swca":
            dxr, dxd, g = att.shifted_window_cross_attention_branch_backward(
                self.mod, cache, dpr, dpd)
        elif self.kind == "lca":
            dxr, dxd, g = att.local_cross_attention_branch_backward(self.mod, cache, dpr, dpd)
        elif self.kind == "pwca":
            dxr, dxd, g = att.pixelwise_cross_attention_branch_backward(
                self._effective_cfg(h, w), self.mod, cache, dpr, dpd)
        else:
            raise ConfigError(f"unknown inter-modal kind {self.kind!r}")
        grads: dict = {}
        merge_grads(grads, g, "mod.")
        return dxr, dxd, grads


# ---------------------------------------------------------------------------
# IIMIB block
# ---------------------------------------------------------------------------


class IimibBlock(ParamModule):
    """Intra/inter interaction block; layer norms are per-modality, the
    attention / inter-modal / feed-forward parameters are shared."""

    child_names = ("ln_rgb_1", "ln_depth_1", "ln_rgb_2", "ln_depth_2",
                   "intra", "inter", "ffn")

    def __init__(self, att_cfg: AttentionConfig, ln_rgb_1, ln_depth_1,
                 ln_rgb_2, ln_depth_2, intra: QkvoParams,
                 inter: InterModule | None, ffn: Mlp2, drop_rate: float = 0.0):
        self.att_cfg = att_cfg
        self.ln_rgb_1 = ln_rgb_1
        self.ln_depth_1 = ln_depth_1
        self.ln_rgb_2 = ln_rgb_2
        self.ln_depth_2 = ln_depth_2
        self.intra = intra
        self.inter = inter
        self.ffn = ffn
        self.drop_rate = drop_rate

    @staticmethod
    def init(rng: RngState, cfg: EncoderConfig, stage: StageConfig,
             block_index: int, precision: str = "single") -> "IimibBlock":
        d = stage.dim
        acfg = cfg.attention_config(stage)
        inter = None
        if cfg.enable_paca and cfg.variant != "baseline":
            inter = InterModule.init(rng, cfg.variant, cfg, stage, precision,
                                     shifted=block_index % 2 == 1)
        ln = lambda: LayerNorm.init(d, precision)
        ln2_r = ln() if inter is not None else None
        ln2_d = ln() if inter is not None else None
        ffn = Mlp2.init(rng, d, cfg.ffn_ratio * d, d, "none", precision, zero_out=True)
        return IimibBlock(acfg, ln(), ln(), ln2_r, ln2_d,
                          QkvoParams.init(rng, d, precision), inter, ffn,
                          cfg.drop_path)


def _dp(block: IimibBlock, train: bool) -> DropPathConfig:
    return DropPathConfig(block.drop_rate if train else 0.0,
                          "train" if train else "eval")


def iimib_forward(block: IimibBlock, xr: Tensor, xd: Tensor, h: int, w: int,
                  train: bool = False, rng: RngState | None = None):
    dp = _dp(block, train)
    cache: dict = {"hw": (h, w)}
    a_r, cache["c1r"] = layernorm_forward(block.ln_rgb_1, xr)
    a_d, cache["c1d"] = layernorm_forward(block.ln_depth_1, xd)
    p_r, cache["csa_r"] = att.self_attention_branch(block.att_cfg, block.intra,
                                                    TokenGrid(h, w, a_r))
    p_d, cache["csa_d"] = att.self_attention_branch(block.att_cfg, block.intra,
                                                    TokenGrid(h, w, a_d))
    p_r, cache["dp1r"] = drop_path_forward(dp, p_r, rng)
    p_d, cache["dp1d"] = drop_path_forward(dp, p_d, rng)
    s_r = xr + p_r
    s_d = xd + p_d
    if block.inter is not None:
        b_r, cache["c2r"] = layernorm_forward(block.ln_rgb_2, s_r)
        b_d, cache["c2d"] = layernorm_forward(block.ln_depth_2, s_d)
        q_r, q_d, cache["cint"] = block.inter.branch(b_r, b_d, h, w)
        q_r, cache["dp2r"] = drop_path_forward(dp, q_r, rng)
        q_d, cache["dp2d"] = drop_path_forward(dp, q_d, rng)
        t_r = s_r + q_r
        t_d = s_d + q_d
    else:
        t_r, t_d = s_r, s_d
    f_r, cache["cfr"] = mlp2_forward(block.ffn, t_r)
    f_d, cache["cfd"] = mlp2_forward(block.ffn, t_d)
    f_r, cache["dp3r"] = drop_path_forward(dp, f_r, rng)
    f_d, cache["dp3d"] = drop_path_forward(dp, f_d, rng)
    return t_r + f_r, t_d + f_d, cache


def iimib_backward(block: IimibBlock, cache: dict, dur: Tensor, dud: Tensor):
    h, w = cache["hw"]
    grads: dict = {}
    df_r = drop_path_backward(cache["dp3r"], dur)
    df_d = drop_path_backward(cache["dp3d"], dud)
    dt_r, g = mlp2_backward(block.ffn, cache["cfr"], df_r)
    merge_grads(grads, g, "ffn.")
    dt_d, g = mlp2_backward(block.ffn, cache["cfd"], df_d)
    merge_grads(grads, g, "ffn.")
    dt_r = dur + dt_r
    dt_d = dud + dt_d
    if block.inter is not None:
        dq_r = drop_path_backward(cache["dp2r"], dt_r)
        dq_d = drop_path_backward(cache["dp2d"], dt_d)
        db_r, db_d, g = block.inter.branch_backward(cache["cint"], dq_r, dq_d, h, w)
        merge_grads(grads, g, "inter.")
        dln_r, g = layernorm_backward(block.ln_rgb_2, cache["c2r"], db_r)
        merge_grads(grads, g, "ln_rgb_2.")
        dln_d, g = layernorm_backward(block.ln_depth_2, cache["c2d"], db_d)
        merge_grads(grads, g, "ln_depth_2.")
        ds_r = dt_r + dln_r
        ds_d = dt_d + dln_d
    else:
        ds_r, ds_d = dt_r, dt_d
    dp_r = drop_path_backward(cache["dp1r"], ds_r)
    dp_d = drop_path_backward(cache["dp1d"], ds_d)
    da_r, g = att.self_attention_branch_backward(block.intra, cache["csa_r"], dp_r)
    merge_grads(grads, g, "intra.")
    da_d, g = att.self_attention_branch_backward(block.intra, cache["csa_d"], dp_d)
    merge_grads(grads, g, "intra.")
    dln_r, g = layernorm_backward(block.ln_rgb_1, cache["c1r"], da_r)
    merge_grads(grads, g, "ln_rgb_1.")
    dln_d, g = layernorm_backward(block.ln_depth_1, cache["c1d"], da_d)
    merge_grads(grads, g, "ln_depth_1.")
    return ds_r + dln_r, ds_d + dln_d, grads


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


@dataclass
class BiModalFeatures:
    rgb: TokenGrid
    depth: TokenGrid


class Stage(ParamModule):
    child_names = ("blocks",)

    def __init__(self, blocks: list[IimibBlock]):
        self.blocks = blocks


class Encoder(ParamModule):
    child_names = ("embed_rgb", "embed_depth", "merges", "stages")

    def __init__(self, cfg: EncoderConfig, embed_rgb: PatchEmbed,
                 embed_depth: PatchEmbed, merges: list[PatchEmbed],
                 stages: list[Stage]):
        self.cfg = cfg
        self.embed_rgb = embed_rgb
        self.embed_depth = embed_depth
        self.merges = merges
        self.stages = stages

    @staticmethod
    def init(rng: RngState, cfg: EncoderConfig, precision: str = "single") -> "Encoder":
        s0 = cfg.stages[0]
        embed_rgb = PatchEmbed.init(rng, s0.patch, 3, s0.dim, precision)
        embed_depth = PatchEmbed.init(rng, s0.patch, 3, s0.dim, precision)
        merges = [
            PatchEmbed.init(rng, cfg.stages[i + 1].patch, cfg.stages[i].dim,
                            cfg.stages[i + 1].dim, precision)
            for i in range(3)
        ]
        stages = [
            Stage([IimibBlock.init(rng, cfg, st, bi, precision)
                   for bi in range(st.depth)])
            for st in cfg.stages
        ]
        return Encoder(cfg, embed_rgb, embed_depth, merges, stages)


def _replicate_depth(depth: Tensor) -> Tensor:
    if depth.ndim != 3 or depth.shape[2] != 1:
        raise DimensionError(f"depth map must be HxWx1, got {depth.shape}")
    return Tensor(np.repeat(depth.data, 3, axis=2), depth.precision)


def encoder_forward(enc: Encoder, rgb: Tensor, depth: Tensor,
                    train: bool = False, rng: RngState | None = None):
    """Returns (features, cache): four multi-resolution bimodal feature pairs."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"rgb image must be HxWx3, got {rgb.shape}")
    if rgb.shape[:2] != depth.shape[:2]:
        raise DimensionError(
            f"rgb {rgb.shape[:2]} and depth {depth.shape[:2]} geometry differ"
        )
    stage_geometries(enc.cfg, rgb.shape[0], rgb.shape[1])  # validates, names stage
    cache: dict = {"stages": []}
    gr, cache["c_embed_r"] = patch_embed_forward(enc.embed_rgb, rgb)
    gd, cache["c_embed_d"] = patch_embed_forward(enc.embed_depth, _replicate_depth(depth))
    features: list[BiModalFeatures] = []
    for i, stage in enumerate(enc.stages):
        scache: dict = {"blocks": []}
        if i > 0:
            merged_r, cr = merge_forward(enc.merges[i - 1], features[-1].rgb)
            merged_d, cd = merge_forward(enc.merges[i - 1], features[-1].depth)
            scache["c_merge_r"], scache["c_merge_d"] = cr, cd
            gr, gd = merged_r, merged_d
        xr, xd = gr.feat, gd.feat
        for block in stage.blocks:
            xr, xd, bcache = iimib_forward(block, xr, xd, gr.h, gr.w, train, rng)
            scache["blocks"].append(bcache)
        gr, gd = gr.with_feat(xr), gd.with_feat(xd)
        features.append(BiModalFeatures(gr, gd))
        cache["stages"].append(scache)
    return features, cache


def encoder_backward(enc: Encoder, cache: dict, dfeatures: list,
                     with_inputs: bool = False):
    """dfeatures: per stage (d_rgb, d_depth) feature cotangents (or None).

    Returns parameter gradients; with ``with_inputs`` also the rgb/depth
    image cotangents (depth folded back from its 3-channel replication).
    """
    grads: dict = {}
    dr_next = dd_next = None
    for i in range(3, -1, -1):
        scache = cache["stages"][i]
        dr, dd = (dfeatures[i] if dfeatures[i] is not None else (None, None))
        if dr_next is not None:
            dr = dr_next if dr is None else dr + dr_next
            dd = dd_next if dd is None else dd + dd_next
        for j in range(len(enc.stages[i].blocks) - 1, -1, -1):
            block = enc.stages[i].blocks[j]
            dr, dd, g = iimib_backward(block, scache["blocks"][j], dr, dd)
            merge_grads(grads, g, f"stages.{i}.blocks.{j}.")
        if i > 0:
            dr_next, g = merge_backward(enc.merges[i - 1], scache["c_merge_r"], dr)
            merge_grads(grads, g, f"merges.{i - 1}.")
            dd_next, g = merge_backward(enc.merges[i - 1], scache["c_merge_d"], dd)
            merge_grads(grads, g, f"merges.{i - 1}.")
        else:
            dimg_rgb, g = patch_embed_backward(enc.embed_rgb, cache["c_embed_r"], dr)
            merge_grads(grads, g, "embed_rgb.")
            dimg_dep3, g = patch_embed_backward(enc.embed_depth, cache["c_embed_d"], dd)
            merge_grads(grads, g, "embed_depth.")
    if with_inputs:
        dimg_depth = Tensor(dimg_dep3.data.sum(axis=2, keepdims=True),
                            dimg_dep3.precision)
        return grads, dimg_rgb, dimg_depth
    return grads
