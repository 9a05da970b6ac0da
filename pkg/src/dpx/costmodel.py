"""Analytic parameter and FLOP counting for attention variants and models.

Counting convention (matches the tensor-core FLOP meter bit for bit):

* one fused multiply-add = 2 FLOPs, so a (m,k)x(k,n) matmul costs m*k*n
  multiplies plus m*k*n adds;
* softmax: 1 exp and 1 divide per element, extent-1 adds per row; masked
  softmax restricts all three to unmasked entries;
* elementwise multiply/add = 1 FLOP per element; GELU = 6 muls + 2 adds +
  1 tanh per element; layer norm per row of extent d = 2d muls, 4d-1
  adds, d+2 divides, 1 sqrt;
* bilinear resize: 4 + 4c muls and 3c adds per output position (identity
  when the size is unchanged);
* free: reshapes, transposes, gathers/scatters, concatenation, the
  numerical-stability max-shift inside softmax.

``count_attention`` closed forms are verified against instrumented
execution of the real forward passes (exact integer equality); variant
reports break out the attention term ("attention_core") so the quadratic
vs linear token scaling is directly inspectable.

Reported FLOPs for one forward pass at one input geometry: ``self``
counts a single-grid pass, the cross-modal variants count both
directions, model counts cover the dual-branch encoder plus decoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

from .attention import AttentionConfig
from .dsim import DsimConfig
from .encoder import EncoderConfig, stage_geometries
from .errors import ConfigError, DomainError
from .tensor import FlopMeter

Counts = FlopMeter


# ---------------------------------------------------------------------------
# Piece counts (mirror the implementations' meter reports)
# ---------------------------------------------------------------------------


def linear_counts(rows: int, d_in: int, d_out: int, bias: bool = True) -> Counts:
    c = Counts(muls=rows * d_in * d_out, adds=rows * d_in * d_out)
    if bias:
        c.adds += rows * d_out
    return c


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def softmax_counts(rows: int, ext: int) -> Counts:
    return Counts(exps=rows * ext, adds=rows * (ext - 1), divs=rows * ext)


def sigmoid_counts(n: int) -> Counts:
    return Counts(exps=n, adds=n, divs=n)


def gelu_counts(n: int) -> Counts:
    return Counts(muls=6 * n, adds=2 * n, tanhs=n)


def layernorm_counts(rows: int, d: int) -> Counts:
    return Counts(muls=rows * 2 * d, adds=rows * (4 * d - 1),
                  divs=rows * (d + 2), sqrts=rows)


def mlp2_counts(rows: int, d_in: int, hidden: int, d_out: int,
                final: str = "none") -> Counts:
    c = linear_counts(rows, d_in, hidden)
    _merge(c, gelu_counts(rows * hidden))
    _merge(c, linear_counts(rows, hidden, d_out))
    if final == "softmax":
        _merge(c, softmax_counts(rows, d_out))
    elif final == "sigmoid":
        _merge(c, sigmoid_counts(rows * d_out))
    return c


def bilinear_counts(oh: int, ow: int, c_: int, same_size: bool = False) -> Counts:
    if same_size:
        return Counts()
    return Counts(muls=oh * ow * (4 + 4 * c_), adds=oh * ow * 3 * c_)


def _merge(dst: Counts, src: Counts) -> Counts:
    dst.add(muls=src.muls, adds=src.adds, exps=src.exps, divs=src.divs,
            sqrts=src.sqrts, tanhs=src.tanhs)
    return dst


def _dense_attention_core_counts(heads: int, dh: int, n_q: int, n_k: int) -> Counts:
    """Scores + scale + softmax + weighted sum for one full-set direction."""
    d = heads * dh
    c = Counts(muls=n_q * n_k * d, adds=n_q * n_k * d)      # Q K^T
    c.muls += heads * n_q * n_k                              # scale
    _merge(c, softmax_counts(heads * n_q, n_k))
    c.muls += n_q * n_k * d                                  # A V
    c.adds += n_q * n_k * d
    return c


def _per_key_core_counts(heads: int, dh: int, n: int, ext: int,
                         valid_pairs: int | None = None,
                         valid_rows: int | None = None) -> Counts:
    """Per-pixel key-set attention; ``valid_pairs``/``valid_rows`` describe
    the masked case (total unmasked entries / rows with any entry)."""
    d = heads * dh
    c = Counts(muls=n * ext * d, adds=n * ext * d)           # scores
    c.muls += heads * n * ext                                # scale
    if valid_pairs is None:
        _merge(c, softmax_counts(heads * n, ext))
    else:
        c.exps += heads * valid_pairs
        c.divs += heads * valid_pairs
        c.adds += heads * (valid_pairs - valid_rows)
    c.muls += n * ext * d                                    # weighted sum
    c.adds += n * ext * d
    return c


# ---------------------------------------------------------------------------
# Report structure
# ---------------------------------------------------------------------------


@dataclass
class CostComponent:
    name: str
    params: int
    counts: Counts = field(default_factory=Counts)

    @property
    def flops(self) -> int:
        return self.counts.flops


@dataclass
class CostReport:
    variant: str
    height: int
    width: int
    config: dict
    components: list[CostComponent]

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.components)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.components)

    @property
    def total_counts(self) -> Counts:
        t = Counts()
        for c in self.components:
            _merge(t, c.counts)
        return t

    def component(self, name: str) -> CostComponent:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def rows(self) -> list[dict]:
        out = [
            {"variant": self.variant, "component": c.name,
             "params": c.params, "flops": c.flops}
            for c in self.components
        ]
        out.append({"variant": self.variant, "component": "total",
                    "params": self.total_params, "flops": self.total_flops})
        return out


# ---------------------------------------------------------------------------
# Window / neighborhood occupancy arithmetic
# ---------------------------------------------------------------------------


def _window_axis_counts(extent: int, win: int, off: int) -> list[int]:
    padded = ((extent + off + win - 1) // win) * win
    out = []
    for b in range(padded // win):
        lo = b * win - off
        hi = lo + win
        out.append(max(0, min(hi, extent) - max(lo, 0)))
    return out


def window_occupancy(h: int, w: int, win: int, shifted: bool):
    """(n_windows, [valid tokens per window]) for the padded partition."""
    off = win // 2 if shifted else 0
    rows = _window_axis_counts(h, win, off)
    cols = _window_axis_counts(w, win, off)
    valid = [r * c for r in rows for c in cols]
    return len(valid), valid


def neighborhood_sizes(extent: int, r: int) -> list[int]:
    return [min(i + r, extent - 1) - max(i - r, 0) + 1 for i in range(extent)]


# ---------------------------------------------------------------------------
# Per-variant closed forms
# ---------------------------------------------------------------------------


def _qkvo_params(d: int) -> tuple[int, int]:
    """(qkv params, output-projection params)."""
    return 3 * linear_params(d, d), linear_params(d, d)


def _count_self(cfg: AttentionConfig, h: int, w: int) -> list[CostComponent]:
    n, d = h * w, cfg.dim
    qkv_p, out_p = _qkvo_params(d)
    qkv = linear_counts(n, d, d)
    for _ in range(2):
        _merge(qkv, linear_counts(n, d, d))
    core = _dense_attention_core_counts(cfg.heads, cfg.head_dim, n, n)
    return [
        CostComponent("qkv_projections", qkv_p, qkv),
        CostComponent("attention_core", 0, core),
        CostComponent("output_projection", out_p, linear_counts(n, d, d)),
        CostComponent("residual", 0, Counts(adds=n * d)),
    ]


def _bidirectional(qkv_p, out_p, n, d, core_one_direction: Counts) -> list[CostComponent]:
    qkv = Counts()
    for _ in range(6):
        _merge(qkv, linear_counts(n, d, d))
    core = Counts()
    _merge(core, core_one_direction)
    _merge(core, core_one_direction)
    out = Counts()
    _merge(out, linear_counts(n, d, d))
    _merge(out, linear_counts(n, d, d))
    return [
        CostComponent("qkv_projections", qkv_p, qkv),
        CostComponent("attention_core", 0, core),
        CostComponent("output_projection", out_p, out),
        CostComponent("residual", 0, Counts(adds=2 * n * d)),
    ]


def _count_ca(cfg: AttentionConfig, h: int, w: int) -> list[CostComponent]:
    n, d = h * w, cfg.dim
    qkv_p, out_p = _qkvo_params(d)
    core = _dense_attention_core_counts(cfg.heads, cfg.head_dim, n, n)
    return _bidirectional(qkv_p, out_p, n, d, core)


def _count_swca(cfg: AttentionConfig, h: int, w: int,
                shifted: bool = False) -> list[CostComponent]:
    if cfg.window > min(h, w):
        raise ConfigError(f"window {cfg.window} exceeds grid min side {min(h, w)}")
    n, d = h * w, cfg.dim
    heads = cfg.heads
    qkv_p, out_p = _qkvo_params(d)
    nw, occupancy = window_occupancy(h, w, cfg.window, shifted)
    ws = cfg.window * cfg.window
    core = Counts(muls=nw * ws * ws * d, adds=nw * ws * ws * d)   # Q K^T (padded)
    core.muls += heads * nw * ws * ws                              # scale (padded)
    pairs = sum(v * v for v in occupancy)
    rows = sum(v for v in occupancy if v > 0)
    core.exps += heads * pairs
    core.divs += heads * pairs
    core.adds += heads * (pairs - rows)
    core.muls += nw * ws * ws * d                                  # A V (padded)
    core.adds += nw * ws * ws * d
    return _bidirectional(qkv_p, out_p, n, d, core)


def _count_lca(cfg: AttentionConfig, h: int, w: int) -> list[CostComponent]:
    n, d = h * w, cfg.dim
    qkv_p, out_p = _qkvo_params(d)
    ext = (2 * cfg.radius + 1) ** 2
    valid = sum(neighborhood_sizes(h, cfg.radius)) * sum(neighborhood_sizes(w, cfg.radius))
    core = _per_key_core_counts(cfg.heads, cfg.head_dim, n, ext,
                                valid_pairs=valid, valid_rows=n)
    return _bidirectional(qkv_p, out_p, n, d, core)


def _count_pwca(cfg: AttentionConfig, h: int, w: int) -> list[CostComponent]:
    n, d = h * w, cfg.dim
    qkv_p, out_p = _qkvo_params(d)
    ext = cfg.n_noise + 1
    core = _per_key_core_counts(cfg.heads, cfg.head_dim, n, ext)
    comps = _bidirectional(qkv_p, out_p, n, d, core)
    comps.insert(0, CostComponent("noise_tokens", 4 * cfg.n_noise * cfg.dim, Counts()))
    return comps


def _count_dsim(dcfg: DsimConfig, h: int, w: int) -> list[CostComponent]:
    n, d = h * w, dcfg.dim
    heads = dcfg.heads
    act = dcfg.final_activation
    comps: list[CostComponent] = []

    disc_p = 0
    disc = Counts()
    if dcfg.enable_difference:
        disc_p += 2 * (linear_params(d, d) + linear_params(d, d))
        disc.adds += 2 * n * d                     # the two signed diffs
        _merge(disc, mlp2_counts(n, d, d, d, act))
        _merge(disc, mlp2_counts(n, d, d, d, act))
    if dcfg.enable_similarity:
        disc_p += linear_params(2 * d, d) + linear_params(d, d)
        _merge(disc, mlp2_counts(n, 2 * d, d, d, act))
    comps.append(CostComponent("discriminators", disc_p, disc))

    lt = Counts()
    for _ in range(4):                             # lt_q and lt_v on both branches
        _merge(lt, linear_counts(n, d, d))
    comps.append(CostComponent("lt_projections", 3 * linear_params(d, d), lt))

    kv_p = 0
    kv = Counts()
    factor = dcfg.enable_learning_factor
    if dcfg.enable_difference:
        if factor:
            kv_p += 2 * d
        kv.muls += 2 * n * d * (2 if factor else 1)   # gate both branches
        kv.adds += 2 * n * d                          # differential values
    if dcfg.enable_similarity:
        if factor:
            kv_p += 2 * d
        kv.muls += 2 * n * d * (2 if factor else 1)
    comps.append(CostComponent("key_value_construction", kv_p, kv))

    comps.append(CostComponent("noise_tokens", 4 * dcfg.n_noise * d, Counts()))

    m = dcfg.keys_per_pixel
    qkv = Counts()
    _merge(qkv, linear_counts(n, d, d))            # w_q rgb
    _merge(qkv, linear_counts(n, d, d))            # w_q depth
    for _ in range(4):                             # w_k, w_v on both entry sets
        _merge(qkv, linear_counts(n * m, d, d))
    comps.append(CostComponent("qkv_projections", 3 * linear_params(d, d), qkv))

    core = Counts()
    one = _per_key_core_counts(heads, d // heads, n, m)
    _merge(core, one)
    _merge(core, one)
    comps.append(CostComponent("attention_core", 0, core))

    out = Counts()
    _merge(out, linear_counts(n, d, d))
    _merge(out, linear_counts(n, d, d))
    comps.append(CostComponent("output_projection", linear_params(d, d), out))
    comps.append(CostComponent("residual", 0, Counts(adds=2 * n * d)))
    return comps


def count_attention(variant: str, cfg: AttentionConfig, h: int, w: int,
                    shifted: bool = False,
                    dsim_cfg: DsimConfig | None = None) -> CostReport:
    """Closed-form cost of one forward pass of the given mechanism."""
    if variant == "self":
        comps = _count_self(cfg, h, w)
    elif variant == "ca":
        comps = _count_ca(cfg, h, w)
    elif variant == "swca":
        comps = _count_swca(cfg, h, w, shifted)
    elif variant == "lca":
        comps = _count_lca(cfg, h, w)
    elif variant == "pwca":
        comps = _count_pwca(cfg, h, w)
    elif variant == "dsim":
        dcfg = dsim_cfg or DsimConfig(dim=cfg.dim, heads=cfg.heads, n_noise=cfg.n_noise)
        comps = _count_dsim(dcfg, h, w)
    else:
        raise ConfigError(
            f"unknown attention variant {variant!r}; expected one of "
            "('self', 'ca', 'swca', 'lca', 'pwca', 'dsim')"
        )
    echo = {"dim": cfg.dim, "heads": cfg.heads, "window": cfg.window,
            "radius": cfg.radius, "n_noise": cfg.n_noise}
    return CostReport(variant, h, w, echo, comps)


# ---------------------------------------------------------------------------
# Whole-model counts
# ---------------------------------------------------------------------------


def _patch_embed_cost(k: int, c_in: int, d: int, oh: int, ow: int):
    params = linear_params(k * k * c_in, d)
    return params, linear_counts(oh * ow, k * k * c_in, d)


def count_model(cfg: EncoderConfig, h: int, w: int, num_classes: int,
                decoder_dim: int = 64) -> CostReport:
    """Parameters and FLOPs of the full dual-branch segmenter."""
    geoms = stage_geometries(cfg, h, w)
    comps: list[CostComponent] = []

    s0 = cfg.stages[0]
    oh, ow = geoms[0]
    p_emb, c_one = _patch_embed_cost(s0.patch.kernel, 3, s0.dim, oh, ow)
    emb = Counts()
    _merge(emb, c_one)
    _merge(emb, c_one)                          # rgb and depth embeds
    comps.append(CostComponent("patch_embed", 2 * p_emb, emb))

    merge_p = 0
    merge_c = Counts()
    for i in range(3):
        k = cfg.stages[i + 1].patch.kernel
        ohm, owm = geoms[i + 1]
        p, c_one = _patch_embed_cost(k, cfg.stages[i].dim, cfg.stages[i + 1].dim, ohm, owm)
        merge_p += p                            # shared across modalities
        _merge(merge_c, c_one)
        _merge(merge_c, c_one)                  # applied to both branches
    comps.append(CostComponent("patch_merging", merge_p, merge_c))

    ln_p = sa_p = inter_p = ffn_p = 0
    ln_c, sa_c, inter_c, ffn_c, res_c = Counts(), Counts(), Counts(), Counts(), Counts()
    has_inter = cfg.enable_paca and cfg.variant != "baseline"
    for st, (sh, sw) in zip(cfg.stages, geoms):
        n, d = sh * sw, st.dim
        acfg = cfg.attention_config(st)
        for _ in range(st.depth):
            ln_pairs = 2 if has_inter else 1
            ln_p += ln_pairs * 2 * 2 * d                     # gain+shift, both modalities
            for _ in range(2 * ln_pairs):
                _merge(ln_c, layernorm_counts(n, d))
            sa_p += sum(p for p in _qkvo_params(d))
            sa_core = _dense_attention_core_counts(st.heads, d // st.heads, n, n)
            for _ in range(2):                               # both modalities
                for c in (linear_counts(n, d, d), linear_counts(n, d, d),
                          linear_counts(n, d, d), sa_core, linear_counts(n, d, d)):
                    _merge(sa_c, c)
            if has_inter:
                if cfg.variant == "dsim":
                    vcomps = _count_dsim(cfg.dsim_config(st), sh, sw)
                else:
                    eff = acfg
                    if cfg.variant == "swca" and acfg.window > min(sh, sw):
                        from dataclasses import replace
                        eff = replace(acfg, window=min(sh, sw))
                    vcomps = count_attention(cfg.variant, eff, sh, sw).components
                for c in vcomps:
                    if c.name == "residual":
                        continue                             # block owns residuals
                    inter_p += c.params
                    _merge(inter_c, c.counts)
            hid = cfg.ffn_ratio * d
            ffn_p += linear_params(d, hid) + linear_params(hid, d)
            for _ in range(2):
                _merge(ffn_c, mlp2_counts(n, d, hid, d, "none"))
            branches = 3 if has_inter else 2
            res_c.adds += branches * 2 * n * d
    comps.append(CostComponent("layer_norms", ln_p, ln_c))
    comps.append(CostComponent("self_attention", sa_p, sa_c))
    if has_inter:
        comps.append(CostComponent("inter_modal", inter_p, inter_c))
    comps.append(CostComponent("feed_forward", ffn_p, ffn_c))
    comps.append(CostComponent("residuals", 0, res_c))

    dec_p = 0
    dec_c = Counts()
    h1, w1 = geoms[0]
    cdim = decoder_dim
    for (sh, sw), st in zip(geoms, cfg.stages):
        dec_p += linear_params(st.dim, cdim)
        dec_c.adds += sh * sw * st.dim                       # modality fusion
        _merge(dec_c, linear_counts(sh * sw, st.dim, cdim))
        _merge(dec_c, bilinear_counts(h1, w1, cdim, same_size=(sh, sw) == (h1, w1)))
    dec_p += linear_params(4 * cdim, cdim) + linear_params(cdim, num_classes)
    _merge(dec_c, linear_counts(h1 * w1, 4 * cdim, cdim))
    _merge(dec_c, gelu_counts(h1 * w1 * cdim))
    _merge(dec_c, linear_counts(h1 * w1, cdim, num_classes))
    _merge(dec_c, bilinear_counts(h, w, num_classes, same_size=(h1, w1) == (h, w)))
    comps.append(CostComponent("decoder", dec_p, dec_c))

    echo = {"variant": cfg.variant, "depths": [s.depth for s in cfg.stages],
            "dims": [s.dim for s in cfg.stages], "num_classes": num_classes,
            "decoder_dim": decoder_dim}
    return CostReport(cfg.variant, h, w, echo, comps)


# ---------------------------------------------------------------------------
# Comparison / published reference
# ---------------------------------------------------------------------------


def reduction(base: float, new: float) -> float:
    """(base - new) / base; DomainError on a zero baseline."""
    if base == 0:
        raise DomainError("reduction ratio undefined for zero baseline")
    return (base - new) / base


def compare_reports(base: CostReport, others: list[CostReport]) -> list[dict]:
    rows = []
    for r in others:
        rows.append({
            "variant": r.variant,
            "baseline": base.variant,
            "param_reduction": reduction(base.total_params, r.total_params),
            "flop_reduction": reduction(base.total_flops, r.total_flops),
        })
    return rows


def load_published() -> dict:
    """Bundled published parameter/FLOP figures for the attention-variant
    comparison on the B3-scale dual-branch segmenter."""
    text = resources.files("dpx.data").joinpath("published_costs.json").read_text()
    return json.loads(text)


def published_reductions(published: dict | None = None) -> dict:
    """Reduction of the proposed mechanism vs the full cross-attention
    baseline, computed from the bundled published figures."""
    pub = published or load_published()
    base, ours = pub["baseline_variant"], pub["proposed_variant"]
    out = {
        "params": reduction(pub["params_m"][base], pub["params_m"][ours]),
        "flops": {},
    }
    for geom, col in pub["flops_g"].items():
        out["flops"][geom] = reduction(col[base], col[ours])
    return out
