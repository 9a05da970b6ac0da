"""Light multi-scale decoder: fuse modalities, project, upsample, classify.

Per scale the RGB/depth features are summed, linearly projected to a
common width, bilinearly upsampled to the stage-1 geometry and
concatenated; two MLP layers produce class logits which are upsampled to
the input geometry.

Bilinear convention (align-corners disabled): destination pixel centers
map to source coordinates ``(dst + 0.5) * (src_len / dst_len) - 0.5``;
corner samples clamp their neighbor indices to the border (replication).
A same-size resize is the identity and is skipped.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import TokenGrid
from .encoder import BiModalFeatures
from .errors import DimensionError
from .nn import (
    Linear,
    ParamModule,
    gelu_backward,
    gelu_forward,
    linear_backward,
    linear_forward,
    merge_grads,
)
from .tensor import Tensor, RngState, concat, meter_report, reshape


# ---------------------------------------------------------------------------
# Bilinear resize
# ---------------------------------------------------------------------------


def _axis_weights(src: int, dst: int):
    coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    lo = np.clip(i0, 0, src - 1)
    hi = np.clip(i0 + 1, 0, src - 1)
    return lo, hi, frac


def bilinear_resize(x: Tensor, oh: int, ow: int) -> tuple[Tensor, dict]:
    """Resize [h, w, c] -> [oh, ow, c]. Costs (4 + 4c) muls and 3c adds per
    output position (4 corner-weight products, then a 4-tap blend per
    channel); a same-size call is free and exact."""
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects HxWxC, got {x.shape}")
    h, w, c = x.shape
    if (h, w) == (oh, ow):
        return x, {"identity": True, "in_shape": x.shape}
    y0, y1, fy = _axis_weights(h, oh)
    x0, x1, fx = _axis_weights(w, ow)
    wy = fy[:, None]
    wx = fx[None, :]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    d = x.data
    out = (
        d[np.ix_(y0, x0)] * w00[..., None]
        + d[np.ix_(y0, x1)] * w01[..., None]
        + d[np.ix_(y1, x0)] * w10[..., None]
        + d[np.ix_(y1, x1)] * w11[..., None]
    )
    meter_report(muls=oh * ow * (4 + 4 * c), adds=oh * ow * 3 * c)
    cache = {
        "identity": False, "in_shape": x.shape,
        "y0": y0, "y1": y1, "x0": x0, "x1": x1,
        "w00": w00, "w01": w01, "w10": w10, "w11": w11,
    }
    return Tensor(out.astype(d.dtype, copy=False), x.precision), cache


def bilinear_resize_backward(cache: dict, dy: Tensor) -> Tensor:
    if cache["identity"]:
        return dy
    h, w, c = cache["in_shape"]
    y0, y1, x0, x1 = cache["y0"], cache["y1"], cache["x0"], cache["x1"]
    dx = np.zeros((h, w, c), dtype=dy.data.dtype)
    oh, ow = dy.shape[:2]
    yy0 = np.repeat(y0, ow)
    yy1 = np.repeat(y1, ow)
    xx0 = np.tile(x0, oh)
    xx1 = np.tile(x1, oh)
    g = dy.data.reshape(oh * ow, c)
    np.add.at(dx, (yy0, xx0), g * cache["w00"].reshape(-1, 1))
    np.add.at(dx, (yy0, xx1), g * cache["w01"].reshape(-1, 1))
    np.add.at(dx, (yy1, xx0), g * cache["w10"].reshape(-1, 1))
    np.add.at(dx, (yy1, xx1), g * cache["w11"].reshape(-1, 1))
    return Tensor(dx, dy.precision)


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


class Decoder(ParamModule):
    child_names = ("projs", "mlp_hidden", "mlp_out")

    def __init__(self, projs: list[Linear], mlp_hidden: Linear, mlp_out: Linear,
                 common_dim: int, num_classes: int):
        self.projs = projs
        self.mlp_hidden = mlp_hidden
        self.mlp_out = mlp_out
        self.common_dim = common_dim
        self.num_classes = num_classes

    @staticmethod
    def init(rng: RngState, stage_dims, num_classes: int, common_dim: int = 64,
             precision: str = "single") -> "Decoder":
        # fan-in scaled init: three stacked 0.02-std linears would leave the
        # class logits orders of magnitude below the loss's useful range
        def fanin(d_in, d_out):
            return Linear.init(rng, d_in, d_out, precision=precision,
                               std=1.0 / math.sqrt(d_in))

        projs = [fanin(d, common_dim) for d in stage_dims]
        mlp_hidden = fanin(4 * common_dim, common_dim)
        mlp_out = fanin(common_dim, num_classes)
        return Decoder(projs, mlp_hidden, mlp_out, common_dim, num_classes)


def decoder_forward(dec: Decoder, features: list[BiModalFeatures],
                    out_h: int, out_w: int) -> tuple[Tensor, dict]:
    """Per-pixel class logits [out_h, out_w, num_classes]."""
    if len(features) != len(dec.projs):
        raise DimensionError(
            f"decoder: expected {len(dec.projs)} feature scales, got {len(features)}"
        )
    h1, w1 = features[0].rgb.h, features[0].rgb.w
    cache: dict = {"scales": [], "h1w1": (h1, w1)}
    upsampled = []
    for i, feat in enumerate(features):
        fused = feat.rgb.feat + feat.depth.feat
        p, c_lin = linear_forward(dec.projs[i], fused)
        img = reshape(p, (feat.rgb.h, feat.rgb.w, dec.common_dim))
        up, c_bi = bilinear_resize(img, h1, w1)
        upsampled.append(reshape(up, (h1 * w1, dec.common_dim)))
        cache["scales"].append({"c_lin": c_lin, "c_bi": c_bi,
                                "hw": (feat.rgb.h, feat.rgb.w)})
    cat = concat(upsampled, axis=1)
    hid, cache["c_mlp1"] = linear_forward(dec.mlp_hidden, cat)
    act, cache["c_gelu"] = gelu_forward(hid)
    logits_small, cache["c_mlp2"] = linear_forward(dec.mlp_out, act)
    img = reshape(logits_small, (h1, w1, dec.num_classes))
    logits, cache["c_bi_out"] = bilinear_resize(img, out_h, out_w)
    return logits, cache


def decoder_backward(dec: Decoder, cache: dict, dlogits: Tensor):
    """Returns (per-scale (d_rgb, d_depth) cotangents, parameter grads)."""
    h1, w1 = cache["h1w1"]
    c = dec.common_dim
    dsmall = bilinear_resize_backward(cache["c_bi_out"], dlogits)
    dsmall = reshape(dsmall, (h1 * w1, dec.num_classes))
    dact, g2 = linear_backward(dec.mlp_out, cache["c_mlp2"], dsmall)
    dhid = gelu_backward(cache["c_gelu"], dact)
    dcat, g1 = linear_backward(dec.mlp_hidden, cache["c_mlp1"], dhid)
    grads: dict = {}
    merge_grads(grads, g1, "mlp_hidden.")
    merge_grads(grads, g2, "mlp_out.")
    dfeatures = []
    for i, sc in enumerate(cache["scales"]):
        dup = Tensor(dcat.data[:, i * c:(i + 1) * c], dcat.precision)
        h_i, w_i = sc["hw"]
        dimg = bilinear_resize_backward(sc["c_bi"], reshape(dup, (h1, w1, c)))
        dp = reshape(dimg, (h_i * w_i, c))
        dfused, g = linear_backward(dec.projs[i], sc["c_lin"], dp)
        merge_grads(grads, g, f"projs.{i}.")
        dfeatures.append((dfused, dfused))
    return dfeatures, grads
