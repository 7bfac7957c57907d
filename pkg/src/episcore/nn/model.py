"""Pose-error scorer network for fundamental matrix hypotheses.

Pipeline per image pair and hypothesis F:
  1. shared convolutional feature extractor, output at 1/4 resolution
  2. interleaved self and cross attention over flattened feature tokens
     (linear-kernel attention, identical weights for both images)
  3. epipolar cross attention: every stride-2 query in one image attends
     only to equidistant samples along its epipolar line in the other,
     producing 1/8 resolution pair-and-hypothesis specific maps
  4. shared convolutional regressor, global average pooling, elementwise
     max merge of the two direction vectors, and a small perceptron that
     outputs predicted rotation and translation errors in degrees plus a
     confidence in [0, 1]

Swapping the images and transposing F runs the same arithmetic on the
same operands, so the output is bitwise identical in both orders.
"""

from dataclasses import dataclass

import numpy as np

from ..rng import stream
from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    image_size: square input side, divisible by 16
    channels: base feature width C
    transformer_depth: number of (self, cross) attention layer pairs
    heads: attention heads, must divide channels
    epipolar_samples: points sampled per epipolar line
    query_stride: query grid stride on the 1/4 feature map
    regressor_width: final pooled vector width
    clamp_scale: degrees scale of the soft clamp used by the loss
    precision: 32 or 64, floating-point width of weights and activations
    """

    image_size: int = 64
    channels: int = 32
    transformer_depth: int = 2
    heads: int = 8
    epipolar_samples: int = 17
    query_stride: int = 2
    regressor_width: int = 128
    clamp_scale: float = 25.0
    precision: int = 64

    def __post_init__(self):
        # The extractor pyramid reaches 1/16 resolution, hence the
        # divisibility requirement.
        if self.image_size % 16 != 0 or self.image_size < 16:
            raise ValueError("image_size must be a positive multiple of 16")
        if self.channels % self.heads != 0:
            raise ValueError("channels must be divisible by heads")
        if self.epipolar_samples < 2:
            raise ValueError("epipolar_samples must be at least 2")
        if self.query_stride < 1:
            raise ValueError("query_stride must be at least 1")
        if self.transformer_depth < 1 or self.regressor_width < 2:
            raise ValueError("bad transformer_depth or regressor_width")
        if self.clamp_scale <= 0:
            raise ValueError("clamp_scale must be positive")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_json(self):
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "transformer_depth": self.transformer_depth,
            "heads": self.heads,
            "epipolar_samples": self.epipolar_samples,
            "query_stride": self.query_stride,
            "regressor_width": self.regressor_width,
            "clamp_scale": self.clamp_scale,
            "precision": self.precision,
        }

    @staticmethod
    def from_json(obj):
        return NetworkConfig(**obj)


def desk_config():
    """Small configuration that trains in minutes on a CPU."""
    return NetworkConfig()


def paper_config():
    """Full-scale configuration (impractical without accelerators)."""
    return NetworkConfig(image_size=256, channels=128, transformer_depth=3,
                         heads=8, epipolar_samples=45, regressor_width=512)


@dataclass
class ScoreOutput:
    rot_deg: float
    trans_deg: float
    confidence: float

    @property
    def max_deg(self):
        return max(self.rot_deg, self.trans_deg)


# ---- parameters ----


def _he_conv(rng, o, c, k):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / (c * k * k)), (o, c, k, k)), requires_grad=True)


def _he_linear(rng, o, c):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / c), (o, c)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _extractor_widths(c):
    # Pyramid widths at /1 /2 /4 /8 /16, scaled from a 128-base design.
    return [c, c, (3 * c) // 2, 2 * c, 2 * c]


def _regressor_widths(c, cp):
    return [c, c, 2 * c, cp]


def init_weights(config, seed):
    """He-normal initialized parameter dict, deterministic in seed."""
    rng = stream(seed, "weights")
    c = config.channels
    w0, w1, w2, w3, w4 = _extractor_widths(c)
    p = {}

    def res_block(prefix, cin, cout):
        # Normalized convs carry no bias; instance norm would cancel it.
        p[prefix + ".conv1.w"] = _he_conv(rng, cout, cin, 3)
        p[prefix + ".n1.g"] = _ones(cout)
        p[prefix + ".n1.b"] = _zeros(cout)
        p[prefix + ".conv2.w"] = _he_conv(rng, cout, cout, 3)
        p[prefix + ".n2.g"] = _ones(cout)
        p[prefix + ".n2.b"] = _zeros(cout)
        p[prefix + ".skip.w"] = _he_conv(rng, cout, cin, 1)
        p[prefix + ".skip.b"] = _zeros(cout)

    p["stem.w"] = _he_conv(rng, w0, 3, 3)
    p["stem.n.g"] = _ones(w0)
    p["stem.n.b"] = _zeros(w0)
    res_block("down1", w0, w1)
    res_block("down2", w1, w2)
    res_block("down3", w2, w3)
    res_block("down4", w3, w4)
    for name, cin in (("up8", w4 + w3), ("up4", w2 + w2)):
        cout = w2 if name == "up8" else c
        p[name + ".w"] = _he_conv(rng, cout, cin, 3)
        p[name + ".n.g"] = _ones(cout)
        p[name + ".n.b"] = _zeros(cout)

    for i in range(config.transformer_depth):
        for kind in ("self", "cross"):
            base = f"attn{i}.{kind}"
            for proj in ("q", "k", "v"):
                p[f"{base}.{proj}.w"] = _he_linear(rng, c, c)
                p[f"{base}.{proj}.b"] = _zeros(c)
            p[f"{base}.merge1.w"] = _he_linear(rng, 2 * c, 2 * c)
            p[f"{base}.merge1.b"] = _zeros(2 * c)
            p[f"{base}.merge2.w"] = _he_linear(rng, c, 2 * c)
            p[f"{base}.merge2.b"] = _zeros(c)
            p[f"{base}.norm.g"] = _ones(c)
            p[f"{base}.norm.b"] = _zeros(c)

    for proj in ("q", "k", "v"):
        p[f"epi.{proj}.w"] = _he_linear(rng, c, c)
        if proj != "k":
            # A key bias shifts every logit of a query equally, which the
            # softmax cancels, so it would be an untrainable parameter.
            p[f"epi.{proj}.b"] = _zeros(c)
    p["epi.out.w"] = _he_linear(rng, c, c)
    p["epi.out.b"] = _zeros(c)

    r0, r1, r2, r3 = _regressor_widths(c, config.regressor_width)
    res_block("reg1", r0, r1)
    res_block("reg2", r1, r2)
    res_block("reg3", r2, r3)
    half = r3 // 2
    p["vnorm.g"] = _ones(r3)
    p["vnorm.b"] = _zeros(r3)
    p["mlp1.w"] = _he_linear(rng, r3, r3)
    p["mlp1.b"] = _zeros(r3)
    p["mlp2.w"] = _he_linear(rng, half, r3)
    p["mlp2.b"] = _zeros(half)
    p["mlp3.w"] = _he_linear(rng, 3, half)
    p["mlp3.b"] = _zeros(3)
    if config.precision == 32:
        # Initialization always draws in float64 so 32- and 64-bit weights
        # agree up to rounding; the cast happens once, here.
        p = {k: Tensor(t.data.astype(np.float32), requires_grad=True) for k, t in p.items()}
    return p


def _as_input(images, config):
    return Tensor(np.asarray(images).astype(config.dtype, copy=False))


# ---- building blocks ----


def _layer_norm(x, gamma, beta, eps=1e-5):
    # Normalization over the trailing channel axis; keeps residual
    # streams from growing with depth.
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * gamma + beta


def _instance_norm(x, gamma, beta, eps=1e-5):
    # Per-sample, per-channel normalization over the spatial axes.
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    norm = centered / ad.sqrt(var + eps)
    return norm * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def _res_block(p, prefix, x, stride):
    h = ad.conv2d(x, p[prefix + ".conv1.w"], stride=stride, padding=1)
    h = ad.relu(_instance_norm(h, p[prefix + ".n1.g"], p[prefix + ".n1.b"]))
    h = ad.conv2d(h, p[prefix + ".conv2.w"], stride=1, padding=1)
    h = _instance_norm(h, p[prefix + ".n2.g"], p[prefix + ".n2.b"])
    s = ad.conv2d(x, p[prefix + ".skip.w"], p[prefix + ".skip.b"], stride=stride, padding=0)
    return ad.relu(h + s)


def extract_features(p, images):
    """images (B,3,H,W) in [0,1] -> feature maps (B,C,H/4,W/4)."""
    x = ad.conv2d(images, p["stem.w"], stride=1, padding=1)
    x = ad.relu(_instance_norm(x, p["stem.n.g"], p["stem.n.b"]))
    d1 = _res_block(p, "down1", x, 2)   # /2
    d2 = _res_block(p, "down2", d1, 2)  # /4
    d3 = _res_block(p, "down3", d2, 2)  # /8
    d4 = _res_block(p, "down4", d3, 2)  # /16
    u8 = ad.concat([ad.upsample2x(d4), d3], axis=1)
    u8 = ad.conv2d(u8, p["up8.w"], stride=1, padding=1)
    u8 = ad.leaky_relu(_instance_norm(u8, p["up8.n.g"], p["up8.n.b"]))
    u4 = ad.concat([ad.upsample2x(u8), d2], axis=1)
    u4 = ad.conv2d(u4, p["up4.w"], stride=1, padding=1)
    return ad.leaky_relu(_instance_norm(u4, p["up4.n.g"], p["up4.n.b"]))


def _linear(x, w, b):
    # x (..., Cin) @ w (Cout, Cin) + b
    return x @ w.transpose(1, 0) + b


def _phi(x):
    return ad.elu(x) + 1.0


def linear_attention(q, k, v, heads, eps=1e-9):
    """Kernelized attention, cost linear in token count.

    q, k, v: (B, N, C).  Equivalent to softmax-free attention with the
    feature map elu(x)+1 applied to queries and keys.
    """
    b, n, c = q.shape
    m = k.shape[1]
    dh = c // heads
    qf = _phi(q).reshape(b, n, heads, dh).transpose(0, 2, 1, 3)  # (B,h,N,dh)
    kf = _phi(k).reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
    vf = v.reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
    kv = kf.transpose(0, 1, 3, 2) @ vf                    # (B,h,dh,dh)
    z = kf.sum(axis=2, keepdims=True)                     # (B,h,1,dh)
    num = qf @ kv                                         # (B,h,N,dh)
    den = (qf * z).sum(axis=3, keepdims=True) + eps
    out = num / den
    return out.transpose(0, 2, 1, 3).reshape(b, n, c)


def _attention_block(p, base, x, source, heads):
    q = _linear(x, p[base + ".q.w"], p[base + ".q.b"])
    k = _linear(source, p[base + ".k.w"], p[base + ".k.b"])
    v = _linear(source, p[base + ".v.w"], p[base + ".v.b"])
    msg = linear_attention(q, k, v, heads)
    h = ad.relu(_linear(ad.concat([x, msg], axis=2), p[base + ".merge1.w"], p[base + ".merge1.b"]))
    y = x + _linear(h, p[base + ".merge2.w"], p[base + ".merge2.b"])
    return _layer_norm(y, p[base + ".norm.g"], p[base + ".norm.b"])


def transform_pair(p, fa, fb, config):
    """Interleaved self and cross attention over both 1/4 feature maps."""
    b, c, h, w = fa.shape
    ta = fa.reshape(b, c, h * w).transpose(0, 2, 1)
    tb = fb.reshape(b, c, h * w).transpose(0, 2, 1)
    for i in range(config.transformer_depth):
        ta = _attention_block(p, f"attn{i}.self", ta, ta, config.heads)
        tb = _attention_block(p, f"attn{i}.self", tb, tb, config.heads)
        na = _attention_block(p, f"attn{i}.cross", ta, tb, config.heads)
        nb = _attention_block(p, f"attn{i}.cross", tb, ta, config.heads)
        ta, tb = na, nb
    fa = ta.transpose(0, 2, 1).reshape(b, c, h, w)
    fb = tb.transpose(0, 2, 1).reshape(b, c, h, w)
    return fa, fb


def epipolar_samples(f_scaled, qx, qy, width, height, count):
    """Sample coordinates along epipolar lines inside the feature map.

    f_scaled: (B,3,3) fundamental matrices mapping query-image feature
    pixels to line coefficients in the other feature map.  qx, qy: (Q,)
    query coordinates.  Returns xs, ys, valid of shape (B, Q, count);
    lines that miss the map give valid=False rows.  Samples run from the
    leftmost intersection with the map rectangle to the rightmost
    (bottom to top for vertical lines).
    """
    bsz = f_scaled.shape[0]
    q = np.stack([qx, qy, np.ones_like(qx)], axis=0)  # (3,Q)
    lines = f_scaled @ q                              # (B,3,Q)
    a, b, c = lines[:, 0], lines[:, 1], lines[:, 2]
    norm = np.hypot(a, b)
    ok = norm > 1e-12
    safe = np.where(ok, norm, 1.0)
    a, b, c = a / safe, b / safe, c / safe
    # Closest point to the origin plus the unit direction (-b, a).
    px, py = -a * c, -b * c
    dx, dy = -b, a
    # Orient left to right, ties bottom to top.
    flip = (dx < 0) | ((dx == 0) & (dy < 0))
    dx = np.where(flip, -dx, dx)
    dy = np.where(flip, -dy, dy)

    def axis_interval(p0, d, lo, hi):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo - p0) / d
            t_hi = (hi - p0) / d
        near = np.minimum(t_lo, t_hi)
        far = np.maximum(t_lo, t_hi)
        parallel = np.abs(d) < 1e-12
        inside = (p0 >= lo) & (p0 <= hi)
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        return near, far

    nx, fx = axis_interval(px, dx, 0.0, width - 1.0)
    ny, fy = axis_interval(py, dy, 0.0, height - 1.0)
    t0 = np.maximum(nx, ny)
    t1 = np.minimum(fx, fy)
    valid = ok & (t1 >= t0) & np.isfinite(t0) & np.isfinite(t1)
    t0 = np.where(valid, t0, 0.0)
    t1 = np.where(valid, t1, 0.0)
    steps = np.linspace(0.0, 1.0, count)
    t = t0[..., None] + (t1 - t0)[..., None] * steps  # (B,Q,count)
    xs = px[..., None] + dx[..., None] * t
    ys = py[..., None] + dy[..., None] * t
    valid = np.broadcast_to(valid[..., None], xs.shape)
    xs = np.where(valid, np.clip(xs, 0.0, width - 1.0), 0.0)
    ys = np.where(valid, np.clip(ys, 0.0, height - 1.0), 0.0)
    return xs, ys, valid


def _epipolar_attend(p, f_query, f_source, f_scaled, config):
    """Queries from f_query attend to epipolar samples in f_source.

    Output resolution is the feature resolution divided by query_stride.
    """
    b, c, h, w = f_query.shape
    s = config.query_stride
    gy, gx = np.meshgrid(np.arange(0, h, s, dtype=np.float64),
                         np.arange(0, w, s, dtype=np.float64), indexing="ij")
    qx, qy = gx.ravel(), gy.ravel()
    nq = qx.size
    xs, ys, valid = epipolar_samples(f_scaled, qx, qy, w, h, config.epipolar_samples)
    samples = ad.bilinear_gather(f_source, xs, ys, valid)  # (B,C,Q,D)
    queries = f_query[:, :, ::s, ::s].reshape(b, c, nq).transpose(0, 2, 1)  # (B,Q,C)
    tokens = samples.transpose(0, 2, 3, 1)  # (B,Q,D,C)
    q = _linear(queries, p["epi.q.w"], p["epi.q.b"])
    k = tokens @ p["epi.k.w"].transpose(1, 0)
    v = _linear(tokens, p["epi.v.w"], p["epi.v.b"])
    logits = (k @ q.reshape(b, nq, c, 1)) * (1.0 / np.sqrt(c))  # (B,Q,D,1)
    penalty = np.where(valid, 0.0, -1e9)[..., None]
    attn = ad.softmax(logits + Tensor(penalty), axis=2)
    msg = (tokens.transpose(0, 1, 3, 2) @ attn).reshape(b, nq, c)
    out = _linear(queries + msg, p["epi.out.w"], p["epi.out.b"])
    hq, wq = (h + s - 1) // s, (w + s - 1) // s
    return ad.relu(out).transpose(0, 2, 1).reshape(b, c, hq, wq)


def regress(p, ga, gb):
    """Shared regressor on both epipolar maps, max-merged, to outputs."""
    def tower(g):
        x = _res_block(p, "reg1", g, 2)
        x = _res_block(p, "reg2", x, 2)
        x = _res_block(p, "reg3", x, 2)
        return x.mean(axis=(2, 3))  # (B, C')

    va = tower(ga)
    vb = tower(gb)
    v = ad.maximum(va, vb)
    v = _layer_norm(v, p["vnorm.g"], p["vnorm.b"])
    h = ad.relu(_linear(v, p["mlp1.w"], p["mlp1.b"]))
    h = ad.relu(_linear(h, p["mlp2.w"], p["mlp2.b"]))
    out = _linear(h, p["mlp3.w"], p["mlp3.b"])  # (B,3)
    e_r = ad.softplus(out[:, 0])
    e_t = ad.softplus(out[:, 1])
    conf = ad.sigmoid(out[:, 2])
    return e_r, e_t, conf


def forward_batch(p, fa, fb, fmats, config):
    """Transformed 1/4 features plus hypotheses -> error Tensors.

    fa, fb: (B,C,H/4,W/4) transformed features.  fmats: (B,3,3) in image
    pixel coordinates.  Returns (e_r, e_t, confidence) Tensors of shape
    (B,).
    """
    fmats = np.asarray(fmats, dtype=np.float64)
    # Feature coordinates are image pixels times 1/4, so conjugate by
    # diag(1/s, 1/s, 1) with s = 1/4.  Powers of two keep the scaling
    # exact, which preserves bitwise A/B swap symmetry.
    scale = np.diag([4.0, 4.0, 1.0])
    f_scaled = scale @ fmats @ scale
    ga = _epipolar_attend(p, fa, fb, f_scaled, config)
    gb = _epipolar_attend(p, fb, fa, f_scaled.transpose(0, 2, 1), config)
    return regress(p, ga, gb)


class PairCache:
    """Memoizes transformed feature maps per image pair."""

    def __init__(self, p, config):
        self.p = p
        self.config = config
        self._store = {}

    def features(self, key, image_a, image_b):
        if key not in self._store:
            fa = extract_features(self.p, _as_input(image_a[None], self.config))
            fb = extract_features(self.p, _as_input(image_b[None], self.config))
            self._store[key] = transform_pair(self.p, fa, fb, self.config)
        return self._store[key]


def forward_score(p, config, image_a, image_b, f, cache=None, key=None):
    """Score one hypothesis on one pair, images (3,H,W) in [0,1].

    forward_score(wa, cfg, A, B, F) and forward_score(wa, cfg, B, A, F.T)
    return bitwise identical results.
    """
    if cache is not None and key is not None:
        fa, fb = cache.features(key, image_a, image_b)
    else:
        fa = extract_features(p, _as_input(np.asarray(image_a)[None], config))
        fb = extract_features(p, _as_input(np.asarray(image_b)[None], config))
        fa, fb = transform_pair(p, fa, fb, config)
    f = np.asarray(f, dtype=np.float64)
    e_r, e_t, conf = forward_batch(p, fa, fb, f[None], config)
    return ScoreOutput(float(e_r.data[0]), float(e_t.data[0]), float(conf.data[0]))


def score_hypotheses(p, config, image_a, image_b, fmats, chunk=32):
    """Score many hypotheses for one pair, reusing the feature maps."""
    fa = extract_features(p, _as_input(np.asarray(image_a)[None], config))
    fb = extract_features(p, _as_input(np.asarray(image_b)[None], config))
    fa, fb = transform_pair(p, fa, fb, config)
    fa = Tensor(fa.data)
    fb = Tensor(fb.data)
    fmats = np.asarray(fmats, dtype=np.float64)
    outs = []
    for start in range(0, len(fmats), chunk):
        batch = fmats[start : start + chunk]
        rep_a = Tensor(np.repeat(fa.data, len(batch), axis=0))
        rep_b = Tensor(np.repeat(fb.data, len(batch), axis=0))
        e_r, e_t, conf = forward_batch(p, rep_a, rep_b, batch, config)
        outs.extend(
            ScoreOutput(float(r), float(t), float(c))
            for r, t, c in zip(e_r.data, e_t.data, conf.data)
        )
    return outs


def select_hypothesis(outputs):
    """Index of the hypothesis with the lowest max(e_R, e_t)."""
    vals = [max(o.rot_deg, o.trans_deg) for o in outputs]
    return int(np.argmin(vals))
