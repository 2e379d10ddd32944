"""Hybrid state-space / attention backbone over multi-view patch tokens.

Token order is image-major raster order (geometry.patchify). No positional
encoding anywhere: sequence structure comes from the scans, geometry from
the Plucker ray channels. Blocks keep (L, D) token matrices; the 2x2 token
merge quarters L and changes D once, mid-stack.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ops
from .geometry import pad_to_multiple, patchify

IN_CHANNELS = 9  # rgb + ray direction + ray moment

# raw per-pixel channels: distance 1, SH 48, scale 3, rotation 4, opacity 1
RAW_DIST = slice(0, 1)
RAW_SH = slice(1, 49)
RAW_SCALE = slice(49, 52)
RAW_ROT = slice(52, 56)
RAW_OPACITY = slice(56, 57)
RAW_CHANNELS = 57


# ------------------------------------------------------------------- layout

@dataclass
class LayoutSpec:
    blocks: List[str]  # each 'M' or 'T'

    @property
    def count(self):
        return len(self.blocks)


def parse_layout(text):
    """Parse block layout strings like "MMT", "7M1T" or "(7M1T)x3MM".

    Grammar: a group is a run of optionally counted letters ("7M1T");
    "(group)xN" repeats it; groups concatenate. Raises ValueError with the
    offending position.
    """

    def fail(pos, why):
        raise ValueError(f"layout {text!r}: {why} at position {pos}")

    def parse_group(i, end):
        out = []
        while i < end:
            ch = text[i]
            if ch.isdigit():
                j = i
                while j < end and text[j].isdigit():
                    j += 1
                if j == end or text[j] not in "MT":
                    fail(i, "count without a following block letter")
                n = int(text[i:j])
                if n == 0:
                    fail(i, "zero repeat count")
                out.extend(text[j] * n)
                i = j + 1
            elif ch in "MT":
                out.append(ch)
                i += 1
            else:
                fail(i, f"unexpected {ch!r}")
        return out

    if not text:
        raise ValueError("layout '': empty layout")
    blocks = []
    i = 0
    while i < len(text):
        if text[i] == "(":
            close = text.find(")", i)
            if close < 0:
                fail(i, "unclosed '('")
            inner = parse_group(i + 1, close)
            if not inner:
                fail(i, "empty group")
            j = close + 1
            if j >= len(text) or text[j] != "x":
                fail(j, "expected 'x<count>' after ')'")
            j += 1
            k = j
            while k < len(text) and text[k].isdigit():
                k += 1
            if k == j:
                fail(j, "missing repeat count")
            n = int(text[j:k])
            if n == 0:
                fail(j, "zero repeat count")
            blocks.extend(inner * n)
            i = k
        else:
            j = i
            while j < len(text) and text[j] != "(":
                j += 1
            blocks.extend(parse_group(i, j))
            i = j
    return LayoutSpec(blocks)


# ------------------------------------------------------------------- config

@dataclass
class ModelConfig:
    layout: str = "(3M1T)x2"
    dim: int = 64
    dim_merged: int = 256
    merge_at: Optional[int] = 5  # 1-based block index; merge runs before it
    patch: int = 8
    state_dim: int = 64
    head_dim: int = 64
    expand: int = 2
    conv_width: int = 4
    mlp_ratio: int = 4
    near: float = 0.01
    far: float = 4.0
    scan_chunk: int = 64
    attn_rows: int = 1024

    def __post_init__(self):
        self.blocks = parse_layout(self.layout).blocks
        n = len(self.blocks)
        if self.merge_at is not None and not 1 <= self.merge_at <= n:
            raise ValueError(f"merge_at {self.merge_at} outside [1, {n}]")
        for d in set(self.block_dims()):
            if (self.expand * d) % self.head_dim:
                raise ValueError(f"expand*dim {self.expand * d} not divisible by head_dim {self.head_dim}")

    def block_dims(self):
        """Working dim of each block (1-based merge boundary applied)."""
        return [self.dim_merged if self.merge_at is not None and b + 1 >= self.merge_at else self.dim
                for b in range(len(self.blocks))]

    @property
    def out_dim(self):
        return self.dim_merged if self.merge_at is not None else self.dim

    @property
    def patch_out(self):
        return self.patch * 2 if self.merge_at is not None else self.patch

    @property
    def pad_multiple(self):
        return self.patch * 2 if self.merge_at is not None else self.patch


def _trunc_normal(rng, shape, std):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(np.float32)


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def init_params(cfg, rng):
    """Fresh float32 parameter dict. Residual out-projections are shrunk by
    1/sqrt(2*num_blocks); SSM decay/step biases follow the usual ranges."""
    p = {}
    std = 0.02
    res_std = std / math.sqrt(2.0 * len(cfg.blocks))
    p["embed.w"] = _trunc_normal(rng, (cfg.patch ** 2 * IN_CHANNELS, cfg.dim), std)
    p["embed.b"] = np.zeros(cfg.dim, dtype=np.float32)
    dims = cfg.block_dims()
    for i, (kind, d) in enumerate(zip(cfg.blocks, dims)):
        pre = f"blocks.{i}."
        p[pre + "norm.g"] = np.ones(d, dtype=np.float32)
        p[pre + "norm.b"] = np.zeros(d, dtype=np.float32)
        if kind == "M":
            di = cfg.expand * d
            heads = di // cfg.head_dim
            conv_dim = di + 2 * cfg.state_dim
            p[pre + "in_proj.w"] = _trunc_normal(rng, (d, 2 * di + 2 * cfg.state_dim + heads), std)
            p[pre + "conv.w"] = _trunc_normal(rng, (cfg.conv_width, conv_dim), std)
            p[pre + "conv.b"] = np.zeros(conv_dim, dtype=np.float32)
            p[pre + "a_log"] = np.log(rng.uniform(1.0, 16.0, size=heads)).astype(np.float32)
            p[pre + "dt_bias"] = _inv_softplus(
                np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=heads))).astype(np.float32)
            p[pre + "out_proj.w"] = _trunc_normal(rng, (di, d), res_std)
        else:
            p[pre + "qkv.w"] = _trunc_normal(rng, (d, 3 * d), std)
            p[pre + "qkv.b"] = np.zeros(3 * d, dtype=np.float32)
            p[pre + "attn_out.w"] = _trunc_normal(rng, (d, d), res_std)
            p[pre + "attn_out.b"] = np.zeros(d, dtype=np.float32)
            p[pre + "norm2.g"] = np.ones(d, dtype=np.float32)
            p[pre + "norm2.b"] = np.zeros(d, dtype=np.float32)
            p[pre + "fc1.w"] = _trunc_normal(rng, (d, cfg.mlp_ratio * d), std)
            p[pre + "fc1.b"] = np.zeros(cfg.mlp_ratio * d, dtype=np.float32)
            p[pre + "fc2.w"] = _trunc_normal(rng, (cfg.mlp_ratio * d, d), res_std)
            p[pre + "fc2.b"] = np.zeros(d, dtype=np.float32)
    if cfg.merge_at is not None:
        p["merge.w"] = _trunc_normal(rng, (2, 2, cfg.dim, cfg.dim_merged), std)
        p["merge.b"] = np.zeros(cfg.dim_merged, dtype=np.float32)
    p["final_norm.g"] = np.ones(cfg.out_dim, dtype=np.float32)
    p["final_norm.b"] = np.zeros(cfg.out_dim, dtype=np.float32)
    p["decode.w"] = _trunc_normal(rng, (cfg.out_dim, cfg.patch_out ** 2 * RAW_CHANNELS), std)
    p["decode.b"] = np.zeros(cfg.patch_out ** 2 * RAW_CHANNELS, dtype=np.float32)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def param_count(cfg):
    """Analytic parameter count; must match init_params exactly."""
    n = 0
    n += cfg.patch ** 2 * IN_CHANNELS * cfg.dim + cfg.dim
    for kind, d in zip(cfg.blocks, cfg.block_dims()):
        n += 2 * d  # norm
        if kind == "M":
            di = cfg.expand * d
            heads = di // cfg.head_dim
            conv_dim = di + 2 * cfg.state_dim
            n += d * (2 * di + 2 * cfg.state_dim + heads)
            n += cfg.conv_width * conv_dim + conv_dim
            n += 2 * heads
            n += di * d
        else:
            n += d * 3 * d + 3 * d
            n += d * d + d
            n += 2 * d
            n += d * cfg.mlp_ratio * d + cfg.mlp_ratio * d
            n += cfg.mlp_ratio * d * d + d
    if cfg.merge_at is not None:
        n += 4 * cfg.dim * cfg.dim_merged + cfg.dim_merged
    n += 2 * cfg.out_dim
    n += cfg.out_dim * cfg.patch_out ** 2 * RAW_CHANNELS + cfg.patch_out ** 2 * RAW_CHANNELS
    return n


# ------------------------------------------------------------------- scans

def ssm_scan_sequential(x, a, B, C, dt):
    """Reference scan, plain numpy.

    h_t = exp(-dt_t * a) * h_{t-1} + dt_t * outer(x_t, B_t)
    y_t = h_t . C_t
    x: (L,H,P), a: (H,), B,C: (L,N), dt: (L,H). Returns (L,H,P).
    """
    L, H, P = x.shape
    N = B.shape[1]
    h = np.zeros((H, P, N), dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(L):
        decay = np.exp(-dt[t] * a)
        h = decay[:, None, None] * h + dt[t][:, None, None] * (x[t][:, :, None] * B[t][None, None, :])
        y[t] = h @ C[t]
    return y


def _as_tensor(v):
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v))


def ssm_scan_chunked(x, a, B, C, dt, chunk):
    """Chunked scan, differentiable; equals ssm_scan_sequential exactly
    (up to float accumulation) for any chunk size in [1, L].

    Within a chunk, all pairwise decays become one masked matmul; chunks
    exchange a single (H,P,N) state. L is padded up with dt=0 steps (decay
    1, zero contribution), so ragged chunk sizes are fine.
    """
    x, a, B, C, dt = map(_as_tensor, (x, a, B, C, dt))
    L, H, P = x.shape
    N = B.shape[1]
    c = int(chunk)
    if not 1 <= c:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    c = min(c, L) if L else 1
    pad = (-L) % c
    dtz = x.dtype
    if pad:
        zrow = lambda t, shape: ops.concat([t, Tensor(np.zeros(shape, dtype=dtz))], 0)
        x = zrow(x, (pad, H, P))
        B = zrow(B, (pad, N))
        C = zrow(C, (pad, N))
        dt = zrow(dt, (pad, H))
    Lp = L + pad
    nc = Lp // c

    lam = ops.mul(ops.neg(dt), a)                       # (Lp,H) log-decay
    lamc = ops.reshape(lam, (nc, c, H))
    cum = ops.cumsum(lamc, 1)                           # inclusive within chunk
    xc = ops.reshape(x, (nc, c, H, P))
    Bc = ops.reshape(B, (nc, c, N))
    Cc = ops.reshape(C, (nc, c, N))
    dtc = ops.reshape(dt, (nc, c, H))

    # intra-chunk: y[i] += sum_{j<=i} (C_i.B_j) exp(cum_i-cum_j) dt_j x_j
    S = ops.matmul(Cc, ops.transpose(Bc, (0, 2, 1)))    # (nc,c,c)
    diff = ops.sub(ops.reshape(cum, (nc, c, 1, H)), ops.reshape(cum, (nc, 1, c, H)))
    future = np.triu(np.ones((c, c), dtype=bool), k=1).reshape(1, c, c, 1)
    dec = ops.exp(ops.masked_fill(diff, future, -1e30))
    W = ops.mul(ops.mul(ops.reshape(S, (nc, c, c, 1)), dec), ops.reshape(dtc, (nc, 1, c, H)))
    y = ops.matmul(ops.transpose(W, (0, 3, 1, 2)), ops.transpose(xc, (0, 2, 1, 3)))  # (nc,H,c,P)
    y = ops.transpose(y, (0, 2, 1, 3))                  # (nc,c,H,P)

    # per-chunk end state: E[k] = sum_j exp(cum_last-cum_j) dt_j x_j B_j^T
    decs = ops.exp(cum)                                 # (nc,c,H) decay from chunk start
    last = ops.getitem(cum, (slice(None), slice(c - 1, c)))     # (nc,1,H)
    dec_end = ops.exp(ops.sub(last, cum))               # (nc,c,H)
    xw = ops.mul(ops.reshape(ops.mul(dec_end, dtc), (nc, c, H, 1)), xc)
    E = ops.matmul(ops.transpose(xw, (0, 2, 3, 1)), ops.reshape(Bc, (nc, 1, c, N)))  # (nc,H,P,N)
    Tk = ops.exp(ops.reshape(last, (nc, H)))            # (nc,H) whole-chunk decay

    # inter-chunk: carry the state, emit C_i . (exp(cum_i) h_prev)
    parts = []
    h_state = None
    for k in range(nc):
        if h_state is None:
            parts.append(Tensor(np.zeros((1, c, H, P), dtype=dtz)))
            h_state = ops.getitem(E, k)                 # (H,P,N)
        else:
            Cd = ops.mul(ops.reshape(ops.getitem(Cc, k), (c, 1, N)),
                         ops.reshape(ops.getitem(decs, k), (c, H, 1)))   # (c,H,N)
            yk = ops.matmul(ops.transpose(Cd, (1, 0, 2)),
                            ops.transpose(h_state, (0, 2, 1)))           # (H,c,P)
            parts.append(ops.reshape(ops.transpose(yk, (1, 0, 2)), (1, c, H, P)))
            scale = ops.reshape(ops.getitem(Tk, k), (H, 1, 1))
            h_state = ops.add(ops.mul(scale, h_state), ops.getitem(E, k))
    y = ops.add(y, ops.concat(parts, 0))
    y = ops.reshape(y, (Lp, H, P))
    if pad:
        y = ops.getitem(y, slice(0, L))
    return y


# ------------------------------------------------------------------- blocks

def _causal_conv(u, w, b):
    """Depthwise causal conv along the sequence. u: (L,C), w: (K,C)."""
    L = u.shape[0]
    K = w.shape[0]
    padded = ops.concat([Tensor(np.zeros((K - 1, u.shape[1]), dtype=u.dtype)), u], 0)
    acc = None
    for k in range(K):
        term = ops.mul(ops.getitem(padded, slice(k, k + L)), ops.getitem(w, k))
        acc = term if acc is None else ops.add(acc, term)
    return ops.add(acc, b)


def _scan_branch(xBC, dt_raw, p, pre, cfg, d):
    """conv -> SiLU -> split -> scan, for one scan direction."""
    di = cfg.expand * d
    heads = di // cfg.head_dim
    N = cfg.state_dim
    L = xBC.shape[0]
    u = ops.silu(_causal_conv(xBC, p[pre + "conv.w"], p[pre + "conv.b"]))
    xs = ops.reshape(ops.getitem(u, (slice(None), slice(0, di))), (L, heads, cfg.head_dim))
    B = ops.getitem(u, (slice(None), slice(di, di + N)))
    C = ops.getitem(u, (slice(None), slice(di + N, di + 2 * N)))
    dt = ops.softplus(ops.add(dt_raw, p[pre + "dt_bias"]))
    a = ops.exp(p[pre + "a_log"])
    y = ssm_scan_chunked(xs, a, B, C, dt, cfg.scan_chunk)
    return ops.reshape(y, (L, di))


def mamba2_block(x, p, idx, cfg, d):
    """Bidirectional SSM block: shared projections, forward plus flipped
    scan (conv included per direction, so reversal symmetry is exact)."""
    pre = f"blocks.{idx}."
    di = cfg.expand * d
    heads = di // cfg.head_dim
    conv_dim = di + 2 * cfg.state_dim
    h = ops.layer_norm(x, p[pre + "norm.g"], p[pre + "norm.b"])
    zxd = ops.matmul(h, p[pre + "in_proj.w"])
    z = ops.getitem(zxd, (slice(None), slice(0, di)))
    xBC = ops.getitem(zxd, (slice(None), slice(di, di + conv_dim)))
    dt_raw = ops.getitem(zxd, (slice(None), slice(di + conv_dim, di + conv_dim + heads)))
    y_f = _scan_branch(xBC, dt_raw, p, pre, cfg, d)
    y_b = ops.flip(_scan_branch(ops.flip(xBC, 0), ops.flip(dt_raw, 0), p, pre, cfg, d), 0)
    y = ops.mul(ops.add(y_f, y_b), ops.silu(z))
    return ops.add(x, ops.matmul(y, p[pre + "out_proj.w"]))


def transformer_block(x, p, idx, cfg, d):
    """Pre-norm global attention (no mask) + pre-norm MLP."""
    pre = f"blocks.{idx}."
    heads = d // cfg.head_dim
    L = x.shape[0]
    h = ops.layer_norm(x, p[pre + "norm.g"], p[pre + "norm.b"])
    qkv = ops.add(ops.matmul(h, p[pre + "qkv.w"]), p[pre + "qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (L, 3, heads, cfg.head_dim)), (1, 2, 0, 3))
    q = ops.getitem(qkv, 0)  # (heads, L, hd)
    k = ops.getitem(qkv, 1)
    v = ops.getitem(qkv, 2)
    q = ops.mul(q, 1.0 / math.sqrt(cfg.head_dim))
    kt = ops.transpose(k, (0, 2, 1))
    rows = []
    rb = max(1, cfg.attn_rows)
    for r0 in range(0, L, rb):
        qr = ops.getitem(q, (slice(None), slice(r0, min(r0 + rb, L))))
        att = ops.softmax_lastdim(ops.matmul(qr, kt))
        rows.append(ops.matmul(att, v))
    att = ops.concat(rows, 1) if len(rows) > 1 else rows[0]   # (heads, L, hd)
    att = ops.reshape(ops.transpose(att, (1, 0, 2)), (L, d))
    x = ops.add(x, ops.add(ops.matmul(att, p[pre + "attn_out.w"]), p[pre + "attn_out.b"]))
    h2 = ops.layer_norm(x, p[pre + "norm2.g"], p[pre + "norm2.b"])
    mlp = ops.gelu(ops.add(ops.matmul(h2, p[pre + "fc1.w"]), p[pre + "fc1.b"]))
    mlp = ops.add(ops.matmul(mlp, p[pre + "fc2.w"]), p[pre + "fc2.b"])
    return ops.add(x, mlp)


def token_merge(x, layout, w, b):
    """Per-image 2x2 stride-2 conv over the patch grid: L -> L/4, D -> D'.

    Never mixes tokens across images; the effective patch size doubles.
    """
    spat = ops.reshape(x, (layout.n, layout.grid_h, layout.grid_w, x.shape[1]))
    merged = ops.add(ops.conv2x2s2(spat, w), b)
    new_layout = layout.merged()
    return ops.reshape(merged, (new_layout.tokens, merged.shape[3])), new_layout


def run_block(x, p, idx, kind, cfg, d):
    if kind == "M":
        return mamba2_block(x, p, idx, cfg, d)
    return transformer_block(x, p, idx, cfg, d)


def embed_tokens(tokens, p):
    return ops.add(ops.matmul(_as_tensor(tokens), p["embed.w"]), p["embed.b"])


def unpatchify(y, layout, channels):
    """(L, p*p*C) tokens back to (N, H, W, C); inverse of geometry.patchify."""
    n, gh, gw, pp = layout.n, layout.grid_h, layout.grid_w, layout.patch
    y = ops.reshape(y, (n, gh, gw, pp, pp, channels))
    y = ops.transpose(y, (0, 1, 3, 2, 4, 5))
    return ops.reshape(y, (n, gh * pp, gw * pp, channels))


def forward_features(params, cfg, feats):
    """(N,H,W,9) input features -> (N,H,W,57) raw Gaussian channels.

    Images are edge-padded up to the token/merge multiple; padded pixels are
    cropped away after decoding (their would-be Gaussians are dropped).
    """
    feats = np.asarray(feats, dtype=np.float32)
    padded, (h0, w0) = pad_to_multiple(feats, cfg.pad_multiple)
    tokens, layout = patchify(padded, cfg.patch)
    x = embed_tokens(tokens, params)
    dims = cfg.block_dims()
    for i, kind in enumerate(cfg.blocks):
        if cfg.merge_at is not None and i + 1 == cfg.merge_at:
            x, layout = token_merge(x, layout, params["merge.w"], params["merge.b"])
        x = run_block(x, params, i, kind, cfg, dims[i])
    x = ops.layer_norm(x, params["final_norm.g"], params["final_norm.b"])
    x = ops.add(ops.matmul(x, params["decode.w"]), params["decode.b"])
    out = unpatchify(x, layout, RAW_CHANNELS)
    if (h0, w0) != out.shape[1:3]:
        out = ops.getitem(out, (slice(None), slice(0, h0), slice(0, w0)))
    return out
