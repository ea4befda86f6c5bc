"""The six interchangeable token mixers.

Every mixer maps (B, C, H, W) -> (B, C, H, W) without touching resolution
or channel count; everything else in a block (norms, channel MLP,
residuals) stays fixed. Kernel-based mixers run stride 1 with padding
(K-1)/2 and no bias, so their trainable parameter counts are exactly
K^2*C^2 (conv), K^2*C (grouped conv), 4*C^2 (attention).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    conv2d,
    linear,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
)

MIXER_KINDS = ("identity", "pooling", "conv", "grouped_conv", "local_attn", "global_attn")

# largest allowed score matrix (B*M*N*N float64 elements) before a mixer
# refuses to materialize attention; mirrors running out of accelerator
# memory on huge inputs, but as an explicit error
DEFAULT_SCORE_BUDGET = 2**26


@dataclass(frozen=True)
class MixerSpec:
    """Which mixer to place at a stage, and its kernel / head geometry."""

    kind: str
    kernel: int = 3
    heads_divisor: int = 16

    def __post_init__(self):
        if self.kind not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer kind {self.kind!r}; choose from {MIXER_KINDS}")
        if self.uses_kernel and (self.kernel < 3 or self.kernel % 2 == 0):
            raise ConfigError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.heads_divisor < 1:
            raise ConfigError("heads_divisor must be positive")

    @property
    def uses_kernel(self) -> bool:
        return self.kind in ("pooling", "conv", "grouped_conv", "local_attn")

    @property
    def is_attention(self) -> bool:
        return self.kind in ("local_attn", "global_attn")

    def heads(self, channels: int) -> int:
        return head_count(channels, self.heads_divisor)

    def param_count(self, channels: int) -> int:
        """Trainable parameters the mixer itself adds (positional embedding excluded)."""
        if self.kind == "conv":
            return self.kernel * self.kernel * channels * channels
        if self.kind == "grouped_conv":
            return self.kernel * self.kernel * channels
        if self.is_attention:
            return 4 * channels * channels
        return 0


def head_count(channels: int, heads_divisor: int = 16) -> int:
    """Head count M = C // heads_divisor, floored at one head.

    C must then be divisible by M so heads split evenly; the S12 stage
    widths (64..512) give M = 4/8/20/32.
    """
    m = max(1, channels // heads_divisor)
    if channels % m:
        raise ConfigError(f"C={channels} not divisible by head count M={m}")
    return m


@dataclass
class NeighborhoodMask:
    """Allowed (query, key) pairs for local attention on an H x W grid.

    allowed[r, s] is True iff the unraveled coordinates satisfy
    |i - h| < K/2 and |j - w| < K/2 in both axes. The matrix is symmetric
    and every row contains at least the pixel itself.
    """

    kernel: int
    height: int
    width: int
    allowed: np.ndarray = field(repr=False)

    def to_additive(self) -> np.ndarray:
        """0 where allowed, -inf where masked; broadcastable over heads."""
        out = np.where(self.allowed, 0.0, -np.inf)
        return out


def build_neighborhood_mask(height: int, width: int, kernel: int) -> NeighborhoodMask:
    if kernel < 1:
        raise ConfigError("neighborhood kernel must be >= 1")
    if kernel % 2 == 0:
        raise ConfigError("neighborhood kernel must be odd")
    hh, ww = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rows = hh.reshape(-1)
    cols = ww.reshape(-1)
    half = kernel / 2.0
    dy = np.abs(rows[:, None] - rows[None, :]) < half
    dx = np.abs(cols[:, None] - cols[None, :]) < half
    return NeighborhoodMask(kernel=kernel, height=height, width=width, allowed=dy & dx)


# ---------------------------------------------------------------------------
# mixer parameters
# ---------------------------------------------------------------------------


@dataclass
class ConvMixerParams:
    kernel: Tensor  # (Cout, Cin/groups, K, K), bias-free

    def named(self, prefix: str):
        return [(f"{prefix}.kernel", self.kernel)]


@dataclass
class AttentionParams:
    """Projections for the key/value/query roles plus the head-merging map."""

    wk: Tensor
    wv: Tensor
    wq: Tensor
    wu: Tensor
    pos_emb: Optional[Tensor] = None  # (C, H, W), global attention only

    def named(self, prefix: str):
        out = [
            (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv),
            (f"{prefix}.wq", self.wq),
            (f"{prefix}.wu", self.wu),
        ]
        if self.pos_emb is not None:
            out.append((f"{prefix}.pos_emb", self.pos_emb))
        return out


def init_mixer_params(
    spec: MixerSpec,
    channels: int,
    hw: tuple[int, int],
    rng: np.random.Generator,
    with_pos: bool = True,
):
    """Fresh trainable parameters for one mixer placement (None if it has none).

    ``with_pos=False`` skips the positional embedding for global attention,
    for callers that share one embedding across the blocks of a stage.
    """
    c = channels
    if spec.kind == "conv":
        w = rng.standard_normal((c, c, spec.kernel, spec.kernel)) * 0.02
        return ConvMixerParams(Tensor(w, requires_grad=True))
    if spec.kind == "grouped_conv":
        w = rng.standard_normal((c, 1, spec.kernel, spec.kernel)) * 0.02
        return ConvMixerParams(Tensor(w, requires_grad=True))
    if spec.is_attention:
        spec.heads(c)  # validate head split early
        mk = lambda: Tensor(rng.standard_normal((c, c)) * 0.02, requires_grad=True)
        pos = None
        if spec.kind == "global_attn" and with_pos:
            pos = Tensor(rng.standard_normal((c,) + tuple(hw)) * 0.02, requires_grad=True)
        return AttentionParams(wk=mk(), wv=mk(), wq=mk(), wu=mk(), pos_emb=pos)
    return None


# ---------------------------------------------------------------------------
# the mixers
# ---------------------------------------------------------------------------


def mix_identity(x: Tensor) -> Tensor:
    return x


def mix_pool(x: Tensor, kernel: int) -> Tensor:
    return avg_pool2d(x, kernel, stride=1, padding=(kernel - 1) // 2)


def mix_conv(x: Tensor, params: ConvMixerParams, kernel: int) -> Tensor:
    return conv2d(x, params.kernel, stride=1, padding=(kernel - 1) // 2)


def mix_grouped_conv(x: Tensor, params: ConvMixerParams, kernel: int) -> Tensor:
    c = x.shape[1]
    return conv2d(x, params.kernel, stride=1, padding=(kernel - 1) // 2, groups=c)


def _attention(
    x: Tensor,
    params: AttentionParams,
    heads: int,
    additive_mask: Optional[np.ndarray],
    score_budget: int,
    return_attn: bool,
):
    b, c, h, w = x.shape
    n = h * w
    m = heads
    d = c // m
    if b * m * n * n > score_budget:
        raise CapacityError(
            f"attention score matrix of {b}x{m}x{n}x{n} elements exceeds the budget of {score_budget}"
        )
    tokens = reshape(transpose(x, (0, 2, 3, 1)), (b, n, c))
    q = linear(tokens, params.wq)
    k = linear(tokens, params.wk)
    v = linear(tokens, params.wv)

    def split_heads(t):
        return transpose(reshape(t, (b, n, m, d)), (0, 2, 1, 3))

    # prescale q by 1/sqrt(D): same math as scaling the scores, better conditioned
    q = mul(split_heads(q), 1.0 / np.sqrt(d))
    k = split_heads(k)
    v = split_heads(v)
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    attn = softmax(scores, axis=-1, additive_mask=additive_mask)
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, c))
    out_tokens = linear(merged, params.wu)
    out = transpose(reshape(out_tokens, (b, h, w, c)), (0, 3, 1, 2))
    if return_attn:
        return out, attn.data
    return out


def mix_global_attn(
    x: Tensor,
    params: AttentionParams,
    heads_divisor: int = 16,
    score_budget: int = DEFAULT_SCORE_BUDGET,
    return_attn: bool = False,
):
    """Multi-head scaled dot-product over all N = H*W positions.

    The learned positional embedding (C, H, W) is added to x before the
    key/value/query projections.
    """
    b, c, h, w = x.shape
    if params.pos_emb is not None:
        if params.pos_emb.shape != (c, h, w):
            raise ShapeError(
                f"positional embedding shape {params.pos_emb.shape} does not match input {(c, h, w)}"
            )
        x = add(x, reshape(params.pos_emb, (1, c, h, w)))
    return _attention(x, params, head_count(c, heads_divisor), None, score_budget, return_attn)


def mix_local_attn(
    x: Tensor,
    params: AttentionParams,
    mask: NeighborhoodMask,
    heads_divisor: int = 16,
    score_budget: int = DEFAULT_SCORE_BUDGET,
    return_attn: bool = False,
):
    """Attention restricted to the K x K neighborhood via an additive -inf mask.

    No positional term: the restriction itself encodes locality, and the
    parameter count stays at the four projection matrices.
    """
    b, c, h, w = x.shape
    if (mask.height, mask.width) != (h, w):
        raise ShapeError(f"mask built for {mask.height}x{mask.width}, input is {h}x{w}")
    return _attention(x, params, head_count(c, heads_divisor), mask.to_additive(), score_budget, return_attn)


def apply_mixer(
    spec: MixerSpec,
    params,
    x: Tensor,
    mask: Optional[NeighborhoodMask] = None,
    score_budget: int = DEFAULT_SCORE_BUDGET,
) -> Tensor:
    """Dispatch to the mixer named by spec.kind."""
    if spec.kind == "identity":
        return mix_identity(x)
    if spec.kind == "pooling":
        return mix_pool(x, spec.kernel)
    if spec.kind == "conv":
        return mix_conv(x, params, spec.kernel)
    if spec.kind == "grouped_conv":
        return mix_grouped_conv(x, params, spec.kernel)
    if spec.kind == "local_attn":
        if mask is None:
            mask = build_neighborhood_mask(x.shape[2], x.shape[3], spec.kernel)
        return mix_local_attn(x, params, mask, spec.heads_divisor, score_budget)
    if spec.kind == "global_attn":
        return mix_global_attn(x, params, spec.heads_divisor, score_budget)
    raise ConfigError(f"unknown mixer kind {spec.kind!r}")


def warm_start_remap(source: AttentionParams, target: AttentionParams) -> AttentionParams:
    """Copy the pretrained attention weight matrices from global to local attention.

    The four projections transfer verbatim; the local target has no
    positional-embedding slot to fill. Stage widths must match.
    """
    for name in ("wk", "wv", "wq", "wu"):
        src: Tensor = getattr(source, name)
        dst: Tensor = getattr(target, name)
        if src.shape != dst.shape:
            raise ShapeError(
                f"warm start {name}: source shape {src.shape} != target shape {dst.shape}"
            )
    for name in ("wk", "wv", "wq", "wu"):
        getattr(target, name).data[...] = getattr(source, name).data
    return target
