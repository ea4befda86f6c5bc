"""Static cost accounting for the six mixers, plus an empirical MAC counter.

The FLOPs and parameter expressions are evaluated verbatim as published
(identity NC^2; pooling NK^2C + NC^2; grouped conv 2NK^2C + NC^2; local
attention 5NC^2 + NK^2C + N + 2NK^2; conv 2NK^2C^2 + NC^2; global
attention 5NC^2 + N^2C + N + 2N^2 -- and C^2 / C^2 / K^2C+C^2 / 5C^2 /
K^2C^2+C^2 / 5C^2 parameters), one multiply-accumulate counting as the
written factor 2. The NC^2 channel-MLP share undercounts a ratio-4 MLP;
we reproduce the published accounting rather than re-deriving it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .metaformer import ModelConfig

KINDS = ("identity", "pooling", "grouped_conv", "local_attn", "conv", "global_attn")
KERNEL_KINDS = ("pooling", "grouped_conv", "local_attn", "conv")


def _check_kind(kind: str, k: Optional[int]):
    if kind not in KINDS:
        raise ConfigError(f"unknown mixer kind {kind!r}")
    if kind in KERNEL_KINDS and k is None:
        raise ConfigError(f"{kind} needs a kernel size K")


def flops_formula(kind: str, c: int, n: int, k: Optional[int] = None) -> int:
    """Evaluate the published FLOPs expression for one block placement."""
    _check_kind(kind, k)
    if kind == "identity":
        return n * c * c
    if kind == "pooling":
        return n * k * k * c + n * c * c
    if kind == "grouped_conv":
        return n * 2 * k * k * c + n * c * c
    if kind == "local_attn":
        return 5 * n * c * c + n * k * k * c + n + 2 * n * k * k
    if kind == "conv":
        return n * 2 * k * k * c * c + n * c * c
    # global_attn
    return 5 * n * c * c + n * n * c + n + 2 * n * n


def flops_mixer_term(kind: str, c: int, n: int, k: Optional[int] = None) -> int:
    """The FLOPs expression minus the NC^2 channel-MLP share."""
    return flops_formula(kind, c, n, k) - n * c * c


def param_formula(kind: str, c: int, k: Optional[int] = None) -> int:
    """Evaluate the published parameter expression for one block placement."""
    _check_kind(kind, k)
    if kind in ("identity", "pooling"):
        return c * c
    if kind == "grouped_conv":
        return k * k * c + c * c
    if kind == "conv":
        return k * k * c * c + c * c
    # both attention variants
    return 5 * c * c


def param_mixer_term(kind: str, c: int, k: Optional[int] = None) -> int:
    """The parameter expression minus the C^2 channel-MLP share."""
    return param_formula(kind, c, k) - c * c


@dataclass
class CostReport:
    stage: int
    kind: str
    channels: int
    positions: int  # N = H*W at the stage
    kernel: Optional[int]
    flops: int
    params: int
    empirical_macs: Optional[int] = None


def stage_sweep(config: ModelConfig, input_hw: Optional[tuple[int, int]] = None,
                kernel: int = 3) -> list[CostReport]:
    """Cost reports for all 4 stages x all 6 mixer kinds.

    ``kernel`` is used for every kernel-based kind; identity and global
    attention ignore it.
    """
    reports = []
    for stage, ((h, w), c) in enumerate(zip(config.stage_hw(input_hw), config.stage_channels)):
        n = h * w
        for kind in KINDS:
            k = kernel if kind in KERNEL_KINDS else None
            reports.append(
                CostReport(
                    stage=stage,
                    kind=kind,
                    channels=c,
                    positions=n,
                    kernel=k,
                    flops=flops_formula(kind, c, n, k),
                    params=param_formula(kind, c, k),
                )
            )
    return reports


def sweep_to_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    buf.write("stage,mixer,K,C,N,flops,params,macs\n")
    for r in reports:
        k = "" if r.kernel is None else str(r.kernel)
        macs = "" if r.empirical_macs is None else str(r.empirical_macs)
        buf.write(f"{r.stage},{r.kind},{k},{r.channels},{r.positions},{r.flops},{r.params},{macs}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# instrumented multiply-accumulate counting
# ---------------------------------------------------------------------------


def empirical_mac_count(kind: str, c: int, h: int, w: int, k: Optional[int] = None,
                        padding: str = "wrap", seed: int = 0) -> int:
    """Run an instrumented shape-preserving mixer forward and count MACs.

    Only taps that touch a real input pixel count; with ``padding="wrap"``
    every tap is real, so the count matches the formula mixer term exactly
    (divided by the written factor 2 for the convolutions). ``padding="zero"``
    leaves out the border taps that fall outside the image.

    Defined for identity, pooling, conv and grouped_conv; attention kinds
    have no K x K tap structure to instrument this way.
    """
    if kind == "identity":
        return 0
    if kind not in ("pooling", "conv", "grouped_conv"):
        raise ConfigError(f"empirical MAC counting is defined for kernel mixers, not {kind!r}")
    if k is None or k % 2 == 0:
        raise ConfigError("kernel mixers need an odd K")
    if padding not in ("wrap", "zero"):
        raise ConfigError(f"padding must be wrap or zero, got {padding!r}")

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w))
    if kind == "pooling":
        weights = np.full((c, 1, k, k), 1.0 / (k * k))
        cin_per_out = 1
        grouped = True
    elif kind == "grouped_conv":
        weights = rng.standard_normal((c, 1, k, k))
        cin_per_out = 1
        grouped = True
    else:
        weights = rng.standard_normal((c, c, k, k))
        cin_per_out = c
        grouped = False

    half = (k - 1) // 2
    macs = 0
    out = np.zeros((c, h, w))
    for co in range(c):
        for oy in range(h):
            for ox in range(w):
                acc = 0.0
                for ci in range(cin_per_out):
                    src = co if grouped else ci
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy + ky - half
                            ix = ox + kx - half
                            if padding == "wrap":
                                iy %= h
                                ix %= w
                            elif not (0 <= iy < h and 0 <= ix < w):
                                continue
                            acc += x[src, iy, ix] * weights[co, ci, ky, kx]
                            macs += 1
                out[co, oy, ox] = acc
    return macs
