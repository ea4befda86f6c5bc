"""Training recipe at desk scale: losses, AdamW, the warmup+cosine
schedule, light affine augmentation, class-balanced patch sampling, and
per-layer gradient-norm monitoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericsError
from .metaformer import MetaFormer
from .tensor import Tape, Tensor, log_softmax, mul, softmax, tsum

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DICE_SMOOTH = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    label_smoothing: float = 0.1
    class_weight_clamp: float = 10.0
    seed: int = 0
    loss: str = "ce"  # ce | ce_plus_dice
    ignore_background: bool = False
    augment_sigma: float = 0.0  # 0 disables affine augmentation
    grad_norm_alarm: Optional[float] = None

    def __post_init__(self):
        if not (self.lr > self.min_lr > 0):
            raise ConfigError("need lr > min_lr > 0")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ConfigError("label smoothing must be in [0, 1)")
        if self.class_weight_clamp < 1.0:
            raise ConfigError("class weight clamp must be >= 1")
        if self.loss not in ("ce", "ce_plus_dice"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


# ---------------------------------------------------------------------------
# class weighting and losses
# ---------------------------------------------------------------------------


def class_weights(label_counts: Sequence[int], clamp: float = 10.0) -> np.ndarray:
    """Inverse-root-frequency weights, clamped, max-frequency class at 1.

    w_c = min(clamp, sqrt(max_count / count_c)); zero-count classes sit at
    the clamp (they never contribute to a weighted mean anyway).
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("label_counts must be a non-empty 1D sequence")
    if (counts < 0).any():
        raise ConfigError("label counts cannot be negative")
    top = counts.max()
    if top == 0:
        raise DataError("all class counts are zero")
    with np.errstate(divide="ignore"):
        w = np.sqrt(top / counts)
    return np.minimum(clamp, w)


def ce_loss(
    logits: Tensor,
    targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
    smoothing: float = 0.0,
    ignore_index: Optional[int] = None,
) -> Tensor:
    """Smoothed, class-weighted cross-entropy.

    The target distribution puts (1 - eps) on the true class and
    eps/num_classes on every other class. Accepts (B, K) logits with (B,)
    targets or (B, K, H, W) logits with (B, H, W) targets; rows whose
    target equals ignore_index are excluded. Result is the weighted mean
    over contributing elements.
    """
    from .tensor import transpose, reshape

    targets = np.asarray(targets)
    if logits.ndim == 4:
        k = logits.shape[1]
        flat_logits = reshape(transpose(logits, (0, 2, 3, 1)), (-1, k))
        flat_targets = targets.reshape(-1)
    elif logits.ndim == 2:
        k = logits.shape[1]
        flat_logits = logits
        flat_targets = targets.reshape(-1)
    else:
        raise ConfigError(f"ce_loss expects 2D or 4D logits, got {logits.ndim}D")
    if flat_targets.shape[0] != flat_logits.shape[0]:
        raise ConfigError("logits and targets disagree on the number of elements")

    valid = np.ones(flat_targets.shape[0], dtype=bool)
    if ignore_index is not None:
        valid = flat_targets != ignore_index
    checked = flat_targets[valid]
    if checked.size and ((checked < 0).any() or (checked >= k).any()):
        raise DataError(f"target class ids must be in [0, {k})")
    if not valid.any():
        raise DataError("every element is ignored; nothing to average")

    q = np.full((flat_targets.shape[0], k), smoothing / k)
    rows = np.arange(flat_targets.shape[0])
    safe_targets = np.where(valid, flat_targets, 0)
    q[rows, safe_targets] = 1.0 - smoothing
    q[~valid] = 0.0

    if weights is None:
        row_w = valid.astype(np.float64)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (k,):
            raise ConfigError(f"weights must have shape ({k},)")
        row_w = np.where(valid, weights[safe_targets], 0.0)

    logp = log_softmax(flat_logits, axis=1)
    weighted_q = q * row_w[:, None]
    total = tsum(mul(logp, weighted_q))
    return mul(total, -1.0 / row_w.sum())


def dice_loss(
    logits: Tensor,
    target_mask: np.ndarray,
    ignore_background: bool = True,
    smooth: float = DICE_SMOOTH,
) -> Tensor:
    """1 - mean soft Dice over foreground classes.

    Softmax runs internally over the class axis; a class with an empty
    target and an empty hard prediction is skipped from the mean.
    """
    target_mask = np.asarray(target_mask)
    if logits.ndim != 4:
        raise ConfigError("dice_loss expects (B, K, H, W) logits")
    b, k, h, w = logits.shape
    if target_mask.shape != (b, h, w):
        raise ConfigError(f"mask shape {target_mask.shape} != {(b, h, w)}")
    if (target_mask < 0).any() or (target_mask >= k).any():
        raise DataError(f"mask class ids must be in [0, {k})")

    probs = softmax(logits, axis=1)
    onehot = np.zeros((b, k, h, w))
    bidx, hidx, widx = np.meshgrid(np.arange(b), np.arange(h), np.arange(w), indexing="ij")
    onehot[bidx, target_mask, hidx, widx] = 1.0

    hard = probs.data.argmax(axis=1)
    keep = np.ones(k, dtype=bool)
    if ignore_background:
        keep[0] = False
    for c in range(k):
        target_empty = not (target_mask == c).any()
        pred_empty = not (hard == c).any()
        if target_empty and pred_empty:
            keep[c] = False
    if not keep.any():
        raise DataError("no class left to score in dice_loss")

    inter = tsum(mul(probs, onehot), axis=(0, 2, 3))
    psum = tsum(probs, axis=(0, 2, 3))
    tsum_const = onehot.sum(axis=(0, 2, 3))
    dice = (mul(inter, 2.0) + smooth) / (psum + (tsum_const + smooth))
    mean_dice = mul(tsum(mul(dice, keep.astype(np.float64))), 1.0 / keep.sum())
    return 1.0 - mean_dice


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
):
    """One decoupled-weight-decay Adam update, in place on param/m/v."""
    b1, b2 = betas
    param *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 weight_decay: float = 0.1, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in self.params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in self.params.items()}

    def step(self, lr: Optional[float] = None):
        """Apply one update; aborts (no mutation) on any non-finite gradient."""
        lr = self.lr if lr is None else lr
        bad = [
            name
            for name, p in self.params.items()
            if p.grad is not None and not np.isfinite(p.grad).all()
        ]
        if bad:
            raise NumericsError(f"non-finite gradients, step aborted: {sorted(bad)[:8]}")
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(
                p.data, p.grad, self.m[name], self.v[name], self.t,
                lr, self.weight_decay, self.betas, self.eps,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr: float, min_lr: float) -> float:
    """Linear 0 -> lr over the warmup, then one cosine cycle down to min_lr."""
    if warmup_steps >= total_steps:
        raise ConfigError("warmup must be shorter than the total schedule")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return lr
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# augmentation and sampling
# ---------------------------------------------------------------------------


def affine_augment(image: np.ndarray, rng: np.random.Generator, sigma: float = 0.1) -> np.ndarray:
    """Resample through a jittered affine map: identity + N(0, sigma^2) per entry.

    Coordinates are centered and normalized to [-1, 1], so the two
    translation entries shift by sigma * half-extent pixels and the linear
    entries scale/shear by the same relative magnitude. Bilinear sampling,
    zero fill outside the source image.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ConfigError("affine_augment expects (C, H, W)")
    mat = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    if sigma > 0:
        mat = mat + rng.normal(0.0, sigma, size=(2, 3))
    return apply_affine(image, mat)


def apply_affine(image: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Warp with a 2x3 matrix in normalized centered coords (x right, y down)."""
    c, h, w = image.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    half_h, half_w = (h - 1) / 2.0, (w - 1) / 2.0
    xn = (xs - half_w) / max(half_w, 1e-12)
    yn = (ys - half_h) / max(half_h, 1e-12)
    src_x = mat[0, 0] * xn + mat[0, 1] * yn + mat[0, 2]
    src_y = mat[1, 0] * xn + mat[1, 1] * yn + mat[1, 2]
    px = src_x * half_w + half_w
    py = src_y * half_h + half_h

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0

    out = np.zeros_like(image)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            out += image[:, yc, xc] * (wgt * inside)
    return out


def weighted_patch_sample(
    masks: Sequence[np.ndarray],
    patch_hw: tuple[int, int],
    rng: np.random.Generator,
    n_samples: int = 1,
):
    """Draw patch corners with probability proportional to the inverse root
    frequency of the class under each candidate patch center.

    Returns an (n_samples, 3) array of (image_index, top, left).
    """
    ph, pw = patch_hw
    masks = [np.asarray(m) for m in masks]
    counts: dict[int, int] = {}
    for m in masks:
        vals, cnt = np.unique(m, return_counts=True)
        for vv, cc in zip(vals, cnt):
            counts[int(vv)] = counts.get(int(vv), 0) + int(cc)
    cls_weight = {c: 1.0 / math.sqrt(n) for c, n in counts.items()}

    cand_weights = []
    cand_coords = []
    for idx, m in enumerate(masks):
        h, w = m.shape
        if ph > h or pw > w:
            raise DataError(f"patch {ph}x{pw} larger than image {h}x{w}")
        tops = np.arange(h - ph + 1)
        lefts = np.arange(w - pw + 1)
        cy = tops[:, None] + ph // 2
        cx = lefts[None, :] + pw // 2
        centers = m[cy, cx]
        wgt = np.vectorize(cls_weight.get)(centers).astype(np.float64)
        tt, ll = np.meshgrid(tops, lefts, indexing="ij")
        cand_weights.append(wgt.reshape(-1))
        cand_coords.append(
            np.stack([np.full(tt.size, idx), tt.reshape(-1), ll.reshape(-1)], axis=1)
        )
    probs = np.concatenate(cand_weights)
    probs = probs / probs.sum()
    coords = np.concatenate(cand_coords, axis=0)
    chosen = rng.choice(coords.shape[0], size=n_samples, p=probs)
    return coords[chosen]


# ---------------------------------------------------------------------------
# gradient monitoring
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    norms: dict[str, float]
    alarmed: list[str] = field(default_factory=list)

    @property
    def max_norm(self) -> float:
        return max(self.norms.values(), default=0.0)


def grad_norm_monitor(model: MetaFormer, threshold: Optional[float] = None) -> GradReport:
    """Per-layer gradient L2 norms (zero where no grad), with an optional alarm."""
    norms = {}
    for name, p in model.named_parameters().items():
        norms[name] = 0.0 if p.grad is None else float(np.sqrt((p.grad * p.grad).sum()))
    alarmed = []
    if threshold is not None:
        alarmed = sorted(name for name, val in norms.items() if val > threshold)
    return GradReport(norms=norms, alarmed=alarmed)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def f1_from_predictions(pred: np.ndarray, true: np.ndarray) -> float:
    from .evalrank import f1_macro

    return f1_macro(pred, true)


@dataclass
class TrainResult:
    history: list[dict]
    final_train_accuracy: float
    best_val_f1: Optional[float]
    best_state: Optional[dict]


def train_classifier(
    model: MetaFormer,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    val: Optional[tuple[np.ndarray, np.ndarray]] = None,
    log_path: Optional[str] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """The classification recipe: AdamW, warmup+cosine, smoothed weighted CE.

    Keeps the state with the highest validation macro-F1 when a validation
    split is provided. Deterministic for a fixed config seed.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if labels.shape[0] != n:
        raise DataError("images and labels disagree on the number of cases")
    k = model.config.num_classes
    counts = np.bincount(labels, minlength=k)
    weights = class_weights(counts, cfg.class_weight_clamp)

    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    warmup_steps = min(cfg.warmup_epochs * steps_per_epoch, max(0, total_steps - 1))

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    best_f1: Optional[float] = None
    best_state: Optional[dict] = None

    log_fh = open(log_path, "w") if log_path else None
    if log_fh:
        log_fh.write("step,lr,loss,val_f1,max_grad_norm\n")

    step = 0
    done = False
    try:
        while not done:
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                xb = images[batch]
                if cfg.augment_sigma > 0:
                    xb = np.stack([affine_augment(im, rng, cfg.augment_sigma) for im in xb])
                yb = labels[batch]
                lr_t = lr_schedule(step, total_steps, warmup_steps, cfg.lr, cfg.min_lr)
                opt.zero_grad()
                with Tape() as tape:
                    logits = model.forward_classify(Tensor(xb), training=True, rng=rng)
                    loss = ce_loss(logits, yb, weights, cfg.label_smoothing)
                tape.backward(loss)
                report = grad_norm_monitor(model, cfg.grad_norm_alarm)
                opt.step(lr=lr_t)
                row = {
                    "step": step,
                    "lr": lr_t,
                    "loss": float(loss.data),
                    "val_f1": "",
                    "max_grad_norm": report.max_norm,
                }
                is_epoch_end = start + cfg.batch_size >= n
                if is_epoch_end and val is not None:
                    vf1 = f1_from_predictions(predict_labels(model, val[0]), np.asarray(val[1]))
                    row["val_f1"] = vf1
                    if best_f1 is None or vf1 > best_f1:
                        best_f1 = vf1
                        best_state = model.state()
                history.append(row)
                if log_fh:
                    log_fh.write(
                        f"{row['step']},{row['lr']!r},{row['loss']!r},{row['val_f1']},{row['max_grad_norm']!r}\n"
                    )
                step += 1
                if step >= total_steps:
                    done = True
                    break
    finally:
        if log_fh:
            log_fh.close()

    acc = float((predict_labels(model, images) == labels).mean())
    return TrainResult(history, acc, best_f1, best_state)


def predict_labels(model: MetaFormer, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward_classify(Tensor(images[start : start + batch_size]))
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def predict_scores(model: MetaFormer, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward_classify(Tensor(images[start : start + batch_size]))
        e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out)


def make_two_class_blobs(n: int, hw: tuple[int, int] = (32, 32), seed: int = 0):
    """Seeded linearly separable toy set: class-signed mean shift plus a
    class-positioned blob over Gaussian noise."""
    rng = np.random.default_rng(seed)
    h, w = hw
    images = rng.normal(0.0, 0.2, size=(n, 3, h, w))
    labels = rng.integers(0, 2, size=n)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    blob0 = np.exp(-(((yy - h / 4) ** 2 + (xx - w / 4) ** 2) / (h * w / 32)))
    blob1 = np.exp(-(((yy - 3 * h / 4) ** 2 + (xx - 3 * w / 4) ** 2) / (h * w / 32)))
    for i in range(n):
        shift = 0.5 if labels[i] == 1 else -0.5
        images[i, 0] += shift
        images[i, 1] += blob1 if labels[i] == 1 else blob0
    return images, labels
