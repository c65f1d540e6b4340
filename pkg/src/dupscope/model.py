"""End-to-end pair model: patch encoder, duplication detector, mask decoder,
weighted BCE objective, AdamW training loop with cosine decay and early stop.

The two branches share every weight (encoder, detector, decoder), so the
architecture is symmetric under swapping the input pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .detector import DuplicationDetector, _from_grid, _to_grid
from .errors import (
    BadImageSize,
    ConfigError,
    DivergedLoss,
    EmptyDataset,
    NonFiniteResult,
    ShapeMismatch,
    ShapeMismatchOnLoad,
)
from .nn import Conv2dLayer, LayerNorm, Linear, MLP, MultiHeadAttention, bilinear_upsample
from .tensor import Tensor, clamp, reshape, sigmoid, silu, tlog, tmean, transpose

BCE_CLAMP = 1e-7  # probabilities clamped to [BCE_CLAMP, 1 - BCE_CLAMP]


@dataclass
class ModelConfig:
    """Model and training hyperparameters; everything needed to rebuild."""

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    encoder_depth: int = 2
    heads: int = 4
    ssm_state_dim: int = 8
    sigma: float = 0.5
    alpha: float = 5.0
    topk: int = 8
    loss_weights: tuple = (0.25, 0.25, 0.5)
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    weight_decay: float = 0.01
    seed: int = 0
    drop_path: float = 0.0
    dtype: str = "f32"
    rope_enabled: bool = True
    affinity_guided_cross: bool = True
    extra_layernorm: bool = False
    separate_heads: bool = False
    distinct_branch_proj: bool = False
    patience: int = 10
    min_delta: float = 1e-4
    grad_clip: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % 2 != 0:
            raise ConfigError("embed_dim must be even (rotary pairs)")
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")
        n = self.grid**2
        if not 1 <= self.topk <= n - 1:
            raise ConfigError(f"topk {self.topk} out of range for {n} tokens")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be 'f32' or 'f64'")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens(self):
        return self.grid**2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


class Encoder:
    """Non-overlapping patch embedding, learned positional bias, and a stack
    of pre-norm transformer blocks."""

    def __init__(self, cfg, rng):
        dtype = cfg.np_dtype
        c, p = cfg.embed_dim, cfg.patch_size
        self.cfg = cfg
        self.embed = Linear(3 * p * p, c, rng, dtype=dtype)
        self.pos = Tensor(
            (rng.standard_normal((cfg.tokens, c)) * 0.02).astype(dtype), requires_grad=True
        )
        self.blocks = []
        for _ in range(cfg.encoder_depth):
            self.blocks.append(
                {
                    "ln1": LayerNorm(c, dtype=dtype),
                    "attn": MultiHeadAttention(c, cfg.heads, rng, dtype=dtype),
                    "ln2": LayerNorm(c, dtype=dtype),
                    "mlp": MLP(c, 2 * c, rng, dtype=dtype),
                }
            )

    def patchify(self, x):
        """[B,3,H,W] -> [B,N,3*p*p] with patches in row-major grid order."""
        b = x.shape[0]
        g, p = self.cfg.grid, self.cfg.patch_size
        x = reshape(x, (b, 3, g, p, g, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        return reshape(x, (b, g * g, 3 * p * p))

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3]:
            raise BadImageSize(f"expected [B,3,H,H] images, got {x.shape}")
        if x.shape[2] != self.cfg.image_size:
            raise BadImageSize(
                f"expected image size {self.cfg.image_size}, got {x.shape[2]}"
            )
        tokens = self.embed(self.patchify(x)) + self.pos
        for blk in self.blocks:
            h = blk["ln1"](tokens)
            tokens = tokens + blk["attn"](h, h, h)
            tokens = tokens + blk["mlp"](blk["ln2"](tokens))
        return tokens

    def named_params(self):
        ps = [(f"embed.{n}", p) for n, p in self.embed.named_params()]
        ps.append(("pos", self.pos))
        for i, blk in enumerate(self.blocks):
            for key in ("ln1", "attn", "ln2", "mlp"):
                ps.extend((f"block{i}.{key}.{n}", p) for n, p in blk[key].named_params())
        return ps


class Decoder:
    """Two 3x3 conv + SiLU stages, 1x1 projection to one channel, sigmoid,
    bilinear upsample to the image resolution. Outputs probabilities."""

    def __init__(self, cfg, rng):
        dtype = cfg.np_dtype
        c = cfg.embed_dim
        self.conv1 = Conv2dLayer(c, c, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2dLayer(c, c, 3, rng, padding=1, dtype=dtype)
        self.head = Conv2dLayer(c, 1, 1, rng, dtype=dtype)

    def __call__(self, tokens, out_h, out_w):
        x = _to_grid(tokens)
        x = silu(self.conv1(x))
        x = silu(self.conv2(x))
        probs = sigmoid(self.head(x))
        return bilinear_upsample(probs, out_h, out_w)

    def named_params(self):
        return (
            [(f"conv1.{n}", p) for n, p in self.conv1.named_params()]
            + [(f"conv2.{n}", p) for n, p in self.conv2.named_params()]
            + [(f"head.{n}", p) for n, p in self.head.named_params()]
        )


def bce(pred, target):
    """Pixel-averaged binary cross entropy with clamped probabilities."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"BCE shapes differ: {pred.shape} vs {target.shape}")
    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -tmean(target * tlog(p) + (1.0 - target) * tlog(1.0 - p))


class PairModel:
    """Shared-weight encoder/detector/decoder over an image pair."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.detector = DuplicationDetector(
            cfg.embed_dim,
            cfg.grid,
            rng,
            state_dim=cfg.ssm_state_dim,
            sigma=cfg.sigma,
            alpha=cfg.alpha,
            topk=cfg.topk,
            heads=cfg.heads,
            drop_path_rate=cfg.drop_path,
            dtype=cfg.np_dtype,
            rope_enabled=cfg.rope_enabled,
            affinity_guided_cross=cfg.affinity_guided_cross,
            extra_layernorm=cfg.extra_layernorm,
            distinct_branch_proj=cfg.distinct_branch_proj,
        )
        self.decoder = Decoder(cfg, rng)
        if cfg.separate_heads:
            self.decoder_self = Decoder(cfg, rng)
            self.decoder_cross = Decoder(cfg, rng)
        else:
            self.decoder_self = self.decoder
            self.decoder_cross = self.decoder

    def forward(self, x1, x2, training=False, rng=None, collect_margin=False):
        """Returns all mask taps: self-stage, cross-stage, fused, plus the
        detector internals."""
        h, w = x1.shape[2], x1.shape[3]
        v1 = self.encoder(x1)
        v2 = self.encoder(x2)
        det = self.detector.detect(
            v1, v2, training=training, rng=rng, collect_margin=collect_margin
        )
        out = {
            "self1": self.decoder_self(det.self1, h, w),
            "self2": self.decoder_self(det.self2, h, w),
            "cross1": self.decoder_cross(det.v1p, h, w),
            "cross2": self.decoder_cross(det.v2p, h, w),
            "o1": self.decoder(det.v1p, h, w),
            "o2": self.decoder(det.v2p, h, w),
            "margin_report": det.margin_report,
            "bundles": det.bundles,
        }
        return out

    def loss(self, outputs, m1, m2):
        w_self, w_cross, w_fused = self.cfg.loss_weights
        l_self = (bce(outputs["self1"], m1) + bce(outputs["self2"], m2)) * 0.5
        l_cross = (bce(outputs["cross1"], m1) + bce(outputs["cross2"], m2)) * 0.5
        l_fused = (bce(outputs["o1"], m1) + bce(outputs["o2"], m2)) * 0.5
        return w_self * l_self + w_cross * l_cross + w_fused * l_fused

    def named_params(self):
        ps = [(f"encoder.{n}", p) for n, p in self.encoder.named_params()]
        ps += [(f"detector.{n}", p) for n, p in self.detector.named_params()]
        ps += [(f"decoder.{n}", p) for n, p in self.decoder.named_params()]
        if self.cfg.separate_heads:
            ps += [(f"decoder_self.{n}", p) for n, p in self.decoder_self.named_params()]
            ps += [(f"decoder_cross.{n}", p) for n, p in self.decoder_cross.named_params()]
        return ps

    def state(self):
        return {name: p.numpy().copy() for name, p in self.named_params()}

    def load_state(self, tensors, strict=True):
        own = dict(self.named_params())
        for name, arr in tensors.items():
            if name not in own:
                if strict:
                    raise ShapeMismatchOnLoad(f"unexpected tensor '{name}'")
                continue
            if own[name].shape != arr.shape:
                raise ShapeMismatchOnLoad(
                    f"tensor '{name}': checkpoint {arr.shape} vs model {own[name].shape}"
                )
            own[name].data[...] = arr.astype(own[name].dtype)
        if strict:
            missing = set(own) - set(tensors)
            if missing:
                raise ShapeMismatchOnLoad(f"missing tensors: {sorted(missing)[:5]}")


# ---------------------------------------------------------------------------
# optimizer & schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled weight decay Adam; moments keyed by parameter name."""

    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state(self):
        out = {}
        for name, _ in self.params:
            out[f"opt.m.{name}"] = self.m[name].copy()
            out[f"opt.v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, tensors, step_count):
        for name, _ in self.params:
            self.m[name] = tensors[f"opt.m.{name}"].astype(self.m[name].dtype).copy()
            self.v[name] = tensors[f"opt.v.{name}"].astype(self.v[name].dtype).copy()
        self.step_count = step_count


def cosine_lr(base_lr, epoch, total_epochs):
    """Cosine decay from base_lr to base_lr/100 across the epoch range."""
    end = base_lr / 100.0
    if total_epochs <= 1:
        return base_lr
    t = min(epoch, total_epochs - 1) / (total_epochs - 1)
    return end + 0.5 * (base_lr - end) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = -1
    best_val_loss: float = math.inf
    epochs_run: int = 0


def _batches(samples, batch_size, order):
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x1 = np.stack([samples[i][0] for i in idx])
        x2 = np.stack([samples[i][1] for i in idx])
        m1 = np.stack([samples[i][2] for i in idx])
        m2 = np.stack([samples[i][3] for i in idx])
        yield x1, x2, m1, m2


def evaluate_loss_and_masks(model, samples, batch_size=8):
    """Average loss over samples plus concatenated fused masks/targets."""
    dtype = model.cfg.np_dtype
    losses = []
    preds, gts = [], []
    order = list(range(len(samples)))
    for x1, x2, m1, m2 in _batches(samples, batch_size, order):
        out = model.forward(Tensor(x1.astype(dtype)), Tensor(x2.astype(dtype)))
        loss = model.loss(out, Tensor(m1.astype(dtype)), Tensor(m2.astype(dtype)))
        losses.append(loss.item() * len(x1))
        preds.append(np.concatenate([out["o1"].numpy(), out["o2"].numpy()]))
        gts.append(np.concatenate([m1, m2]))
    return sum(losses) / len(samples), np.concatenate(preds), np.concatenate(gts)


def train(model, train_samples, val_samples, checkpoint_path=None, log_path=None,
          start_epoch=0, optimizer=None, stop_after=None):
    """Train with AdamW + cosine decay + early stopping.

    Every completed epoch overwrites ``checkpoint_path``, so after a NaN
    abort the file still holds the last good epoch. The per-epoch shuffle is
    keyed by (seed, epoch), which makes resumed runs bit-identical to
    uninterrupted ones. ``stop_after`` caps the number of epochs run in this
    call (for interrupt/resume workflows).
    """
    from .metrics import confusion_from_maps, mcc

    cfg = model.cfg
    if not train_samples:
        raise EmptyDataset("no training samples")
    dtype = cfg.np_dtype
    opt = optimizer or AdamW(
        model.named_params(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    result = TrainResult()
    log_fh = open(log_path, "a") if log_path else None
    bad_epochs = 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            order = np.random.default_rng((cfg.seed, 7919, epoch)).permutation(
                len(train_samples)
            )
            dp_rng = np.random.default_rng((cfg.seed, 104729, epoch))
            epoch_loss = 0.0
            for x1, x2, m1, m2 in _batches(train_samples, cfg.batch_size, list(order)):
                opt.zero_grad()
                try:
                    out = model.forward(
                        Tensor(x1.astype(dtype)),
                        Tensor(x2.astype(dtype)),
                        training=True,
                        rng=dp_rng,
                    )
                    loss = model.loss(out, Tensor(m1.astype(dtype)), Tensor(m2.astype(dtype)))
                    loss_val = loss.item()
                    loss.backward()
                except NonFiniteResult as exc:
                    raise DivergedLoss(str(exc), last_good_epoch=epoch - 1) from exc
                if not math.isfinite(loss_val):
                    raise DivergedLoss("loss is not finite", last_good_epoch=epoch - 1)
                if cfg.grad_clip > 0:
                    _clip_gradients(model, cfg.grad_clip)
                opt.step()
                epoch_loss += loss_val * len(x1)
            epoch_loss /= len(train_samples)

            val_loss, val_mcc = math.nan, math.nan
            if val_samples:
                val_loss, preds, gts = evaluate_loss_and_masks(
                    model, val_samples, cfg.batch_size
                )
                val_mcc = mcc(confusion_from_maps(preds, gts, 0.5))
            entry = {
                "epoch": epoch,
                "train_loss": epoch_loss,
                "val_loss": val_loss,
                "lr": opt.lr,
                "pixel_mcc": val_mcc,
            }
            result.history.append(entry)
            result.epochs_run = epoch + 1
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_model(model, checkpoint_path, optimizer=opt, epoch=epoch)

            if val_samples:
                if val_loss < result.best_val_loss - cfg.min_delta:
                    result.best_val_loss = val_loss
                    result.best_epoch = epoch
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= cfg.patience:
                        result.stopped_early = True
                        break
            if stop_after is not None and epoch - start_epoch + 1 >= stop_after:
                break
    finally:
        if log_fh:
            log_fh.close()
    return result


def _clip_gradients(model, max_norm):
    total = 0.0
    grads = [p.grad for _, p in model.named_params() if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(model, path, optimizer=None, epoch=None):
    tensors = model.state()
    config = {"model": model.cfg.to_dict()}
    if optimizer is not None:
        tensors.update(optimizer.state())
        config["optimizer_step"] = optimizer.step_count
    if epoch is not None:
        config["epoch"] = epoch
    ckpt.save_checkpoint(path, tensors, config)


def load_model(path):
    """Rebuild a model (and optionally its optimizer state) from disk."""
    tensors, config = ckpt.load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    model = PairModel(cfg)
    model_tensors = {n: a for n, a in tensors.items() if not n.startswith("opt.")}
    model.load_state(model_tensors)
    extras = {
        "opt_tensors": {n: a for n, a in tensors.items() if n.startswith("opt.")},
        "optimizer_step": config.get("optimizer_step"),
        "epoch": config.get("epoch"),
    }
    return model, extras


def resume_optimizer(model, extras):
    opt = AdamW(
        model.named_params(), lr=model.cfg.lr, weight_decay=model.cfg.weight_decay
    )
    if extras["opt_tensors"]:
        opt.load_state(extras["opt_tensors"], extras["optimizer_step"])
    return opt
