"""Protection engines: generator-based noise training and the
error-minimizing baseline.

The generator objective combines the segmentation anchor, the semantic
prediction disruption term (clean-branch logits detached), and the
inter-slice spectral consistency term computed on the raw noise field
before the [0,1] re-clamp of the protected image. Training alternates
between generator updates (surrogate frozen) and optional surrogate epochs
on the currently perturbed data.
"""

import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .losses import LossWeights, seg_loss_grad, spd_loss_grad
from .nets import (
    Adam,
    GeneratorSpec,
    SegmenterSpec,
    UNet3D,
    build_generator,
    build_segmenter,
    logits_grad_to_channels_first,
    logits_to_channels_last,
)
from .spectral import isc_loss_grad
from .volume import LabelMap, PerturbationField, ProtectedVolume, ROIMask, clamp_unit

_SURROGATE_STREAM = 1
_GENERATOR_STREAM = 2
_EM_STREAM = 3
_SHUFFLE_STREAM = 4


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite parameter state."""

    def __init__(self, message, last_good_state=None, log=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.log = log


@dataclass(frozen=True)
class ProtectorConfig:
    """Hyperparameters of one protection run."""

    epsilon: float = 4.0 / 255.0
    epochs: int = 40
    lr_generator: float = 1e-4
    lr_surrogate: float = 1e-4
    weights: LossWeights = LossWeights()
    mask_dilation_radius: int = 2
    mask_mode: str = "foreground_dilated"
    pretrain_epochs: int = 20
    alternate_every: int = 1
    grad_accum: int = 1
    base_width: int = 8
    depth: int = 3
    em_outer_steps: int = 10
    em_inner_steps: int = 5
    em_step_size: Optional[float] = None  # defaults to epsilon / 4
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mask_mode not in ("foreground_dilated", "all_ones"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class TrainingLog:
    """Per-epoch loss components, JSON-serializable."""

    pretrain: list = field(default_factory=list)
    generator: list = field(default_factory=list)
    surrogate_alt: list = field(default_factory=list)
    aborted: bool = False

    def to_dict(self):
        return {
            "pretrain": self.pretrain,
            "generator": self.generator,
            "surrogate_alt": self.surrogate_alt,
            "aborted": self.aborted,
        }


@dataclass
class ProtectorResult:
    generator: UNet3D
    surrogate: UNet3D
    log: TrainingLog


def derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, stream)).generate_state(1)[0])


def _shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, _SHUFFLE_STREAM)))
    )


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    grid = np.indices((2 * r + 1,) * 3) - r
    return (grid ** 2).sum(axis=0) <= r * r


def derive_roi_mask(label: LabelMap, radius: int = 2,
                    mode: str = "foreground_dilated") -> ROIMask:
    """Union of foreground classes dilated by a euclidean ball, or all-ones."""
    if mode == "all_ones":
        return ROIMask(np.ones(label.spatial_shape, dtype=np.uint8))
    if mode != "foreground_dilated":
        raise ValueError(f"unknown mask_mode {mode!r}")
    fg = label.classes > 0
    if radius > 0 and fg.any():
        fg = ndimage.binary_dilation(fg, structure=_ball(radius))
    return ROIMask(fg.astype(np.uint8))


def synthesize_delta(generator: UNet3D, volume, mask: ROIMask, epsilon: float,
                     want_ctx: bool = False):
    """Masked, epsilon-clamped generator output for one volume.

    Returns a PerturbationField, or (field, raw, ctx) when want_ctx is set
    (the training path needs the raw output and forward context).
    """
    x = volume.data if hasattr(volume, "data") else np.asarray(volume)
    raw, ctx = generator.forward(x, want_ctx=want_ctx)
    if not np.isfinite(raw).all():
        raise TrainingDivergedError("generator produced non-finite noise")
    masked = raw * mask.mask[None]
    delta = np.clip(masked, -epsilon, epsilon).astype(np.float32)
    fld = PerturbationField(delta, epsilon)
    if want_ctx:
        return fld, raw, ctx
    return fld


def _seg_step(net, opt, x, label, weights, step_idx, grad_accum):
    """One supervised step; returns the (float) loss. Adam step every
    grad_accum calls."""
    logits_cf, ctx = net.forward(x, want_ctx=True)
    logits = logits_to_channels_last(logits_cf)
    loss, g = seg_loss_grad(logits, label, weights)
    if not np.isfinite(loss):
        raise TrainingDivergedError("segmentation loss is non-finite")
    net.backward(logits_grad_to_channels_first(g), ctx)
    if (step_idx + 1) % grad_accum == 0:
        opt.step()
        opt.zero_grad()
    return loss


def _segmenter_epoch(net, opt, pairs, order, weights, grad_accum, deltas=None):
    losses = []
    for step_idx, i in enumerate(order):
        vol, label = pairs[i]
        x = vol.data
        if deltas is not None:
            x = clamp_unit(x + deltas[i]).astype(np.float32)
        losses.append(_seg_step(net, opt, x, label, weights, step_idx, grad_accum))
    return float(np.mean(losses))


def train_protector(pairs, cfg: ProtectorConfig, train_indices=None) -> ProtectorResult:
    """Bi-level training of the noise generator against a surrogate.

    Phase A pretrains the surrogate on clean data so it provides meaningful
    gradients. Phase B updates the generator per volume with the surrogate
    frozen; when alternate_every > 0, a surrogate epoch on the currently
    perturbed data follows every alternate_every generator epochs.
    """
    if not pairs:
        raise ValueError("empty dataset")
    if train_indices is None:
        train_indices = list(range(len(pairs)))
    train_pairs = [pairs[i] for i in train_indices]
    vol0, lab0 = train_pairs[0]
    c = vol0.data.shape[0]
    k = lab0.num_classes
    w = cfg.weights

    surrogate = build_segmenter(SegmenterSpec(
        c, k, cfg.base_width, cfg.depth, seed=derived_seed(cfg.seed, _SURROGATE_STREAM)))
    generator = build_generator(GeneratorSpec(
        c, cfg.base_width, cfg.depth, seed=derived_seed(cfg.seed, _GENERATOR_STREAM)))
    opt_s = Adam(surrogate.params(), lr=cfg.lr_surrogate)
    opt_g = Adam(generator.params(), lr=cfg.lr_generator)
    rng = _shuffle_rng(cfg.seed)
    masks = [derive_roi_mask(lab, cfg.mask_dilation_radius, cfg.mask_mode)
             for _, lab in train_pairs]
    log = TrainingLog()
    n = len(train_pairs)

    def fail(msg):
        log.aborted = True
        return TrainingDivergedError(msg, last_good_state=last_good, log=log)

    last_good = generator.get_state()
    try:
        for epoch in range(cfg.pretrain_epochs):
            order = rng.permutation(n)
            mean = _segmenter_epoch(surrogate, opt_s, train_pairs, order, w, cfg.grad_accum)
            log.pretrain.append({"epoch": epoch, "seg": mean})
    except TrainingDivergedError as e:
        raise fail(f"surrogate pretraining diverged: {e}") from e

    eps = cfg.epsilon
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"seg": 0.0, "spd": 0.0, "isc": 0.0, "total": 0.0}
        for step_idx, i in enumerate(order):
            vol, label = train_pairs[i]
            x = vol.data
            try:
                fld, raw, gctx = synthesize_delta(generator, vol, masks[i], eps,
                                                  want_ctx=True)
            except TrainingDivergedError as e:
                raise fail(str(e)) from e
            delta = fld.delta
            xp = clamp_unit(x + delta).astype(np.float32)

            logits_p_cf, sctx = surrogate.forward(xp, want_ctx=True)
            logits_c_cf, _ = surrogate.forward(x, want_ctx=False)  # detached branch
            logits_p = logits_to_channels_last(logits_p_cf)
            logits_c = logits_to_channels_last(logits_c_cf)

            seg_v, g_seg = seg_loss_grad(logits_p, label, w)
            spd_v, g_spd = spd_loss_grad(logits_c, logits_p, w.spd_mean_reduction)
            use_isc = w.lambda_isc > 0.0 and x.shape[1] >= 2
            if use_isc:
                isc_v, g_isc = isc_loss_grad(delta)
            else:
                isc_v, g_isc = 0.0, None
            total = seg_v + w.lambda_spd * spd_v + w.lambda_isc * isc_v
            if not np.isfinite(total):
                raise fail(f"total loss non-finite at epoch {epoch}")

            # back through the surrogate (frozen) into the protected image
            g_logits = logits_grad_to_channels_first(g_seg + w.lambda_spd * g_spd)
            gxp = surrogate.backward(g_logits, sctx, need_input_grad=True,
                                     accumulate_param_grads=False)
            # clamp_unit subgradient: pass where x + delta stays inside [0, 1]
            s = x + delta
            g_delta = gxp * ((s >= 0.0) & (s <= 1.0))
            if use_isc:
                g_delta = g_delta + w.lambda_isc * g_isc.astype(np.float32)
            # epsilon-clamp and ROI mask subgradient
            masked = raw * masks[i].mask[None]
            g_raw = g_delta * (np.abs(masked) <= eps) * masks[i].mask[None]
            generator.backward(g_raw.astype(np.float32), gctx)
            if (step_idx + 1) % cfg.grad_accum == 0:
                opt_g.step()
                opt_g.zero_grad()

            sums["seg"] += seg_v
            sums["spd"] += spd_v
            sums["isc"] += isc_v
            sums["total"] += total
        log.generator.append({"epoch": epoch, **{k_: v / n for k_, v in sums.items()}})
        last_good = generator.get_state()

        if cfg.alternate_every > 0 and (epoch + 1) % cfg.alternate_every == 0:
            deltas = [synthesize_delta(generator, vol, masks[j], eps).delta
                      for j, (vol, _) in enumerate(train_pairs)]
            order = rng.permutation(n)
            try:
                mean = _segmenter_epoch(surrogate, opt_s, train_pairs, order, w,
                                        cfg.grad_accum, deltas=deltas)
            except TrainingDivergedError as e:
                raise fail(f"surrogate alternation diverged: {e}") from e
            log.surrogate_alt.append({"epoch": epoch, "seg": mean})

    return ProtectorResult(generator, surrogate, log)


def protect_dataset(pairs, generator: UNet3D, cfg: ProtectorConfig):
    """Apply the trained generator to every pair; labels pass through."""
    fp = generator.fingerprint()
    out = []
    for vol, label in pairs:
        mask = derive_roi_mask(label, cfg.mask_dilation_radius, cfg.mask_mode)
        fld = synthesize_delta(generator, vol, mask, cfg.epsilon)
        xp = clamp_unit(vol.data + fld.delta).astype(np.float32)
        worst = float(np.abs(xp - vol.data).max())
        if worst > cfg.epsilon + 1e-7:
            raise AssertionError(f"{vol.id}: budget violated ({worst} > {cfg.epsilon})")
        out.append((
            ProtectedVolume(xp, source_id=vol.id, generator_fingerprint=fp,
                            spacing=vol.spacing),
            label,
        ))
    return out


def em_baseline(pairs, epsilon: float, steps: int, cfg: ProtectorConfig,
                train_indices=None):
    """Error-minimizing baseline: alternate surrogate epochs with per-sample
    sign-PGD on sample-wise noise, projected onto the l-inf ball.

    steps == 0 leaves every delta at zero, so the exported dataset equals
    the clean input exactly.
    """
    if not pairs:
        raise ValueError("empty dataset")
    if train_indices is None:
        train_indices = list(range(len(pairs)))
    vol0, lab0 = pairs[0]
    c, k = vol0.data.shape[0], lab0.num_classes
    w = cfg.weights
    alpha = cfg.em_step_size if cfg.em_step_size is not None else epsilon / 4.0

    surrogate = build_segmenter(SegmenterSpec(
        c, k, cfg.base_width, cfg.depth, seed=derived_seed(cfg.seed, _EM_STREAM)))
    opt_s = Adam(surrogate.params(), lr=cfg.lr_surrogate)
    rng = _shuffle_rng(derived_seed(cfg.seed, _EM_STREAM))
    deltas = [np.zeros_like(vol.data) for vol, _ in pairs]
    log = []

    for outer in range(steps):
        order = rng.permutation(len(train_indices))
        train_pairs = [pairs[i] for i in train_indices]
        train_deltas = [deltas[i] for i in train_indices]
        seg_mean = _segmenter_epoch(surrogate, opt_s, train_pairs, order, w,
                                    cfg.grad_accum, deltas=train_deltas)
        inner_losses = []
        for i, (vol, label) in enumerate(pairs):
            x = vol.data
            delta = deltas[i]
            for _ in range(cfg.em_inner_steps):
                xp = clamp_unit(x + delta).astype(np.float32)
                logits_cf, ctx = surrogate.forward(xp, want_ctx=True)
                loss, g = seg_loss_grad(logits_to_channels_last(logits_cf), label, w)
                if not np.isfinite(loss):
                    raise TrainingDivergedError("EM inner loss non-finite")
                gxp = surrogate.backward(logits_grad_to_channels_first(g), ctx,
                                         need_input_grad=True,
                                         accumulate_param_grads=False)
                s = x + delta
                g_delta = gxp * ((s >= 0.0) & (s <= 1.0))
                delta = np.clip(delta - alpha * np.sign(g_delta), -epsilon, epsilon)
                assert float(np.abs(delta).max()) <= epsilon + 1e-9
                inner_losses.append(loss)
            deltas[i] = delta.astype(np.float32)
        log.append({
            "step": outer,
            "seg": seg_mean,
            "inner_seg": float(np.mean(inner_losses)) if inner_losses else 0.0,
        })

    crc = 0
    for d in deltas:
        crc = zlib.crc32(d.tobytes(), crc)
    fp = f"em-{crc:08x}"
    out = []
    for (vol, label), delta in zip(pairs, deltas):
        xp = clamp_unit(vol.data + delta).astype(np.float32)
        out.append((
            ProtectedVolume(xp, source_id=vol.id, generator_fingerprint=fp,
                            spacing=vol.spacing),
            label,
        ))
    return out, log


def ablated(cfg: ProtectorConfig, no_spd=False, no_isc=False,
            mask_all_ones=False) -> ProtectorConfig:
    """Apply the ablation switches onto a protector config."""
    w = cfg.weights
    if no_spd:
        w = replace(w, lambda_spd=0.0)
    if no_isc:
        w = replace(w, lambda_isc=0.0)
    out = replace(cfg, weights=w)
    if mask_all_ones:
        out = replace(out, mask_mode="all_ones")
    return out
