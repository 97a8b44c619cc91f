"""The data exploiter's side: train victim segmenters on a (clean or
protected) dataset and score them on held-out clean volumes.

Victims are always trained from scratch (the exploiter has no access to the
protector's models), decoded by per-voxel argmax with no post-processing,
and evaluated per foreground class with DSC and HD95.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .metrics import dsc, hd95
from .nets import Adam, UNet3D, VictimSpec, build_victim
from .protector import TrainingDivergedError, _segmenter_epoch

_VICTIM_SHUFFLE_STREAM = 5


@dataclass(frozen=True)
class VictimRunReport:
    """Clean-test metrics of one victim run, serializable to JSON."""

    victim_tag: str
    train_dataset: str
    per_class_dsc: tuple
    per_class_hd95: tuple
    mean_dsc: float
    mean_hd95: float
    epochs: int
    seed: int
    loss_curve: tuple
    test_ids: tuple

    def to_dict(self):
        return {
            "victim_tag": self.victim_tag,
            "train_dataset": self.train_dataset,
            "per_class_dsc": list(self.per_class_dsc),
            "per_class_hd95": list(self.per_class_hd95),
            "mean_dsc": self.mean_dsc,
            "mean_hd95": self.mean_hd95,
            "epochs": self.epochs,
            "seed": self.seed,
            "loss_curve": list(self.loss_curve),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            victim_tag=d["victim_tag"],
            train_dataset=d["train_dataset"],
            per_class_dsc=tuple(d["per_class_dsc"]),
            per_class_hd95=tuple(d["per_class_hd95"]),
            mean_dsc=float(d["mean_dsc"]),
            mean_hd95=float(d["mean_hd95"]),
            epochs=int(d["epochs"]),
            seed=int(d["seed"]),
            loss_curve=tuple(d["loss_curve"]),
            test_ids=tuple(d["test_ids"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_victim(train_pairs, spec: VictimSpec, epochs: int = 60, lr: float = 1e-4,
                 grad_accum: int = 1):
    """Supervised Dice+CE training; returns (net, per-epoch loss curve)."""
    if not train_pairs:
        raise ValueError("empty training dataset")
    net = build_victim(spec)
    opt = Adam(net.params(), lr=lr)
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((spec.seed, _VICTIM_SHUFFLE_STREAM)))
    )
    w = LossWeights()
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(train_pairs))
        curve.append(_segmenter_epoch(net, opt, train_pairs, order, w, grad_accum))
    return net, curve


def predict_labels(net: UNet3D, volume) -> np.ndarray:
    """Argmax-decoded class map (D, H, W) for one volume."""
    logits_cf, _ = net.forward(volume.data, want_ctx=False)
    return logits_cf.argmax(axis=0).astype(np.uint8)


def evaluate_victim(net: UNet3D, test_pairs, *, victim_tag: str, train_dataset: str,
                    epochs: int, seed: int, loss_curve=()) -> VictimRunReport:
    """Score per foreground class on clean test volumes."""
    if not test_pairs:
        raise ValueError("empty test set")
    k = test_pairs[0][1].num_classes
    per_class_dsc = {c: [] for c in range(1, k)}
    per_class_hd = {c: [] for c in range(1, k)}
    for vol, label in test_pairs:
        pred = predict_labels(net, vol)
        for c in range(1, k):
            per_class_dsc[c].append(dsc(pred == c, label.classes == c))
            per_class_hd[c].append(hd95(pred == c, label.classes == c, vol.spacing))
    cls_dsc = tuple(float(np.mean(per_class_dsc[c])) for c in range(1, k))
    cls_hd = tuple(float(np.mean(per_class_hd[c])) for c in range(1, k))
    return VictimRunReport(
        victim_tag=victim_tag,
        train_dataset=train_dataset,
        per_class_dsc=cls_dsc,
        per_class_hd95=cls_hd,
        mean_dsc=float(np.mean(cls_dsc)),
        mean_hd95=float(np.mean(cls_hd)),
        epochs=epochs,
        seed=seed,
        loss_curve=tuple(float(v) for v in loss_curve),
        test_ids=tuple(vol.id for vol, _ in test_pairs),
    )
