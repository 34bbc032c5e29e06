"""Topology-manipulation training.

A topologically manipulated classifier is trained with a joint objective:
plain cross-entropy on benign samples plus a weighted cross-entropy that
pushes transferred adversarial examples toward a derangement of their
target class. The TSR/MSR diagnostics measure how often a net emits the
adversarial target itself versus the deranged target.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradnet as gn
from .derange import Derangement


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries epoch/batch context."""


@dataclass(frozen=True)
class TopoSpec:
    """Derangement plus the weight of the adversarial loss term."""

    derangement: Derangement
    lam: float = 2.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass(frozen=True)
class AdvDataset:
    """Targeted adversarial records plus the perturbation-budget grid they
    were built over. Records are keyed by (sample_id, target_class, epsilon)."""

    records: tuple
    epsilons: tuple

    def __post_init__(self):
        records = tuple(self.records)
        epsilons = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "epsilons", epsilons)
        keys = set()
        for r in records:
            if r.target_class is None:
                raise ValueError("adversarial dataset records must be targeted")
            if r.target_class == r.true_class:
                raise ValueError("record target equals its true class")
            key = (r.sample_id, r.target_class, r.epsilon)
            if key in keys:
                raise ValueError(f"duplicate record key {key}")
            keys.add(key)

    def __len__(self) -> int:
        return len(self.records)

    def inputs(self) -> np.ndarray:
        return np.stack([r.adversarial for r in self.records])

    def targets(self) -> np.ndarray:
        return np.array([r.target_class for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "AdvDataset":
        return AdvDataset(
            tuple(self.records[i] for i in indices), self.epsilons
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def topo_loss(net: gn.Network, benign: gn.Batch, adv: gn.Batch, spec: TopoSpec) -> float:
    """Joint objective: mean benign CE plus lam times mean CE of adversarial
    inputs against their derangement-remapped target classes.

    ``adv`` carries (adversarial input, target class) pairs; the remapping
    through spec.derangement happens here, not in the caller.
    """
    d = spec.derangement
    remapped = d.mapping[adv.labels]
    # Derangement validity already guarantees this; cheap to re-assert.
    assert not np.any(remapped == adv.labels), "derangement produced a fixed point"
    benign_term = gn.cross_entropy(gn.forward(net, benign.inputs), benign.labels)
    adv_term = gn.cross_entropy(gn.forward(net, adv.inputs), remapped)
    return benign_term + spec.lam * adv_term


def topo_grads(net: gn.Network, benign: gn.Batch, adv: gn.Batch, spec: TopoSpec):
    """(loss value, named parameter gradients) of the joint objective."""
    remapped = spec.derangement.mapping[adv.labels]
    b_val, a_val, grads = _joint_grads(
        net, benign.inputs, benign.labels, adv.inputs, remapped, spec.lam
    )
    return b_val + spec.lam * a_val, grads


def _joint_grads(net, bx, by, ax, at_remapped, lam):
    """Gradient of the joint loss; the two terms are separable, so the sum of
    the per-term parameter gradients is exact."""
    b_val, b_grads = gn.loss_and_param_grads(net, bx, gn.CrossEntropyLoss(by))
    if ax is None:
        return b_val, 0.0, b_grads
    a_val, a_grads = gn.loss_and_param_grads(net, ax, gn.CrossEntropyLoss(at_remapped))
    for name in b_grads:
        b_grads[name] += lam * a_grads[name]
    return b_val, a_val, b_grads


def train_topo(
    net: gn.Network,
    data,
    advset: AdvDataset | None,
    spec: TopoSpec | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
):
    """Epoch loop over the benign data; each benign batch of size B is paired
    with B adversarial records drawn uniformly with replacement.

    With ``spec=None`` (and no advset) this is plain standard training: the
    adversarial term vanishes and the rng consumption reduces to the benign
    shuffle, so trajectories are comparable across the two modes.

    Returns (trained net, per-epoch trace). The input net is updated in place.
    """
    if (spec is None) != (advset is None):
        raise ValueError("spec and advset must be provided together")
    if spec is not None and len(advset) == 0:
        raise ValueError("advset must be non-empty for joint training")
    if spec is not None and spec.derangement.num_classes != net.num_classes:
        raise ValueError("derangement class count does not match the net")

    inputs = np.asarray(data.inputs, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = inputs.shape[0]
    if n < 1:
        raise ValueError("empty training data")

    if advset is not None:
        adv_inputs = advset.inputs()
        adv_targets = advset.targets()
        adv_remapped = spec.derangement.mapping[adv_targets]

    if cfg.optimizer == "sgd":
        opt = gn.SGD(lr=cfg.lr, momentum=cfg.momentum)
    else:
        opt = gn.make_optimizer(cfg.optimizer, cfg.lr)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        b_losses, a_losses = [], []
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            bx, by = inputs[sel], labels[sel]
            if advset is not None:
                pick = rng.integers(0, len(advset), size=sel.size)
                ax, at = adv_inputs[pick], adv_remapped[pick]
                lam = spec.lam
            else:
                ax, at, lam = None, None, 0.0
            try:
                b_val, a_val, grads = _joint_grads(net, bx, by, ax, at, lam)
            except gn.NonFiniteLossError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting at "
                    f"{start}: {exc}"
                ) from exc
            opt.step(net, grads)
            b_losses.append(b_val)
            a_losses.append(a_val)
        trace.append(
            {
                "epoch": epoch,
                "benign_loss": float(np.mean(b_losses)),
                "adv_loss": float(np.mean(a_losses)),
                "loss": float(np.mean(b_losses) + (spec.lam if spec else 0.0) * np.mean(a_losses)),
            }
        )
    return net, trace


def train_standard(net, data, cfg: TrainConfig, rng: np.random.Generator):
    """Plain cross-entropy training; the joint loop with the extra term off."""
    return train_topo(net, data, None, None, cfg, rng)


def _advset_predictions(net, advset: AdvDataset, batch_size: int = 256) -> np.ndarray:
    if len(advset) == 0:
        raise ValueError("empty adversarial dataset")
    out = []
    inputs = advset.inputs()
    for start in range(0, len(advset), batch_size):
        out.append(gn.predict(net, inputs[start : start + batch_size]))
    return np.concatenate(out)


def tsr(net, advset: AdvDataset) -> float:
    """Target success rate: fraction of records classified as their target."""
    preds = _advset_predictions(net, advset)
    return float(np.mean(preds == advset.targets()))


def msr(net, advset: AdvDataset, derangement: Derangement) -> float:
    """Manipulation success rate: fraction classified as the derangement of
    the record's target class."""
    preds = _advset_predictions(net, advset)
    return float(np.mean(preds == derangement.mapping[advset.targets()]))
