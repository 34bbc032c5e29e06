"""Margin losses and projected gradient descent attacks.

The margin ("CW") losses are computed directly on logits. PGD performs
DESCENT on the configured margin loss: a targeted attack succeeds when
max_{c != t} Z_c - Z_t goes negative, an untargeted one when
Z_true - max_{c != true} Z_c does. Supports L-inf and L2 budgets, averaging
across a surrogate ensemble, and random-translation smoothing of the loss
for transferability.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import gradnet as gn
from .seeding import spawn_rng
from .topo import AdvDataset

log = logging.getLogger(__name__)

NORMS = ("linf", "l2")


class NonFiniteGradientError(FloatingPointError):
    """Attack gradient (or loss) went non-finite at some iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


# ---------------------------------------------------------------------------
# Config and record types


@dataclass(frozen=True)
class Targeted:
    """Drive the prediction to target_class (must differ from true_class)."""

    target_class: int
    true_class: int


@dataclass(frozen=True)
class Untargeted:
    """Drive the prediction away from true_class."""

    true_class: int


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    norm: str = "linf"
    alpha: float | None = None  # None: 2.5 * epsilon / iterations
    iterations: int = 40
    random_init: bool = True
    mode: object | None = None
    transform_prob: float = 0.0
    max_translate: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.transform_prob <= 1.0:
            raise ValueError("transform_prob must lie in [0, 1]")
        if self.max_translate < 0:
            raise ValueError("max_translate must be >= 0")
        if self.mode is not None and not isinstance(self.mode, (Targeted, Untargeted)):
            raise ValueError("mode must be Targeted, Untargeted or None")

    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / self.iterations


@dataclass(frozen=True)
class AdvExample:
    """One adversarial record. Validates the budget and value-range
    invariants on construction, so every stored record is known-good."""

    original: np.ndarray
    adversarial: np.ndarray
    true_class: int
    target_class: int | None
    epsilon: float
    source_tag: str
    sample_id: int = -1
    norm: str = "linf"

    def __post_init__(self):
        original = gn.as_tensor(self.original)
        adversarial = gn.as_tensor(self.adversarial)
        object.__setattr__(self, "original", original)
        object.__setattr__(self, "adversarial", adversarial)
        if original.shape != adversarial.shape:
            raise ValueError("original and adversarial shapes differ")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        for name, arr in (("original", original), ("adversarial", adversarial)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} has components outside [0, 1]")
        diff = (adversarial - original).ravel()
        dist = np.abs(diff).max() if self.norm == "linf" else np.sqrt(diff @ diff)
        if dist > self.epsilon + 1e-9:
            raise ValueError(
                f"perturbation {self.norm} distance {dist} exceeds budget "
                f"{self.epsilon}"
            )
        if self.target_class is not None and self.target_class == self.true_class:
            raise ValueError("target class equals true class")


# ---------------------------------------------------------------------------
# Margin losses


def _check_row(z, c) -> np.ndarray:
    z = gn.as_tensor(z)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("logits row must be 1-D with at least 2 classes")
    if not 0 <= c < z.size:
        raise ValueError(f"class {c} out of range for {z.size} logits")
    return z


def cw_targeted(logits_row, target_class: int) -> float:
    """max over c != target of Z_c, minus Z_target. Negative iff the target
    class strictly dominates."""
    z = _check_row(logits_row, target_class)
    mask = np.ones(z.size, dtype=bool)
    mask[target_class] = False
    return float(z[mask].max() - z[target_class])


def cw_untargeted(logits_row, true_class: int) -> float:
    """Z_true minus max over c != true of Z_c. Negative iff misclassified."""
    z = _check_row(logits_row, true_class)
    mask = np.ones(z.size, dtype=bool)
    mask[true_class] = False
    return float(z[true_class] - z[mask].max())


class _MarginLoss:
    """Mean margin over a batch, with its exact (subgradient) logit gradient.

    sign=+1 gives the targeted form max_{c != k} Z_c - Z_k, sign=-1 the
    untargeted form Z_k - max_{c != k} Z_c, where k is the per-row anchor.
    """

    def __init__(self, anchors, sign: float):
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.sign = float(sign)

    def value_and_grad(self, logits):
        b, c = logits.shape
        if c < 2:
            raise ValueError("margin loss needs at least 2 classes")
        idx = np.arange(b)
        # non-finite logits surface as a non-finite value, checked by callers
        with np.errstate(invalid="ignore"):
            masked = logits.copy()
            masked[idx, self.anchors] = -np.inf
            runner = masked.argmax(axis=1)
            vals = self.sign * (logits[idx, runner] - logits[idx, self.anchors])
            value = float(np.mean(vals))
        grad = np.zeros_like(logits)
        grad[idx, runner] += self.sign / b
        grad[idx, self.anchors] -= self.sign / b
        return value, grad


def targeted_margin_loss(targets) -> _MarginLoss:
    return _MarginLoss(targets, +1.0)


def untargeted_margin_loss(true_classes) -> _MarginLoss:
    return _MarginLoss(true_classes, -1.0)


# ---------------------------------------------------------------------------
# Projection


def _project_batch(deltas: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    if norm == "linf":
        return np.clip(deltas, -epsilon, epsilon)
    flat = deltas.reshape(deltas.shape[0], -1)
    out = flat.copy()
    # rescaling can land a hair above epsilon in the last ulp; repeat until
    # the recomputed norm is inside, which makes the projection exactly
    # idempotent (a second call recomputes the same norms and does nothing)
    for _ in range(8):
        norms = np.sqrt((out * out).sum(axis=1))
        over = norms > epsilon
        if not over.any():
            break
        out[over] *= (epsilon / norms[over])[:, None]
    return out.reshape(deltas.shape)


def project(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project one perturbation onto the epsilon-ball of the given norm.

    L-inf clamps each component to [-epsilon, epsilon]; L2 rescales onto the
    sphere when the norm exceeds epsilon. Idempotent in both cases.
    """
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    delta = gn.as_tensor(delta)
    return _project_batch(delta[None], norm, epsilon)[0]


# ---------------------------------------------------------------------------
# Translation (loss smoothing for transferability)


def translate(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift the last two axes by (dy, dx) with zero padding. The adjoint of
    translate(., dy, dx) is translate(., -dy, -dx)."""
    if x.ndim < 3:
        raise ValueError("translation needs inputs with (channels, H, W) axes")
    if dy == 0 and dx == 0:
        return x
    h, w = x.shape[-2], x.shape[-1]
    if abs(dy) >= h or abs(dx) >= w:
        return np.zeros_like(x)
    out = np.zeros_like(x)
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = x[..., src_y, src_x]
    return out


# ---------------------------------------------------------------------------
# PGD core


def _draw_plan(rng: np.random.Generator, cfg: AttackConfig, shape: tuple):
    """All randomness one attack needs, drawn up front from its own stream:
    the init offset and a per-iteration translation offset table."""
    eps = cfg.epsilon
    if cfg.random_init and eps > 0:
        if cfg.norm == "linf":
            init = rng.uniform(-eps, eps, size=shape)
        else:
            dirn = rng.standard_normal(shape)
            nrm = np.sqrt((dirn * dirn).sum())
            radius = eps * rng.uniform() ** (1.0 / dirn.size)
            init = dirn * (radius / nrm) if nrm > 0 else np.zeros(shape)
    else:
        init = np.zeros(shape)
    offsets = np.zeros((cfg.iterations, 2), dtype=np.int64)
    if cfg.transform_prob > 0 and cfg.max_translate > 0:
        use = rng.uniform(size=cfg.iterations) < cfg.transform_prob
        draws = rng.integers(
            -cfg.max_translate, cfg.max_translate + 1, size=(cfg.iterations, 2)
        )
        offsets[use] = draws[use]
    return init, offsets


def _pgd_core(models, x0, anchors, sign, cfg, inits, offsets):
    """Batched PGD. x0: [B, ...]; anchors/sign define the margin loss;
    inits [B, ...] and offsets [B, iters, 2] come from per-sample plans."""
    eps = cfg.epsilon
    alpha = cfg.resolved_alpha()
    b = x0.shape[0]
    delta = _project_batch(inits, cfg.norm, eps)
    x = np.clip(x0 + delta, 0.0, 1.0)
    for i in range(cfg.iterations):
        grad = np.zeros_like(x)
        groups: dict = {}
        for s in range(b):
            groups.setdefault((int(offsets[s, i, 0]), int(offsets[s, i, 1])), []).append(s)
        for (dy, dx), rows in groups.items():
            sel = np.array(rows)
            xt = translate(x[sel], dy, dx) if (dy or dx) else x[sel]
            loss = _MarginLoss(anchors[sel], sign)
            acc = np.zeros_like(xt)
            value = 0.0
            for m in models:
                v, g = gn.loss_and_input_grad(m, xt, loss)
                value += v
                acc += g
            acc /= len(models)
            if not np.isfinite(value):
                raise NonFiniteGradientError(
                    f"non-finite attack loss at iteration {i}", i
                )
            grad[sel] = translate(acc, -dy, -dx) if (dy or dx) else acc
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(
                f"non-finite attack gradient at iteration {i}", i
            )
        if cfg.norm == "linf":
            step = np.sign(grad)
        else:
            norms = np.sqrt((grad.reshape(b, -1) ** 2).sum(axis=1))
            norms[norms == 0] = 1.0
            step = grad / norms.reshape((b,) + (1,) * (x.ndim - 1))
        x = x - alpha * step  # descend the margin loss
        delta = _project_batch(x - x0, cfg.norm, eps)
        x = np.clip(x0 + delta, 0.0, 1.0)
    return x


def _check_models(models):
    if not models:
        raise ValueError("need at least one model to attack")
    shape = models[0].input_shape
    classes = models[0].num_classes
    for m in models[1:]:
        if m.input_shape != shape or m.num_classes != classes:
            raise ValueError("attacked models disagree on input shape or classes")
    return shape, classes


def pgd(
    models,
    x: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator,
    sample_id: int = -1,
    source_tag: str = "pgd",
) -> AdvExample:
    """Attack a single sample against the mean margin loss of ``models``."""
    shape, classes = _check_models(models)
    x = gn.as_tensor(x)
    if tuple(x.shape) != shape:
        raise gn.ShapeError(f"input shape {x.shape} does not match models {shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("attack input must lie in [0, 1]")
    if cfg.mode is None:
        raise ValueError("cfg.mode must be set to Targeted or Untargeted")
    if cfg.transform_prob > 0 and cfg.max_translate > 0 and x.ndim < 3:
        raise ValueError("translation smoothing needs (channels, H, W) inputs")
    if isinstance(cfg.mode, Targeted):
        if cfg.mode.target_class == cfg.mode.true_class:
            raise ValueError("targeted attack with target equal to true class")
        if not 0 <= cfg.mode.target_class < classes:
            raise ValueError("target class out of range")
        anchor, sign = cfg.mode.target_class, +1.0
        target: int | None = cfg.mode.target_class
    else:
        anchor, sign = cfg.mode.true_class, -1.0
        target = None
    if not 0 <= cfg.mode.true_class < classes:
        raise ValueError("true class out of range")
    init, offsets = _draw_plan(rng, cfg, x.shape)
    adv = _pgd_core(
        models, x[None], np.array([anchor]), sign, cfg, init[None], offsets[None]
    )[0]
    return AdvExample(
        original=x.copy(),
        adversarial=adv,
        true_class=cfg.mode.true_class,
        target_class=target,
        epsilon=cfg.epsilon,
        source_tag=source_tag,
        sample_id=sample_id,
        norm=cfg.norm,
    )


# ---------------------------------------------------------------------------
# Transfer-set construction


def build_transfer_set(
    surrogates,
    dataset,
    targets,
    cfg: AttackConfig,
    epsilons=None,
    master_seed: int = 0,
    source_tag: str | None = None,
    batch_size: int = 64,
    on_error: str = "raise",
) -> AdvDataset:
    """Targeted PGD records for every (sample, requested target != true label,
    epsilon) triple, attacked against the whole surrogate list at once.

    Deterministic under master_seed: every record's randomness comes from a
    stream keyed by (sample_id, target, epsilon), so results do not depend on
    batch composition order. on_error="skip" logs and drops records whose
    attack aborts; "raise" propagates.
    """
    shape, classes = _check_models(surrogates)
    if on_error not in ("raise", "skip"):
        raise ValueError("on_error must be 'raise' or 'skip'")
    if isinstance(targets, str):
        if targets != "all":
            raise ValueError("targets must be 'all' or a list of class indices")
        target_list = list(range(classes))
    else:
        target_list = sorted({int(t) for t in targets})
        if any(not 0 <= t < classes for t in target_list):
            raise ValueError("target class out of range")
    eps_grid = [float(e) for e in (epsilons if epsilons is not None else [cfg.epsilon])]
    if any(e < 0 for e in eps_grid):
        raise ValueError("epsilon must be >= 0")
    if len(set(eps_grid)) != len(eps_grid):
        raise ValueError("duplicate epsilon in grid")
    tag = source_tag if source_tag is not None else f"surrogates[{len(surrogates)}]"

    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if inputs.ndim < 2 or tuple(inputs.shape[1:]) != shape:
        raise gn.ShapeError(
            f"dataset inputs {inputs.shape[1:]} do not match surrogate input "
            f"shape {shape}"
        )
    keys = [
        (sid, t, e)
        for sid in range(inputs.shape[0])
        for t in target_list
        if t != labels[sid]
        for e in eps_grid
    ]
    keys.sort()

    records = []
    for e in eps_grid:
        cfg_e = replace(cfg, epsilon=e, mode=None)
        batch_keys = [k for k in keys if k[2] == e]
        for start in range(0, len(batch_keys), batch_size):
            chunk = batch_keys[start : start + batch_size]
            x0 = np.stack([inputs[sid] for sid, _, _ in chunk])
            anchors = np.array([t for _, t, _ in chunk], dtype=np.int64)
            plans = [
                _draw_plan(spawn_rng(master_seed, "transfer", sid, t, repr(e)), cfg_e, shape)
                for sid, t, _ in chunk
            ]
            inits = np.stack([p[0] for p in plans])
            offsets = np.stack([p[1] for p in plans])
            try:
                adv = _pgd_core(surrogates, x0, anchors, +1.0, cfg_e, inits, offsets)
            except NonFiniteGradientError as exc:
                if on_error == "raise":
                    raise
                log.warning("skipping %d records: %s", len(chunk), exc)
                continue
            for row, (sid, t, _) in enumerate(chunk):
                records.append(
                    AdvExample(
                        original=inputs[sid],
                        adversarial=adv[row],
                        true_class=int(labels[sid]),
                        target_class=t,
                        epsilon=e,
                        source_tag=tag,
                        sample_id=sid,
                        norm=cfg_e.norm,
                    )
                )
    records.sort(key=lambda r: (r.sample_id, r.target_class, r.epsilon))
    return AdvDataset(tuple(records), tuple(eps_grid))
