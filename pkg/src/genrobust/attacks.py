"""Inner maximization and robust evaluation.

Norm-ball projections, FGSM, multi-restart PGD with sign or Adam inner
updates over several objectives, and a two-stage evaluation cascade
(untargeted cross-entropy PGD, then targeted-margin PGD against the top-k
incorrect classes). Every returned perturbation satisfies the ball
constraint and keeps the adversarial input inside [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .autodiff import NumericError, Tape, Tensor, backward
from .data import LabeledDataset, derive_rng
from .parallel import map_ordered

__all__ = [
    "PerturbationSet",
    "AttackConfig",
    "AttackResult",
    "CascadeConfig",
    "CascadeResult",
    "project",
    "random_start",
    "margin_loss",
    "pgd",
    "pgd_on_objective",
    "fgsm",
    "attack_cascade",
]

LINF = "linf"
L2 = "l2"
_OBJECTIVES = ("cross-entropy", "kl-vs-clean", "margin", "targeted-margin")
_OPTIMIZERS = ("sign-sgd", "adam")

CHUNK = 64  # fixed evaluation chunk; identical in serial and threaded modes


@dataclass(frozen=True)
class PerturbationSet:
    """Allowed perturbations: a norm ball of radius epsilon (pixels in [0,1])."""

    norm: str
    epsilon: float

    def __post_init__(self):
        if self.norm not in (LINF, L2):
            raise ValueError(f"norm must be {LINF!r} or {L2!r}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class AttackConfig:
    steps: int
    step_size: float
    inner_optimizer: str = "sign-sgd"
    restarts: int = 1
    objective: str = "cross-entropy"
    random_start: bool = True
    seed: int = 0
    target: Optional[int] = None  # fixed class for targeted-margin

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.inner_optimizer not in _OPTIMIZERS:
            raise ValueError(f"unknown inner optimizer {self.inner_optimizer!r}")
        if self.objective not in _OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class AttackResult:
    """Per-example best-over-restarts perturbation and bookkeeping."""

    delta: np.ndarray
    x_adv: np.ndarray
    objective_value: np.ndarray  # [B] final objective at the kept delta
    success: np.ndarray  # [B] bool, misclassified at the kept delta


def _flat_norms(delta: np.ndarray) -> np.ndarray:
    return np.sqrt((delta.reshape(delta.shape[0], -1) ** 2).sum(axis=1))


def project(delta: np.ndarray, pset: PerturbationSet) -> np.ndarray:
    """Project each example's perturbation onto the ball; idempotent.

    Linf: elementwise clamp to [-eps, eps]. L2: rescale onto the sphere
    only when outside the ball.
    """
    eps = pset.epsilon
    if pset.norm == LINF:
        return np.clip(delta, -eps, eps)
    out = delta
    # rescale until the recomputed norm is inside; float rounding can leave
    # a one-ulp overshoot after a single pass, breaking exact idempotence
    for _ in range(4):
        norms = _flat_norms(out)
        outside = norms > eps
        if not outside.any():
            break
        scale = np.ones_like(norms)
        scale[outside] = np.nextafter(eps / norms[outside], 0.0)
        out = out * scale.reshape((-1,) + (1,) * (out.ndim - 1))
    return out


def random_start(pset: PerturbationSet, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw from the ball (a single example's perturbation)."""
    eps = pset.epsilon
    if pset.norm == LINF:
        return rng.uniform(-eps, eps, size=shape)
    direction = rng.normal(size=shape)
    norm = np.sqrt((direction**2).sum())
    if norm == 0.0:
        return np.zeros(shape)
    n = int(np.prod(shape))
    radius = eps * rng.uniform() ** (1.0 / n)
    return direction * (radius / norm)


def margin_loss(logits, labels: np.ndarray) -> np.ndarray:
    """Per-example z_y - max_{i != y} z_i; negative iff misclassified."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ad.ShapeError(f"logits must be [B,C] with C >= 2, got {z.shape}")
    n, c = z.shape
    lab = np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    zy = z[np.arange(n), lab]
    masked = z.copy()
    masked[np.arange(n), lab] = -np.inf
    return zy - masked.max(axis=1)


# ---------------------------------------------------------------------------
# objectives (maximized by the attack)


class _Objective:
    """Ascent target: scalar for gradients, per-example values for restarts."""

    dtype = np.float64  # dtype the ascent tensor must carry (no re-coercion)

    def scalar(self, x_t: Tensor, tape: Tape) -> Tensor:
        raise NotImplementedError

    def values(self, x_np: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _ModelObjective(_Objective):
    def __init__(self, model: mdl.Classifier, use_ema: bool):
        self.model = model
        self.use_ema = use_ema
        self.dtype = model.config.dtype

    def _logits(self, x_t: Tensor, tape: Optional[Tape]) -> Tensor:
        return mdl.forward_logits(self.model, x_t, use_ema=self.use_ema, tape=tape)

    def logits_np(self, x_np: np.ndarray) -> np.ndarray:
        return self._logits(Tensor(np.asarray(x_np, dtype=self.model.config.dtype)), None).data


class _CrossEntropyObjective(_ModelObjective):
    def __init__(self, model, use_ema, labels):
        super().__init__(model, use_ema)
        self.labels = np.asarray(labels)

    def scalar(self, x_t, tape):
        return ad.softmax_cross_entropy(self._logits(x_t, tape), self.labels, tape)

    def values(self, x_np):
        logp = ad.log_softmax(self.logits_np(x_np))
        return -logp[np.arange(len(self.labels)), self.labels]


class _KlVsCleanObjective(_ModelObjective):
    def __init__(self, model, use_ema, clean_logits):
        super().__init__(model, use_ema)
        self.clean = Tensor(np.asarray(clean_logits, dtype=model.config.dtype))
        self._clean_logp = ad.log_softmax(self.clean.data)

    def scalar(self, x_t, tape):
        return ad.kl_divergence(self.clean, self._logits(x_t, tape), tape)

    def values(self, x_np):
        logq = ad.log_softmax(self.logits_np(x_np))
        p = np.exp(self._clean_logp)
        return (p * (self._clean_logp - logq)).sum(axis=1)


class _MarginObjective(_ModelObjective):
    """Maximize max_{i != y} z_i - z_y (the negated margin)."""

    def __init__(self, model, use_ema, labels):
        super().__init__(model, use_ema)
        self.labels = np.asarray(labels)

    def scalar(self, x_t, tape):
        logits = self._logits(x_t, tape)
        gap = ad.sub(
            ad.max_excluding(logits, self.labels, tape),
            ad.gather_labels(logits, self.labels, tape),
            tape,
        )
        return ad.tsum(gap, tape)

    def values(self, x_np):
        return -margin_loss(self.logits_np(x_np), self.labels)


class _TargetedMarginObjective(_ModelObjective):
    """Maximize z_target - z_y."""

    def __init__(self, model, use_ema, labels, targets):
        super().__init__(model, use_ema)
        self.labels = np.asarray(labels)
        self.targets = np.asarray(targets)

    def scalar(self, x_t, tape):
        logits = self._logits(x_t, tape)
        gap = ad.sub(
            ad.gather_labels(logits, self.targets, tape),
            ad.gather_labels(logits, self.labels, tape),
            tape,
        )
        return ad.tsum(gap, tape)

    def values(self, x_np):
        z = self.logits_np(x_np)
        rows = np.arange(z.shape[0])
        return z[rows, self.targets] - z[rows, self.labels]


def _build_objective(
    model: mdl.Classifier,
    cfg: AttackConfig,
    x: np.ndarray,
    y_or_reference,
    targets,
    use_ema: bool,
) -> _Objective:
    if cfg.objective == "kl-vs-clean":
        if y_or_reference is None:
            # clean logits computed once, never re-taped
            ref = mdl.forward_logits(model, x, use_ema=use_ema).data
        else:
            ref = np.asarray(y_or_reference)
            if ref.ndim != 2:
                raise ValueError("kl-vs-clean needs clean logits [B,C] as reference")
        return _KlVsCleanObjective(model, use_ema, ref)
    labels = np.asarray(y_or_reference)
    if labels.ndim != 1:
        raise ValueError(f"objective {cfg.objective!r} needs integer labels [B]")
    if cfg.objective == "cross-entropy":
        return _CrossEntropyObjective(model, use_ema, labels)
    if cfg.objective == "margin":
        return _MarginObjective(model, use_ema, labels)
    if targets is None:
        if cfg.target is None:
            raise ValueError("targeted-margin needs target classes")
        targets = np.full(labels.shape, cfg.target, dtype=np.int64)
    return _TargetedMarginObjective(model, use_ema, labels, np.asarray(targets))


# ---------------------------------------------------------------------------
# the PGD engine


def _adam_ascend(delta, grad, state, lr):
    m, v, t = state
    t += 1
    m = 0.9 * m + 0.1 * grad
    v = 0.999 * v + 0.001 * grad * grad
    mhat = m / (1.0 - 0.9**t)
    vhat = v / (1.0 - 0.999**t)
    return delta + lr * mhat / (np.sqrt(vhat) + 1e-8), (m, v, t)


def pgd_on_objective(
    objective: _Objective,
    x: np.ndarray,
    pset: PerturbationSet,
    cfg: AttackConfig,
    example_ids: Optional[np.ndarray] = None,
    success_labels: Optional[np.ndarray] = None,
    success_logits_fn=None,
) -> AttackResult:
    """Multi-restart projected gradient ascent on an arbitrary objective.

    Restart r of example i draws its random start from an rng keyed by
    (cfg.seed, r, example_ids[i]); restart results are therefore shared
    prefixes between runs that differ only in the restart budget.

    success_labels plus success_logits_fn (x_adv -> logits) let callers
    track misclassification; the per-example keeper prefers successful
    restarts first, then higher objective values.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < -1e-12 or x.max() > 1.0 + 1e-12):
        raise ValueError("attack input must lie in [0,1]")
    b = x.shape[0]
    if example_ids is None:
        example_ids = np.arange(b)

    best_delta = np.zeros_like(x)
    best_val = np.full(b, -np.inf)
    best_success = np.zeros(b, dtype=bool)

    for restart in range(cfg.restarts):
        if cfg.random_start:
            delta = np.stack(
                [
                    random_start(pset, x.shape[1:], derive_rng(cfg.seed, restart, int(example_ids[i])))
                    for i in range(b)
                ]
            )
        else:
            delta = np.zeros_like(x)
        delta = project(delta, pset)
        delta = np.clip(x + delta, 0.0, 1.0) - x

        state = (np.zeros_like(x), np.zeros_like(x), 0)  # Adam state, per restart
        for _ in range(cfg.steps):
            tape = Tape()
            x_t = Tensor((x + delta).astype(objective.dtype, copy=False))
            obj = objective.scalar(x_t, tape)
            grad = backward(obj, tape).wrt(x_t)
            if not np.all(np.isfinite(grad)):
                raise NumericError("NaN/Inf gradient inside PGD")
            if cfg.inner_optimizer == "sign-sgd":
                delta = delta + cfg.step_size * np.sign(grad)
            else:
                delta, state = _adam_ascend(delta, grad, state, cfg.step_size)
            delta = project(delta, pset)
            delta = np.clip(x + delta, 0.0, 1.0) - x

        vals = objective.values(x + delta)
        if success_labels is not None and success_logits_fn is not None:
            pred = np.argmax(success_logits_fn(x + delta), axis=1)
            succ = pred != success_labels
        else:
            succ = np.zeros(b, dtype=bool)
        better = (succ & ~best_success) | ((succ == best_success) & (vals > best_val))
        best_delta[better] = delta[better]
        best_val[better] = vals[better]
        best_success[better] = succ[better]

    x_adv = np.clip(x + best_delta, 0.0, 1.0)
    return AttackResult(
        delta=best_delta, x_adv=x_adv, objective_value=best_val, success=best_success
    )


def pgd(
    model: mdl.Classifier,
    x: np.ndarray,
    y_or_reference,
    pset: PerturbationSet,
    cfg: AttackConfig,
    targets: Optional[np.ndarray] = None,
    example_ids: Optional[np.ndarray] = None,
    use_ema: bool = False,
) -> AttackResult:
    """PGD on a classifier; objective and inner optimizer set by cfg."""
    objective = _build_objective(model, cfg, x, y_or_reference, targets, use_ema)
    labels = None
    if cfg.objective != "kl-vs-clean":
        labels = np.asarray(y_or_reference)
    elif y_or_reference is not None:
        labels = np.argmax(np.asarray(y_or_reference), axis=1)
    return pgd_on_objective(
        objective,
        x,
        pset,
        cfg,
        example_ids=example_ids,
        success_labels=labels,
        success_logits_fn=objective.logits_np if labels is not None else None,
    )


def fgsm(
    model: mdl.Classifier,
    x: np.ndarray,
    y: np.ndarray,
    pset: PerturbationSet,
    step: Optional[float] = None,
) -> AttackResult:
    """Single normalized gradient step of size epsilon (Linf only)."""
    if pset.norm != LINF:
        raise ValueError("fgsm is defined for Linf perturbation sets")
    size = pset.epsilon if step is None else step
    if size == 0.0 or pset.epsilon == 0.0:
        logits = mdl.forward_logits(model, x).data
        return AttackResult(
            delta=np.zeros_like(np.asarray(x, dtype=np.float64)),
            x_adv=np.asarray(x, dtype=np.float64).copy(),
            objective_value=-ad.log_softmax(logits)[np.arange(len(y)), np.asarray(y)],
            success=np.argmax(logits, axis=1) != np.asarray(y),
        )
    cfg = AttackConfig(
        steps=1, step_size=size, inner_optimizer="sign-sgd", restarts=1,
        objective="cross-entropy", random_start=False,
    )
    return pgd(model, x, y, pset, cfg)


# ---------------------------------------------------------------------------
# evaluation cascade


@dataclass(frozen=True)
class CascadeConfig:
    """Two-stage worst-case evaluation.

    Stage 1: untargeted cross-entropy PGD with several restarts.
    Stage 2: targeted-margin PGD against each of the top_k incorrect
    classes ranked by clean logits. Defaults (5x100 untargeted, 10x200
    targeted on margins) suit full-size runs and are meant to be scaled
    down for desk-size experiments.
    """

    stage1_steps: int = 100
    stage1_restarts: int = 5
    stage2_steps: int = 200
    stage2_restarts: int = 10
    top_k: int = 3
    inner_optimizer: str = "adam"
    step_size: Optional[float] = None  # None: 0.1 for adam, 2.5*eps/steps for sign
    seed: int = 0

    def resolved_step(self, pset: PerturbationSet, steps: int) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.inner_optimizer == "adam":
            return 0.1
        return max(2.5 * pset.epsilon / max(steps, 1), 1e-12)


@dataclass
class CascadeResult:
    robust_accuracy: float
    clean_accuracy: float
    records: list  # dict per example: id, clean_correct, stage survival, worst_margin

    def to_rows(self) -> list[dict]:
        return self.records


def _cascade_chunk(
    model: mdl.Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    ids: np.ndarray,
    pset: PerturbationSet,
    ccfg: CascadeConfig,
    use_ema: bool,
) -> list[dict]:
    clean_logits = mdl.forward_logits(model, images, use_ema=use_ema).data
    clean_pred = np.argmax(clean_logits, axis=1)
    clean_correct = clean_pred == labels
    worst_margin = margin_loss(clean_logits, labels)

    n_classes = clean_logits.shape[1]
    stage1 = pgd(
        model,
        images,
        labels,
        pset,
        AttackConfig(
            steps=ccfg.stage1_steps,
            step_size=ccfg.resolved_step(pset, ccfg.stage1_steps),
            inner_optimizer=ccfg.inner_optimizer,
            restarts=ccfg.stage1_restarts,
            objective="cross-entropy",
            random_start=True,
            seed=ccfg.seed,
        ),
        example_ids=ids,
        use_ema=use_ema,
    )
    adv_logits = mdl.forward_logits(model, stage1.x_adv, use_ema=use_ema).data
    worst_margin = np.minimum(worst_margin, margin_loss(adv_logits, labels))
    stage1_survived = clean_correct & ~stage1.success

    # top-k incorrect classes by clean logit rank, per example
    masked = clean_logits.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    order = np.argsort(-masked, axis=1, kind="stable")
    k = min(ccfg.top_k, n_classes - 1)

    stage2_survived = stage1_survived.copy()
    for rank in range(k):
        live = stage2_survived
        if not live.any():
            break
        targets = order[:, rank]
        attacked = pgd(
            model,
            images[live],
            labels[live],
            pset,
            AttackConfig(
                steps=ccfg.stage2_steps,
                step_size=ccfg.resolved_step(pset, ccfg.stage2_steps),
                inner_optimizer=ccfg.inner_optimizer,
                restarts=ccfg.stage2_restarts,
                objective="targeted-margin",
                random_start=True,
                seed=ccfg.seed + 1000 + rank,
            ),
            targets=targets[live],
            example_ids=ids[live],
            use_ema=use_ema,
        )
        adv_logits = mdl.forward_logits(model, attacked.x_adv, use_ema=use_ema).data
        live_idx = np.flatnonzero(live)
        worst_margin[live_idx] = np.minimum(
            worst_margin[live_idx], margin_loss(adv_logits, labels[live])
        )
        stage2_survived[live_idx[attacked.success]] = False

    rows = []
    for i in range(len(labels)):
        rows.append(
            {
                "example_id": int(ids[i]),
                "clean_correct": bool(clean_correct[i]),
                "stage1_survived": bool(stage1_survived[i]),
                "stage2_survived": bool(stage2_survived[i]),
                "worst_margin": float(worst_margin[i]),
            }
        )
    return rows


def attack_cascade(
    model: mdl.Classifier,
    data: LabeledDataset,
    pset: PerturbationSet,
    ccfg: CascadeConfig = CascadeConfig(),
    use_ema: bool = False,
) -> CascadeResult:
    """Robust accuracy under the full cascade plus per-example records.

    An example counts robust only if it is clean-correct and survives both
    stages. Examples are processed in fixed chunks so threaded runs (see
    GENROBUST_THREADS) match serial runs exactly.
    """
    n = len(data)
    chunks = [
        (data.images[s : s + CHUNK], data.labels[s : s + CHUNK], np.arange(s, min(s + CHUNK, n)))
        for s in range(0, n, CHUNK)
    ]
    results = map_ordered(
        lambda args: _cascade_chunk(model, args[0], args[1], args[2], pset, ccfg, use_ema),
        chunks,
    )
    records = [row for rows in results for row in rows]
    robust = sum(1 for r in records if r["clean_correct"] and r["stage1_survived"] and r["stage2_survived"])
    clean = sum(1 for r in records if r["clean_correct"])
    return CascadeResult(
        robust_accuracy=robust / n if n else 0.0,
        clean_accuracy=clean / n if n else 0.0,
        records=records,
    )
