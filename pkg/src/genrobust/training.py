"""Mixed-batch robust training: TRADES or standard adversarial training over
batches blending original data (true labels) with generated data (pseudo
labels), Nesterov SGD with a cosine schedule, EMA weight averaging, and
PGD-based early stopping on a held-out validation split.

The mixing factor alpha sets the original fraction of every batch
(n_orig = round(alpha * B), rounded half-up); alpha = 1 reduces the loop to
plain adversarial training, step for step. Epoch accounting always follows
the original-dataset size, whatever alpha is.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import models as mdl
from .attacks import AttackConfig, PerturbationSet, pgd
from .autodiff import NumericError, Tape, Tensor, backward
from .data import LabeledDataset, derive_rng
from .labeling import PseudoLabeledSet
from .models import Classifier
from .optim import NesterovSGD, cosine_lr

__all__ = [
    "EarlyStopConfig",
    "TrainConfig",
    "MixedBatch",
    "TrainReport",
    "cosine_lr",
    "mixed_counts",
    "build_mixed_batch",
    "trades_loss",
    "standard_at_loss",
    "train",
]


@dataclass(frozen=True)
class EarlyStopConfig:
    validation_size: int = 256
    pgd_steps: int = 40
    eval_every: int = 5  # epochs between validation attacks


def _default_inner_attack() -> AttackConfig:
    # TRADES inner loop: Adam ascent, step 0.1, 10 steps
    return AttackConfig(
        steps=10, step_size=0.1, inner_optimizer="adam", restarts=1,
        objective="kl-vs-clean", random_start=True,
    )


@dataclass(frozen=True)
class TrainConfig:
    """Full parameterization of one robust training run.

    beta is the TRADES trade-off (6.0, the customary default for that
    loss). lr0 defaults to 0.05 for desk-size batches; 0.4 is the usual
    value at batch 1024.
    """

    alpha: float = 1.0
    beta: float = 6.0
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_tau: float = 0.995
    loss: str = "trades"  # "trades" | "standard-at"
    inner_attack: AttackConfig = field(default_factory=_default_inner_attack)
    perturbation: PerturbationSet = field(default_factory=lambda: PerturbationSet("linf", 4 / 255))
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("trades", "standard-at"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.ema_tau <= 1.0:
            raise ValueError("ema_tau must lie in [0, 1]")


def mixed_counts(alpha: float, batch_size: int) -> tuple[int, int]:
    """(n_orig, n_gen) with n_orig = round(alpha * B), rounded half-up."""
    n_orig = int(np.floor(alpha * batch_size + 0.5))
    return n_orig, batch_size - n_orig


@dataclass
class MixedBatch:
    orig_images: np.ndarray
    orig_labels: np.ndarray
    gen_images: np.ndarray
    gen_labels: np.ndarray

    @property
    def n_orig(self) -> int:
        return self.orig_images.shape[0]

    @property
    def n_gen(self) -> int:
        return self.gen_images.shape[0]

    def combined(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_gen == 0:
            return self.orig_images, self.orig_labels
        if self.n_orig == 0:
            return self.gen_images, self.gen_labels
        return (
            np.concatenate([self.orig_images, self.gen_images]),
            np.concatenate([self.orig_labels, self.gen_labels]),
        )


def build_mixed_batch(
    orig: Optional[LabeledDataset],
    gen: Optional[PseudoLabeledSet],
    alpha: float,
    batch_size: int,
    rng: np.random.Generator,
) -> MixedBatch:
    """One batch: n_orig originals without replacement, rest generated.

    The generated part draws with replacement (pools may be any size).
    """
    n_orig, n_gen = mixed_counts(alpha, batch_size)
    if n_orig > 0:
        if orig is None or len(orig) == 0:
            raise ValueError("alpha > 0 requires a non-empty original dataset")
        if n_orig > len(orig):
            raise ValueError(f"batch wants {n_orig} originals, dataset has {len(orig)}")
        idx = rng.choice(len(orig), size=n_orig, replace=False)
        oi, ol = orig.images[idx], orig.labels[idx]
    else:
        shape = orig.images.shape[1:] if orig is not None else gen.images.shape[1:]
        oi = np.zeros((0, *shape))
        ol = np.zeros(0, dtype=np.int64)
    if n_gen > 0:
        if gen is None or len(gen) == 0:
            raise ValueError("alpha < 1 requires a non-empty generated pool")
        gidx = rng.integers(0, len(gen), size=n_gen)
        gi, gl = gen.images[gidx], gen.pseudo_labels[gidx]
    else:
        gi = np.zeros((0, *oi.shape[1:]))
        gl = np.zeros(0, dtype=np.int64)
    return MixedBatch(orig_images=oi, orig_labels=ol, gen_images=gi, gen_labels=gl)


# ---------------------------------------------------------------------------
# robust losses


def trades_loss(
    model: Classifier,
    x: np.ndarray,
    labels: np.ndarray,
    beta: float,
    inner: AttackConfig,
    pset: PerturbationSet,
    tape: Optional[Tape] = None,
    example_ids: Optional[np.ndarray] = None,
) -> Tensor:
    """CE(f(x), y) + beta * KL(f(x) || f(x + delta*)).

    delta* maximizes the KL between clean and perturbed predictions (found
    with the inner attack config); the clean logits anchoring the KL term
    are constants for the outer gradient.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    clean_logits = mdl.forward_logits(model, x, tape=tape)
    ce = ad.softmax_cross_entropy(clean_logits, labels, tape)
    if beta == 0.0 or pset.epsilon == 0.0 or inner.steps == 0:
        return ce  # KL term is zero at delta = 0 (and drops out at beta = 0)
    inner_cfg = replace(inner, objective="kl-vs-clean")
    attacked = pgd(
        model, x, clean_logits.data, pset, inner_cfg, example_ids=example_ids
    )
    adv_logits = mdl.forward_logits(model, attacked.x_adv, tape=tape)
    anchor = Tensor(clean_logits.data.copy())  # stop-gradient on the KL anchor
    kl = ad.kl_divergence(anchor, adv_logits, tape)
    return ad.add(ce, ad.mul(kl, float(beta), tape), tape)


def standard_at_loss(
    model: Classifier,
    x: np.ndarray,
    labels: np.ndarray,
    inner: AttackConfig,
    pset: PerturbationSet,
    tape: Optional[Tape] = None,
    example_ids: Optional[np.ndarray] = None,
) -> Tensor:
    """Cross-entropy at the inner cross-entropy-PGD maximizer."""
    if pset.epsilon == 0.0 or inner.steps == 0:
        logits = mdl.forward_logits(model, x, tape=tape)
        return ad.softmax_cross_entropy(logits, labels, tape)
    inner_cfg = replace(inner, objective="cross-entropy")
    attacked = pgd(model, x, labels, pset, inner_cfg, example_ids=example_ids)
    adv_logits = mdl.forward_logits(model, attacked.x_adv, tape=tape)
    return ad.softmax_cross_entropy(adv_logits, labels, tape)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # step, lr, train_loss, val_clean, val_robust
    best_step: int = -1
    best_val_robust: float = -1.0
    stopped_step: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,lr,train_loss,val_clean,val_robust\n")
        for r in self.rows:
            buf.write(
                f"{r['step']},{r['lr']:.8g},{r['train_loss']:.8g},"
                f"{r['val_clean']:.8g},{r['val_robust']:.8g}\n"
            )
        return buf.getvalue()


def _validation_robust_accuracy(
    model: Classifier, val: LabeledDataset, pset: PerturbationSet, steps: int, seed: int
) -> float:
    """PGD-N robust accuracy of the EMA weights on the validation split."""
    if pset.epsilon == 0.0 or steps == 0:
        return mdl.accuracy(model, val, use_ema=True)
    cfg = AttackConfig(
        steps=steps,
        step_size=max(2.5 * pset.epsilon / steps, 1e-12),
        inner_optimizer="sign-sgd",
        restarts=1,
        objective="cross-entropy",
        random_start=True,
        seed=seed,
    )
    correct = 0
    batch = 128
    for start in range(0, len(val), batch):
        x = val.images[start : start + batch]
        y = val.labels[start : start + batch]
        res = pgd(model, x, y, pset, cfg, example_ids=np.arange(start, start + len(y)), use_ema=True)
        adv_logits = mdl.forward_logits(model, res.x_adv, use_ema=True).data
        correct += int(np.sum(np.argmax(adv_logits, axis=1) == y))
    return correct / len(val)


def _snapshot(model: Classifier) -> Classifier:
    out = Classifier(config=model.config, params=model.ema_params.copy(), ema_params=None)
    out.ema_params = out.params.copy()
    return out


def train(
    config: TrainConfig,
    orig: LabeledDataset,
    gen: Optional[PseudoLabeledSet],
    model: Classifier,
) -> tuple[Classifier, TrainReport]:
    """Run the mixed-batch robust loop; returns (EMA model at the best
    validation step, per-evaluation report). The input model is not mutated.

    The original dataset's last ``early_stop.validation_size`` examples are
    held out for PGD validation and never trained on.
    """
    n_orig_frac, n_gen_frac = mixed_counts(config.alpha, config.batch_size)
    if n_gen_frac > 0 and (gen is None or len(gen) == 0):
        raise ValueError("alpha < 1 requires a generated pool")
    work = Classifier(config=model.config, params=model.params.copy(), ema_params=model.ema_params.copy())
    report = TrainReport()
    if config.epochs == 0:
        report.best_step = 0
        return _snapshot(work), report

    val_n = min(config.early_stop.validation_size, max(len(orig) - 1, 0))
    train_split = orig.subset(np.arange(len(orig) - val_n))
    val_split = orig.subset(np.arange(len(orig) - val_n, len(orig)))
    if n_orig_frac > 0 and len(train_split) < n_orig_frac:
        raise ValueError("training split smaller than the original batch share")

    steps_per_epoch = max(1, len(train_split) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    shuffle_rng = derive_rng("train-shuffle", config.seed)
    gen_rng = derive_rng("train-gen", config.seed)
    optimizer = NesterovSGD(work.params, momentum=config.momentum, weight_decay=config.weight_decay)

    step = 0
    losses: list[float] = []
    best = (-1.0, -1)  # (val robust accuracy, step)
    best_model = _snapshot(work)

    def evaluate(at_step: int) -> None:
        nonlocal best, best_model
        if val_n == 0:
            return
        val_clean = mdl.accuracy(work, val_split, use_ema=True)
        val_robust = _validation_robust_accuracy(
            work, val_split, config.perturbation, config.early_stop.pgd_steps,
            seed=config.seed,
        )
        mean_loss = float(np.mean(losses)) if losses else 0.0
        losses.clear()
        report.rows.append(
            {
                "step": at_step,
                "lr": cosine_lr(min(at_step, total_steps), total_steps, config.lr0),
                "train_loss": mean_loss,
                "val_clean": val_clean,
                "val_robust": val_robust,
            }
        )
        if val_robust > best[0]:
            best = (val_robust, at_step)
            best_model = _snapshot(work)

    try:
        for epoch in range(config.epochs):
            if n_orig_frac > 0:
                order = shuffle_rng.permutation(len(train_split))
            for s in range(steps_per_epoch):
                if n_orig_frac > 0:
                    lo = (s * n_orig_frac) % len(train_split)
                    take = order[lo : lo + n_orig_frac]
                    if take.size < n_orig_frac:  # wrap the epoch shuffle
                        take = np.concatenate([take, order[: n_orig_frac - take.size]])
                    oi, ol = train_split.images[take], train_split.labels[take]
                else:
                    oi = np.zeros((0, *train_split.images.shape[1:]))
                    ol = np.zeros(0, dtype=np.int64)
                if n_gen_frac > 0:
                    gidx = gen_rng.integers(0, len(gen), size=n_gen_frac)
                    gi, gl = gen.images[gidx], gen.pseudo_labels[gidx]
                else:
                    gi = np.zeros((0, *oi.shape[1:]))
                    gl = np.zeros(0, dtype=np.int64)
                batch = MixedBatch(orig_images=oi, orig_labels=ol, gen_images=gi, gen_labels=gl)
                x, y = batch.combined()

                tape = Tape()
                ids = np.arange(step * config.batch_size, step * config.batch_size + len(y))
                if config.loss == "trades":
                    loss = trades_loss(
                        work, x, y, config.beta, config.inner_attack,
                        config.perturbation, tape, example_ids=ids,
                    )
                else:
                    loss = standard_at_loss(
                        work, x, y, config.inner_attack, config.perturbation,
                        tape, example_ids=ids,
                    )
                grads = backward(loss, tape).for_params(work.params)
                optimizer.step(grads, cosine_lr(step, total_steps, config.lr0))
                mdl.ema_update(work, config.ema_tau)
                losses.append(loss.item())
                step += 1
            if (epoch + 1) % config.early_stop.eval_every == 0 or epoch == config.epochs - 1:
                evaluate(step)
    except NumericError as exc:
        raise RuntimeError(
            f"training diverged with a non-finite loss at step {step} "
            f"(alpha={config.alpha}, lr0={config.lr0}): {exc}"
        ) from exc

    if val_n == 0:
        best_model = _snapshot(work)
        best = (0.0, step)
    report.best_step = best[1]
    report.best_val_robust = best[0]
    report.stopped_step = step
    return best_model, report
