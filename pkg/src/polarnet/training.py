"""Cross-validated training loop for the multi-branch polar network.

Rotation augmentation is applied where it is cheap and exact: as cyclic row
shifts of the polar inputs (a rotation about the transform center is a row
shift, so +/-20 degrees becomes a bounded random roll).  All randomness
derives from one seed; per-fold streams are split off it so fold-parallel
runs reproduce the sequential results.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import kfold_split, metrics
from .errors import ConfigError, DataError
from .geometry import normalize_laterality, to_polar
from .grids import PROJECTIONS, PriorMatrix, load_prior
from .model import ModelConfig, PolarNetModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-5
    batch_size: int = 28
    epochs: int = 10
    seed: int = 0
    folds: int = 5
    augment_deg: float = 20.0
    prior_path: str = None

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.folds < 2:
            raise ConfigError("invalid training configuration")

    def to_dict(self):
        return {"lr": self.lr, "batch_size": self.batch_size,
                "epochs": self.epochs, "seed": self.seed, "folds": self.folds,
                "augment_deg": self.augment_deg, "prior_path": self.prior_path}

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {k: d[k] for k in ("lr", "batch_size", "epochs", "seed",
                                   "folds", "augment_deg", "prior_path")
                 if k in d}
        return cls(**known)


@dataclass
class Sample:
    """One eye: the three polar projections stacked as (3, theta, r)."""

    subject_id: str
    label: int
    stack: np.ndarray


def prepare_samples(subjects, input_size) -> list:
    """Laterality-normalize and polar-transform every eye once, up front."""
    theta_n, r_n = input_size
    samples = []
    for subj in subjects:
        for _, images in subj.eyes:
            planes = []
            for proj in PROJECTIONS:
                img = normalize_laterality(images[proj])
                planes.append(to_polar(img, theta_n, r_n).plane)
            samples.append(Sample(subject_id=subj.id, label=subj.label,
                                  stack=np.stack(planes)))
    return samples


def projection_norm(samples) -> np.ndarray:
    """Per-projection (mean, std) over a sample list, shape (branches, 2).

    The network has no normalization layers, so inputs are centered with
    training-fold statistics; dataset-level (rather than per-image) stats
    keep absolute intensity differences visible to the classifier.
    """
    stacks = np.stack([s.stack for s in samples])  # (n, branches, theta, r)
    mean = stacks.mean(axis=(0, 2, 3))
    std = stacks.std(axis=(0, 2, 3)) + 1e-6
    return np.stack([mean, std], axis=1).astype(np.float32)


def class_weights(labels, n_classes=2) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1."""
    labels = np.asarray(labels)
    counts = np.array([(labels == c).sum() for c in range(n_classes)], dtype=np.float64)
    if (counts == 0).any():
        raise DataError("a training fold contains a single class")
    w = labels.size / (n_classes * counts)
    return w.astype(np.float32)


def _batch_tensors(samples, idx, shifts=None, norm=None):
    """Assemble per-branch (B, 1, theta, r) tensors, optionally row-rolled
    and affine-normalized with per-projection (mean, std) rows."""
    stacks = []
    for pos, i in enumerate(idx):
        stack = samples[i].stack
        if shifts is not None and shifts[pos]:
            stack = np.roll(stack, shifts[pos], axis=1)
        stacks.append(stack)
    batch = np.stack(stacks)  # (B, 3, theta, r)
    if norm is not None:
        batch = (batch - norm[None, :, 0, None, None]) / norm[None, :, 1, None, None]
    labels = np.array([samples[i].label for i in idx], dtype=np.int64)
    inputs = [T.Tensor(np.ascontiguousarray(batch[:, b:b + 1])) for b in range(batch.shape[1])]
    return inputs, labels


@dataclass
class FoldResult:
    fold: int
    test_subjects: list
    loss_curve: list = field(default_factory=list)
    train_acc_curve: list = field(default_factory=list)
    test_scores: list = field(default_factory=list)
    test_labels: list = field(default_factory=list)
    test_subject_ids: list = field(default_factory=list)
    test_metrics: dict = field(default_factory=dict)
    subject_metrics: dict = field(default_factory=dict)


def train_fold(model: PolarNetModel, train_samples, test_samples, cfg: TrainConfig,
               fold_index, prior: PriorMatrix = None) -> FoldResult:
    labels = [s.label for s in train_samples]
    if len(set(labels)) < 2 or len({s.label for s in test_samples}) < 2:
        raise DataError(f"fold {fold_index} does not contain both classes")
    weights = class_weights(labels)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, fold_index, 1)))
    theta_n = train_samples[0].stack.shape[1]
    model.normalization = projection_norm(train_samples)
    params = model.params.tensors()
    state = T.adam_init(params)
    result = FoldResult(fold=fold_index,
                        test_subjects=sorted({s.subject_id for s in test_samples}))

    n = len(train_samples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        degs = rng.uniform(-cfg.augment_deg, cfg.augment_deg, size=n)
        shifts = np.rint(degs * theta_n / 360.0).astype(int)
        epoch_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            inputs, batch_labels = _batch_tensors(train_samples, idx,
                                                  shifts[lo:lo + cfg.batch_size],
                                                  norm=model.normalization)
            cache = model.forward(inputs, prior=prior)
            loss = T.cross_entropy_logits(cache.logits, batch_labels, weights)
            model.params.zero_grads()
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            T.adam_step(params, grads, state, lr=cfg.lr)
            epoch_loss += float(loss.data) * len(idx)
            correct += int((cache.logits.data.argmax(axis=1) == batch_labels).sum())
        result.loss_curve.append(epoch_loss / n)
        result.train_acc_curve.append(correct / n)
        log.info("fold %d epoch %d: loss %.4f train-acc %.3f",
                 fold_index, epoch, result.loss_curve[-1], result.train_acc_curve[-1])

    scores, test_labels, sids = predict_samples(model, test_samples, prior=prior)
    result.test_scores = scores
    result.test_labels = test_labels
    result.test_subject_ids = sids
    result.test_metrics = metrics(test_labels, scores)
    result.subject_metrics = subject_level_metrics(sids, test_labels, scores)
    return result


def predict_samples(model, samples, prior=None, batch_size=16):
    """Class-1 probabilities per sample; returns (scores, labels, subject ids)."""
    scores = []
    norm = getattr(model, "normalization", None)
    with T.no_grad():
        for lo in range(0, len(samples), batch_size):
            idx = range(lo, min(lo + batch_size, len(samples)))
            inputs, _ = _batch_tensors(samples, list(idx), norm=norm)
            cache = model.forward(inputs, prior=prior)
            scores.extend(float(p) for p in T.softmax(cache.logits.data)[:, 1])
    return scores, [s.label for s in samples], [s.subject_id for s in samples]


def subject_level_metrics(subject_ids, labels, scores):
    """Mean score per subject, then the usual metrics at that granularity."""
    by_subject = {}
    for sid, lab, sc in zip(subject_ids, labels, scores):
        by_subject.setdefault(sid, (lab, []))[1].append(sc)
    agg_labels = [v[0] for v in by_subject.values()]
    agg_scores = [float(np.mean(v[1])) for v in by_subject.values()]
    if len(set(agg_labels)) < 2:
        return {}
    return metrics(agg_labels, agg_scores)


def train(subjects, model_config: ModelConfig, cfg: TrainConfig,
          out_dir=None, jobs=1):
    """Five-fold (or k-fold) cross-validated training.

    Returns {"folds": [FoldResult], "models": [PolarNetModel], "summary": {}}
    and, when out_dir is given, writes fold checkpoints plus metrics.json.
    """
    prior = load_prior(cfg.prior_path) if cfg.prior_path else None
    samples = prepare_samples(subjects, model_config.input_size)
    folds = kfold_split(subjects, cfg.folds, cfg.seed)
    by_id = {}
    for s in samples:
        by_id.setdefault(s.subject_id, []).append(s)

    def run_fold(i):
        test_ids = set(folds[i])
        train_s = [s for s in samples if s.subject_id not in test_ids]
        test_s = [s for s in samples if s.subject_id in test_ids]
        model = PolarNetModel(model_config,
                              seed=np.random.SeedSequence((cfg.seed, i, 0)),
                              prior=prior)
        result = train_fold(model, train_s, test_s, cfg, i, prior=prior)
        return model, result

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_fold, range(cfg.folds)))
    else:
        outcomes = [run_fold(i) for i in range(cfg.folds)]
    models = [m for m, _ in outcomes]
    results = [r for _, r in outcomes]

    summary = summarize([r.test_metrics for r in results])
    subject_summary = summarize([r.subject_metrics for r in results
                                 if r.subject_metrics])
    payload = {
        "model_config": model_config.to_dict(),
        "train_config": cfg.to_dict(),
        "folds": [fold_payload(r) for r in results],
        "summary": summary,
        "per_subject_summary": subject_summary,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for model, result in outcomes:
            save_checkpoint(out / f"fold{result.fold}.ckpt", model, cfg, result)
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return {"folds": results, "models": models, "summary": summary,
            "payload": payload}


def fold_payload(r: FoldResult):
    return {"fold": r.fold, "test_subjects": r.test_subjects,
            "loss": [float(x) for x in r.loss_curve],
            "train_acc": [float(x) for x in r.train_acc_curve],
            "test": r.test_metrics, "per_subject": r.subject_metrics,
            "scores": [float(s) for s in r.test_scores],
            "labels": [int(x) for x in r.test_labels],
            "sample_subjects": list(r.test_subject_ids)}


def summarize(fold_metrics):
    out = {}
    if not fold_metrics:
        return out
    for key in ("ACC", "AUROC", "Kappa"):
        vals = np.array([m[key] for m in fold_metrics], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def save_checkpoint(path, model: PolarNetModel, cfg: TrainConfig,
                    result: FoldResult):
    meta = {"model_config": model.config.to_dict(),
            "train_config": cfg.to_dict(),
            "fold": result.fold,
            "test_subjects": result.test_subjects}
    if getattr(model, "normalization", None) is not None:
        meta["normalization"] = model.normalization.tolist()
    T.save_container(path, model.params.named(), meta=meta)


def load_checkpoint(path):
    """Rebuild a model (and its fold metadata) from a checkpoint file."""
    manifest, arrays = T.load_container(path)
    config = ModelConfig.from_dict(manifest["model_config"])
    model = PolarNetModel(config, seed=0)
    model.params.load(arrays)
    if "normalization" in manifest:
        model.normalization = np.asarray(manifest["normalization"],
                                         dtype=np.float32)
    return model, manifest
