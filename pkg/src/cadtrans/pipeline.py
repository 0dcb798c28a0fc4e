"""Source training with ADM self-distillation, then source-free target adaptation."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import consistency, losses, pseudolabel
from . import tensor as T
from .adm import AdmConfig, distill_loss
from .backbone import BackboneConfig, ConfigError
from .model import build_model, forward
from .params import ADM_PREFIXES, CLASSIFIER_PREFIXES, ModelState
from .synthdata import Dataset
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    lr: float = 1e-2
    # None: use ``lr`` for the target stage as well
    target_lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    source_epochs: int = 30
    target_epochs: int = 20
    alpha: float = 0.3
    beta: float = 0.1
    centroid_momentum: float = 0.9
    knn_k: int = 5
    refine_rounds: int = 2
    distill_weight: float = 1.0
    kernel_multipliers: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    mmd_pooled: bool = False
    lr_decay: bool = False
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.kernel_multipliers = tuple(float(m) for m in self.kernel_multipliers)
        for name in ("lr", "momentum", "weight_decay", "alpha", "beta", "distill_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.target_lr is not None and self.target_lr < 0:
            raise ConfigError("target_lr must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm)")
        if not 0.0 <= self.centroid_momentum <= 1.0:
            raise ConfigError("centroid_momentum must lie in [0, 1]")
        if self.knn_k < 1 or self.refine_rounds < 0:
            raise ConfigError("knn_k must be >= 1 and refine_rounds >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.alpha, self.beta)

    @property
    def kernel(self) -> losses.KernelSpec:
        return losses.KernelSpec(multipliers=self.kernel_multipliers, pooled=self.mmd_pooled)


class SGD:
    """Momentum SGD with coupled L2 weight decay; frozen parameters are skipped."""

    def __init__(self, model: ModelState, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.lr = lr
        self.mu = momentum
        self.wd = weight_decay

    def step(self) -> None:
        for name, p in self.model.trainable():
            if p.grad is None:
                continue
            g = p.grad.data
            if self.wd:
                g = g + self.wd * p.data
            buf = self.model.momentum.get(name)
            buf = g.copy() if buf is None else self.mu * buf + g
            self.model.momentum[name] = buf
            p.data = p.data - self.lr * buf


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if len(idx) >= 2:
            yield idx


def _lr_at(cfg: AdaptConfig, base: float, epoch: int, total: int) -> float:
    if not cfg.lr_decay:
        return base
    # inverse decay as commonly used for SFDA fine-tuning
    return base * (1 + 10 * epoch / max(total, 1)) ** -0.75


def extract(model: ModelState, images: np.ndarray, batch_size: int = 128) -> Dict[str, np.ndarray]:
    """Eval-mode forward over a whole set, returning float64 arrays in sample order."""
    out = {"f_t": [], "z_t": [], "f_a": [], "z_a": []}
    with T.no_grad():
        for idx in _batches(len(images) + 1, batch_size, None):
            idx = idx[idx < len(images)]
            if len(idx) == 0:
                continue
            o = forward(images[idx].astype(model.dtype), model, "eval")
            for key in out:
                out[key].append(getattr(o, key).data.astype(np.float64))
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


def train_source(data: Dataset, cfg: AdaptConfig, bcfg: Optional[BackboneConfig] = None,
                 acfg: Optional[AdmConfig] = None, model: Optional[ModelState] = None,
                 detach_adm: bool = True, epoch_callback=None) -> Tuple[ModelState, List[Dict]]:
    """Supervised cross-entropy on the classifier plus ADM distillation.

    The teacher outputs and the ADM input are detached, so the distillation
    term only moves ADM parameters.
    """
    if data.labels is None or len(data) == 0:
        raise ValueError("source training needs a non-empty labelled dataset")
    if model is None:
        model = build_model(bcfg or BackboneConfig(), acfg or AdmConfig(), seed=cfg.seed, dtype=cfg.dtype)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.weight_decay)
    images = data.images.astype(model.dtype)
    labels = np.asarray(data.labels, dtype=np.int64)
    history = []
    for epoch in range(1, cfg.source_epochs + 1):
        opt.lr = _lr_at(cfg, cfg.lr, epoch - 1, cfg.source_epochs)
        ce_sum = kd_sum = 0.0
        correct = seen = 0
        for idx in _batches(len(images), cfg.batch_size, rng):
            model.zero_grad()
            out = forward(images[idx], model, "train", detach_adm_input=detach_adm)
            ce = losses.cross_entropy(out.z_t, labels[idx])
            loss = ce
            kd = None
            if cfg.distill_weight > 0:
                kd = distill_loss(out.f_a, out.f_t, out.z_a, out.z_t, model.adm_cfg.squared_feature_loss)
                loss = T.add(ce, T.mul(kd, cfg.distill_weight))
            loss.backward()
            opt.step()
            ce_sum += float(ce.data) * len(idx)
            kd_sum += (float(kd.data) if kd is not None else 0.0) * len(idx)
            correct += int(np.sum(out.z_t.data.argmax(1) == labels[idx]))
            seen += len(idx)
        row = {"epoch": epoch, "ce": ce_sum / seen, "kd": kd_sum / seen, "train_acc": correct / seen}
        history.append(row)
        logger.info("source epoch %d: ce=%.4f kd=%.4f acc=%.3f", epoch, row["ce"], row["kd"], row["train_acc"])
        if epoch_callback is not None:
            epoch_callback(row)
    return model, history


def pseudo_label_round(feats: Dict[str, np.ndarray], cfg: AdaptConfig, epoch: int = 0):
    """Dual-space pseudo-labels, easy/hard banks and final labels for one epoch."""
    labels_c = pseudolabel.evaluate(feats["f_t"], feats["z_t"], cfg.centroid_momentum, cfg.refine_rounds,
                                    space_tag="classifier")
    labels_g = pseudolabel.evaluate(feats["f_a"], feats["z_a"], cfg.centroid_momentum, cfg.refine_rounds,
                                    space_tag="assistant")
    bank, final = consistency.consistent_labels(labels_c, labels_g, feats["f_t"], cfg.knn_k, epoch)
    return labels_c, labels_g, bank, final


@dataclass
class AdaptResult:
    model: ModelState
    metrics: List[Dict] = field(default_factory=list)
    banks: List[consistency.MemoryBank] = field(default_factory=list)


def _accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean(pred == truth)) if len(truth) else float("nan")


def adapt_target(model: ModelState, target: Dataset, cfg: AdaptConfig, truth: Optional[np.ndarray] = None,
                 epoch_callback=None) -> AdaptResult:
    """Source-free adaptation of the feature extractor.

    ``target`` must not carry labels; ``truth`` is used only to fill the
    accuracy columns of the metrics. Classifier and ADM are frozen.
    """
    model = model.copy()
    model.unfreeze_all()
    model.momentum.clear()
    model.freeze(CLASSIFIER_PREFIXES + ADM_PREFIXES)
    frozen_names = sorted(model.frozen)
    images = target.images.astype(model.dtype)
    n = len(images)
    base_lr = cfg.target_lr if cfg.target_lr is not None else cfg.lr
    opt = SGD(model, base_lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 2)
    kernel = cfg.kernel
    weights = cfg.loss_weights
    result = AdaptResult(model=model)
    feats = extract(model, images)
    for epoch in range(1, cfg.target_epochs + 1):
        opt.lr = _lr_at(cfg, base_lr, epoch - 1, cfg.target_epochs)
        labels_c, _, bank, final = pseudo_label_round(feats, cfg, epoch)
        y_final = final.labels
        easy = bank.easy_mask()
        sums = {"L_im": 0.0, "L_cst": 0.0, "L_cmk": 0.0, "L_total": 0.0}
        seen = 0
        frozen_grad = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            model.zero_grad()
            out = forward(images[idx], model, "eval")
            l_im = losses.im_loss(out.z_t)
            l_cst = losses.cst_loss(out.z_t, out.z_a, y_final[idx])
            e_rows, h_rows = np.flatnonzero(easy[idx]), np.flatnonzero(~easy[idx])
            l_cmk, _ = losses.cmk_mmd(T.take_rows(out.f_t, e_rows), y_final[idx][e_rows],
                                      T.take_rows(out.f_t, h_rows), y_final[idx][h_rows], kernel)
            total = losses.total_loss(l_im, l_cst, l_cmk, weights)
            total.backward()
            frozen_grad = max(frozen_grad, T.parameters_grad_norm(model[nm] for nm in frozen_names))
            opt.step()
            for key, val in (("L_im", l_im), ("L_cst", l_cst), ("L_cmk", l_cmk), ("L_total", total)):
                sums[key] += float(val.data) * len(idx)
            seen += len(idx)
        feats = extract(model, images)
        row = {"epoch": epoch, **{k: v / seen for k, v in sums.items()},
               "easy_count": bank.n_easy, "hard_count": bank.n_hard, "degraded": bank.degraded,
               "frozen_grad_norm": frozen_grad}
        if truth is not None:
            truth = np.asarray(truth)
            row["pl_acc_easy"] = _accuracy(bank.easy_labels, truth[bank.easy_idx])
            row["pl_acc_all"] = _accuracy(labels_c.labels, truth)
            row["pl_acc_final"] = _accuracy(y_final, truth)
            row["target_acc"] = _accuracy(feats["z_t"].argmax(1), truth)
        else:
            for key in ("pl_acc_easy", "pl_acc_all", "pl_acc_final", "target_acc"):
                row[key] = float("nan")
        result.metrics.append(row)
        result.banks.append(bank)
        logger.info("target epoch %d: total=%.4f easy=%d hard=%d pl_easy=%.3f pl_all=%.3f acc=%.3f",
                    epoch, row["L_total"], bank.n_easy, bank.n_hard, row["pl_acc_easy"], row["pl_acc_all"],
                    row["target_acc"])
        if epoch_callback is not None:
            epoch_callback(row)
    return result


def evaluate(model: ModelState, data: Dataset, truth: Optional[np.ndarray] = None) -> Dict:
    """Eval-mode accuracy, per-class accuracy, predictions and loss components."""
    truth = truth if truth is not None else data.labels
    if truth is None:
        truth = data.sidecar.get("labels")
    feats = extract(model, data.images.astype(model.dtype))
    pred = feats["z_t"].argmax(1)
    z = Tensor(feats["z_t"])
    res = {"predictions": pred, "L_im": float(losses.im_loss(z).data)}
    if truth is not None:
        truth = np.asarray(truth, dtype=np.int64)
        res["accuracy"] = _accuracy(pred, truth)
        C = feats["z_t"].shape[1]
        res["per_class"] = [_accuracy(pred[truth == k], truth[truth == k]) for k in range(C)]
        res["L_ce"] = float(losses.cross_entropy(z, truth).data)
    return res


def accuracy_from_predictions(pred, truth) -> float:
    return _accuracy(pred, truth)


def config_snapshot(model: ModelState) -> Dict:
    return {"backbone": dataclasses.asdict(model.backbone_cfg), "adm": dataclasses.asdict(model.adm_cfg)}
