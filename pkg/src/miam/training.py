"""Training: composite objective, observation masking, RAdam, epoch loop.

The objective couples a focal classification loss with a masked
mean-squared-error reconstruction loss on a random 10% of observed entries,
re-drawn every optimizer step. Model selection is by validation AUC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, compute_intervals
from .errors import ConfigError, InvalidInputError
from .evaluation import auc, auprc
from .model import Batch, ModelConfig, forward, init_params, make_batch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    decay_factor: float = 0.2
    decay_every: int = 10
    epochs: int = 60
    batch_size: int = 64
    focal_beta: float = 7.0
    focal_gamma: float = 0.15
    lambda_imp: float = 0.1
    lambda_cls: float = 7.0
    mask_ratio: float = 0.1
    seed: int = 0
    precision: str = "float32"          # "float64" for exact/deterministic tests
    val_fraction: float = 0.2           # carved from the training fold when no val split given
    recompute_intervals_on_mask: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.decay_factor <= 0 or self.batch_size < 1:
            raise ConfigError("rates and batch size must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MaskPlan:
    """Marks artificially hidden observed entries, aligned with a padded batch."""
    indicator: np.ndarray  # (B, T, D) binary; 1 = hidden for reconstruction

    @property
    def count(self) -> int:
        return int(self.indicator.sum())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_CLAMP_EPS = 1e-7


def focal_loss(probs: Tensor, labels: np.ndarray, beta: float, gamma: float) -> Tensor:
    """Sum over samples of the focal term.

    Positive class: -beta * (1 - p)^gamma * log(p). Negative class uses the
    symmetric form -p^gamma * log(1 - p); beta weights only the positive
    (minority) term. Probabilities are clamped to [eps, 1 - eps].
    """
    dtype = probs.data.dtype
    y = np.asarray(labels, dtype=dtype).reshape(probs.shape)
    p = ad.clamp(probs, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    one = ad.tensor(np.ones_like(p.data))
    q = ad.sub(one, p)  # 1 - p
    pos = ad.scale(ad.elementwise_mul(ad.power(q, gamma), ad.log(p)), -float(beta))
    neg = ad.scale(ad.elementwise_mul(ad.power(p, gamma), ad.log(q)), -1.0)
    terms = ad.add(ad.elementwise_mul(ad.tensor(y), pos),
                   ad.elementwise_mul(ad.tensor(1.0 - y), neg))
    return ad.sum_all(terms)


def imputation_loss(values: np.ndarray, xhat: Tensor, plan: MaskPlan,
                    n_samples: int) -> Tensor:
    """Masked MSE, normalized by the number of samples in the batch."""
    if values.shape != xhat.shape:
        raise ConfigError(f"values {values.shape} vs reconstruction {xhat.shape}")
    dtype = xhat.data.dtype
    ind = ad.tensor(plan.indicator.astype(dtype))
    diff = ad.elementwise_mul(ad.sub(ad.tensor(values.astype(dtype)), xhat), ind)
    return ad.scale(ad.sum_all(ad.power(diff, 2.0)), 1.0 / float(n_samples))


def composite_loss(cls_loss: Tensor, imp_loss: Optional[Tensor],
                   lambda_cls: float, lambda_imp: float) -> Tensor:
    weighted = ad.scale(cls_loss, float(lambda_cls))
    if imp_loss is None:
        return weighted
    return ad.add(ad.scale(imp_loss, float(lambda_imp)), weighted)


# ---------------------------------------------------------------------------
# observation masking
# ---------------------------------------------------------------------------

def sample_mask_plan(batch: Batch, ratio: float, rng: np.random.Generator,
                     recompute_intervals_flag: bool = False) -> Tuple[Batch, MaskPlan]:
    """Hide floor(ratio * observed) entries per sample, uniformly without
    replacement. The corrupted batch zeroes the value and clears the mask bit
    at hidden entries; intervals are left as computed from the original mask
    unless recompute_intervals_flag is set."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidInputError(f"mask ratio {ratio} outside [0, 1)")
    B, T, D = batch.mask.shape
    indicator = np.zeros((B, T, D), dtype=batch.mask.dtype)
    if ratio > 0.0:
        for i in range(B):
            observed = np.argwhere(batch.mask[i] == 1)
            k = int(math.floor(ratio * len(observed)))
            if k == 0:
                continue
            pick = rng.choice(len(observed), size=k, replace=False)
            rows, cols = observed[pick, 0], observed[pick, 1]
            indicator[i, rows, cols] = 1.0

    plan = MaskPlan(indicator=indicator)
    if plan.count == 0:
        return batch, plan

    new_mask = batch.mask * (1.0 - indicator)
    new_values = batch.values * (1.0 - indicator)
    new_intervals = batch.intervals
    if recompute_intervals_flag:
        new_intervals = np.zeros_like(batch.intervals)
        for i in range(B):
            n = int(batch.pad_mask[i].sum())
            new_intervals[i, :n] = compute_intervals(batch.timestamps[i, :n], new_mask[i, :n])
    corrupted = Batch(values=new_values, mask=new_mask, intervals=new_intervals,
                      timestamps=batch.timestamps, pad_mask=batch.pad_mask,
                      labels=batch.labels, subject_ids=batch.subject_ids)
    return corrupted, plan


# ---------------------------------------------------------------------------
# rectified Adam
# ---------------------------------------------------------------------------

class RAdam:
    """Rectified Adam. Applies the variance-rectified adaptive step once the
    rectification term is tractable (rho_t > 4, i.e. from step 5 at
    beta2=0.999), otherwise a plain bias-corrected momentum step."""

    def __init__(self, params: Dict[str, Tensor], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def step(self, grads: Dict[str, Optional[np.ndarray]]) -> bool:
        """One update over all parameters. Returns False (and changes
        nothing) if any gradient is non-finite."""
        for g in grads.values():
            if g is not None and not np.all(np.isfinite(g)):
                self.skipped += 1
                return False

        self.t += 1
        t, b1, b2 = self.t, self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        rho_t = self.rho_inf - 2.0 * t * (b2 ** t) / bias2
        rectified = rho_t > 4.0
        if rectified:
            r_num = (rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf
            r_den = (self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t
            r_t = math.sqrt(r_num / r_den)

        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = m / bias1
            if rectified:
                v_hat = np.sqrt(v / bias2)
                p.data = p.data - self.lr * r_t * m_hat / (v_hat + self.eps)
            else:
                p.data = p.data - self.lr * m_hat
        return True

    def state(self) -> dict:
        return {"t": self.t, "skipped": self.skipped,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.skipped = int(state.get("skipped", 0))
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=self.m[k].dtype)
            self.v[k] = np.array(state["v"][k], dtype=self.v[k].dtype)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch: multiplied by the decay factor
    after every `decay_every` completed epochs."""
    return config.learning_rate * config.decay_factor ** ((epoch - 1) // config.decay_every)


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_params: Dict[str, np.ndarray]
    best_epoch: int
    best_val_auc: float
    final_params: Dict[str, np.ndarray]
    opt_state: dict
    history: List[dict] = field(default_factory=list)
    diverged: bool = False


def _length_bucketed_batches(dataset: Dataset, batch_size: int,
                             rng: np.random.Generator) -> List[List[int]]:
    """Shuffle, stable-sort by length, slice, then shuffle batch order.
    Bounds padding waste while keeping composition random."""
    n = len(dataset)
    order = rng.permutation(n)
    lengths = np.array([dataset.samples[i].num_timestamps for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    batches = [list(order[i:i + batch_size]) for i in range(0, n, batch_size)]
    rng.shuffle(batches)
    return batches


def predict_probs(dataset: Dataset, params: Dict[str, Tensor], config: ModelConfig,
                  batch_size: int = 64, dtype=np.float64) -> np.ndarray:
    """Eval-mode probabilities for every sample, in dataset order."""
    out = np.empty(len(dataset), dtype=np.float64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        batch = make_batch(chunk, dtype=dtype)
        res = forward(batch, params, config, mode="eval")
        out[start:start + len(chunk)] = res.prob.data.reshape(-1)
    return out


def _snapshot(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def split_validation(dataset: Dataset, fraction: float,
                     rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Stratified carve-out of a validation split from a labeled dataset."""
    labels = dataset.labels()
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    rng.shuffle(pos)
    rng.shuffle(neg)
    n_pos = max(1, int(round(fraction * len(pos)))) if len(pos) else 0
    n_neg = max(1, int(round(fraction * len(neg)))) if len(neg) else 0
    val_idx = np.concatenate([pos[:n_pos], neg[:n_neg]])
    train_idx = np.concatenate([pos[n_pos:], neg[n_neg:]])
    return dataset.subset(sorted(train_idx.tolist())), dataset.subset(sorted(val_idx.tolist()))


def train(train_split: Dataset, val_split: Dataset, model_config: ModelConfig,
          train_config: TrainConfig,
          initial_params: Optional[Dict[str, np.ndarray]] = None,
          initial_opt_state: Optional[dict] = None,
          start_epoch: int = 1,
          max_steps: Optional[int] = None) -> TrainResult:
    """Run the full loop and return the best-validation-AUC checkpoint.

    Deterministic for a fixed seed in single-threaded runs: shuffling, mask
    plans and dropout all derive from per-purpose child generators of the
    config seed.
    """
    model_config.validate()
    train_config.validate()
    dtype = train_config.dtype

    seeds = np.random.SeedSequence(train_config.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    mask_rng = np.random.default_rng(seeds[2])
    dropout_rng = np.random.default_rng(seeds[3])

    params = init_params(model_config, init_rng, dtype=dtype)
    if initial_params is not None:
        for k, p in params.items():
            p.data = np.array(initial_params[k], dtype=dtype)
    opt = RAdam(params, lr=train_config.learning_rate,
                betas=(train_config.adam_beta1, train_config.adam_beta2),
                eps=train_config.adam_eps)
    if initial_opt_state is not None:
        opt.load_state(initial_opt_state)

    history: List[dict] = []
    best_params = _snapshot(params)
    best_epoch = 0
    best_val_auc = -np.inf
    steps_done = 0

    for epoch in range(start_epoch, train_config.epochs + 1):
        opt.lr = lr_at_epoch(train_config, epoch)
        epoch_start_params = _snapshot(params)

        total_loss = total_cls = total_imp = 0.0
        n_batches = 0
        diverged = False
        for idx in _length_bucketed_batches(train_split, train_config.batch_size, shuffle_rng):
            batch = make_batch([train_split.samples[i] for i in idx], dtype=dtype)
            corrupted, plan = sample_mask_plan(
                batch, train_config.mask_ratio, mask_rng,
                recompute_intervals_flag=train_config.recompute_intervals_on_mask)
            out = forward(corrupted, params, model_config, mode="train", rng=dropout_rng)

            l_cls = focal_loss(out.prob, batch.labels, train_config.focal_beta,
                               train_config.focal_gamma)
            l_imp = None
            if out.xhat is not None:
                l_imp = imputation_loss(batch.values, out.xhat, plan, batch.size)
            loss = composite_loss(l_cls, l_imp, train_config.lambda_cls,
                                  train_config.lambda_imp)

            if not np.isfinite(loss.data):
                diverged = True
                break

            for p in params.values():
                p.grad = None
            ad.backward(loss)
            opt.step({k: p.grad for k, p in params.items()})

            total_loss += float(loss.data)
            total_cls += float(l_cls.data)
            total_imp += float(l_imp.data) if l_imp is not None else 0.0
            n_batches += 1
            steps_done += 1
            if max_steps is not None and steps_done >= max_steps:
                break

        if diverged:
            # roll back to the last finite state and stop
            for k, p in params.items():
                p.data = epoch_start_params[k]
            return TrainResult(best_params=best_params if best_epoch else epoch_start_params,
                               best_epoch=best_epoch, best_val_auc=float(best_val_auc),
                               final_params=epoch_start_params, opt_state=opt.state(),
                               history=history, diverged=True)

        val_scores = predict_probs(val_split, params, model_config,
                                   batch_size=train_config.batch_size, dtype=dtype)
        val_labels = val_split.labels()
        val_auc = auc(val_scores, val_labels)
        val_ap = auprc(val_scores, val_labels)
        nb = max(n_batches, 1)
        history.append({
            "epoch": epoch, "lr": opt.lr, "train_loss": total_loss / nb,
            "train_cls": total_cls / nb, "train_imp": total_imp / nb,
            "val_auc": val_auc, "val_auprc": val_ap,
        })
        if val_auc > best_val_auc:
            best_val_auc = val_auc
            best_epoch = epoch
            best_params = _snapshot(params)

        if max_steps is not None and steps_done >= max_steps:
            break

    return TrainResult(best_params=best_params, best_epoch=best_epoch,
                       best_val_auc=float(best_val_auc), final_params=_snapshot(params),
                       opt_state=opt.state(), history=history, diverged=False)


def write_history_csv(path, history: List[dict], fingerprint: str = "") -> None:
    """History as CSV with full-precision floats (bitwise reproducible)."""
    cols = ["epoch", "lr", "train_loss", "train_cls", "train_imp", "val_auc", "val_auprc"]
    with open(path, "w", encoding="utf-8") as f:
        if fingerprint:
            f.write(f"# fingerprint={fingerprint}\n")
        f.write(",".join(cols) + "\n")
        for row in history:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                             for c in cols) + "\n")
