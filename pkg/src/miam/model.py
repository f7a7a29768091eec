"""Multi-view integration attention model.

Three views of an irregularly-sampled record (values, observation mask,
inter-observation intervals) are embedded with a shared sinusoidal time
encoding, each refined by its own self-attention. Stacked integration layers
then fuse them in two steps: interval-queried attention over the mask view
yields a missing-pattern state, which queries the observation view; a
position-wise feed-forward net follows. Only the observation state evolves
across layers. A mean-pooled two-layer head produces the mortality
probability; a train-time attention decoder reconstructs artificially masked
values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TimeSeriesSample
from .errors import ConfigError, ShapeError

VALID_VIEWS = ("x", "xm", "xd", "xmd")


@dataclass(frozen=True)
class ModelConfig:
    num_variables: int
    d_model: int = 32
    n_heads: int = 4
    d_k: Optional[int] = None          # per-head query/key width; default d_model // n_heads
    d_v: Optional[int] = None
    d_ffn: int = 64
    n_layers: int = 2
    l_max: float = 48.0                # time-embedding denominator base (max time span)
    leaky_slope: float = 0.01
    ln_eps: float = 1e-5
    dropout: float = 0.1
    views: str = "xmd"                 # ablations: "x", "xm", "xd", "xmd"
    use_residual_norm: bool = True     # residual + layer norm around every sublayer
    evolve_views: bool = False         # let the mask state evolve across layers too
    use_decoder: bool = True

    def validate(self) -> None:
        if self.views not in VALID_VIEWS:
            raise ConfigError(f"views must be one of {VALID_VIEWS}, got {self.views!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even (sine/cosine pairs)")
        if self.l_max <= 1:
            raise ConfigError("l_max must be > 1")
        if self.d_k is None or self.d_v is None:
            if self.d_model % self.n_heads != 0:
                raise ConfigError(
                    f"d_model={self.d_model} not divisible by n_heads={self.n_heads} "
                    "and no explicit d_k/d_v given")
        if (self.d_k is not None and self.d_k <= 0) or (self.d_v is not None and self.d_v <= 0):
            raise ConfigError("d_k and d_v must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dk(self) -> int:
        return self.d_k if self.d_k is not None else self.d_model // self.n_heads

    @property
    def head_dv(self) -> int:
        return self.d_v if self.d_v is not None else self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "num_variables": self.num_variables, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_k": self.d_k, "d_v": self.d_v,
            "d_ffn": self.d_ffn, "n_layers": self.n_layers, "l_max": self.l_max,
            "leaky_slope": self.leaky_slope, "ln_eps": self.ln_eps,
            "dropout": self.dropout, "views": self.views,
            "use_residual_norm": self.use_residual_norm,
            "evolve_views": self.evolve_views, "use_decoder": self.use_decoder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    """Samples padded to a common length. pad_mask is 1 at real time points."""
    values: np.ndarray       # (B, T, D)
    mask: np.ndarray         # (B, T, D)
    intervals: np.ndarray    # (B, T, D)
    timestamps: np.ndarray   # (B, T)
    pad_mask: np.ndarray     # (B, T)
    labels: Optional[np.ndarray]  # (B,)
    subject_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def max_len(self) -> int:
        return self.values.shape[1]


def make_batch(samples, dtype=np.float64) -> Batch:
    """Pad a list of samples to the longest sequence in the batch."""
    B = len(samples)
    T = max(s.num_timestamps for s in samples)
    D = samples[0].num_variables
    values = np.zeros((B, T, D), dtype=dtype)
    mask = np.zeros((B, T, D), dtype=dtype)
    intervals = np.zeros((B, T, D), dtype=dtype)
    timestamps = np.zeros((B, T), dtype=dtype)
    pad = np.zeros((B, T), dtype=dtype)
    labels = []
    for i, s in enumerate(samples):
        n = s.num_timestamps
        values[i, :n] = s.values
        mask[i, :n] = s.mask
        intervals[i, :n] = s.intervals
        timestamps[i, :n] = s.timestamps
        pad[i, :n] = 1.0
        labels.append(s.label)
    y = None if any(l is None for l in labels) else np.asarray(labels, dtype=dtype)
    return Batch(values, mask, intervals, timestamps, pad, y,
                 [s.subject_id for s in samples])


@dataclass
class ViewStates:
    """Hidden states of the three views; absent views are None."""
    h_x: Tensor
    h_m: Optional[Tensor]
    h_d: Optional[Tensor]


@dataclass
class ForwardResult:
    prob: Tensor                  # (B, 1) mortality probability
    xhat: Optional[Tensor] = None  # (B, T, D) reconstruction, train mode only


# ---------------------------------------------------------------------------
# time embedding
# ---------------------------------------------------------------------------

def time_embedding(timestamps: np.ndarray, config: ModelConfig, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encoding of continuous time, shape (..., d_model).

    Pair 2i holds sin(t / l_max^(2i/d_model)), pair 2i+1 the matching cosine,
    so the first pair is (sin t, cos t) and all entries lie in [-1, 1].
    """
    t = np.asarray(timestamps, dtype=np.float64)
    half = config.d_model // 2
    exponents = (2.0 * np.arange(half)) / config.d_model
    denom = config.l_max ** exponents            # (half,)
    angles = t[..., None] / denom                # (..., half)
    te = np.empty(t.shape + (config.d_model,), dtype=np.float64)
    te[..., 0::2] = np.sin(angles)
    te[..., 1::2] = np.cos(angles)
    return te.astype(dtype)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


def _mha_param_names(prefix: str):
    return [f"{prefix}.Wq", f"{prefix}.Wk", f"{prefix}.Wv", f"{prefix}.Wo"]


def _add_mha_params(params, rng, prefix: str, config: ModelConfig, dtype):
    dm, h = config.d_model, config.n_heads
    dk, dv = config.head_dk, config.head_dv
    params[f"{prefix}.Wq"] = ad.tensor(_glorot(rng, dm, h * dk, dtype), requires_grad=True)
    params[f"{prefix}.Wk"] = ad.tensor(_glorot(rng, dm, h * dk, dtype), requires_grad=True)
    params[f"{prefix}.Wv"] = ad.tensor(_glorot(rng, dm, h * dv, dtype), requires_grad=True)
    params[f"{prefix}.Wo"] = ad.tensor(_glorot(rng, h * dv, dm, dtype), requires_grad=True)
    if config.use_residual_norm:
        params[f"{prefix}.ln_g"] = ad.tensor(np.ones(dm, dtype=dtype), requires_grad=True)
        params[f"{prefix}.ln_b"] = ad.tensor(np.zeros(dm, dtype=dtype), requires_grad=True)


def _add_ffn_params(params, rng, prefix: str, config: ModelConfig, dtype):
    dm, dffn = config.d_model, config.d_ffn
    params[f"{prefix}.W1"] = ad.tensor(_glorot(rng, dm, dffn, dtype), requires_grad=True)
    params[f"{prefix}.b1"] = ad.tensor(np.zeros(dffn, dtype=dtype), requires_grad=True)
    params[f"{prefix}.W2"] = ad.tensor(_glorot(rng, dffn, dm, dtype), requires_grad=True)
    params[f"{prefix}.b2"] = ad.tensor(np.zeros(dm, dtype=dtype), requires_grad=True)
    if config.use_residual_norm:
        params[f"{prefix}.ln_g"] = ad.tensor(np.ones(dm, dtype=dtype), requires_grad=True)
        params[f"{prefix}.ln_b"] = ad.tensor(np.zeros(dm, dtype=dtype), requires_grad=True)


def init_params(config: ModelConfig, rng: np.random.Generator,
                dtype=np.float64) -> Dict[str, Tensor]:
    """Create all learnable weights. Each view and each attention block has
    its own independent weight set."""
    config.validate()
    D, dm = config.num_variables, config.d_model
    params: Dict[str, Tensor] = {}

    for view in _active_views(config):
        params[f"emb.{view}"] = ad.tensor(_glorot(rng, D, dm, dtype), requires_grad=True)
        _add_mha_params(params, rng, f"enc.{view}", config, dtype)

    for layer in range(config.n_layers):
        if config.views != "x":
            _add_mha_params(params, rng, f"layer{layer}.miss", config, dtype)
        _add_mha_params(params, rng, f"layer{layer}.obs", config, dtype)
        _add_ffn_params(params, rng, f"layer{layer}.ffn", config, dtype)

    params["cls.W1"] = ad.tensor(_glorot(rng, dm, dm, dtype), requires_grad=True)
    params["cls.b1"] = ad.tensor(np.zeros(dm, dtype=dtype), requires_grad=True)
    params["cls.W2"] = ad.tensor(_glorot(rng, dm, 1, dtype), requires_grad=True)
    params["cls.b2"] = ad.tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    if config.use_decoder:
        _add_mha_params(params, rng, "dec.attn", config, dtype)
        _add_ffn_params(params, rng, "dec.ffn", config, dtype)
        params["dec.Wout"] = ad.tensor(_glorot(rng, dm, D, dtype), requires_grad=True)
        params["dec.bout"] = ad.tensor(np.zeros(D, dtype=dtype), requires_grad=True)
    return params


def _active_views(config: ModelConfig):
    return {"x": ("x",), "xm": ("x", "m"), "xd": ("x", "d"),
            "xmd": ("x", "m", "d")}[config.views]


def param_dtype(params: Dict[str, Tensor]):
    return next(iter(params.values())).data.dtype


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return ad.elementwise_mul(x, ad.tensor(keep))


def _post_sublayer(params, prefix: str, residual: Tensor, out: Tensor,
                   config: ModelConfig) -> Tensor:
    if not config.use_residual_norm:
        return out
    y = ad.layer_norm(ad.add(residual, out), eps=config.ln_eps)
    return ad.add(ad.elementwise_mul(y, params[f"{prefix}.ln_g"]), params[f"{prefix}.ln_b"])


def mha(params, prefix: str, q: Tensor, k: Tensor, v: Tensor, key_mask,
        config: ModelConfig, dropout_rng=None) -> Tensor:
    """Multi-head scaled dot-product attention with key padding mask.

    Heads are independent slices of shared projection matrices; outputs are
    concatenated and projected back to d_model. Residual + layer norm wrap
    the block (query stream carries the residual) unless disabled.
    """
    if q.shape[-1] != config.d_model:
        raise ShapeError(f"mha({prefix}) expects d_model={config.d_model}, got {q.shape}")
    h, dk, dv = config.n_heads, config.head_dk, config.head_dv

    qp = ad.matmul(q, params[f"{prefix}.Wq"])
    kp = ad.matmul(k, params[f"{prefix}.Wk"])
    vp = ad.matmul(v, params[f"{prefix}.Wv"])
    q_heads = ad.split_last_axis(qp, [dk] * h)
    k_heads = ad.split_last_axis(kp, [dk] * h)
    v_heads = ad.split_last_axis(vp, [dv] * h)

    outs = []
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt_dk)
        probs = ad.masked_row_softmax(scores, key_mask)
        probs = _dropout(probs, config.dropout, dropout_rng)
        outs.append(ad.matmul(probs, vh))
    merged = ad.matmul(ad.concat_last_axis(outs), params[f"{prefix}.Wo"])
    return _post_sublayer(params, prefix, q, merged, config)


def ffn(params, prefix: str, x: Tensor, config: ModelConfig, dropout_rng=None) -> Tensor:
    """Position-wise feed-forward net: affine, LeakyReLU, affine."""
    hidden = ad.leaky_relu(ad.add(ad.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]),
                           slope=config.leaky_slope)
    out = ad.add(ad.matmul(hidden, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])
    out = _dropout(out, config.dropout, dropout_rng)
    return _post_sublayer(params, prefix, x, out, config)


# ---------------------------------------------------------------------------
# model stages
# ---------------------------------------------------------------------------

def embed_views(batch: Batch, params, config: ModelConfig, dropout_rng=None) -> ViewStates:
    """Linear input embedding + time embedding per view, then per-view
    self-attention (the view feeds query, key and value)."""
    dtype = param_dtype(params)
    te = ad.tensor(time_embedding(batch.timestamps, config, dtype=dtype))
    key_mask = batch.pad_mask

    def encode(view: str, raw: np.ndarray) -> Tensor:
        emb = ad.add(ad.matmul(ad.tensor(raw.astype(dtype)), params[f"emb.{view}"]), te)
        return mha(params, f"enc.{view}", emb, emb, emb, key_mask, config, dropout_rng)

    views = _active_views(config)
    h_x = encode("x", batch.values)
    h_m = encode("m", batch.mask) if "m" in views else None
    h_d = encode("d", batch.intervals) if "d" in views else None
    return ViewStates(h_x=h_x, h_m=h_m, h_d=h_d)


def miam_layer(states: ViewStates, layer: int, params, config: ModelConfig,
               pad_mask: np.ndarray, dropout_rng=None) -> ViewStates:
    """One integration layer.

    Missingness integration attends over the mask view with the interval view
    as query; the result queries the observation view; a position-wise FFN
    follows. The refined observation state replaces h_x for the next layer,
    while the mask/interval states stay fixed (unless evolve_views is set,
    which lets the mask state advance to the integrated missing pattern).
    """
    if config.views == "xmd":
        h_miss = mha(params, f"layer{layer}.miss", states.h_d, states.h_m, states.h_m,
                     pad_mask, config, dropout_rng)
    elif config.views == "xm":
        h_miss = mha(params, f"layer{layer}.miss", states.h_m, states.h_m, states.h_m,
                     pad_mask, config, dropout_rng)
    elif config.views == "xd":
        h_miss = mha(params, f"layer{layer}.miss", states.h_d, states.h_d, states.h_d,
                     pad_mask, config, dropout_rng)
    else:  # single view: plain self-attention on the evolving observation state
        h_miss = None

    query = h_miss if h_miss is not None else states.h_x
    h_obs = mha(params, f"layer{layer}.obs", query, states.h_x, states.h_x,
                pad_mask, config, dropout_rng)
    h_obs = ffn(params, f"layer{layer}.ffn", h_obs, config, dropout_rng)

    new_m = states.h_m
    new_d = states.h_d
    if config.evolve_views and h_miss is not None and config.views in ("xm", "xmd"):
        new_m = h_miss
    return ViewStates(h_x=h_obs, h_m=new_m, h_d=new_d)


def classify(h: Tensor, pad_mask: np.ndarray, params, config: ModelConfig) -> Tensor:
    """Average-pool over real time points, then a two-layer head with
    LeakyReLU and sigmoid. Output shape (B, 1), strictly inside (0, 1)."""
    dtype = h.data.dtype
    mask3 = ad.tensor(pad_mask[..., None].astype(dtype))
    counts = pad_mask.sum(axis=-1)
    pooled = ad.sum_over_axis(ad.elementwise_mul(h, mask3), axis=1)
    pooled = ad.elementwise_mul(pooled, ad.tensor((1.0 / counts)[:, None].astype(dtype)))
    hidden = ad.leaky_relu(ad.add(ad.matmul(pooled, params["cls.W1"]), params["cls.b1"]),
                           slope=config.leaky_slope)
    logits = ad.add(ad.matmul(hidden, params["cls.W2"]), params["cls.b2"])
    return ad.sigmoid(logits)


def impute(h_final: Tensor, h_x0: Tensor, params, config: ModelConfig,
           pad_mask: np.ndarray, dropout_rng=None) -> Tensor:
    """Attention decoder: the final integrated state queries the embedded
    observation view, FFN, then a learned projection back to variable space."""
    dec = mha(params, "dec.attn", h_final, h_x0, h_x0, pad_mask, config, dropout_rng)
    dec = ffn(params, "dec.ffn", dec, config, dropout_rng)
    return ad.add(ad.matmul(dec, params["dec.Wout"]), params["dec.bout"])


def forward(batch: Batch, params, config: ModelConfig, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> ForwardResult:
    """Full pass: embed views, run the layer stack, classify; in train mode
    also reconstruct. The decoder never runs in eval mode."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    dropout_rng = rng if (mode == "train" and config.dropout > 0.0) else None

    states = embed_views(batch, params, config, dropout_rng)
    h_x0 = states.h_x
    for layer in range(config.n_layers):
        states = miam_layer(states, layer, params, config, batch.pad_mask, dropout_rng)

    prob = classify(states.h_x, batch.pad_mask, params, config)
    xhat = None
    if mode == "train" and config.use_decoder:
        xhat = impute(states.h_x, h_x0, params, config, batch.pad_mask, dropout_rng)
    return ForwardResult(prob=prob, xhat=xhat)
