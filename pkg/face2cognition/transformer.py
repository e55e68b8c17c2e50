"""Sequence classifier over latent-vector windows.

Each window gets a learned classification token at slot 0. The input is
``Z = tokens + P_p[p] + P_M[M] + P_S[S]`` where P_M (sequence index) and P_S
(segment index) can be switched off for ablations. Post-norm encoder layers
feed the classification token's output to an MLP head whose two logits are
normalized to class probabilities (index 1 = MCI).
"""

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numerics import (AdamState, Tensor, apply_adam, as_tensor, clip, concat, dropout,
                       embedding_normal, he_normal, layer_norm, linear, softmax, value_and_grad)
from .storage import ModelCheckpoint
from .temporal import SequenceBatch
from .utils import DataError, NumericError, rng

POSITION_MODES = ("none", "seq", "seg", "both")
LOSSES = ("wbce", "bce")
PROB_CLAMP = 1e-7


@dataclass
class TransformerConfig:
    """Model layout.

    Attributes:
        num_layers: Encoder layers
        hidden_dim: Token width (equals the latent size)
        num_heads: Attention heads
        mlp_head_dims: Widths of the classification MLP, last must be 2
        dropout: Dropout rate used in training
        seq_len: Sequence size l (slot table holds l + 1 rows)
        max_sequences: Rows of the sequence-index table P_M
        max_segments: Rows of the segment-index table P_S
        ffn_mult: Feed-forward expansion factor
        positions: Which of P_M / P_S are added: none, seq, seg or both
    """
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 2
    mlp_head_dims: tuple = (64, 32, 2)
    dropout: float = 0.2
    seq_len: int = 15
    max_sequences: int = 512
    max_segments: int = 128
    ffn_mult: int = 4
    positions: str = "both"

    def __post_init__(self):
        self.mlp_head_dims = tuple(int(d) for d in self.mlp_head_dims)
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by "
                             f"num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.positions not in POSITION_MODES:
            raise ValueError(f"positions must be one of {POSITION_MODES}, got '{self.positions}'")
        if not self.mlp_head_dims or self.mlp_head_dims[-1] != 2:
            raise ValueError(f"mlp_head_dims must end in 2, got {self.mlp_head_dims}")
        if self.num_layers < 1 or self.seq_len < 1:
            raise ValueError("num_layers and seq_len must be >= 1")

    @property
    def max_positions(self) -> int:
        return self.seq_len + 1

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @classmethod
    def from_dict(cls, data: dict) -> "TransformerConfig":
        return cls(**data)


@dataclass
class TransformerTrainConfig:
    """Training settings.

    Attributes:
        epochs: Training epochs
        lr: Adam learning rate
        batch_size: Sequences per update
        loss: "wbce" (positive class weighted by #NC/#MCI) or "bce"
        seed: Root seed for init, shuffling and dropout
        frozen: Parameter names excluded from updates
        beta1: Adam first-moment decay
        beta2: Adam second-moment decay
        eps: Adam stabilizer
    """
    epochs: int = 40
    lr: float = 1e-4
    batch_size: int = 32
    loss: str = "wbce"
    seed: int = 0
    frozen: tuple = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.frozen = tuple(self.frozen)
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got '{self.loss}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TransformerTrainConfig":
        return cls(**data)


def init_transformer(cfg: TransformerConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled weights, zero biases, N(0, 0.02) embedding tables and class token."""
    gen = rng(seed, "transformer", "init")
    d, f = cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_mult
    params = {
        "cls_token": Tensor(embedding_normal(gen, (d,), dtype=dtype)),
        "pos_slot": Tensor(embedding_normal(gen, (cfg.max_positions, d), dtype=dtype)),
        "pos_sequence": Tensor(embedding_normal(gen, (cfg.max_sequences, d), dtype=dtype)),
        "pos_segment": Tensor(embedding_normal(gen, (cfg.max_segments, d), dtype=dtype)),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}"
        for name in ("w_q", "w_k", "w_v", "w_o"):
            params[f"{p}.attn.{name}"] = Tensor(he_normal(gen, (d, d), d, dtype))
        params[f"{p}.ln1.gamma"] = Tensor(np.ones(d, dtype=dtype))
        params[f"{p}.ln1.beta"] = Tensor(np.zeros(d, dtype=dtype))
        params[f"{p}.ffn.w1"] = Tensor(he_normal(gen, (d, f), d, dtype))
        params[f"{p}.ffn.b1"] = Tensor(np.zeros(f, dtype=dtype))
        params[f"{p}.ffn.w2"] = Tensor(he_normal(gen, (f, d), f, dtype))
        params[f"{p}.ffn.b2"] = Tensor(np.zeros(d, dtype=dtype))
        params[f"{p}.ln2.gamma"] = Tensor(np.ones(d, dtype=dtype))
        params[f"{p}.ln2.beta"] = Tensor(np.zeros(d, dtype=dtype))
    fan_in = d
    for j, width in enumerate(cfg.mlp_head_dims):
        params[f"head.{j}.w"] = Tensor(he_normal(gen, (fan_in, width), fan_in, dtype))
        params[f"head.{j}.b"] = Tensor(np.zeros(width, dtype=dtype))
        fan_in = width
    return params


def attention(q, k, v, weights_out: Optional[list] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Raises:
        ValueError: If token counts or feature widths do not line up
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key tokens {k.shape[-2]} != value tokens {v.shape[-2]}")
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = (q @ k.transpose(*axes)) / np.sqrt(q.shape[-1])
    weights = softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(weights.data)
    return weights @ v


def multi_head(q, k, v, w_q, w_k, w_v, w_o, num_heads: int,
               weights_out: Optional[list] = None) -> Tensor:
    """Concat(head_1..head_h) W_o with head_i = attention(Q W_i^Q, K W_i^K, V W_i^V).

    Inputs are (tokens, dim) or (batch, tokens, dim); the per-head projection
    W_i is the i-th column block of the full projection matrix.

    Raises:
        ValueError: If ``num_heads`` does not divide the model width
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q.reshape(1, *q.shape), k.reshape(1, *k.shape), v.reshape(1, *v.shape)
    d = as_tensor(w_q).shape[-1]
    if num_heads < 1 or d % num_heads:
        raise ValueError(f"num_heads {num_heads} does not divide width {d}")
    dk = d // num_heads

    def split(x):
        b, t, _ = x.shape
        return x.reshape(b, t, num_heads, dk).transpose(0, 2, 1, 3)

    heads = attention(split(q @ w_q), split(k @ w_k), split(v @ w_v), weights_out)
    b, _, t, _ = heads.shape
    out = heads.transpose(0, 2, 1, 3).reshape(b, t, d) @ w_o
    return out.reshape(t, d) if squeeze else out


def clip_triples(triples: np.ndarray, cfg: TransformerConfig) -> np.ndarray:
    """Clip (p, M, S) indices to the last row of each embedding table."""
    caps = np.array([cfg.max_positions, cfg.max_sequences, cfg.max_segments]) - 1
    return np.minimum(np.asarray(triples, dtype=np.int64), caps)


def embed_inputs(latents, triples: np.ndarray, params: dict[str, Tensor],
                 cfg: TransformerConfig) -> Tensor:
    """Build Z = tokens + P_p + P_M + P_S for a batch of windows.

    Args:
        latents: (batch, l, dim) latent vectors
        triples: (batch, l + 1, 3) per-token (p, M, S); row 0 is the class token
        params: Model parameters
        cfg: Model layout (``positions`` selects P_M / P_S)

    Returns:
        (batch, l + 1, dim) tensor
    """
    latents = as_tensor(latents)
    if latents.ndim != 3 or latents.shape[-1] != cfg.hidden_dim:
        raise ValueError(f"latents must be (batch, l, {cfg.hidden_dim}), got {latents.shape}")
    idx = clip_triples(triples, cfg)
    b, t = latents.shape[0], latents.shape[1] + 1
    if idx.shape != (b, t, 3):
        raise ValueError(f"triples must have shape {(b, t, 3)}, got {idx.shape}")
    cls = params["cls_token"].reshape(1, 1, cfg.hidden_dim) + np.zeros(
        (b, 1, cfg.hidden_dim), dtype=latents.dtype)
    z = concat([cls, latents], axis=1) + params["pos_slot"][idx[..., 0]]
    if cfg.positions in ("seq", "both"):
        z = z + params["pos_sequence"][idx[..., 1]]
    if cfg.positions in ("seg", "both"):
        z = z + params["pos_segment"][idx[..., 2]]
    return z


def _encoder_layer(x: Tensor, params: dict, i: int, cfg: TransformerConfig, train: bool,
                   gen: Optional[np.random.Generator], weights_out: Optional[list]) -> Tensor:
    p = f"layers.{i}"
    a = multi_head(x, x, x, params[f"{p}.attn.w_q"], params[f"{p}.attn.w_k"],
                   params[f"{p}.attn.w_v"], params[f"{p}.attn.w_o"], cfg.num_heads, weights_out)
    x = layer_norm(x + dropout(a, cfg.dropout, gen, train),
                   params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
    h = linear(x, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]).gelu()
    h = linear(h, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"])
    return layer_norm(x + dropout(h, cfg.dropout, gen, train),
                      params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])


def forward(z: Tensor, params: dict[str, Tensor], cfg: TransformerConfig, train_mode: bool = False,
            gen: Optional[np.random.Generator] = None,
            weights_out: Optional[list] = None) -> Tensor:
    """Class probabilities (batch, 2) from embedded windows.

    Dropout is applied only when ``train_mode`` is set, drawing from ``gen``.
    """
    if z.shape[0] == 0:
        raise ValueError("forward needs a non-empty batch")
    x = dropout(z, cfg.dropout, gen, train_mode)
    for i in range(cfg.num_layers):
        x = _encoder_layer(x, params, i, cfg, train_mode, gen, weights_out)
    h = x[:, 0, :]
    last = len(cfg.mlp_head_dims) - 1
    for j in range(last + 1):
        h = linear(h, params[f"head.{j}.w"], params[f"head.{j}.b"])
        if j < last:
            h = h.relu()
    return softmax(h, axis=-1)


def weighted_bce(p, y, beta: float) -> Tensor:
    """Mean of -(beta * y * log p + (1 - y) * log(1 - p)), p clamped to [1e-7, 1 - 1e-7]."""
    p = clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=p.dtype)
    return -(beta * y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def bce(p, y) -> Tensor:
    """Mean binary cross-entropy, p clamped to [1e-7, 1 - 1e-7]."""
    p = clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=p.dtype)
    return -(y * p.log() + (1.0 - y) * (1.0 - p).log()).mean()


def class_weight_beta(labels: np.ndarray) -> float:
    """#NC / #MCI over training sequences; 1.0 when either class is missing."""
    labels = np.asarray(labels)
    n_mci = int((labels == 1).sum())
    n_nc = int((labels == 0).sum())
    if n_mci == 0 or n_nc == 0:
        return 1.0
    return n_nc / n_mci


def sequence_loss(params: dict[str, Tensor], cfg: TransformerConfig, latents: np.ndarray,
                  triples: np.ndarray, labels: np.ndarray, loss: str, beta: float,
                  train_mode: bool = False, gen: Optional[np.random.Generator] = None) -> Tensor:
    """Scalar training loss of a mini-batch."""
    probs = forward(embed_inputs(latents, triples, params, cfg), params, cfg, train_mode, gen)
    p_mci = probs[:, 1]
    return weighted_bce(p_mci, labels, beta) if loss == "wbce" else bce(p_mci, labels)


@dataclass
class TransformerModel:
    """Trained classifier.

    Attributes:
        config: Model layout
        params: Named parameter tensors
    """
    config: TransformerConfig
    params: dict[str, Tensor]

    def predict_proba(self, batch: SequenceBatch, batch_size: int = 256) -> np.ndarray:
        """(n, 2) class probabilities in inference mode, in batch order."""
        out = []
        for start in range(0, len(batch), batch_size):
            lat = batch.latents[start:start + batch_size].astype(self.dtype)
            z = embed_inputs(lat, batch.triples[start:start + batch_size], self.params,
                             self.config)
            out.append(forward(z, self.params, self.config, train_mode=False).data)
        return np.concatenate(out) if out else np.zeros((0, 2), dtype=self.dtype)

    @property
    def dtype(self):
        return self.params["cls_token"].dtype


@dataclass
class TransformerTrainResult:
    """Trained model, per-epoch mean loss and the positive-class weight used."""
    model: TransformerModel
    train_config: TransformerTrainConfig
    loss_curve: list[float] = field(default_factory=list)
    beta: float = 1.0

    def checkpoint(self) -> ModelCheckpoint:
        return transformer_checkpoint(self.model, self.train_config, self.beta, self.loss_curve)


def train_transformer(batch: SequenceBatch, cfg: TransformerConfig,
                      train_cfg: TransformerTrainConfig, verbose: bool = True,
                      params: Optional[dict[str, Tensor]] = None) -> TransformerTrainResult:
    """Train on sequence-level labels with (weighted) BCE and Adam.

    Args:
        batch: Training sequences
        cfg: Model layout
        train_cfg: Training settings; beta is #NC/#MCI of ``batch`` for "wbce"
        verbose: Print per-epoch progress
        params: Optional initial parameters (default: fresh init from the seed)

    Raises:
        DataError: If the batch is empty
        NumericError: If the loss becomes non-finite
    """
    if len(batch) == 0:
        raise DataError("transformer training needs at least one sequence")
    params = params if params is not None else init_transformer(cfg, train_cfg.seed)
    beta = class_weight_beta(batch.labels) if train_cfg.loss == "wbce" else 1.0
    shuffle_rng = rng(train_cfg.seed, "transformer", "shuffle")
    drop_rng = rng(train_cfg.seed, "transformer", "dropout")
    trainable = {k: p.data for k, p in params.items() if k not in train_cfg.frozen}
    state = AdamState.create(trainable, lr=train_cfg.lr, beta1=train_cfg.beta1,
                             beta2=train_cfg.beta2, eps=train_cfg.eps)
    if verbose:
        print(f"🤖 Training transformer on {len(batch)} sequences for {train_cfg.epochs} epochs "
              f"(loss {train_cfg.loss}, beta {beta:.3f}, positions {cfg.positions})")
    curve = []
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(batch))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]

            def loss_fn(ps, idx=idx):
                return sequence_loss(ps, cfg, batch.latents[idx], batch.triples[idx],
                                     batch.labels[idx], train_cfg.loss, beta, True, drop_rng)

            loss, grads = value_and_grad(loss_fn, params)
            if not np.isfinite(loss):
                raise NumericError(f"transformer loss became non-finite at epoch {epoch + 1}")
            state = apply_adam(params, grads, state, frozen=train_cfg.frozen)
            total += loss * len(idx)
        curve.append(total / len(batch))
        if verbose and (epoch + 1) % max(1, train_cfg.epochs // 4) == 0:
            progress = int(100 * (epoch + 1) / train_cfg.epochs)
            print(f"   [{progress}%] epoch {epoch + 1}/{train_cfg.epochs} loss={curve[-1]:.4f}")
    for p in params.values():
        p.requires_grad = False
    return TransformerTrainResult(model=TransformerModel(cfg, params), train_config=train_cfg,
                                  loss_curve=curve, beta=beta)


def zero_position_tables(params: dict[str, Tensor], names=("pos_sequence", "pos_segment")) -> None:
    """Zero the sequence/segment tables in place (used with ``frozen`` for ablation checks)."""
    for name in names:
        params[name].data = np.zeros_like(params[name].data)


def transformer_checkpoint(model: TransformerModel, train_cfg: TransformerTrainConfig,
                           beta: float = 1.0,
                           loss_curve: Optional[list[float]] = None) -> ModelCheckpoint:
    return ModelCheckpoint(kind="transformer",
                           config={"model": asdict(model.config), "train": asdict(train_cfg),
                                   "beta": float(beta),
                                   "loss_curve": [float(v) for v in (loss_curve or [])]},
                           seed=train_cfg.seed,
                           params={k: p.data for k, p in model.params.items()})


def load_transformer(ckpt: ModelCheckpoint) -> TransformerModel:
    """Rebuild a TransformerModel from a checkpoint.

    Raises:
        DataError: If the checkpoint is not a transformer checkpoint or misses parameters
    """
    if ckpt.kind != "transformer":
        raise DataError(f"expected a transformer checkpoint, got '{ckpt.kind}'")
    cfg = TransformerConfig.from_dict(ckpt.config["model"])
    params = init_transformer(cfg)
    for name in params:
        if name not in ckpt.params:
            raise DataError(f"checkpoint is missing parameter '{name}'")
        params[name] = Tensor(np.array(ckpt.params[name], dtype=np.float32))
    return TransformerModel(cfg, params)
