"""Convolutional autoencoder: 96x96 face crops <-> 128-d latent vectors.

The encoder follows the ResNet-50 ladder for 96x96 input (stem 7x7/2,
3x3/2 max pool, four bottleneck stages, global average pool, 128-d fc). The
decoder mirrors it with nearest-neighbour upsampling and bottleneck blocks and
ends in a logistic squash to [0,1]. A desk profile shrinks widths and repeats
while keeping the spatial ladder.
"""

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numerics import (AdamState, BatchNormStats, Tensor, apply_adam, batch_norm,
                       conv2d, he_normal, linear, max_pool2d, mse, upsample_nearest2d,
                       value_and_grad)
from .storage import ModelCheckpoint
from .utils import DataError, NumericError, rng


@dataclass
class EncoderConfig:
    """Encoder stage layout.

    Attributes:
        image_size: Input height and width
        in_channels: Image channels
        stem_channels: Output channels of the 7x7 stem convolution
        stage_channels: (1x1, 3x3, 1x1) channel triple per bottleneck stage
        stage_repeats: Bottleneck blocks per stage
        stage_strides: Spatial stride of the first block of each stage
        latent_dim: Size of the latent vector
    """
    image_size: int = 96
    in_channels: int = 3
    stem_channels: int = 64
    stage_channels: tuple = ((64, 64, 256), (128, 128, 512), (256, 256, 1024), (512, 512, 2048))
    stage_repeats: tuple = (3, 4, 6, 3)
    stage_strides: tuple = (1, 2, 2, 2)
    latent_dim: int = 128

    def __post_init__(self):
        self.stage_channels = tuple(tuple(int(c) for c in t) for t in self.stage_channels)
        self.stage_repeats = tuple(int(r) for r in self.stage_repeats)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if not (len(self.stage_channels) == len(self.stage_repeats) == len(self.stage_strides)):
            raise ValueError("stage_channels, stage_repeats and stage_strides must align")
        if any(r < 1 for r in self.stage_repeats):
            raise ValueError(f"stage repeats must be >= 1, got {self.stage_repeats}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")

    def scaled(self, width_divisor: int = 1, repeats: Optional[tuple] = None) -> "EncoderConfig":
        """Same ladder with channels divided by ``width_divisor`` and optional repeats."""
        div = lambda c: max(1, c // width_divisor)
        return EncoderConfig(image_size=self.image_size, in_channels=self.in_channels,
                             stem_channels=div(self.stem_channels),
                             stage_channels=tuple(tuple(div(c) for c in t)
                                                  for t in self.stage_channels),
                             stage_repeats=tuple(repeats) if repeats else self.stage_repeats,
                             stage_strides=self.stage_strides, latent_dim=self.latent_dim)

    @classmethod
    def full(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def desk(cls) -> "EncoderConfig":
        """CI-sized profile: channels / 16, one block per stage."""
        return cls().scaled(16, (1, 1, 1, 1))

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


@dataclass
class CaeTrainConfig:
    """CAE training settings.

    Attributes:
        epochs: Training epochs
        lr: Adam learning rate
        batch_size: Images per update
        seed: Root seed for init and shuffling
        beta1: Adam first-moment decay
        beta2: Adam second-moment decay
        eps: Adam stabilizer
    """
    epochs: int = 32
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def encoder_shape_ladder(cfg: EncoderConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """Static (channels, height, width) after each encoder stage, without running it."""
    size = _out_size(cfg.image_size, 7, 2, 3)
    ladder = [("conv1", (cfg.stem_channels, size, size))]
    size = _out_size(size, 3, 2, 1)
    ladder.append(("pool", (cfg.stem_channels, size, size)))
    for i, ((_, _, c_out), stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides)):
        size = _out_size(size, 3, stride, 1)
        ladder.append((f"conv{i + 2}_x", (c_out, size, size)))
    return ladder


@dataclass
class CaeModel:
    """Autoencoder parameters and batch-norm running statistics.

    Attributes:
        config: Encoder layout (decoder is derived from it)
        params: Named trainable tensors
        stats: Running statistics per batch-norm layer
    """
    config: EncoderConfig
    params: dict[str, Tensor]
    stats: dict[str, BatchNormStats] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "CaeModel":
        return CaeModel(config=self.config,
                        params={k: Tensor(p.data.astype(dtype)) for k, p in self.params.items()},
                        stats={k: BatchNormStats(s.mean.astype(dtype), s.var.astype(dtype),
                                                 s.momentum)
                               for k, s in self.stats.items()})


def _block_plan(cfg: EncoderConfig) -> list[tuple[str, int, tuple[int, int, int], int]]:
    """(prefix, in channels, (a, b, c), stride) for every encoder bottleneck."""
    plan = []
    c_in = cfg.stem_channels
    for i, (chans, reps, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_repeats,
                                                  cfg.stage_strides)):
        for j in range(reps):
            plan.append((f"enc.s{i}.b{j}", c_in, chans, stride if j == 0 else 1))
            c_in = chans[2]
    return plan


def _decoder_plan(cfg: EncoderConfig) -> list[tuple[str, int, tuple[int, int, int], bool]]:
    """(prefix, in channels, (a, b, c), upsample first) for every decoder bottleneck."""
    plan = []
    ins = [cfg.stem_channels] + [c[2] for c in cfg.stage_channels[:-1]]
    for i in reversed(range(len(cfg.stage_channels))):
        a, b, c = cfg.stage_channels[i]
        target = ins[i]
        for j in range(cfg.stage_repeats[i]):
            c_in = c if j == 0 else target
            plan.append((f"dec.s{i}.b{j}", c_in, (a, b, target),
                         j == 0 and cfg.stage_strides[i] == 2))
    return plan


def init_cae(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> CaeModel:
    """Fan-in-scaled normal conv/fc weights, zero biases, unit BN scale."""
    gen = rng(seed, "cae", "init")
    params: dict[str, Tensor] = {}
    stats: dict[str, BatchNormStats] = {}

    def conv_w(name, c_out, c_in, k):
        params[name] = Tensor(he_normal(gen, (c_out, c_in, k, k), c_in * k * k, dtype))

    def bn(name, c):
        params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype))
        params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype))
        stats[name] = BatchNormStats(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))

    def bottleneck(prefix, c_in, chans, needs_proj):
        a, b, c = chans
        conv_w(f"{prefix}.conv1.w", a, c_in, 1)
        bn(f"{prefix}.bn1", a)
        conv_w(f"{prefix}.conv2.w", b, a, 3)
        bn(f"{prefix}.bn2", b)
        conv_w(f"{prefix}.conv3.w", c, b, 1)
        bn(f"{prefix}.bn3", c)
        if needs_proj:
            conv_w(f"{prefix}.proj.w", c, c_in, 1)
            bn(f"{prefix}.bnp", c)

    conv_w("enc.stem.w", cfg.stem_channels, cfg.in_channels, 7)
    bn("enc.stem.bn", cfg.stem_channels)
    for prefix, c_in, chans, stride in _block_plan(cfg):
        bottleneck(prefix, c_in, chans, c_in != chans[2] or stride != 1)
    c_last = cfg.stage_channels[-1][2]
    params["enc.fc.w"] = Tensor(he_normal(gen, (c_last, cfg.latent_dim), c_last, dtype))
    params["enc.fc.b"] = Tensor(np.zeros(cfg.latent_dim, dtype=dtype))

    final = encoder_shape_ladder(cfg)[-1][1][1]
    params["dec.fc.w"] = Tensor(he_normal(gen, (cfg.latent_dim, c_last * final * final),
                                          cfg.latent_dim, dtype))
    params["dec.fc.b"] = Tensor(np.zeros(c_last * final * final, dtype=dtype))
    for prefix, c_in, chans, _ in _decoder_plan(cfg):
        bottleneck(prefix, c_in, chans, c_in != chans[2])
    conv_w("dec.head.w", cfg.in_channels, cfg.stem_channels, 7)
    params["dec.head.b"] = Tensor(np.zeros(cfg.in_channels, dtype=dtype))
    return CaeModel(config=cfg, params=params, stats=stats)


def _bn(model: CaeModel, params: dict, name: str, x: Tensor, train: bool) -> Tensor:
    return batch_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], model.stats[name], train)


def _bottleneck(model: CaeModel, params: dict, prefix: str, x: Tensor, stride: int,
                train: bool) -> Tensor:
    out = _bn(model, params, f"{prefix}.bn1", conv2d(x, params[f"{prefix}.conv1.w"]), train).relu()
    out = _bn(model, params, f"{prefix}.bn2",
              conv2d(out, params[f"{prefix}.conv2.w"], stride=stride, padding=1), train).relu()
    out = _bn(model, params, f"{prefix}.bn3", conv2d(out, params[f"{prefix}.conv3.w"]), train)
    if f"{prefix}.proj.w" in params:
        shortcut = _bn(model, params, f"{prefix}.bnp",
                       conv2d(x, params[f"{prefix}.proj.w"], stride=stride), train)
    else:
        shortcut = x
    return (out + shortcut).relu()


def encode_tensor(model: CaeModel, x: Tensor, train: bool = False,
                  params: Optional[dict] = None, trace: Optional[list] = None) -> Tensor:
    """Encoder forward on NCHW input; returns (N, latent_dim)."""
    p = params if params is not None else model.params
    cfg = model.config
    out = conv2d(x, p["enc.stem.w"], stride=2, padding=3)
    out = _bn(model, p, "enc.stem.bn", out, train).relu()
    if trace is not None:
        trace.append(("conv1", out.shape[1:]))
    out = max_pool2d(out, kernel=3, stride=2, padding=1)
    if trace is not None:
        trace.append(("pool", out.shape[1:]))
    for prefix, _, _, stride in _block_plan(cfg):
        out = _bottleneck(model, p, prefix, out, stride, train)
        s = int(prefix.split(".")[1][1:])
        if trace is not None and prefix.endswith(f".b{cfg.stage_repeats[s] - 1}"):
            trace.append((f"conv{s + 2}_x", out.shape[1:]))
    pooled = out.mean(axis=(2, 3))
    return linear(pooled, p["enc.fc.w"], p["enc.fc.b"])


def decode_tensor(model: CaeModel, z: Tensor, train: bool = False,
                  params: Optional[dict] = None) -> Tensor:
    """Decoder forward; returns (N, C, H, W) in [0,1]."""
    p = params if params is not None else model.params
    cfg = model.config
    _, (c_last, h, w) = encoder_shape_ladder(cfg)[-1]
    out = linear(z, p["dec.fc.w"], p["dec.fc.b"]).reshape(-1, c_last, h, w).relu()
    for prefix, _, _, upsample in _decoder_plan(cfg):
        if upsample:
            out = upsample_nearest2d(out, 2)
        out = _bottleneck(model, p, prefix, out, 1, train)
    out = upsample_nearest2d(out, 2)   # undo max pool
    out = upsample_nearest2d(out, 2)   # undo stem stride
    out = conv2d(out, p["dec.head.w"], p["dec.head.b"], padding=3)
    return out.sigmoid()


def _to_nchw(images: np.ndarray, cfg: EncoderConfig, dtype) -> np.ndarray:
    images = np.asarray(images)
    expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(f"images must have shape (n, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {images.shape}")
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=dtype)


def encode_batch(model: CaeModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Latents (n, latent_dim) for (n, 96, 96, 3) images, batched in order."""
    x = _to_nchw(images, model.config, model.dtype)
    chunks = [encode_tensor(model, Tensor(x[i:i + batch_size]), train=False).data
              for i in range(0, len(x), batch_size)]
    if not chunks:
        return np.zeros((0, model.config.latent_dim), dtype=model.dtype)
    return np.concatenate(chunks)


def encode(model: CaeModel, image: np.ndarray) -> np.ndarray:
    """Latent vector of one 96x96x3 image in [0,1].

    Raises:
        ValueError: If the image shape is not exactly 96x96x3
    """
    image = np.asarray(image)
    expected = (model.config.image_size, model.config.image_size, model.config.in_channels)
    if image.shape != expected:
        raise ValueError(f"image must have shape {expected}, got {image.shape}")
    return encode_batch(model, image[None])[0]


def decode(model: CaeModel, latent: np.ndarray) -> np.ndarray:
    """Reconstructed 96x96x3 image in [0,1] for one latent vector.

    Raises:
        ValueError: If the latent is not a ``latent_dim`` vector
    """
    latent = np.asarray(latent)
    if latent.shape != (model.config.latent_dim,):
        raise ValueError(f"latent must have shape ({model.config.latent_dim},), "
                         f"got {latent.shape}")
    out = decode_tensor(model, Tensor(latent[None].astype(model.dtype)), train=False)
    return out.data[0].transpose(1, 2, 0)


def reconstruct(model: CaeModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """decode(encode(x)) for a stack of images, inference mode."""
    x = _to_nchw(images, model.config, model.dtype)
    outs = []
    for i in range(0, len(x), batch_size):
        z = encode_tensor(model, Tensor(x[i:i + batch_size]), train=False)
        outs.append(decode_tensor(model, z, train=False).data.transpose(0, 2, 3, 1))
    return np.concatenate(outs) if outs else np.zeros_like(np.asarray(images))


def reconstruction_mse(model: CaeModel, images: np.ndarray) -> float:
    """Mean per-image reconstruction MSE in inference mode, summed in image order."""
    recon = reconstruct(model, images)
    total = 0.0
    for original, rebuilt in zip(np.asarray(images), recon):
        total += float(np.mean((rebuilt.astype(np.float64) - original) ** 2))
    return total / max(1, len(recon))


@dataclass
class CaeTrainResult:
    """Trained model with its per-epoch mean MSE curve."""
    model: CaeModel
    train_config: CaeTrainConfig
    mse_curve: list[float]

    def checkpoint(self) -> ModelCheckpoint:
        return cae_checkpoint(self.model, self.train_config, self.mse_curve)


def train_cae(images: np.ndarray, cfg: CaeTrainConfig,
              encoder_config: Optional[EncoderConfig] = None,
              verbose: bool = True) -> CaeTrainResult:
    """Train the autoencoder with MSE and Adam.

    Args:
        images: (n, 96, 96, 3) float images in [0,1]
        cfg: Training settings
        encoder_config: Layout (defaults to the desk profile)
        verbose: Print per-epoch progress

    Returns:
        CaeTrainResult with the model and per-epoch mean training MSE

    Raises:
        DataError: If the dataset is empty
        NumericError: If the loss becomes non-finite
    """
    images = np.asarray(images)
    if images.size == 0 or len(images) == 0:
        raise DataError("CAE training needs at least one image")
    encoder_config = encoder_config or EncoderConfig.desk()
    model = init_cae(encoder_config, cfg.seed)
    x_all = _to_nchw(images, encoder_config, np.float32)
    shuffle_rng = rng(cfg.seed, "cae", "shuffle")
    state = AdamState.create({k: p.data for k, p in model.params.items()}, lr=cfg.lr,
                             beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    curve = []
    if verbose:
        print(f"🧠 Training CAE on {len(x_all)} faces for {cfg.epochs} epochs "
              f"(batch {cfg.batch_size}, lr {cfg.lr})")
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(x_all))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = Tensor(x_all[order[start:start + cfg.batch_size]])

            def loss_fn(params, batch=batch):
                z = encode_tensor(model, batch, train=True, params=params)
                return mse(decode_tensor(model, z, train=True, params=params), batch)

            loss, grads = value_and_grad(loss_fn, model.params)
            if not np.isfinite(loss):
                raise NumericError(f"CAE loss became non-finite at epoch {epoch + 1}")
            state = apply_adam(model.params, grads, state)
            total += loss * len(batch.data)
        curve.append(total / len(x_all))
        if verbose:
            progress = int(100 * (epoch + 1) / cfg.epochs)
            print(f"   [{progress}%] epoch {epoch + 1}/{cfg.epochs} MSE={curve[-1]:.5f}")
    for p in model.params.values():
        p.requires_grad = False
    return CaeTrainResult(model=model, train_config=cfg, mse_curve=curve)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u| |v|), clipped to [-1, 1].

    Raises:
        ValueError: If either vector has zero norm
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def similarity_profile(latents: np.ndarray, reference_index: int = 0) -> np.ndarray:
    """Cosine similarity of every latent to a reference latent of the same participant."""
    latents = np.asarray(latents)
    ref = latents[reference_index]
    return np.array([cosine_similarity(ref, z) for z in latents])


def cae_checkpoint(model: CaeModel, train_cfg: CaeTrainConfig,
                   mse_curve: Optional[list[float]] = None) -> ModelCheckpoint:
    """Pack parameters and BN running statistics into a checkpoint."""
    params = {k: p.data for k, p in model.params.items()}
    for name, s in model.stats.items():
        params[f"bn/{name}/mean"] = s.mean
        params[f"bn/{name}/var"] = s.var
    return ModelCheckpoint(kind="cae",
                           config={"encoder": asdict(model.config), "train": asdict(train_cfg),
                                   "mse_curve": [float(v) for v in (mse_curve or [])]},
                           seed=train_cfg.seed, params=params)


def load_cae(ckpt: ModelCheckpoint) -> CaeModel:
    """Rebuild a CaeModel from a checkpoint.

    Raises:
        DataError: If the checkpoint is not a CAE checkpoint or misses parameters
    """
    if ckpt.kind != "cae":
        raise DataError(f"expected a CAE checkpoint, got '{ckpt.kind}'")
    cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
    model = init_cae(cfg, seed=0)
    for name in model.params:
        if name not in ckpt.params:
            raise DataError(f"checkpoint is missing parameter '{name}'")
        model.params[name] = Tensor(np.array(ckpt.params[name], dtype=np.float32))
    for name, s in model.stats.items():
        s.mean = np.array(ckpt.params[f"bn/{name}/mean"], dtype=np.float32)
        s.var = np.array(ckpt.params[f"bn/{name}/var"], dtype=np.float32)
    return model
