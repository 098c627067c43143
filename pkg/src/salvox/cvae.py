"""Contrastive VAE: salient + background encoders, one shared decoder.

Positive volumes are reconstructed from both latent channels; control
volumes from the background channel with the salient slot zeroed. Training
stops when a 10-iteration running mean of reconstruction MSE crosses the
configured threshold.
"""

import json
import struct
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamHyper, Tensor
from .data import Volume, POSITIVE, CONTROL

SALIENT = "salient"
BACKGROUND = "background"
MEAN = "mean"
SAMPLED = "sampled"

LOGVAR_LIMIT = 10.0
STOP_WINDOW = 10
CHECKPOINT_VERSION = 1
_MAGIC = b"SVCK"


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)
        self.iteration = iteration


@dataclass
class CvaeConfig:
    input_side: int = 64
    latent_dim: int = 16
    conv_filters: tuple = (64, 128)
    fc_hidden: int = 128
    deconv_filters: tuple = (32, 16, 1)
    kl_weight: float = 1.0
    recon_stop_threshold: float = 5e-4
    max_iterations: int = 20000
    batch_size: int = 8
    adam: AdamHyper = field(default_factory=AdamHyper)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamHyper(**self.adam)
        self.conv_filters = tuple(self.conv_filters)
        self.deconv_filters = tuple(self.deconv_filters)
        if self.input_side % 8 != 0 or self.input_side < 8:
            raise ValueError(
                f"input_side must be a positive multiple of 8, got {self.input_side}"
            )
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.deconv_filters[-1] != 1:
            raise ValueError("last deconv stage must emit a single channel")

    @property
    def encoder_flat(self) -> int:
        return (self.input_side // 4) ** 3 * self.conv_filters[1]

    @property
    def decoder_channels(self) -> int:
        # flatten_size voxels arranged on the side/8 cube
        return self.flatten_size // (self.input_side // 8) ** 3

    @property
    def flatten_size(self) -> int:
        return (self.input_side // 8) ** 3 * 1024


@dataclass
class LatentGaussian:
    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu)
        self.logvar = np.asarray(self.logvar)
        if not (np.isfinite(self.mu).all() and np.isfinite(self.logvar).all()):
            raise ValueError("non-finite latent distribution")

    def sample(self, noise: np.ndarray) -> np.ndarray:
        return self.mu + np.exp(0.5 * self.logvar) * noise


@dataclass
class FeatureMatrix:
    subject_ids: list
    labels: list
    values: np.ndarray
    source: str
    mode: str
    sample_index: int = None
    warnings: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.subject_ids)
        if len(self.labels) != n or self.values.shape[0] != n:
            raise ValueError(
                f"{n} ids vs {len(self.labels)} labels vs {self.values.shape[0]} rows"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite feature rows")


_ENCODER_LAYERS = ("conv1", "conv2", "fc", "mu", "logvar")
_DECODER_LAYERS = ("fc1", "fc2", "deconv1", "deconv2", "deconv3")


class CvaeParams:
    """Three parameter dicts (layer name -> {w, b} Tensors) plus metadata."""

    def __init__(self, config: CvaeConfig, salient_encoder, background_encoder,
                 decoder, training_meta=None):
        self.config = config
        self.salient_encoder = salient_encoder
        self.background_encoder = background_encoder
        self.decoder = decoder
        self.training_meta = training_meta
        for a, b in zip(salient_encoder.values(), background_encoder.values()):
            if a["w"].shape != b["w"].shape or a["b"].shape != b["b"].shape:
                raise ValueError("encoder architectures differ")

    def param_list(self):
        out = []
        for net in (self.salient_encoder, self.background_encoder, self.decoder):
            for layer in net.values():
                out.append(layer["w"])
                out.append(layer["b"])
        return out

    def networks(self):
        return {
            "salient_encoder": self.salient_encoder,
            "background_encoder": self.background_encoder,
            "decoder": self.decoder,
        }


def _encoder_shapes(cfg: CvaeConfig):
    f1, f2 = cfg.conv_filters
    return {
        "conv1": ((f1, 1, 3, 3, 3), (f1,)),
        "conv2": ((f2, f1, 3, 3, 3), (f2,)),
        "fc": ((cfg.fc_hidden, cfg.encoder_flat), (cfg.fc_hidden,)),
        "mu": ((cfg.latent_dim, cfg.fc_hidden), (cfg.latent_dim,)),
        "logvar": ((cfg.latent_dim, cfg.fc_hidden), (cfg.latent_dim,)),
    }


def _decoder_shapes(cfg: CvaeConfig):
    d1, d2, d3 = cfg.deconv_filters
    ch = cfg.decoder_channels
    return {
        "fc1": ((cfg.fc_hidden, 2 * cfg.latent_dim), (cfg.fc_hidden,)),
        "fc2": ((cfg.flatten_size, cfg.fc_hidden), (cfg.flatten_size,)),
        "deconv1": ((ch, d1, 3, 3, 3), (d1,)),
        "deconv2": ((d1, d2, 3, 3, 3), (d2,)),
        "deconv3": ((d2, d3, 3, 3, 3), (d3,)),
    }


def layer_shape_audit(cfg: CvaeConfig):
    """Activation shapes along both paths, for architecture checks."""
    s = cfg.input_side
    f1, f2 = cfg.conv_filters
    d1, d2, d3 = cfg.deconv_filters
    return {
        "encoder": [
            (1, s, s, s),
            (f1, s // 2, s // 2, s // 2),
            (f2, s // 4, s // 4, s // 4),
            (cfg.fc_hidden,),
            (cfg.latent_dim, cfg.latent_dim),
        ],
        "decoder": [
            (2 * cfg.latent_dim,),
            (cfg.fc_hidden,),
            (cfg.flatten_size,),
            (cfg.decoder_channels, s // 8, s // 8, s // 8),
            (d1, s // 4, s // 4, s // 4),
            (d2, s // 2, s // 2, s // 2),
            (d3, s, s, s),
        ],
    }


def init_params(config: CvaeConfig) -> CvaeParams:
    """Seeded uniform fan-in/fan-out init, zero biases, single precision."""
    rng = np.random.default_rng(config.seed)

    def make(shapes):
        net = {}
        for name, (w_shape, b_shape) in shapes.items():
            fan_in = int(np.prod(w_shape[1:]))
            fan_out = int(np.prod(w_shape[0:1])) * (
                int(np.prod(w_shape[2:])) if len(w_shape) > 2 else 1
            )
            net[name] = {
                "w": Tensor(
                    ad.glorot_uniform(w_shape, fan_in, fan_out, rng),
                    requires_grad=True,
                ),
                "b": Tensor(np.zeros(b_shape, dtype=np.float32), requires_grad=True),
            }
        return net

    enc_shapes = _encoder_shapes(config)
    return CvaeParams(
        config,
        make(enc_shapes),
        make(enc_shapes),
        make(_decoder_shapes(config)),
    )


# ---------------------------------------------------------------------------
# forward graphs
# ---------------------------------------------------------------------------

def _encode_graph(params: CvaeParams, which: str, x: Tensor):
    """x is [1, side^3 cube] or [B, 1, side^3 cube]; returns (mu, logvar) nodes."""
    net = params.salient_encoder if which == SALIENT else params.background_encoder
    cfg = params.config
    h = ad.relu(ad.conv3d(x, net["conv1"]["w"], net["conv1"]["b"], stride=2))
    h = ad.relu(ad.conv3d(h, net["conv2"]["w"], net["conv2"]["b"], stride=2))
    flat_shape = (
        (cfg.encoder_flat,) if x.data.ndim == 4 else (x.data.shape[0], cfg.encoder_flat)
    )
    h = ad.reshape(h, flat_shape)
    h = ad.relu(ad.dense(h, net["fc"]["w"], net["fc"]["b"]))
    mu = ad.dense(h, net["mu"]["w"], net["mu"]["b"])
    logvar = ad.clip(
        ad.dense(h, net["logvar"]["w"], net["logvar"]["b"]),
        -LOGVAR_LIMIT,
        LOGVAR_LIMIT,
    )
    return mu, logvar


def _decode_graph(params: CvaeParams, latent: Tensor):
    """latent is [2*latent_dim] or [B, 2*latent_dim]; returns volume node."""
    cfg = params.config
    net = params.decoder
    s8 = cfg.input_side // 8
    batched = latent.data.ndim == 2
    h = ad.relu(ad.dense(latent, net["fc1"]["w"], net["fc1"]["b"]))
    h = ad.relu(ad.dense(h, net["fc2"]["w"], net["fc2"]["b"]))
    ch = cfg.decoder_channels
    shape = (h.data.shape[0], ch, s8, s8, s8) if batched else (ch, s8, s8, s8)
    h = ad.reshape(h, shape)
    h = ad.relu(
        ad.deconv3d(h, net["deconv1"]["w"], net["deconv1"]["b"], 2, 2 * s8)
    )
    h = ad.relu(
        ad.deconv3d(h, net["deconv2"]["w"], net["deconv2"]["b"], 2, 4 * s8)
    )
    h = ad.deconv3d(h, net["deconv3"]["w"], net["deconv3"]["b"], 2, 8 * s8)
    return ad.sigmoid(h)


def _check_volume(params: CvaeParams, volume) -> np.ndarray:
    vox = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    side = params.config.input_side
    if vox.shape != (side,) * 3:
        raise ValueError(f"volume shape {vox.shape}, expected side {side}")
    if vox.min() < 0.0 or vox.max() > 1.0:
        raise ValueError("volume values must lie in [0, 1]; run preprocess first")
    if vox.dtype != np.float64:  # float64 passes through for wide-precision checks
        vox = vox.astype(np.float32, copy=False)
    return vox


def encode(params: CvaeParams, which: str, volume) -> LatentGaussian:
    if which not in (SALIENT, BACKGROUND):
        raise ValueError(f"which must be salient or background, got {which!r}")
    vox = _check_volume(params, volume)
    mu, logvar = _encode_graph(params, which, Tensor(vox[None]))
    if not (np.isfinite(mu.data).all() and np.isfinite(logvar.data).all()):
        raise TrainingDivergenceError("non-finite encoder activations")
    return LatentGaussian(mu=mu.data, logvar=logvar.data)


def decode(params: CvaeParams, salient_vec, background_vec) -> Volume:
    cfg = params.config
    s = np.asarray(salient_vec, dtype=np.float32)
    z = np.asarray(background_vec, dtype=np.float32)
    if s.shape != (cfg.latent_dim,) or z.shape != (cfg.latent_dim,):
        raise ValueError(
            f"latent lengths {s.shape}/{z.shape}, expected {cfg.latent_dim}"
        )
    latent = np.concatenate([z, s])  # background first, salient second
    out = _decode_graph(params, Tensor(latent))
    return Volume(side=cfg.input_side, voxels=out.data[0])


def forward_background_only(params: CvaeParams, volume, noise_z):
    vox = _check_volume(params, volume)
    z_dist = encode(params, BACKGROUND, vox)
    z = z_dist.sample(np.asarray(noise_z, dtype=np.float32).reshape(-1))
    recon = decode(params, np.zeros(params.config.latent_dim, dtype=np.float32), z)
    return recon, z_dist


def forward_both(params: CvaeParams, volume, noise_s, noise_z):
    vox = _check_volume(params, volume)
    s_dist = encode(params, SALIENT, vox)
    z_dist = encode(params, BACKGROUND, vox)
    s = s_dist.sample(np.asarray(noise_s, dtype=np.float32).reshape(-1))
    z = z_dist.sample(np.asarray(noise_z, dtype=np.float32).reshape(-1))
    recon = decode(params, s, z)
    return recon, s_dist, z_dist


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def cvae_batch_loss(params: CvaeParams, positive_batch, control_batch, noise):
    """Two-path contrastive loss; returns (loss, gradients, parts).

    loss = mean over positives of [mse + kl_weight*(KL_s + KL_z)]
         + mean over controls  of [mse + kl_weight*KL_z]
    gradients align with params.param_list(); parts carries the batch
    reconstruction MSE the stopping rule monitors.
    """
    if len(positive_batch) == 0 or len(control_batch) == 0:
        raise ValueError("both batches must be non-empty")
    cfg = params.config
    xp = Tensor(np.stack([_check_volume(params, v) for v in positive_batch])[:, None])
    xc = Tensor(np.stack([_check_volume(params, v) for v in control_batch])[:, None])
    bp, bc = len(positive_batch), len(control_batch)

    mu_s, lv_s = _encode_graph(params, SALIENT, xp)
    mu_zp, lv_zp = _encode_graph(params, BACKGROUND, xp)
    s = ad.reparameterize(mu_s, lv_s, noise["salient"].astype(np.float32))
    zp = ad.reparameterize(mu_zp, lv_zp, noise["z_positive"].astype(np.float32))
    recon_p = _decode_graph(params, ad.concat(zp, s))
    mse_p = ad.mse_loss(recon_p, xp)
    kl_p = ad.add(ad.kl_diag_gaussian(mu_s, lv_s), ad.kl_diag_gaussian(mu_zp, lv_zp))
    loss_p = ad.add(mse_p, ad.scale(kl_p, cfg.kl_weight / bp))

    mu_zc, lv_zc = _encode_graph(params, BACKGROUND, xc)
    zc = ad.reparameterize(mu_zc, lv_zc, noise["z_control"].astype(np.float32))
    zeros = Tensor(np.zeros((bc, cfg.latent_dim), dtype=np.float32))
    recon_c = _decode_graph(params, ad.concat(zc, zeros))
    mse_c = ad.mse_loss(recon_c, xc)
    kl_c = ad.kl_diag_gaussian(mu_zc, lv_zc)
    loss_c = ad.add(mse_c, ad.scale(kl_c, cfg.kl_weight / bc))

    loss = ad.add(loss_p, loss_c)
    ad.backward(loss)
    grads = [p.grad for p in params.param_list()]
    parts = {
        "mse_positive": float(mse_p.data),
        "mse_control": float(mse_c.data),
        "recon_mse": float((bp * mse_p.data + bc * mse_c.data) / (bp + bc)),
        "kl_positive": float(kl_p.data) / bp,
        "kl_control": float(kl_c.data) / bc,
    }
    return float(loss.data), grads, parts


def train(config: CvaeConfig, dataset, rng_seed: int):
    """Adam-train on class-stratified batches sampled with replacement.

    Stops when the running mean of reconstruction MSE over the last
    STOP_WINDOW iterations falls below config.recon_stop_threshold, or at
    max_iterations (flagged unconverged). Returns (CvaeParams, trace).
    """
    positives = dataset.volumes(POSITIVE)
    controls = dataset.volumes(CONTROL)
    if len(positives) < config.batch_size or len(controls) < config.batch_size:
        raise ValueError(
            f"need >= {config.batch_size} volumes per class, got "
            f"{len(positives)}/{len(controls)}"
        )
    params = init_params(config)
    opt_params = params.param_list()
    state = ad.AdamState.for_params(opt_params)
    rng = np.random.default_rng(rng_seed)
    b = config.batch_size
    dim = config.latent_dim
    trace = {"loss": [], "recon_mse": []}
    converged = False
    iterations = 0
    for t in range(1, config.max_iterations + 1):
        pos_idx = rng.integers(0, len(positives), b)
        ctl_idx = rng.integers(0, len(controls), b)
        noise = {
            "salient": rng.standard_normal((b, dim)),
            "z_positive": rng.standard_normal((b, dim)),
            "z_control": rng.standard_normal((b, dim)),
        }
        loss, grads, parts = cvae_batch_loss(
            params,
            [positives[i] for i in pos_idx],
            [controls[i] for i in ctl_idx],
            noise,
        )
        if not np.isfinite(loss):
            raise TrainingDivergenceError("non-finite training loss", iteration=t)
        ad.adam_step(opt_params, grads, state, config.adam)
        trace["loss"].append(loss)
        trace["recon_mse"].append(parts["recon_mse"])
        iterations = t
        if t >= STOP_WINDOW:
            window = trace["recon_mse"][-STOP_WINDOW:]
            if sum(window) / STOP_WINDOW < config.recon_stop_threshold:
                converged = True
                break
    params.training_meta = {
        "iterations": iterations,
        "final_recon_mse": float(
            np.mean(trace["recon_mse"][-STOP_WINDOW:])
        ),
        "converged": converged,
        "stop_threshold": config.recon_stop_threshold,
        "rng_seed": rng_seed,
    }
    return params, trace


def extract_features(params: CvaeParams, dataset, which: str, mode: str,
                     noise_seed: int = 0) -> FeatureMatrix:
    """Per-subject latent rows; mean mode returns mu, sampled mode one draw.

    Sampled-mode noise comes from a per-subject stream seeded by
    noise_seed XOR subject index, so any evaluation order agrees.
    """
    if mode not in (MEAN, SAMPLED):
        raise ValueError(f"mode must be mean or sampled, got {mode!r}")
    notes = ()
    if params.training_meta is None:
        notes = ("extracting features from untrained parameters",)
        warnings.warn(notes[0])
    rows = []
    for index, subject in enumerate(dataset.subjects):
        dist = encode(params, which, subject.volume)
        if mode == MEAN:
            rows.append(dist.mu)
        else:
            noise = np.random.default_rng(noise_seed ^ index).standard_normal(
                params.config.latent_dim
            )
            rows.append(dist.sample(noise.astype(np.float32)))
    return FeatureMatrix(
        subject_ids=dataset.ids,
        labels=dataset.labels,
        values=np.array(rows),
        source=which,
        mode=mode,
        sample_index=None,
        warnings=notes,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: CvaeParams, path) -> Path:
    """Single file: magic, manifest length, manifest JSON, float32 payload."""
    layers = []
    chunks = []
    offset = 0
    for net_name, net in params.networks().items():
        for layer_name, pair in net.items():
            for kind in ("w", "b"):
                arr = np.ascontiguousarray(pair[kind].data, dtype="<f4")
                layers.append(
                    {
                        "net": net_name,
                        "layer": layer_name,
                        "kind": kind,
                        "shape": list(arr.shape),
                        "offset": offset,
                    }
                )
                chunks.append(arr.tobytes())
                offset += arr.nbytes
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "layers": layers,
        "training_meta": params.training_meta,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest).encode()
    out = Path(path)
    with open(out, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return out


def load_checkpoint(path) -> CvaeParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + mlen].decode())
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {manifest['format_version']}"
        )
    payload = raw[8 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise ValueError(
            f"{path}: payload {len(payload)} bytes, manifest says "
            f"{manifest['payload_bytes']}"
        )
    config = CvaeConfig(**manifest["config"])
    nets = {"salient_encoder": {}, "background_encoder": {}, "decoder": {}}
    for entry in manifest["layers"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        arr = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            .reshape(shape)
            .copy()
        )
        nets[entry["net"]].setdefault(entry["layer"], {})[entry["kind"]] = Tensor(
            arr, requires_grad=True
        )
    return CvaeParams(
        config,
        nets["salient_encoder"],
        nets["background_encoder"],
        nets["decoder"],
        training_meta=manifest["training_meta"],
    )
