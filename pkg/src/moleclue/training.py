"""Joint training of encoder, decoder and predictor, then the certificate bank."""
from __future__ import annotations

import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .decoder import build_decoder_graph_batch, decode_positions, norm_arrays
from .encoder import encode_batch, kl_divergence, sample_latent
from .model import TEST_DIMS, Dims, GraphBatch, ModelParams, bound, param_shapes
from .molgraph import LabeledExample, normalize_positions
from .uncertainty import CertificateBank, predict_standardized, train_certificates

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
FORMAT_VERSION = 1
MAGIC = b"MCLU"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_y: float = 1.0
    lambda_v: float = 1.0
    lambda_k: float = 1.0
    lambda_l: float = 1.0
    lambda_c: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    dims: Dims = TEST_DIMS
    val_fraction: float = 0.1
    oc_max_steps: int = 20000
    # KL and latent-norm weights ramp linearly from 0 over this many epochs
    warmup_epochs: int = 0

    def __post_init__(self):
        for name in ("lambda_y", "lambda_v", "lambda_k", "lambda_l", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("dims"), dict):
            d["dims"] = Dims(**d["dims"])
        return cls(**d)


@dataclass
class Checkpoint:
    params: ModelParams
    certificates: CertificateBank
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    version: int = FORMAT_VERSION

    @property
    def dims(self) -> Dims:
        return self.params.dims


# ---------------------------------------------------------------- loss


def gaussian_nll(y, mean: dc.Tensor, logvar: dc.Tensor) -> dc.Tensor:
    """Per-example heteroscedastic Gaussian negative log-likelihood."""
    return HALF_LOG_2PI + 0.5 * logvar + 0.5 * dc.square(mean - y) / dc.exp(logvar)


def e3nnvae_loss(examples: Sequence[LabeledExample], params, config: TrainConfig,
                 rng: np.random.Generator | int | None = 0, deterministic: bool = False):
    """Weighted mean over the batch of prediction NLL, reconstruction, KL and ||z||^2.

    Returns the total as a Tensor and a dict of per-term batch means.
    """
    if not examples:
        raise ValueError("e3nnvae_loss needs a non-empty batch")
    p = bound(params)
    batch = GraphBatch.from_graphs([e.graph for e in examples])
    x0 = np.concatenate([e.conformer.positions for e in examples])
    h_phi, post = encode_batch(batch, dc.Tensor(x0), p)
    z = sample_latent(post, rng, deterministic=deterministic)

    y = (np.array([e.label for e in examples]) - p.label_mean) / p.label_std
    mean, logvar = predict_standardized(z, p)
    l_y = gaussian_nll(y, mean, logvar)

    dg = build_decoder_graph_batch(batch, h_phi, z, p)
    cents, scales = norm_arrays([normalize_positions(e.conformer)[1] for e in examples])
    x = decode_positions(dg, cents, scales, p)
    sq = dc.tsum(dc.square(x - x0), axis=1)
    l_v = dc.segment_mean(sq, batch.node_graph, batch.n_graphs)

    l_k = kl_divergence(post)
    l_l = dc.tsum(dc.square(z), axis=1)

    means = {"L_y": dc.mean(l_y), "L_v": dc.mean(l_v), "L_k": dc.mean(l_k), "L_l": dc.mean(l_l)}
    weights = {"L_y": config.lambda_y, "L_v": config.lambda_v,
               "L_k": config.lambda_k, "L_l": config.lambda_l}
    total = dc.Tensor(0.0)
    for k, t in means.items():
        if weights[k] != 0:
            total = total + weights[k] * t
    terms = {k: t.item() for k, t in means.items()}
    terms["total"] = total.item()
    return total, terms


def weighted_sum(terms: dict, config: TrainConfig) -> float:
    return (config.lambda_y * terms["L_y"] + config.lambda_v * terms["L_v"]
            + config.lambda_k * terms["L_k"] + config.lambda_l * terms["L_l"])


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, shapes: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, arrays: dict, grads: dict):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            arrays[k] = arrays[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def latent_means(examples: Sequence[LabeledExample], params, batch_size: int = 64) -> np.ndarray:
    p = bound(params)
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        batch = GraphBatch.from_graphs([e.graph for e in chunk])
        x0 = np.concatenate([e.conformer.positions for e in chunk])
        _, post = encode_batch(batch, dc.Tensor(x0), p)
        out.append(post.mean_vector().data)
    return np.concatenate(out) if out else np.zeros((0, p.dims.latent))


def split_train_val(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(frac * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _eval_terms(examples, params, config) -> dict:
    rows = []
    for i in range(0, len(examples), 64):
        chunk = examples[i:i + 64]
        _, terms = e3nnvae_loss(chunk, params, config, deterministic=True)
        rows.append((len(chunk), terms))
    n = sum(r[0] for r in rows)
    return {k: sum(c * t[k] for c, t in rows) / n for k in rows[0][1]}


def fit(dataset: Sequence[LabeledExample], config: TrainConfig,
        progress: bool = False) -> Checkpoint:
    """Train the VAE and predictor jointly, then the certificate bank."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("fit: empty dataset")
    if len(dataset) < 2 * config.batch_size:
        raise ValueError(f"fit: need at least {2 * config.batch_size} examples, got {len(dataset)}")
    tr_idx, val_idx = split_train_val(len(dataset), config.val_fraction, config.seed)
    train = [dataset[i] for i in tr_idx]
    val = [dataset[i] for i in val_idx]

    labels = np.array([e.label for e in train])
    params = ModelParams.init(config.dims, config.seed)
    params.label_mean = float(labels.mean())
    params.label_std = float(labels.std()) if labels.std() > 0 else 1.0

    opt = Adam(param_shapes(config.dims), config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    names = list(params.arrays)
    for epoch in range(config.epochs):
        ramp = min(1.0, (epoch + 1) / (config.warmup_epochs + 1))
        step_cfg = replace(config, lambda_k=config.lambda_k * ramp, lambda_l=config.lambda_l * ramp)
        order = rng.permutation(len(train))
        sums = {}
        for b, start in enumerate(range(0, len(train), config.batch_size)):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            bp = params.bind(requires_grad=True)
            total, terms = e3nnvae_loss(chunk, bp, step_cfg, rng)
            if not np.isfinite(terms["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = dict(zip(names, dc.grad(total, [bp.t[k] for k in names])))
            opt.step(params.arrays, grads)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
        row = {"epoch": epoch, **{f"train_{k}": v / len(train) for k, v in sums.items()}}
        if val:
            row.update({f"val_{k}": v for k, v in _eval_terms(val, params, config).items()})
        history.append(row)
        if progress or epoch % 10 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d: %s", epoch,
                     " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))

    bank = certify(params, train, config)
    return Checkpoint(params, bank, config, history)


def certify(params: ModelParams, train: Sequence[LabeledExample], config: TrainConfig) -> CertificateBank:
    """Certificates are fit on deterministic latent means; VAE weights stay untouched."""
    mus = latent_means(train, params)
    bank, info = train_certificates(mus, config.dims.certificates, seed=config.seed,
                                    lambda_c=config.lambda_c, max_steps=config.oc_max_steps)
    log.info("certificates: %s", info)
    return bank


# ---------------------------------------------------------------- persistence
#
# layout (little endian):
#   b"MCLU" | u32 version | u32 record count | records... | u32 crc32(all preceding bytes)
#   record: u32 name length | name utf-8 | u8 kind
#     kind 0 (float64 tensor): u32 ndim | u32 dim x ndim | f64 data, row-major
#     kind 1 (json):           u64 byte length | utf-8 bytes


def _write_record(buf: io.BytesIO, name: str, value):
    nb = name.encode()
    buf.write(struct.pack("<I", len(nb)) + nb)
    if isinstance(value, np.ndarray):
        arr = np.ascontiguousarray(value, dtype="<f8")
        buf.write(struct.pack("<BI", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    else:
        data = json.dumps(value, sort_keys=True).encode()
        buf.write(struct.pack("<BQ", 1, len(data)) + data)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": ckpt.config.to_dict(),
        "dims": ckpt.params.dims.to_dict(),
        "label_mean": ckpt.params.label_mean,
        "label_std": ckpt.params.label_std,
        "history": ckpt.history,
    }
    records = [("meta", meta)] + [(f"param/{k}", v) for k, v in sorted(ckpt.params.arrays.items())]
    records.append(("certificates", ckpt.certificates.C))
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(records)))
    for name, value in records:
        _write_record(buf, name, value)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, expected_dims: Dims | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(8)
    (count,) = r.unpack("<I")
    meta, arrays, certs = None, {}, None
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (kind,) = r.unpack("<B")
        if kind == 0:
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            value = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        elif kind == 1:
            (nbytes,) = r.unpack("<Q")
            value = json.loads(r.take(nbytes).decode())
        else:
            raise CheckpointError(f"{path}: unknown record kind {kind} for {name!r}")
        if name == "meta":
            meta = value
        elif name == "certificates":
            certs = value
        elif name.startswith("param/"):
            arrays[name[len("param/"):]] = value
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    if meta is None or certs is None:
        raise CheckpointError(f"{path}: missing meta or certificate record")
    dims = Dims(**meta["dims"])
    if expected_dims is not None and dims != expected_dims:
        raise CheckpointError(f"{path}: dims {dims} do not match expected {expected_dims}")
    shapes = param_shapes(dims)
    if set(shapes) != set(arrays) or any(arrays[k].shape != s for k, s in shapes.items()):
        raise CheckpointError(f"{path}: parameter records do not match dims {dims}")
    if certs.shape != (dims.certificates, dims.latent):
        raise CheckpointError(f"{path}: certificate bank has shape {certs.shape}")
    params = ModelParams(dims, {k: arrays[k] for k in shapes}, meta["label_mean"], meta["label_std"])
    config = TrainConfig.from_dict(meta["config"])
    if config.dims != dims:
        config = replace(config, dims=dims)
    return Checkpoint(params, CertificateBank(certs), config, meta["history"], version)
