"""Embedding network, parameter init, checkpoints and the training loop.

Layer chain for one branch (both branches share every parameter)::

    conv3d(3,5,5)/(1,2,2)/(1,2,2) -> relu -> maxpool(1,2,2)
    conv3d(3,5,5)/(1,1,1)/(1,2,2) -> relu -> maxpool(1,2,2)
    conv3d(3,3,3)/(1,1,1)/(1,1,1) -> relu -> maxpool(1,2,2)
    flatten to (T, B, C*H*W) -> bi-GRU -> bi-GRU -> mean|max over time
    -> affine -> L2 normalize
"""

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ndcompute as nd
from .errors import FormatError, LipAuthError, NonFiniteError, ShapeError
from .hnmloss import LossConfig, loss_and_grads

log = logging.getLogger(__name__)

CONV_LAYERS = (
    # name, kernel, stride, pad
    ("conv1", (3, 5, 5), (1, 2, 2), (1, 2, 2)),
    ("conv2", (3, 5, 5), (1, 1, 1), (1, 2, 2)),
    ("conv3", (3, 3, 3), (1, 1, 1), (1, 1, 1)),
)
POOL = (1, 2, 2)


@dataclass(frozen=True)
class Architecture:
    """Layer sizes.  Defaults give the full-size network."""

    frames: int = 50
    height: int = 100
    width: int = 50
    channels: tuple = (32, 64, 96)
    hidden: tuple = (128, 64)
    embed_dim: int = 256

    @classmethod
    def scaled(cls, scale=1.0, frames=50, height=100, width=50, embed_dim=256):
        """Channel and hidden multipliers applied to the full-size widths."""
        base = cls()
        return cls(
            frames=frames,
            height=height,
            width=width,
            channels=tuple(max(1, round(c * scale)) for c in base.channels),
            hidden=tuple(max(1, round(h * scale)) for h in base.hidden),
            embed_dim=embed_dim,
        )

    def conv_shapes(self):
        """Per conv block: (in_shape, conv_out_shape, pool_out_shape) without batch."""
        shapes = []
        c, t, h, w = 1, self.frames, self.height, self.width
        for (_, k, s, p), c_out in zip(CONV_LAYERS, self.channels):
            inp = (c, t, h, w)
            t, h, w = ((n + 2 * pp - kk) // ss + 1 for n, kk, ss, pp in zip((t, h, w), k, s, p))
            conv = (c_out, t, h, w)
            t, h, w = ((n - kk) // kk + 1 for n, kk in zip((t, h, w), POOL))
            if min(t, h, w) < 1:
                raise ShapeError(f"architecture {self} collapses a spatial axis to zero")
            shapes.append((inp, conv, (c_out, t, h, w)))
            c = c_out
        return shapes

    @property
    def rnn_input(self):
        c, _, h, w = self.conv_shapes()[-1][2]
        return c * h * w

    def param_shapes(self):
        shapes = {}
        c_in = 1
        for (name, k, _, _), c_out in zip(CONV_LAYERS, self.channels):
            shapes[f"{name}.w"] = (c_out, c_in) + k
            shapes[f"{name}.b"] = (c_out,)
            c_in = c_out
        f_in = self.rnn_input
        for i, h in enumerate(self.hidden, start=1):
            for d in ("fwd", "bwd"):
                shapes[f"gru{i}.{d}.w_ih"] = (f_in, 3 * h)
                shapes[f"gru{i}.{d}.w_hh"] = (h, 3 * h)
                shapes[f"gru{i}.{d}.b_ih"] = (3 * h,)
                shapes[f"gru{i}.{d}.b_hh"] = (3 * h,)
            f_in = 2 * h
        shapes["head.w"] = (2 * f_in, self.embed_dim)
        shapes["head.b"] = (self.embed_dim,)
        return shapes

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["channels"] = tuple(d["channels"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def init_params(seed=0, arch=Architecture(), dtype=np.float32):
    """Uniform(-s, s) weights, zero biases.

    Conv and affine weights use s = sqrt(1 / fan_in), recurrent weights
    s = sqrt(1 / hidden).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b") or ".b_" in name:
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if name.startswith("gru"):
            hidden = shape[1] // 3
            s = math.sqrt(1.0 / hidden)
        elif name.startswith("conv"):
            s = math.sqrt(1.0 / int(np.prod(shape[1:])))
        else:
            s = math.sqrt(1.0 / shape[0])
        params[name] = rng.uniform(-s, s, size=shape).astype(dtype)
    return params


def _gru(params, layer, direction):
    prefix = f"gru{layer}.{direction}."
    return {k: params[prefix + k] for k in nd.GRU_KEYS}


def _layer_call(name, fn, *args):
    try:
        return fn(*args)
    except ShapeError as exc:
        raise ShapeError(f"layer {name}: {exc}") from None


def forward(x, params, keep=False):
    """Embed a (B, 1, T, H, W) batch.  With ``keep`` also return the activations."""
    x = np.asarray(x, dtype=params["conv1.w"].dtype)
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"layer input: expected (B, 1, T, H, W), got {x.shape}")
    acts = {"input": x}
    h = x
    for name, _, stride, pad in CONV_LAYERS:
        acts[f"{name}.in"] = h
        if keep:
            h, acts[f"{name}.cols"] = _layer_call(
                name, nd.conv3d_cols, h, params[f"{name}.w"], params[f"{name}.b"], stride, pad
            )
        else:
            h = _layer_call(name, nd.conv3d, h, params[f"{name}.w"], params[f"{name}.b"], stride, pad)
        acts[f"{name}.conv"] = h
        h = nd.relu(h)
        acts[f"{name}.relu"] = h
        h = _layer_call(f"{name}.pool", nd.maxpool3d, h, POOL)
    acts["pool3"] = h
    B, C, T, H, W = h.shape
    seq = np.ascontiguousarray(h.transpose(2, 0, 1, 3, 4).reshape(T, B, C * H * W))
    for i in (1, 2):
        acts[f"gru{i}.in"] = seq
        seq = _layer_call(f"gru{i}", nd.bigru_layer, seq, _gru(params, i, "fwd"), _gru(params, i, "bwd"))
    acts["gru2.out"] = seq
    pooled = nd.temporal_avgmax(seq)
    acts["avgmax"] = pooled
    emb = _layer_call("head", nd.affine, pooled, params["head.w"], params["head.b"])
    acts["head"] = emb
    z = nd.l2_normalize(emb)
    return (z, acts) if keep else z


def embed(x, params):
    """Unit-norm embeddings for a (B, 1, T, H, W) batch."""
    return forward(x, params)


def backward(dz, acts, params):
    """Gradients of every parameter given dLoss/dz and the kept activations."""
    grads = {}
    d = nd.l2_normalize_backward(dz, acts["head"])
    d, grads["head.w"], grads["head.b"] = nd.affine_backward(d, acts["avgmax"], params["head.w"])
    d = nd.temporal_avgmax_backward(d, acts["gru2.out"])
    for i in (2, 1):
        d, g_f, g_b = nd.bigru_layer_backward(
            d, acts[f"gru{i}.in"], _gru(params, i, "fwd"), _gru(params, i, "bwd")
        )
        for k in nd.GRU_KEYS:
            grads[f"gru{i}.fwd.{k}"] = g_f[k]
            grads[f"gru{i}.bwd.{k}"] = g_b[k]
    B, C, T, H, W = acts["pool3"].shape
    d = d.reshape(T, B, C, H, W).transpose(1, 2, 0, 3, 4)
    for name, _, stride, pad in reversed(CONV_LAYERS):
        d = nd.maxpool3d_backward(d, acts[f"{name}.relu"], POOL)
        d = nd.relu_backward(d, acts[f"{name}.conv"])
        d, grads[f"{name}.w"], grads[f"{name}.b"] = nd.conv3d_backward(
            d, acts[f"{name}.in"], params[f"{name}.w"], stride, pad,
            need_dx=name != "conv1", cols=acts.pop(f"{name}.cols", None),
        )
    return grads


def pair_loss_and_grads(x1, x2, params, loss_config=LossConfig()):
    """Loss of one pair batch and the gradient of every parameter.

    Both branches run as one stacked batch through the shared parameters.
    """
    n = x1.shape[0]
    z, acts = forward(np.concatenate([x1, x2]), params, keep=True)
    loss, dz1, dz2, diagnostics = loss_and_grads(z[:n], z[n:], loss_config)
    grads = backward(np.concatenate([dz1, dz2]), acts, params)
    return loss, grads, diagnostics


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   "LBCK" u8 version | u32 meta length | meta JSON | u32 tensor count
#   per tensor: u16 name length | name | u8 ndim | u32 * ndim | float32 data

CKPT_MAGIC = b"LBCK"
CKPT_VERSION = 1


def save_checkpoint(path, params, arch, opt_state=None, extra=None):
    meta = {"arch": json.loads(arch.to_json()), "extra": extra or {}}
    tensors = dict(sorted(params.items()))
    if opt_state is not None:
        meta["adam"] = {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "step": opt_state.step,
        }
        for name in sorted(opt_state.m):
            tensors[f"adam.m.{name}"] = opt_state.m[name]
            tensors[f"adam.v.{name}"] = opt_state.v[name]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


@dataclass
class Checkpoint:
    params: dict
    arch: Architecture
    opt_state: nd.AdamState = None
    extra: dict = field(default_factory=dict)
    fingerprint: str = ""


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path, arch=None):
    """Read a checkpoint; if ``arch`` is given every tensor shape is checked against it."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<BI")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        stored_arch = Architecture.from_json(json.dumps(meta["arch"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    expected = (arch or stored_arch).param_shapes()
    if set(params) != set(expected):
        raise ShapeError(f"{path}: parameter names do not match the architecture")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise ShapeError(
                f"{path}: {name} has shape {params[name].shape}, architecture expects {shape}"
            )
    opt_state = None
    if "adam" in meta:
        a = meta["adam"]
        opt_state = nd.AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
            m={k[7:]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            v={k[7:]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        )
    return Checkpoint(params, arch or stored_arch, opt_state, meta.get("extra", {}),
                      hashlib.sha256(data).hexdigest())


def fingerprint(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-4
    train_batch: int = 80
    eval_batch: int = 40
    dropout: float = 0.0
    seed: int = 0
    scale: float = 1.0
    frames: int = 50
    height: int = 100
    width: int = 50
    train_pairs: int = 100_000
    val_pairs: int = 10_000
    calib_pairs: int = 10_000
    augment: bool = True
    margin: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.train_batch < 2 or self.eval_batch < 2:
            raise ValueError("batch sizes must be >= 2")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported; it must stay 0")

    @property
    def arch(self):
        return Architecture.scaled(self.scale, self.frames, self.height, self.width)

    @classmethod
    def from_text(cls, text):
        """Parse ``key=value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise LipAuthError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise LipAuthError(f"config line {lineno}: unknown key {key!r}")
            kind = types[key]
            if kind in (bool, "bool"):
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind in (int, "int"):
                values[key] = int(float(value))
            else:
                values[key] = float(value)
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass
class EpochLog:
    epoch: int
    batch_losses: list
    train_loss: float
    val_eer: float = float("nan")
    val_threshold: float = float("nan")
    seconds: float = 0.0


def train(train_manifest, val_manifest, config, out=None, clips=None, progress=None):
    """Train on positive pairs from ``train_manifest``.

    Returns ``(checkpoint, logs)``.  The final epoch's parameters are kept;
    every epoch's loss and validation EER are logged.  If ``out`` is set the
    checkpoint is written there.
    """
    from . import evalreport, sampler

    arch = config.arch
    clips = clips if clips is not None else sampler.ClipCache(train_manifest, val_manifest)
    params = init_params(config.seed, arch)
    state = nd.AdamState(lr=config.lr)
    loss_config = LossConfig(margin=config.margin)
    seeds = np.random.SeedSequence(config.seed)
    pair_seed, batch_seed, aug_seed, val_seed = (int(s.generate_state(1)[0]) for s in seeds.spawn(4))

    capacity = sampler.positive_capacity(train_manifest)
    pairs = sampler.sample_positive_pairs(train_manifest, min(config.train_pairs, capacity), pair_seed)
    val_pairs = []
    if val_manifest is not None and len(val_manifest):
        val_cap = sampler.positive_capacity(val_manifest)
        val_pairs = sampler.sample_positive_pairs(val_manifest, min(config.val_pairs, val_cap), val_seed)

    logs = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        batches = sampler.build_batches(pairs, config.train_batch, seed=batch_seed + epoch, training=True)
        aug_rng = np.random.default_rng([aug_seed, epoch])
        losses = []
        for b, batch in enumerate(batches):
            x1, x2 = sampler.batch_tensors(
                batch, clips, arch.frames, aug_rng if config.augment else None
            )
            loss, grads, _ = pair_loss_and_grads(x1, x2, params, loss_config)
            if not math.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch} batch {b}; keys {batch.keys}"
                )
            params, state = nd.adam_step(params, grads, state)
            losses.append(loss)
        entry = EpochLog(epoch, losses, float(np.mean(losses)) if losses else float("nan"))
        if val_pairs:
            scored = evalreport.score_pairs(params, val_pairs, config.eval_batch, clips, arch.frames)
            pos, neg = evalreport.split_scores(scored)
            if len(pos) and len(neg):
                entry.val_threshold, entry.val_eer = evalreport.find_eer_threshold(pos, neg)
        entry.seconds = time.perf_counter() - t0
        logs.append(entry)
        log.info("epoch %d: loss %.5f val EER %.4f (%.1fs)", epoch, entry.train_loss,
                 entry.val_eer, entry.seconds)
        if progress is not None:
            progress(entry)
    extra = {
        "config": asdict(config),
        "epochs": [
            {"epoch": e.epoch, "train_loss": e.train_loss, "val_eer": e.val_eer,
             "val_threshold": e.val_threshold, "batch_losses": e.batch_losses}
            for e in logs
        ],
    }
    if out is not None:
        save_checkpoint(out, params, arch, state, extra)
        ckpt = load_checkpoint(out)
    else:
        ckpt = Checkpoint(params, arch, state, extra)
    return ckpt, logs


def write_log(path, logs):
    lines = ["epoch,train_loss,val_eer,val_threshold,batches,seconds"]
    for e in logs:
        lines.append(
            f"{e.epoch},{e.train_loss!r},{e.val_eer!r},{e.val_threshold!r},{len(e.batch_losses)},{e.seconds:.2f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def with_overrides(config, **kw):
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
