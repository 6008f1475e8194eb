"""Minimal deterministic CNN training harness.

Everything runs on the CPU in numpy: 3x3 same-padding convolutions,
2x2 max pooling, dense layers, and a softmax cross-entropy head.
Parameters are float64 named tensors; given the same seed and config,
initialization, shuffling, logs, and snapshots are bitwise reproducible.

The SGD update applies the classification gradient and weight decay
first, then subtracts the statistical-penalty gradient as a separate
step, so a lam = 0 run is bitwise identical to one without any penalty
machinery in the loop.
"""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, TrainingDiverged, ValidationError
from .gmm import GaussianMixture
from .regularizer import RegConfig, reg_grad
from .tensorio import TensorArchive, TensorEntry, fmt_real, write_tarc

_EVAL_BATCH = 250


# ---------------------------------------------------------------------------
# Layers and network

@dataclass(frozen=True)
class Conv3x3:
    name: str
    c_in: int
    c_out: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    name: str
    f_in: int
    f_out: int


@dataclass
class Network:
    layers: list
    params: dict          # name -> float64 ndarray
    frozen: set = field(default_factory=set)

    def param_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def clone_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}


def init_params(layers, seed: int) -> dict:
    """He fan-in scaled weights, zero biases, drawn in layer order."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        if isinstance(layer, Conv3x3):
            fan_in = layer.c_in * 9
            params[f"{layer.name}_w"] = rng.standard_normal(
                (layer.c_out, layer.c_in, 3, 3)) * np.sqrt(2.0 / fan_in)
            params[f"{layer.name}_b"] = np.zeros(layer.c_out)
        elif isinstance(layer, Dense):
            params[f"{layer.name}_w"] = rng.standard_normal(
                (layer.f_out, layer.f_in)) * np.sqrt(2.0 / layer.f_in)
            params[f"{layer.name}_b"] = np.zeros(layer.f_out)
    return params


def build_network(layers, seed: int) -> Network:
    return Network(layers=list(layers), params=init_params(layers, seed))


def reference_layers(in_shape=(3, 32, 32), channels=(16, 32), classes=10):
    """conv-relu-pool blocks followed by a single dense classifier."""
    c, h, w = in_shape
    layers = []
    for i, c_out in enumerate(channels, start=1):
        if h % 2 or w % 2:
            raise ConfigError(f"spatial dims {h}x{w} not divisible for pooling")
        layers += [Conv3x3(f"conv{i}", c, c_out), Relu(), MaxPool2x2()]
        c, h, w = c_out, h // 2, w // 2
    layers += [Flatten(), Dense("dense1", c * h * w, classes)]
    return layers


def make_reference_net(seed: int, in_shape=(3, 32, 32), channels=(16, 32), classes=10) -> Network:
    return build_network(reference_layers(in_shape, channels, classes), seed)


def params_to_archive(params: dict) -> TensorArchive:
    return TensorArchive([TensorEntry(k, v) for k, v in params.items()])


def load_params(net: Network, archive: TensorArchive) -> Network:
    """Replace matching parameter tensors with the archive's values."""
    by_name = {e.name: e.data for e in archive.entries}
    for name, tensor in net.params.items():
        if name not in by_name:
            raise ValidationError(f"archive is missing tensor {name!r}")
        data = by_name[name]
        if data.shape != tensor.shape:
            raise ValidationError(
                f"tensor {name!r} shape {data.shape} != expected {tensor.shape}")
        net.params[name] = data.astype(np.float64)
    return net


# ---------------------------------------------------------------------------
# Forward / backward

def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise TrainingDiverged(f"non-finite values after {where}")


def _forward_pass(net: Network, images: np.ndarray):
    """Run all layers; return final activations plus per-layer caches."""
    x = np.asarray(images, dtype=np.float64)
    caches = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv3x3):
            w = net.params[f"{layer.name}_w"]
            b = net.params[f"{layer.name}_b"]
            if x.ndim != 4 or x.shape[1] != layer.c_in:
                raise ValidationError(
                    f"layer {i} ({layer.name}): input shape {x.shape} "
                    f"does not provide {layer.c_in} channels")
            bsz, _, h, w2 = x.shape
            xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
            win = sliding_window_view(xp, (3, 3), axis=(2, 3))
            # im2col: rows ordered (b, y, x), columns (c, u, v)
            col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
            col = col.reshape(bsz * h * w2, layer.c_in * 9)
            y = col @ w.reshape(layer.c_out, -1).T + b[None, :]
            x = y.reshape(bsz, h, w2, layer.c_out).transpose(0, 3, 1, 2)
            caches.append((col, (bsz, h, w2)))
        elif isinstance(layer, Relu):
            mask = x > 0
            x = x * mask
            caches.append(mask)
        elif isinstance(layer, MaxPool2x2):
            bsz, c, h, w2 = x.shape
            xr = x.reshape(bsz, c, h // 2, 2, w2 // 2, 2)
            flat = xr.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w2 // 2, 4)
            idx = np.argmax(flat, axis=-1)  # first max wins on ties
            x = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
            caches.append((idx, (bsz, c, h, w2)))
        elif isinstance(layer, Flatten):
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            w = net.params[f"{layer.name}_w"]
            b = net.params[f"{layer.name}_b"]
            if x.ndim != 2 or x.shape[1] != layer.f_in:
                raise ValidationError(
                    f"layer {i} ({layer.name}): input shape {x.shape} "
                    f"does not provide {layer.f_in} features")
            caches.append(x)
            x = x @ w.T + b
        else:
            raise ConfigError(f"unknown layer {layer!r}")
        _check_finite(x, f"layer {i} ({type(layer).__name__})")
    return x, caches


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and the logit gradient, max-subtracted."""
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    probs = expz / denom
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def forward(net: Network, images, labels):
    """Logits and mean cross-entropy for one batch."""
    logits, _ = _forward_pass(net, images)
    loss, _ = softmax_cross_entropy(logits, np.asarray(labels))
    _check_finite(np.array(loss), "loss")
    return logits, loss


def loss_and_grads(net: Network, images, labels):
    """One forward/backward pass; frozen tensors get zero gradients."""
    logits, caches = _forward_pass(net, images)
    loss, dx = softmax_cross_entropy(logits, np.asarray(labels))
    _check_finite(np.array(loss), "loss")
    grads = {}
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            wname, bname = f"{layer.name}_w", f"{layer.name}_b"
            x_in = cache
            grads[wname] = (dx.T @ x_in if wname not in net.frozen
                            else np.zeros_like(net.params[wname]))
            grads[bname] = (dx.sum(axis=0) if bname not in net.frozen
                            else np.zeros_like(net.params[bname]))
            dx = dx @ net.params[wname]
        elif isinstance(layer, Flatten):
            dx = dx.reshape(cache)
        elif isinstance(layer, MaxPool2x2):
            idx, (bsz, c, h, w2) = cache
            flat = np.zeros((bsz, c, h // 2, w2 // 2, 4))
            np.put_along_axis(flat, idx[..., None], dx[..., None], axis=-1)
            dx = (flat.reshape(bsz, c, h // 2, w2 // 2, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w2))
        elif isinstance(layer, Relu):
            dx = dx * cache
        elif isinstance(layer, Conv3x3):
            wname, bname = f"{layer.name}_w", f"{layer.name}_b"
            col, (bsz, h, w2) = cache
            w = net.params[wname]
            dyr = np.ascontiguousarray(dx.transpose(0, 2, 3, 1)).reshape(-1, layer.c_out)
            grads[wname] = ((dyr.T @ col).reshape(w.shape)
                            if wname not in net.frozen else np.zeros_like(w))
            grads[bname] = (dyr.sum(axis=0) if bname not in net.frozen
                            else np.zeros_like(net.params[bname]))
            dcol = (dyr @ w.reshape(layer.c_out, -1)).reshape(bsz, h, w2, layer.c_in, 3, 3)
            dxp = np.zeros((bsz, layer.c_in, h + 2, w2 + 2))
            for u in range(3):
                for v in range(3):
                    dxp[:, :, u:u + h, v:v + w2] += dcol[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            dx = dxp[:, :, 1:h + 1, 1:w2 + 1]
    return loss, logits, grads


def backward(net: Network, images, labels) -> dict:
    """Named gradients of the mean cross-entropy (zeros where frozen)."""
    _, _, grads = loss_and_grads(net, images, labels)
    return grads


# ---------------------------------------------------------------------------
# Optimization

@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    reg: RegConfig = field(default_factory=RegConfig)
    eval_every: int = 500
    snapshot_iters: tuple = ()

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning_rate and batch_size must be positive")
        if self.iterations < 0 or self.eval_every < 1:
            raise ConfigError("iterations must be >= 0 and eval_every >= 1")
        self.reg.validate()


def sgd_step(net: Network, grads: dict, cfg: TrainConfig,
             model: GaussianMixture | None = None) -> Network:
    """w <- w - lr*(dL/dw + alpha*w); then w <- w - lr*reg_grad if lam > 0.

    The penalty gradient is evaluated at the pre-step parameters and
    applied as a separate subtraction, so the lam = 0 arithmetic is
    untouched by the penalty path.
    """
    lr = cfg.learning_rate
    alpha = cfg.reg.alpha
    penalty = (reg_grad(net.params, model, cfg.reg)
               if cfg.reg.lam != 0.0 else None)
    for name, w in net.params.items():
        if name in net.frozen:
            continue
        g = grads[name]
        if g.shape != w.shape:
            raise ValidationError(f"gradient shape mismatch for {name!r}")
        upd = g + alpha * w if alpha != 0.0 else g
        w_new = w - lr * upd
        if penalty is not None:
            w_new = w_new - lr * penalty[name]
        if not np.all(np.isfinite(w_new)):
            raise TrainingDiverged(f"non-finite update for {name!r}")
        net.params[name] = w_new
    return net


def freeze(net: Network, pattern: str) -> Network:
    """Add parameter tensors matching the glob pattern to the frozen set."""
    hits = [n for n in net.params if fnmatch.fnmatchcase(n, pattern)]
    if not hits:
        warnings.warn(f"freeze pattern {pattern!r} matched no tensors")
    net.frozen.update(hits)
    return net


# ---------------------------------------------------------------------------
# Data

@dataclass
class Dataset:
    images: np.ndarray   # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray   # (N,) int64
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def validate(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError("image/label count mismatch")
        if self.n and (self.labels.min() < 0):
            raise ValidationError("negative label")
        if self.n and (float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0):
            raise ValidationError("pixel values outside [0, 1]")

    def take(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR_TEST_FILES = ("test_batch.bin",)


def load_cifar10(data_dir, split: str = "train", limit: int | None = None) -> Dataset:
    """Read CIFAR-10 binary batch files (3073-byte records, pixels / 255)."""
    data_dir = Path(data_dir)
    names = _CIFAR_TRAIN_FILES if split == "train" else _CIFAR_TEST_FILES
    paths = [data_dir / n for n in names if (data_dir / n).exists()]
    if not paths:
        raise FormatError(f"no CIFAR-10 {split} batch files under {data_dir}")
    images, labels = [], []
    for p in paths:
        raw = np.frombuffer(p.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % _CIFAR_RECORD:
            raise FormatError(
                f"{p.name}: size {raw.size} is not a multiple of {_CIFAR_RECORD}")
        rec = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    ds = Dataset(np.concatenate(images), np.concatenate(labels), split)
    if limit is not None:
        ds = ds.take(limit)
    ds.validate()
    return ds


@dataclass
class SynthSpec:
    classes: int = 10
    per_class: int = 100
    channels: int = 3
    size: int = 32
    noise: float = 0.12
    jitter: float = 0.0  # per-example blob displacement as a fraction of size


def _class_anchors(c: int, spec: SynthSpec):
    """Blob centers, widths, and colors for one class. These depend only
    on the class index, so splits generated with different seeds share
    the same classes."""
    prng = np.random.default_rng(1_000_003 * (c + 1))
    anchors = []
    for _ in range(2):
        cy, cx = prng.uniform(0.2, 0.8, size=2) * spec.size
        sigma = prng.uniform(0.10, 0.22) * spec.size
        color = prng.uniform(0.3, 1.0, size=spec.channels)
        anchors.append((cy, cx, sigma, color))
    return anchors


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> Dataset:
    """Gaussian-blob class images plus pixel noise.

    With jitter = 0 every example of a class is the same fixed blob
    pattern, so the task is learnable from a handful of samples. With
    jitter > 0 each example displaces the blob centers by up to
    jitter*size and rescales widths and colors, making every example
    distinct; a model then has to learn the class distribution rather
    than memorize a template, and generalization gaps behave like they
    do on natural images.
    """
    n = spec.classes * spec.per_class
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    rng = np.random.default_rng(seed)
    if spec.jitter == 0.0:
        patterns = np.empty((spec.classes, spec.channels, spec.size, spec.size))
        for c in range(spec.classes):
            img = np.zeros((spec.channels, spec.size, spec.size))
            for cy, cx, sigma, color in _class_anchors(c, spec):
                bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
                img += color[:, None, None] * bump[None, :, :]
            patterns[c] = img / max(1.0, img.max())
        labels = np.repeat(np.arange(spec.classes), spec.per_class)
        order = rng.permutation(n)
        labels = labels[order]
        images = patterns[labels] + rng.standard_normal(
            (n, spec.channels, spec.size, spec.size)) * spec.noise
    else:
        raw = np.empty((n, spec.channels, spec.size, spec.size))
        for c in range(spec.classes):
            anchors = _class_anchors(c, spec)
            for i in range(spec.per_class):
                img = np.zeros((spec.channels, spec.size, spec.size))
                for cy, cx, sigma, color in anchors:
                    jy = cy + rng.uniform(-spec.jitter, spec.jitter) * spec.size
                    jx = cx + rng.uniform(-spec.jitter, spec.jitter) * spec.size
                    s = sigma * rng.uniform(0.8, 1.25)
                    amp = color * rng.uniform(0.6, 1.4, size=spec.channels)
                    bump = np.exp(-((yy - jy) ** 2 + (xx - jx) ** 2) / (2 * s * s))
                    img += amp[:, None, None] * bump[None, :, :]
                raw[c * spec.per_class + i] = img / max(1.0, img.max())
        labels = np.repeat(np.arange(spec.classes), spec.per_class)
        order = rng.permutation(n)
        labels = labels[order]
        images = raw[order] + rng.standard_normal(
            (n, spec.channels, spec.size, spec.size)) * spec.noise
    ds = Dataset(np.clip(images, 0.0, 1.0), labels, split)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EvalRecord:
    iteration: int
    train_loss: float
    test_loss: float
    test_acc: float


@dataclass
class TrainResult:
    records: list
    snapshots: dict   # iteration -> params dict (float64 copies)

    def final_gap(self) -> float:
        last = self.records[-1]
        return last.test_loss - last.train_loss


def evaluate(net: Network, dataset: Dataset, batch: int = _EVAL_BATCH):
    """Mean loss and top-1 accuracy over the full dataset."""
    total, hits = [], 0
    for s in range(0, dataset.n, batch):
        e = min(s + batch, dataset.n)
        logits, _ = _forward_pass(net, dataset.images[s:e])
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        lab = dataset.labels[s:e]
        total.extend((-logp[np.arange(e - s), lab]).tolist())
        hits += int((np.argmax(logits, axis=1) == lab).sum())
    return float(np.mean(total)), hits / dataset.n


def write_log_csv(records, path):
    lines = ["iteration,train_loss,test_loss,test_acc"]
    for r in records:
        lines.append(",".join([
            str(r.iteration), fmt_real(r.train_loss),
            fmt_real(r.test_loss), fmt_real(r.test_acc),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_snapshot(params: dict, out_dir: Path, iteration: int):
    path = out_dir / f"snapshot_{iteration:06d}.tarc"
    write_tarc(params_to_archive(params), path)
    return path


def train(net: Network, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
          model: GaussianMixture | None = None, out_dir=None,
          start_iteration: int = 0) -> TrainResult:
    """SGD with fixed epoch shuffling; evals at start, every eval_every
    steps, and at the last step; snapshots at cfg.snapshot_iters.

    Iteration numbers are offset by start_iteration so a frozen
    continuation run keeps a single global counter. On divergence the
    partial log is still written before the error propagates.
    """
    cfg.validate()
    train_set.validate()
    test_set.validate()
    if train_set.n == 0 or test_set.n == 0:
        raise ValidationError("empty dataset")
    if cfg.reg.lam != 0.0 and model is None:
        raise ConfigError("lambda > 0 requires a mixture model")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(train_set.n)
    cursor = 0
    records = []
    snapshots = {}
    snap_at = set(int(i) for i in cfg.snapshot_iters)

    def run_eval(it):
        tr_loss, _ = evaluate(net, train_set)
        te_loss, te_acc = evaluate(net, test_set)
        records.append(EvalRecord(it, tr_loss, te_loss, te_acc))

    def take_snapshot(it):
        snapshots[it] = net.clone_params()
        if out_dir is not None:
            _write_snapshot(snapshots[it], out_dir, it)

    try:
        run_eval(start_iteration)
        if start_iteration in snap_at:
            take_snapshot(start_iteration)
        for step in range(1, cfg.iterations + 1):
            it = start_iteration + step
            if cursor + cfg.batch_size > train_set.n:
                order = rng.permutation(train_set.n)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            _, _, grads = loss_and_grads(net, train_set.images[idx], train_set.labels[idx])
            sgd_step(net, grads, cfg, model)
            if step % cfg.eval_every == 0 or step == cfg.iterations:
                run_eval(it)
            if it in snap_at:
                take_snapshot(it)
    finally:
        if out_dir is not None:
            write_log_csv(records, out_dir / "log.csv")
    return TrainResult(records=records, snapshots=snapshots)
