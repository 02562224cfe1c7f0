"""The Fourier Imager Network: SPAF modules, recursive groups, residual-in-residual
assembly, the composite loss, the training loop and (tiled) inference."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .autodiff import AdamState, Tape, Tensor, adam_step, backward, current_tape
from .autodiff import ops
from .errors import ConfigError, FormatError, GeometryError, NumericalError
from .formats import decode_finw, encode_finw, write_csv
from .optics import ComplexField, HologramStack, derive_seed, fft_workers
from .synth import Dataset, DatasetItem, rotation_choice

TRANSFORMS = ("shrunk", "full")


@dataclass(frozen=True)
class FinConfig:
    input_side: int = 64
    M: int = 2
    channels: int = 16
    k_schedule: tuple[int, ...] = (16, 12, 8)
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.5
    transform: str = "shrunk"
    complex_weights: bool = False
    prelu_init: float = 0.25
    dtype: str = "float32"
    supervision: str = "mhpr"

    def __post_init__(self):
        object.__setattr__(self, "k_schedule", tuple(int(k) for k in self.k_schedule))
        side = self.input_side
        if side < 4 or side & (side - 1):
            raise ConfigError(f"input_side must be a power of two >= 4, got {side}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if not self.k_schedule:
            raise ConfigError("k_schedule must name at least one SPAF group")
        for k in self.k_schedule:
            if not 0 <= k <= side // 2 - 1:
                raise ConfigError(f"half window {k} outside [0, {side // 2 - 1}] for input_side {side}")
        if any(b > a for a, b in zip(self.k_schedule, self.k_schedule[1:])):
            raise ConfigError(f"k_schedule must be non-increasing, got {list(self.k_schedule)}")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.supervision not in ("mhpr", "truth"):
            raise ConfigError(f"supervision must be 'mhpr' or 'truth', got {self.supervision!r}")

    @property
    def n_groups(self) -> int:
        return len(self.k_schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_schedule"] = list(self.k_schedule)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "FinConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown FinConfig keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SpafModuleParams:
    weight: Tensor
    prelu: Tensor
    weight_imag: Tensor | None = None


class FinModel:
    """Configuration plus named parameter tensors.

    Parameter names: ``head.weight`` [c, M], ``head.bias`` [c],
    ``group{g}.weight`` [c, K, K] (or [c, c, K, K] for the full transform),
    ``group{g}.weight_imag`` (complex weights only), ``group{g}.prelu`` [c],
    ``tail.weight`` [2, c], ``tail.bias`` [2].
    """

    def __init__(self, config: FinConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._check()

    def _check(self):
        cfg = self.config
        for name, shape in self.expected_shapes(cfg).items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name!r}")
            if self.params[name].shape != shape:
                raise ConfigError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")
        extra = set(self.params) - set(self.expected_shapes(cfg))
        if extra:
            raise ConfigError(f"unexpected parameters {sorted(extra)}")

    @staticmethod
    def expected_shapes(cfg: FinConfig) -> dict[str, tuple[int, ...]]:
        c = cfg.channels
        shapes = {"head.weight": (c, cfg.M), "head.bias": (c,)}
        for g, k in enumerate(cfg.k_schedule):
            kk = 2 * k + 1
            wshape = (c, kk, kk) if cfg.transform == "shrunk" else (c, c, kk, kk)
            shapes[f"group{g}.weight"] = wshape
            if cfg.complex_weights:
                shapes[f"group{g}.weight_imag"] = wshape
            shapes[f"group{g}.prelu"] = (c,)
        shapes["tail.weight"] = (2, c)
        shapes["tail.bias"] = (2,)
        return shapes

    @classmethod
    def init(cls, config: FinConfig, seed: int = 0) -> "FinModel":
        """W' ~ N(0, (1/c)^2); head/tail U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases; PReLU slopes at prelu_init."""
        rng = np.random.default_rng(seed)
        dt = np.dtype(config.dtype)
        c = config.channels
        params: dict[str, Tensor] = {}
        for name, shape in cls.expected_shapes(config).items():
            if name.endswith(".bias"):
                value = np.zeros(shape)
            elif name.endswith(".prelu"):
                value = np.full(shape, config.prelu_init)
            elif name.startswith("group"):
                value = rng.normal(0.0, 1.0 / c, shape)
            else:
                # Kaiming-uniform with negative slope sqrt(5), the usual 1x1 conv default
                bound = 1.0 / math.sqrt(shape[1])
                value = rng.uniform(-bound, bound, shape)
            params[name] = Tensor(value.astype(dt), requires_grad=True, name=name)
        return cls(config, params)

    def group(self, g: int) -> SpafModuleParams:
        p = self.params
        return SpafModuleParams(p[f"group{g}.weight"], p[f"group{g}.prelu"], p.get(f"group{g}.weight_imag"))

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.params.items()}

    def copy(self) -> "FinModel":
        return FinModel(self.config, {k: Tensor(t.value.copy(), requires_grad=True, name=k)
                                      for k, t in self.params.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(encode_finw(self.config.to_dict(), self.state_arrays()))

    @classmethod
    def load(cls, path: str | Path) -> "FinModel":
        cfg_doc, arrays = decode_finw(Path(path).read_bytes())
        try:
            cfg = FinConfig.from_dict(cfg_doc)
        except (ConfigError, TypeError) as exc:
            raise FormatError(f"{path}: bad config block ({exc})") from exc
        dt = np.dtype(cfg.dtype)
        params = {k: Tensor(v.astype(dt), requires_grad=True, name=k) for k, v in arrays.items()}
        try:
            return cls(cfg, params)
        except ConfigError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def spaf_forward(x: Tensor, p: SpafModuleParams, k: int, transform: str = "shrunk") -> Tensor:
    """One SPAF module with its small-scale residual: x + PReLU(Re IDFT(pad(W'(trunc(DFT x)))))."""
    h, w = x.shape[-2:]
    re, im = ops.fft2(x)
    re, im = ops.spectral_truncate(re, im, k)
    if transform == "shrunk":
        re, im = ops.spaf_weight_mul(re, im, p.weight, p.weight_imag)
    else:
        re, im = ops.spectral_mix(re, im, p.weight, p.weight_imag)
    re, im = ops.spectral_pad(re, im, h, w)
    branch, _ = ops.ifft2(re, im)
    return ops.add(x, ops.prelu(branch, p.prelu))


def _hermitian_weight(p: SpafModuleParams, k: int) -> np.ndarray:
    """Half-plane Hermitian part (W(u) + conj W(-u)) / 2 of a centered window, ``[c, 2k+1, k+1]``."""
    wv = p.weight.value if p.weight_imag is None else p.weight.value + 1j * p.weight_imag.value
    return 0.5 * (wv + np.conj(wv[:, ::-1, ::-1]))[:, :, k:]


def _spaf_inference(x: np.ndarray, wh: np.ndarray, slope: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Tape-free shrunk SPAF module over ``[B, c, H, W]``; same math as :func:`spaf_forward`.

    The channel sum commutes with the DFT, so one real transform per sample
    replaces c complex ones. Taking the real part after the inverse DFT equals
    inverting the Hermitian part of the weight, which needs only half spectra.
    """
    h, w = x.shape[-2:]
    kk = wh.shape[-1]
    s = x[:, 0].copy()
    for i in range(1, x.shape[1]):
        s += x[:, i]
    win = sfft.rfft2(s, workers=fft_workers())[:, rows, :kk]
    half = np.zeros(x.shape[:2] + (h, kk), dtype=win.dtype)
    half[:, :, rows, :] = wh * win[:, None]
    cols = sfft.ifft(half, axis=-2, workers=fft_workers())
    branch = sfft.irfft(cols, n=w, axis=-1, workers=fft_workers())
    pos = np.maximum(branch, 0)
    np.minimum(branch, 0, out=branch)
    branch *= slope
    branch += pos
    branch += x
    return branch


# activation bytes per block of samples on the tape-free path; keeps blocks cache resident
INFERENCE_BLOCK_BYTES = 1 << 19


def _forward_inference(stack: np.ndarray, model: FinModel) -> np.ndarray:
    cfg = model.config
    p = model.params
    groups = [(_hermitian_weight(model.group(g), k), p[f"group{g}.prelu"].value[:, None, None],
               ops.window_indices(cfg.input_side, k)) for g, k in enumerate(cfg.k_schedule)]
    xs = stack.reshape((-1,) + stack.shape[-3:])
    itemsize = np.result_type(xs.dtype, np.dtype(cfg.dtype)).itemsize
    block = max(1, INFERENCE_BLOCK_BYTES // (cfg.channels * cfg.input_side ** 2 * itemsize))
    outs = []
    for i in range(0, len(xs), block):
        x = ops.conv1x1(Tensor(xs[i:i + block]), p["head.weight"], p["head.bias"]).value
        anchor = x
        for wh, slope, rows in groups:
            y = _spaf_inference(_spaf_inference(x, wh, slope, rows), wh, slope, rows)
            y += x
            x = y
        x += anchor
        outs.append(ops.conv1x1(Tensor(x), p["tail.weight"], p["tail.bias"]).value)
    out = np.concatenate(outs)
    return out.reshape(stack.shape[:-3] + out.shape[-3:])


def fin_forward(stack: Tensor, model: FinModel) -> Tensor:
    """Map normalized holograms ``[B, M, S, S]`` (or ``[M, S, S]``) to ``[B, 2, S, S]`` (real, imag).

    With no tape recording, the shrunk transform runs a faster tape-free path
    that agrees with the recorded one up to rounding.
    """
    cfg = model.config
    if stack.ndim not in (3, 4):
        raise GeometryError(f"expected [M, S, S] or [B, M, S, S] input, got {stack.shape}")
    if stack.shape[-3] != cfg.M:
        raise GeometryError(f"model expects M={cfg.M} holograms, got {stack.shape[-3]}")
    if stack.shape[-2:] != (cfg.input_side, cfg.input_side):
        raise GeometryError(f"FOV is fixed at {cfg.input_side}x{cfg.input_side}; got {stack.shape[-2:]}")
    if current_tape() is None and cfg.transform == "shrunk":
        return Tensor(_forward_inference(stack.value, model))
    p = model.params
    x = ops.conv1x1(stack, p["head.weight"], p["head.bias"])
    anchor = x
    for g, k in enumerate(cfg.k_schedule):
        mod = model.group(g)
        y = spaf_forward(x, mod, k, cfg.transform)
        y = spaf_forward(y, mod, k, cfg.transform)
        x = ops.add(x, y)
    x = ops.add(x, anchor)
    return ops.conv1x1(x, p["tail.weight"], p["tail.bias"])


FeatureExtractor = Callable[[Tensor], Tensor]


def loss_terms(pred: Tensor, gt: Tensor,
               feature_extractor: FeatureExtractor | None = None) -> dict[str, Tensor]:
    """MAE over both channels, mean DFT-domain modulus error, and the optional feature loss."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.shape[-3] != 2:
        raise ValueError(f"expected 2 channels (real, imag), got {pred.shape[-3]}")
    diff = ops.sub(pred, gt)
    mae = ops.mean(ops.abs(diff))
    fre, fim = ops.fft2(ops.take_channel(diff, 0), ops.take_channel(diff, 1))
    cplx = ops.mean(ops.complex_abs(fre, fim))
    terms = {"mae": mae, "complex": cplx}
    if feature_extractor is not None:
        fd = ops.sub(feature_extractor(pred), feature_extractor(gt))
        terms["percep"] = ops.mean(ops.mul(fd, fd))
    return terms


def total_loss(pred: Tensor, gt: Tensor, alpha: float = 0.5, beta: float = 1.0, gamma: float = 0.5,
               feature_extractor: FeatureExtractor | None = None) -> Tensor:
    """alpha * L_MAE + beta * L_complex + gamma * L_percep (L_percep is 0 without an extractor)."""
    terms = loss_terms(pred, gt, feature_extractor)
    loss = ops.add(ops.scale(terms["mae"], alpha), ops.scale(terms["complex"], beta))
    if "percep" in terms:
        loss = ops.add(loss, ops.scale(terms["percep"], gamma))
    return loss


def normalize_holograms(intensities: np.ndarray) -> np.ndarray:
    """Divide every hologram (axis -3 entry) by its own mean so the background is ~1."""
    means = intensities.mean(axis=(-2, -1), keepdims=True)
    if np.any(means <= 0):
        raise NumericalError("hologram with nonpositive mean cannot be normalized")
    return intensities / means


def _target(item: DatasetItem, supervision: str) -> np.ndarray:
    fld = item.gt if supervision == "mhpr" else item.truth
    return np.stack([fld.data.real, fld.data.imag])


@dataclass
class TrainOptions:
    lr: float = 1e-2
    eta_min: float = 1e-5
    T0: float = 10
    T_mult: float = 2
    val_fraction: float = 0.1
    augment: bool = True
    feature_extractor: FeatureExtractor | None = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_amp_rmse: float
    train_amp_rmse: float


@dataclass
class TrainLog:
    initial_train_loss: float
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    HEADER = ("epoch", "lr", "train_loss", "val_loss", "val_amp_rmse", "train_amp_rmse")

    def write_csv(self, path: str | Path) -> None:
        write_csv(path, self.HEADER, [(r.epoch, r.lr, r.train_loss, r.val_loss, r.val_amp_rmse,
                                       r.train_amp_rmse) for r in self.records])

    @property
    def final_train_loss(self) -> float:
        return self.records[-1].train_loss


def _amp_rmse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample RMSE between |pred| and |target| for ``[B, 2, H, W]`` arrays."""
    pa = np.hypot(pred[:, 0], pred[:, 1])
    ta = np.hypot(target[:, 0], target[:, 1])
    return np.sqrt(np.mean((pa - ta) ** 2, axis=(-2, -1)))


def predict_arrays(model: FinModel, inputs: np.ndarray, batch: int = 16) -> np.ndarray:
    """Forward normalized ``[N, M, S, S]`` inputs in chunks without recording a tape."""
    dt = np.dtype(model.config.dtype)
    outs = []
    for i in range(0, len(inputs), batch):
        outs.append(fin_forward(Tensor(inputs[i:i + batch].astype(dt)), model).value)
    return np.concatenate(outs) if outs else np.zeros((0, 2) + inputs.shape[-2:], dtype=dt)


def _evaluate(model: FinModel, inputs: np.ndarray, targets: np.ndarray, batch: int) -> tuple[float, float]:
    cfg = model.config
    if len(inputs) == 0:
        return float("nan"), float("nan")
    losses, rmses = [], []
    for i in range(0, len(inputs), batch):
        x = inputs[i:i + batch]
        pred = fin_forward(Tensor(x), model)
        loss = total_loss(pred, Tensor(targets[i:i + batch]), cfg.alpha, cfg.beta, cfg.gamma)
        losses.append(loss.item() * len(x))
        rmses.append(_amp_rmse(pred.value, targets[i:i + batch]))
    return float(np.sum(losses) / len(inputs)), float(np.mean(np.concatenate(rmses)))


def train(dataset: Dataset, config: FinConfig, epochs: int = 20, batch_size: int = 8, seed: int = 0,
          options: TrainOptions | None = None, progress: Callable[[EpochRecord], None] | None = None
          ) -> tuple[FinModel, TrainLog]:
    """Minibatch Adam training with warm-restart cosine schedule; returns the best-validation model.

    A ``val_fraction`` share of the training split (at least one FOV when
    there are two or more) is held out for validation. Each minibatch sample
    gets the same random quarter-turn rotation on its input and target.
    """
    opts = options or TrainOptions()
    items = dataset.subset("train")
    if not items:
        raise ConfigError("training split is empty")
    if epochs < 1 or batch_size < 1:
        raise ConfigError(f"epochs and batch_size must be >= 1, got {epochs}, {batch_size}")
    side = config.input_side
    for i, it in enumerate(items):
        if it.stack.shape != (side, side):
            raise GeometryError(f"training FOV {i} is {it.stack.shape}, model input_side is {side}")
        if it.stack.M != config.M:
            raise GeometryError(f"training FOV {i} has M={it.stack.M}, config has M={config.M}")
    dt = np.dtype(config.dtype)
    inputs = np.stack([normalize_holograms(it.stack.intensities()) for it in items]).astype(dt)
    targets = np.stack([_target(it, config.supervision) for it in items]).astype(dt)

    rng = np.random.default_rng(derive_seed(seed, "train"))
    n = len(items)
    n_val = 0 if n < 2 else min(n - 1, max(1, int(round(opts.val_fraction * n))))
    order = rng.permutation(n)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x_tr, y_tr = inputs[tr_idx], targets[tr_idx]
    x_val, y_val = inputs[val_idx], targets[val_idx]

    model = FinModel.init(config, derive_seed(seed, "init"))
    state = AdamState(lr=opts.lr, T0=opts.T0, T_mult=opts.T_mult, eta_min=opts.eta_min)
    init_loss, _ = _evaluate(model, x_tr, y_tr, batch_size)
    log = TrainLog(initial_train_loss=init_loss)
    best_val, best_params = math.inf, None
    n_batches = max(1, math.ceil(len(x_tr) / batch_size))
    names = list(model.params)
    param_list = [model.params[k] for k in names]
    arrays = {k: model.params[k].value for k in names}
    t_start = time.perf_counter()
    for epoch in range(epochs):
        perm = rng.permutation(len(x_tr))
        loss_sum, rmse_list = 0.0, []
        lr = state.schedule(epoch)
        for b in range(n_batches):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if opts.augment:
                ks = [rotation_choice(rng) for _ in idx]
                xb = np.stack([np.rot90(x, k, axes=(-2, -1)) for x, k in zip(xb, ks)])
                yb = np.stack([np.rot90(y, k, axes=(-2, -1)) for y, k in zip(yb, ks)])
            with Tape() as tape:
                pred = fin_forward(Tensor(xb), model)
                loss = total_loss(pred, Tensor(yb), config.alpha, config.beta, config.gamma,
                                  opts.feature_extractor)
            value = loss.item()
            if not math.isfinite(value):
                norms = {k: float(np.linalg.norm(v.value)) for k, v in model.params.items()}
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}; parameter norms {norms}")
            grads = backward(tape, loss, param_list)
            lr = state.schedule(epoch + b / n_batches)
            adam_step(arrays, {k: grads[model.params[k]] for k in names}, state, lr=lr)
            loss_sum += value * len(idx)
            rmse_list.append(_amp_rmse(pred.value, yb))
        train_loss = loss_sum / len(x_tr)
        val_loss, val_rmse = _evaluate(model, x_val, y_val, batch_size)
        rec = EpochRecord(epoch, lr, train_loss, val_loss, val_rmse,
                          float(np.mean(np.concatenate(rmse_list))))
        log.records.append(rec)
        score = val_loss if n_val else train_loss
        if score < best_val:
            best_val, best_params = score, {k: v.copy() for k, v in arrays.items()}
            log.best_epoch = epoch
        if progress is not None:
            progress(rec)
    log.seconds = time.perf_counter() - t_start
    best = FinModel(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in best_params.items()})
    return best, log


def _check_stack(model: FinModel, stack: HologramStack, tiled: bool = False) -> None:
    cfg = model.config
    if stack.M != cfg.M:
        raise GeometryError(f"model expects M={cfg.M} holograms, stack has {stack.M}")
    if not tiled and stack.shape != (cfg.input_side, cfg.input_side):
        raise GeometryError(f"the FOV is fixed at {cfg.input_side}x{cfg.input_side}; stack is "
                            f"{stack.shape[0]}x{stack.shape[1]} (use tiled inference)")


def infer(model: FinModel, stack: HologramStack) -> ComplexField:
    """Reconstruct the complex sample field from a stack matching the model's FOV and M."""
    _check_stack(model, stack)
    x = normalize_holograms(stack.intensities())[None].astype(model.config.dtype)
    out = fin_forward(Tensor(x), model).value[0].astype(np.float64)
    return ComplexField(out[0] + 1j * out[1], stack.pixel_pitch, stack.wavelength)


def tile_infer(model: FinModel, stack: HologramStack, batch: int = 20) -> ComplexField:
    """Reconstruct a large FOV tile by tile, ``batch`` tiles per forward pass.

    Sizes that are not a multiple of the tile side are reflection-padded and the
    result is cropped back. Each tile is normalized on its own, exactly as
    :func:`infer` would for the same crop.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    _check_stack(model, stack, tiled=True)
    s = model.config.input_side
    h, w = stack.shape
    ph, pw = (-h) % s, (-w) % s
    data = stack.intensities()
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "wrap")
    big_h, big_w = data.shape[-2:]
    corners = [(r, c) for r in range(0, big_h, s) for c in range(0, big_w, s)]
    tiles = np.stack([normalize_holograms(data[:, r:r + s, c:c + s]) for r, c in corners])
    tiles = tiles.astype(model.config.dtype)
    out = np.empty((2, big_h, big_w))
    for i in range(0, len(tiles), batch):
        pred = fin_forward(Tensor(tiles[i:i + batch]), model).value
        for j, (r, c) in enumerate(corners[i:i + batch]):
            out[:, r:r + s, c:c + s] = pred[j]
    out = out[:, :h, :w]
    return ComplexField(out[0] + 1j * out[1], stack.pixel_pitch, stack.wavelength)


def config_to_json(cfg: FinConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
