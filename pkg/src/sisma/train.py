"""Training loop: AdamW on the flow-matching loss with EMA, checkpoints and line logs."""

import copy
import hashlib
import json
import math
import time
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import Checkpoint, load_checkpoint, optimizer_entries, restore_optimizer, save_checkpoint
from .errors import ConfigError, NumericError
from .flow_match import fm_loss, make_flow_batch
from .model import build_model, ema_update, preset
from .model import sample as sample_model

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOG_FORMATS = ("kv", "json")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "desk"
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    total_iters: int = 20000
    ema_decay: float = 0.9999
    checkpoint_every: int = 1000
    sample_every: int = 2000
    seed: int = 0
    log_format: str = "kv"
    grad_clip: float = 1.0
    dtype: str = "float32"
    data_dir: str = ""
    data_seed: int = 0
    n_samples: int = 5000
    sample_grid: int = 8
    sample_steps: int = 100
    out_dir: str = "runs/desk"

    def violations(self):
        out = []
        if not self.lr > 0:
            out.append(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.ema_decay < 1:
            out.append(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out.append(f"betas must be two values in [0, 1), got {self.betas}")
        for name in ("total_iters", "batch_size", "checkpoint_every", "n_samples", "sample_steps"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("sample_every", "sample_grid"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.grad_clip > 0:
            out.append(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.dtype not in DTYPES:
            out.append(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.log_format not in LOG_FORMATS:
            out.append(f"log_format must be one of {LOG_FORMATS}, got {self.log_format!r}")
        try:
            preset(self.model)
        except ValueError as exc:
            out.append(str(exc))
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))
        return self

    @property
    def model_config(self):
        return preset(self.model)

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def fingerprint(self):
        """Identity of the weights' layout: model architecture plus working dtype."""
        blob = json.dumps({"model": asdict(self.model_config), "dtype": self.dtype}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


TRAIN_PRESETS = {
    "desk": TrainConfig(),
    "full": TrainConfig(model="full", lr=0.004, weight_decay=0.0, batch_size=8, total_iters=150000,
                         ema_decay=0.9999, checkpoint_every=10000, sample_every=10000, out_dir="runs/full"),
}


def _coerce(name, kind, raw):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.strip("()[]").split(","))
        return raw.strip("\"'")
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text, base=None):
    """Parse ``key = value`` lines onto ``base`` (default: the desk preset).

    Blank lines and ``#`` comments are ignored. A ``preset`` key selects the
    starting point and must come first.
    """
    cfg = base or TRAIN_PRESETS["desk"]
    hints = typing.get_type_hints(TrainConfig)
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if updates:
                raise ConfigError(f"line {lineno}: 'preset' must precede other keys")
            if raw not in TRAIN_PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}; choose from {sorted(TRAIN_PRESETS)}")
            cfg = TRAIN_PRESETS[raw]
            continue
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(key, hints[key], raw)
    return replace(cfg, **updates).validate()


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def format_config(cfg):
    return "\n".join(f"{f.name} = {_show(getattr(cfg, f.name))}" for f in fields(cfg))


def _show(v):
    return ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)


def step_generator(seed, step):
    """Independent torch generator for the noise and timesteps of one step."""
    state = np.random.SeedSequence([seed, step, 0xF10]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def make_optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


def make_ema(model):
    ema = copy.deepcopy(model)
    ema.requires_grad_(False)
    return ema


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    clipped: bool
    zero_grad_groups: list
    t: torch.Tensor


def _group_norms(model):
    return {n: (float(p.grad.norm()) if p.grad is not None else 0.0) for n, p in model.named_parameters()}


def train_step(model, ema, optimizer, batch, generator, cfg, step=0):
    """One AdamW step on the flow-matching loss followed by the EMA update.

    ``batch`` is (images, one-hot masks); eps and t come from ``generator``.
    """
    images, masks = batch
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(images, dtype=dtype)
    if model.codec is not None:
        x = model.codec.encode(x)
    fb = make_flow_batch(x, generator)
    model.train()
    v = model(fb.z, fb.t, torch.as_tensor(masks))
    loss = fm_loss(v, fb.x, fb.eps)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} at step {step}", where=f"step {step}",
                           diagnostics={"step": step, "loss": loss.item(), "t": fb.t.tolist()})
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
    if not math.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm at step {step}", where=f"step {step}",
                           diagnostics={"step": step, "loss": loss.item(), "t": fb.t.tolist(),
                                        "grad_norms": _group_norms(model)})
    zero = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.any()]
    optimizer.step()
    ema_update(dict(ema.named_parameters()), dict(model.named_parameters()), cfg.ema_decay)
    return StepResult(loss.item(), grad_norm, grad_norm > cfg.grad_clip, zero, fb.t)


def format_record(record, fmt="kv"):
    if fmt == "json":
        return json.dumps(record)
    return " ".join(f"{k}={repr(v) if isinstance(v, float) else v}" for k, v in record.items())


def parse_record(line):
    """Inverse of :func:`format_record` for either format."""
    line = line.strip()
    if line.startswith("{"):
        return json.loads(line)
    out = {}
    for pair in line.split():
        k, v = pair.split("=", 1)
        for kind in (int, float):
            try:
                out[k] = kind(v)
                break
            except ValueError:
                continue
        else:
            out[k] = v
    return out


def load_training_data(cfg):
    """(training dataset, held-out masks for sample grids)."""
    mc = cfg.model_config
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        dataset, _ = data_mod.load_pair_folder(root / "images", root / "masks", mc.mask_classes, mc.image_size)
        held_out = dataset.masks[:cfg.sample_grid]
        return dataset, held_out
    samples = data_mod.make_shapes_dataset(cfg.n_samples, mc.image_size, cfg.data_seed)
    held_out = held_out_shapes(cfg, cfg.sample_grid)
    return data_mod.PairDataset.from_samples(samples), held_out


def held_out_shapes(cfg, count):
    """Masks from generator indices past the training range (never trained on)."""
    mc = cfg.model_config
    if count == 0:
        return np.zeros((0, mc.image_size, mc.image_size), np.int64)
    samples = [data_mod.make_shapes_sample(mc.image_size, cfg.data_seed, cfg.n_samples + i) for i in range(count)]
    return np.stack([s.mask for s in samples])


def sample_images(model, masks, seeds, steps):
    """Sampler used for the periodic grids (a seam tests can instrument)."""
    return sample_model(model, masks, seeds, steps=steps)


def write_sample_grid(path, masks, images):
    """Two-row PNG: coloured masks on top, samples underneath."""
    from PIL import Image

    palette = np.asarray(data_mod._palette(256), dtype=np.uint8).reshape(256, 3)
    top = np.concatenate([palette[m] for m in np.asarray(masks)], axis=1)
    bottom = np.concatenate([data_mod.to_uint8(im) for im in np.asarray(images)], axis=1)
    Image.fromarray(np.concatenate([top, bottom], axis=0), mode="RGB").save(path)


def make_checkpoint(model, ema, optimizer, step, cfg):
    return Checkpoint(
        model={k: v for k, v in model.state_dict().items()},
        ema={k: v for k, v in ema.state_dict().items()},
        optimizer=optimizer_entries(optimizer, model),
        step=step,
        fingerprint=cfg.fingerprint(),
        config=asdict(cfg.model_config),
        meta={"train": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}},
    )


def restore(ckpt, model, ema, optimizer):
    model.load_state_dict(ckpt.model)
    ema.load_state_dict(ckpt.ema)
    restore_optimizer(optimizer, model, ckpt.optimizer)
    return ckpt.step


def run_training(cfg, resume=None, echo=None):
    """Train for ``cfg.total_iters`` steps; returns the final checkpoint path.

    Every step appends one log record to ``<out_dir>/train.log`` (and passes
    it to ``echo`` if given). With ``resume`` the run continues from that
    checkpoint's step; data order and noise depend only on (seed, step), so a
    resumed run retraces the uninterrupted one.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = cfg.torch_dtype
    start = 0
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume, expect_fingerprint=cfg.fingerprint())
    dataset, held_out = load_training_data(cfg)
    model = build_model(cfg.model_config, seed=cfg.seed, dtype=dtype)
    ema = make_ema(model)
    optimizer = make_optimizer(model, cfg)
    if ckpt is not None:
        start = restore(ckpt, model, ema, optimizer)
    log_path = out / "train.log"
    clock = time.perf_counter()
    with open(log_path, "a" if start else "w", encoding="utf-8") as log:
        for step in range(start, cfg.total_iters):
            idx = data_mod.batch_indices(len(dataset), cfg.batch_size, cfg.seed, step)
            batch = (dataset.images[idx], data_mod.one_hot(dataset.masks[idx], dataset.num_classes))
            try:
                result = train_step(model, ema, optimizer, batch, step_generator(cfg.seed, step), cfg, step)
            except NumericError as exc:
                diag = out / f"diagnostics_step{step + 1}.json"
                diag.write_text(json.dumps(exc.diagnostics, indent=2))
                exc.diagnostics_path = str(diag)
                raise
            done = step + 1
            record = {"step": done, "loss": result.loss, "grad_norm": result.grad_norm,
                      "clipped": int(result.clipped), "wallclock": round(time.perf_counter() - clock, 4)}
            if step == start and result.zero_grad_groups:
                record["zero_grad_groups"] = len(result.zero_grad_groups)
            line = format_record(record, cfg.log_format)
            log.write(line + "\n")
            log.flush()
            if echo is not None:
                echo(line)
            if done % cfg.checkpoint_every == 0 and done != cfg.total_iters:
                save_checkpoint(out / f"step_{done:07d}.ckpt", make_checkpoint(model, ema, optimizer, done, cfg))
            if cfg.sample_every and cfg.sample_grid and done % cfg.sample_every == 0:
                (out / "samples").mkdir(exist_ok=True)
                ema.eval()
                images = sample_images(ema, held_out, list(range(len(held_out))), cfg.sample_steps)
                write_sample_grid(out / "samples" / f"step_{done:07d}.png", held_out, images.numpy())
    final = out / "final.ckpt"
    save_checkpoint(final, make_checkpoint(model, ema, optimizer, max(start, cfg.total_iters), cfg))
    return final
