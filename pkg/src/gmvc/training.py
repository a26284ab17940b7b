"""Training loop: run configuration, variant presets, bucketed batching,
checkpointing, and bit-identical resume.

Determinism contract: every random draw is indexed, never streamed.
Parameter init hashes the parameter name, the per-epoch shuffle is keyed
by (seed, epoch) and the latent noise by (seed, step), so resuming from
a checkpoint at step k replays the exact batch order and noise of an
uninterrupted run.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from gmvc.corpus import Manifest, ManifestEntry, load_mel
from gmvc.errors import InvalidInput, InvalidManifest
from gmvc.features import chunk_array
from gmvc.model import SINGER, TECHNIQUE, Model, ModelConfig, build_model
from gmvc.nn import tensor as T
from gmvc.nn.checkpoint import load_checkpoint, save_checkpoint
from gmvc.nn.optim import Adam
from gmvc.objective import LOG_HEADER, LossBreakdown, total_objective

# variant -> (beta, gamma, use_attention)
VARIANTS = {
    "M1": (0.0, 0.0, False),
    "M2": (1.0, 1.0, False),
    "M3": (1.0, 1.0, True),
}

LATEST_CKPT = "ckpt_latest.gmvc"
BEST_CKPT = "ckpt_best.gmvc"
LOG_NAME = "train_log.csv"

# Sub-stream tags; three-element seed sequences so these never collide
# with parameter-init ([seed, crc32(name)]) or corpus ([seed, index]) streams.
_BATCH_STREAM = 0
_EPS_STREAM = 1


def variant_model(variant: str, **overrides) -> ModelConfig:
    """ModelConfig whose loss weights and attention match the variant."""
    if variant not in VARIANTS:
        raise InvalidInput(f"unknown variant {variant!r}")
    beta, gamma, att = VARIANTS[variant]
    return ModelConfig(beta=beta, gamma=gamma, use_attention=att, **overrides)


@dataclass
class TrainConfig:
    variant: str
    model: ModelConfig
    batch_size: int = 128
    lr: float = 1e-4
    max_steps: int = 5000
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = ""

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise InvalidInput(f"unknown variant {self.variant!r}")
        self.model.validate()
        beta, gamma, att = VARIANTS[self.variant]
        if (self.model.beta, self.model.gamma, self.model.use_attention) != (beta, gamma, att):
            raise InvalidInput(
                f"variant {self.variant} requires beta={beta}, gamma={gamma}, "
                f"use_attention={att}; got beta={self.model.beta}, "
                f"gamma={self.model.gamma}, use_attention={self.model.use_attention}"
            )
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise InvalidInput(f"lr must be positive, got {self.lr}")
        if self.max_steps < 1:
            raise InvalidInput(f"max_steps must be >= 1, got {self.max_steps}")
        if self.checkpoint_every < 1:
            raise InvalidInput(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        return self


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise InvalidInput(f"expected true/false, got {v!r}")


def _parse_int(v: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise InvalidInput(f"expected an integer, got {v!r}") from None


def _parse_float(v: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise InvalidInput(f"expected a number, got {v!r}") from None


_PARSERS = {
    "variant": str,
    "batch_size": _parse_int,
    "lr": _parse_float,
    "max_steps": _parse_int,
    "seed": _parse_int,
    "latent_dim": _parse_int,
    "k_singers": _parse_int,
    "k_techniques": _parse_int,
    "beta": _parse_float,
    "gamma": _parse_float,
    "use_attention": _parse_bool,
    "checkpoint_every": _parse_int,
    "out_dir": str,
    # width overrides for desk-scale and gradcheck configs
    "conv_channels": _parse_int,
    "rnn_hidden": _parse_int,
    "bottleneck": _parse_int,
}


def parse_config(text: str) -> TrainConfig:
    """Parse a key=value run config; '#' starts a comment line.

    beta/gamma/use_attention default from the variant; stating values
    that contradict the variant is an error, not an override.
    """
    kv: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidInput(f"config line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key not in _PARSERS:
            raise InvalidInput(f"config line {lineno}: unknown key {key!r}")
        if key in kv:
            raise InvalidInput(f"config line {lineno}: duplicate key {key!r}")
        try:
            kv[key] = _PARSERS[key](value.strip())
        except InvalidInput as exc:
            raise InvalidInput(f"config line {lineno}: {key}: {exc}") from None
    if "variant" not in kv:
        raise InvalidInput("config missing required key 'variant'")
    variant = kv.pop("variant")
    if variant not in VARIANTS:
        raise InvalidInput(f"unknown variant {variant!r}")
    beta, gamma, att = VARIANTS[variant]
    defaults = ModelConfig()
    model = ModelConfig(
        latent_dim=kv.pop("latent_dim", defaults.latent_dim),
        singer_classes=kv.pop("k_singers", defaults.singer_classes),
        technique_classes=kv.pop("k_techniques", defaults.technique_classes),
        beta=kv.pop("beta", beta),
        gamma=kv.pop("gamma", gamma),
        use_attention=kv.pop("use_attention", att),
        conv_channels=kv.pop("conv_channels", defaults.conv_channels),
        rnn_hidden=kv.pop("rnn_hidden", defaults.rnn_hidden),
        bottleneck=kv.pop("bottleneck", defaults.bottleneck),
    )
    cfg = TrainConfig(variant=variant, model=model)
    cfg.batch_size = kv.pop("batch_size", cfg.batch_size)
    cfg.lr = kv.pop("lr", cfg.lr)
    cfg.max_steps = kv.pop("max_steps", cfg.max_steps)
    cfg.seed = kv.pop("seed", cfg.seed)
    cfg.checkpoint_every = kv.pop("checkpoint_every", cfg.checkpoint_every)
    cfg.out_dir = kv.pop("out_dir", cfg.out_dir)
    return cfg.validate()


def read_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def write_config(path: str, cfg: TrainConfig) -> None:
    cfg.validate()
    m = cfg.model
    lines = [
        f"variant={cfg.variant}",
        f"batch_size={cfg.batch_size}",
        f"lr={cfg.lr!r}",
        f"max_steps={cfg.max_steps}",
        f"seed={cfg.seed}",
        f"latent_dim={m.latent_dim}",
        f"k_singers={m.singer_classes}",
        f"k_techniques={m.technique_classes}",
        f"beta={m.beta!r}",
        f"gamma={m.gamma!r}",
        f"use_attention={'true' if m.use_attention else 'false'}",
        f"checkpoint_every={cfg.checkpoint_every}",
        f"out_dir={cfg.out_dir}",
        f"conv_channels={m.conv_channels}",
        f"rnn_hidden={m.rnn_hidden}",
        f"bottleneck={m.bottleneck}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def chunk_counts(manifest: Manifest, entries=None) -> dict:
    """id -> chunk count N, read from the mel caches."""
    out = {}
    for e in entries if entries is not None else manifest.entries:
        path = manifest.resolve(e)
        if not os.path.exists(path):
            raise InvalidInput(
                f"missing mel cache {path!r} for recording {e.meta.id!r}; "
                "run prepare (or synth) first"
            )
        out[e.meta.id] = chunk_array(load_mel(manifest, e)).shape[0]
    return out


def epoch_batches(
    entries: list, counts: dict, batch_size: int, seed: int, epoch: int
) -> list:
    """One epoch: shuffle within equal-N buckets, slice, shuffle slices.

    Every recording appears exactly once; every batch is rectangular.
    """
    if batch_size < 1:
        raise InvalidInput(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _BATCH_STREAM, epoch]))
    buckets: dict = {}
    for i, e in enumerate(entries):
        buckets.setdefault(counts[e.meta.id], []).append(i)
    batches = []
    for n in sorted(buckets):
        idx = np.array(buckets[n])
        rng.shuffle(idx)
        for k in range(0, len(idx), batch_size):
            batches.append([entries[j] for j in idx[k : k + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[j] for j in order]


def make_batches(manifest: Manifest, batch_size: int, seed: int, counts=None):
    """Endless iterator over epoch_batches; epoch index advances the shuffle."""
    if counts is None:
        counts = chunk_counts(manifest)
    epoch = 0
    while True:
        yield from epoch_batches(manifest.entries, counts, batch_size, seed, epoch)
        epoch += 1


def _eps_for_step(seed: int, step: int, b: int, n: int, d: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, _EPS_STREAM, step]))
    return (
        rng.standard_normal((b, n, d), dtype=np.float32),
        rng.standard_normal((b, n, d), dtype=np.float32),
    )


def format_log_row(step: int, bd: LossBreakdown) -> str:
    return ",".join([str(step)] + [repr(v) for v in bd.as_row()])


def read_log(path: str) -> list:
    """Training log rows as dicts keyed by LOG_HEADER columns."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or lines[0] != ",".join(LOG_HEADER):
        raise InvalidInput(f"{path}: not a training log")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(LOG_HEADER):
            raise InvalidInput(f"{path}: bad log row {ln!r}")
        row = {"step": int(parts[0])}
        for key, val in zip(LOG_HEADER[1:], parts[1:]):
            row[key] = float(val)
        rows.append(row)
    return rows


def _trim_log(path: str, keep_steps: int) -> None:
    """Rewrite the log with header + rows up to keep_steps (fresh header if none)."""
    kept = []
    if keep_steps > 0 and os.path.exists(path):
        kept = [r for r in read_log(path) if r["step"] <= keep_steps]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_HEADER) + "\n")
        for r in kept:
            vals = [repr(r[k]) for k in LOG_HEADER[1:]]
            fh.write(",".join([str(r["step"])] + vals) + "\n")


@dataclass
class TrainState:
    cfg: TrainConfig
    model: Model
    optimizer: Adam
    step: int
    log_path: str
    latest_path: str
    best_path: str
    last: LossBreakdown | None = field(default=None, repr=False)

    @property
    def store(self):
        return self.model.store


def train(cfg: TrainConfig, manifest: Manifest, resume_from: str | None = None) -> TrainState:
    """Run the optimization loop over the manifest's train split.

    Requires mel caches on disk for every entry (feature extraction is
    not done here). Logs one CSV row per step, checkpoints every
    cfg.checkpoint_every steps and at the end. A non-finite loss aborts
    before the parameter update; checkpoints already written stay put.
    """
    cfg.validate()
    if not cfg.out_dir:
        raise InvalidInput("train: cfg.out_dir must be set")
    os.makedirs(cfg.out_dir, exist_ok=True)

    entries = manifest.subset("train")
    if not entries:
        raise InvalidManifest("manifest has no train-split entries")
    tman = Manifest(entries, manifest.root)
    data = {}
    for e in tman.entries:
        path = tman.resolve(e)
        if not os.path.exists(path):
            raise InvalidInput(
                f"missing mel cache {path!r} for recording {e.meta.id!r}; "
                "run prepare (or synth) first"
            )
        data[e.meta.id] = chunk_array(load_mel(tman, e)).astype(np.float32)
    counts = {rid: arr.shape[0] for rid, arr in data.items()}

    model = build_model(cfg.model, seed=cfg.seed)
    optim = Adam(model.store, lr=cfg.lr)
    start = 0
    if resume_from is not None:
        start = load_checkpoint(resume_from, model.store, optim)
        if start >= cfg.max_steps:
            raise InvalidInput(
                f"checkpoint is at step {start}, max_steps is {cfg.max_steps}"
            )

    log_path = os.path.join(cfg.out_dir, LOG_NAME)
    latest_path = os.path.join(cfg.out_dir, LATEST_CKPT)
    best_path = os.path.join(cfg.out_dir, BEST_CKPT)
    _trim_log(log_path, start)
    best_total = math.inf
    if start > 0:
        # only checkpoint-boundary rows ever competed for ckpt_best
        boundary = [
            r["total"]
            for r in read_log(log_path)
            if r["step"] % cfg.checkpoint_every == 0 or r["step"] == start
        ]
        if boundary:
            best_total = min(boundary)

    priors = (model.prior(SINGER), model.prior(TECHNIQUE))
    batches = make_batches(tman, cfg.batch_size, cfg.seed, counts)
    for _ in range(start):
        next(batches)

    state = TrainState(
        cfg=cfg,
        model=model,
        optimizer=optim,
        step=start,
        log_path=log_path,
        latest_path=latest_path,
        best_path=best_path,
    )
    d = cfg.model.latent_dim
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start + 1, cfg.max_steps + 1):
            batch = next(batches)
            x = np.stack([data[e.meta.id] for e in batch])
            y_s = np.array([e.meta.singer for e in batch])
            y_t = np.array([e.meta.technique for e in batch])
            eps = _eps_for_step(cfg.seed, step, x.shape[0], x.shape[1], d)
            fwd = model.forward(x, mode="train", eps_override=eps)
            bd = total_objective(fwd, x, (y_s, y_t), cfg.model, priors)
            T.backward(bd.node)
            optim.step()
            log.write(format_log_row(step, bd) + "\n")
            state.step = step
            state.last = bd
            if step % cfg.checkpoint_every == 0 or step == cfg.max_steps:
                log.flush()
                save_checkpoint(latest_path, model.store, optim, step)
                if bd.total < best_total:
                    best_total = bd.total
                    save_checkpoint(best_path, model.store, optim, step)
    return state
