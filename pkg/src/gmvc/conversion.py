"""Latent-arithmetic conversion.

A recording is converted by detecting which mixture component each
chunk's latent came from, forming the conversion vector
dmu_n = mu_target - mu_source_n, and decoding z_n + lambda*dmu_n on the
requested stream while the other stream passes through untouched.
Detection is either per chunk (nearest prior mean under the shared
fixed variance) or per recording (the sequence-level classifier).
Everything operates on posterior means: the forward pass must come from
infer mode, so z is exactly mu.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from gmvc.corpus import write_mel_cache
from gmvc.errors import InvalidInput, ShapeError, StrategyUnavailable
from gmvc.features import MEL_BANDS
from gmvc.model import (
    SINGER,
    TECHNIQUE,
    ForwardOut,
    MixturePrior,
    Model,
    ModelConfig,
)

STRATEGY_CHUNK = "c-chunk"
STRATEGY_SEQUENCE = "c-sequence"
STRATEGIES = (STRATEGY_CHUNK, STRATEGY_SEQUENCE)


@dataclass
class ConversionRequest:
    attribute: str
    target: int
    strategy: str = STRATEGY_CHUNK
    lam: float = 1.0  # morph scale; 0 = reconstruction, 1 = full conversion

    def validate(self, cfg: ModelConfig) -> "ConversionRequest":
        if self.attribute not in (SINGER, TECHNIQUE):
            raise InvalidInput(f"unknown attribute {self.attribute!r}")
        self.strategy = self.strategy.lower()
        if self.strategy not in STRATEGIES:
            raise InvalidInput(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        k = cfg.classes(self.attribute)
        if not 0 <= self.target < k:
            raise InvalidInput(
                f"target {self.target} out of range for {self.attribute} (K={k})"
            )
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInput(f"lambda must be in [0, 1], got {self.lam}")
        return self


def source_component_chunk(z_n: np.ndarray, prior: MixturePrior) -> int:
    """Most likely component for one chunk latent.

    With every component sharing the same isotropic variance, the
    Gaussian-likelihood argmax reduces to the nearest mean; argmin
    breaks ties at the lowest index.
    """
    return int(source_components_chunk(np.asarray(z_n)[None], prior)[0])


def source_components_chunk(zs: np.ndarray, prior: MixturePrior) -> np.ndarray:
    zs = np.asarray(zs, dtype=np.float64)
    means = prior.means.data.astype(np.float64)
    if zs.ndim != 2 or zs.shape[1] != means.shape[1]:
        raise ShapeError(f"latents {zs.shape} vs prior means {means.shape}")
    d2 = ((zs[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def source_component_sequence(fwd: ForwardOut, attribute: str) -> int:
    """Recording-level source class from the sequence classifier logits."""
    if attribute == SINGER:
        logits = fwd.class_logits_s.data
    elif attribute == TECHNIQUE:
        logits = fwd.class_logits_t.data
    else:
        raise InvalidInput(f"unknown attribute {attribute!r}")
    if logits.ndim == 2:
        if logits.shape[0] != 1:
            raise ShapeError("sequence detection works on one recording at a time")
        logits = logits[0]
    return int(np.argmax(logits))  # ties -> lowest index


@dataclass
class ConversionResult:
    mel: np.ndarray          # (N, 43, 96) refined converted chunks
    z_singer: np.ndarray     # (N, D) singer latents after the shift
    z_technique: np.ndarray  # (N, D) technique latents after the shift
    detected: dict           # attribute -> (N,) source component per chunk
    requests: list


def _stream_weight(cfg: ModelConfig, attribute: str) -> float:
    return cfg.beta if attribute == SINGER else cfg.gamma


def _require_infer(fwd: ForwardOut) -> int:
    if fwd.z_s.z is not fwd.singer_post.mu or fwd.z_t.z is not fwd.tech_post.mu:
        raise InvalidInput("conversion needs an infer-mode forward (z must be mu)")
    b = fwd.z_s.z.data.shape[0]
    if b != 1:
        raise ShapeError(f"conversion works on one recording at a time, got batch {b}")
    return fwd.z_s.z.data.shape[1]


def convert(model: Model, fwd: ForwardOut, requests) -> ConversionResult:
    """Shift the requested stream(s) and decode once.

    Accepts a single request or a list touching distinct attributes
    (cross-attribute conversion applies every shift before decoding).
    """
    reqs = list(requests) if isinstance(requests, (list, tuple)) else [requests]
    if not reqs:
        raise InvalidInput("no conversion requests")
    seen = set()
    for req in reqs:
        req.validate(model.cfg)
        if req.attribute in seen:
            raise InvalidInput(f"duplicate conversion request for {req.attribute!r}")
        seen.add(req.attribute)
        if req.strategy == STRATEGY_SEQUENCE and _stream_weight(model.cfg, req.attribute) == 0.0:
            raise StrategyUnavailable(
                f"{req.attribute} classifier carries no discriminative weight "
                f"in this model; {STRATEGY_SEQUENCE} needs a trained classifier"
            )

    n = _require_infer(fwd)
    z = {
        SINGER: fwd.z_s.z.data[0],
        TECHNIQUE: fwd.z_t.z.data[0],
    }
    detected: dict = {}
    for req in reqs:
        prior = model.prior(req.attribute)
        if req.strategy == STRATEGY_CHUNK:
            comps = source_components_chunk(z[req.attribute], prior)
        else:
            comps = np.full(n, source_component_sequence(fwd, req.attribute))
        detected[req.attribute] = comps
        means = prior.means.data
        delta = req.lam * (means[req.target][None, :] - means[comps])
        if np.any(delta != 0.0):  # identity/lambda=0 keeps z bit-exact
            z[req.attribute] = z[req.attribute] + delta
    mel = model.decode_latents(z[SINGER][None], z[TECHNIQUE][None])[0]
    return ConversionResult(
        mel=mel,
        z_singer=np.asarray(z[SINGER]),
        z_technique=np.asarray(z[TECHNIQUE]),
        detected=detected,
        requests=reqs,
    )


def reconstruct(model: Model, fwd: ForwardOut) -> np.ndarray:
    """Decode the unshifted posterior means; the lambda=0 baseline."""
    _require_infer(fwd)
    return model.decode_latents(fwd.z_s.z.data, fwd.z_t.z.data)[0]


def morph_series(model: Model, fwd: ForwardOut, req: ConversionRequest, steps: int):
    """Conversions at lambda = 0, 1/(steps-1), ..., 1."""
    if steps < 2:
        raise InvalidInput(f"morph needs at least 2 steps, got {steps}")
    return [
        convert(model, fwd, replace(req, lam=i / (steps - 1))) for i in range(steps)
    ]


def sidecar_text(result: ConversionResult) -> str:
    groups = []
    for req in result.requests:
        comps = result.detected[req.attribute]
        groups.append(
            "\n".join(
                [
                    f"attribute={req.attribute}",
                    f"strategy={req.strategy}",
                    f"target={req.target}",
                    f"lambda={req.lam!r}",
                    "source_components=" + ",".join(str(int(c)) for c in comps),
                ]
            )
        )
    return "\n\n".join(groups) + "\n"


def parse_sidecar(text: str) -> list:
    """Sidecar groups back as dicts (blank-line separated key=value)."""
    groups = []
    for block in text.split("\n\n"):
        block = block.strip()
        if not block:
            continue
        rec: dict = {}
        for line in block.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidInput(f"bad sidecar line {line!r}")
            rec[key.strip()] = value.strip()
        for key in ("attribute", "strategy", "target", "lambda", "source_components"):
            if key not in rec:
                raise InvalidInput(f"sidecar group missing {key!r}")
        rec["target"] = int(rec["target"])
        rec["lambda"] = float(rec["lambda"])
        rec["source_components"] = [
            int(v) for v in rec["source_components"].split(",") if v
        ]
        groups.append(rec)
    return groups


def write_conversion(path: str, result: ConversionResult) -> str:
    """Mel cache plus `<path>.meta` sidecar; returns the sidecar path."""
    frames = np.asarray(result.mel, dtype=np.float32).reshape(-1, MEL_BANDS)
    write_mel_cache(path, frames)
    meta_path = path + ".meta"
    tmp = meta_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(sidecar_text(result))
    os.replace(tmp, meta_path)
    return meta_path


def read_sidecar(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_sidecar(fh.read())
