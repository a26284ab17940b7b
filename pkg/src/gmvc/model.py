"""The conversion model: shared feature extractor, two variational
encoders with Gaussian-mixture priors, a joint decoder with a
refinement stack, per-stream attention pooling, and two sequence-level
attribute classifiers.

All sequence-valued results are batched: a recording of N chunks moves
through the network as ``(B, N, ...)`` arrays, with B=1 for the
single-recording entry point. Parameters live in a ``ParamStore`` under
the namespaces ``fen.*``, ``enc_s.*``, ``enc_t.*``, ``dec.*``,
``refine.*``, ``attn_s.*``, ``attn_t.*``, ``cls_s.*``, ``cls_t.*``,
``prior_s.means``, ``prior_t.means``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gmvc.errors import InvalidInput, ShapeError
from gmvc.features import CHUNK_FRAMES, MEL_BANDS
from gmvc.nn import tensor as T
from gmvc.nn.layers import BLSTM, BatchNorm, Conv1d, INFER_CTX, LayerCtx, Linear
from gmvc.nn.params import ParamStore
from gmvc.nn.tensor import Tensor

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 2.0

SINGER = "singer"
TECHNIQUE = "technique"
_SUFFIX = {SINGER: "s", TECHNIQUE: "t"}


@dataclass
class ModelConfig:
    latent_dim: int = 16
    singer_classes: int = 20
    technique_classes: int = 6
    beta: float = 1.0
    gamma: float = 1.0
    use_attention: bool = True
    fixed_variance: float = math.exp(-2.0)
    # width knobs; defaults follow the full-scale architecture, tests
    # shrink them to keep CPU runs tractable
    conv_channels: int = 512
    rnn_hidden: int = 256
    bottleneck: int = 256

    def validate(self) -> "ModelConfig":
        if self.latent_dim < 1:
            raise InvalidInput("latent_dim must be >= 1")
        if self.singer_classes < 1 or self.technique_classes < 1:
            raise InvalidInput("class counts must be >= 1")
        if self.beta < 0 or self.gamma < 0:
            raise InvalidInput("beta and gamma must be >= 0")
        if self.fixed_variance <= 0:
            raise InvalidInput("fixed_variance must be positive")
        if min(self.conv_channels, self.rnn_hidden, self.bottleneck) < 1:
            raise InvalidInput("width parameters must be >= 1")
        return self

    def classes(self, attribute: str) -> int:
        return {SINGER: self.singer_classes, TECHNIQUE: self.technique_classes}[
            attribute
        ]


@dataclass
class MixturePrior:
    """K learnable component means sharing one fixed scalar variance."""

    means: Tensor
    variance: float

    @property
    def n_components(self) -> int:
        return self.means.data.shape[0]


@dataclass
class GaussianSeq:
    mu: Tensor        # (B, N, D)
    log_sigma: Tensor  # (B, N, D)


@dataclass
class LatentSeq:
    z: Tensor  # (B, N, D)


@dataclass
class ForwardOut:
    singer_post: GaussianSeq
    tech_post: GaussianSeq
    z_s: LatentSeq
    z_t: LatentSeq
    recon: Tensor      # (B, N, 43, 96) decoder output
    refined: Tensor    # (B, N, 43, 96) after refinement stack
    alpha_s: Tensor    # (B, N)
    alpha_t: Tensor    # (B, N)
    class_logits_s: Tensor  # (B, K_s)
    class_logits_t: Tensor  # (B, K_t)


@dataclass
class _Stream:
    blstm: BLSTM
    mu_head: Linear
    log_sigma_head: Linear


class FEN:
    """Shared convolutional front end: (M, 43, 96) chunks -> (M, bottleneck)."""

    def __init__(self, store: ParamStore, prefix: str, channels: int, bottleneck: int):
        self.conv1 = Conv1d(store, f"{prefix}.conv1", MEL_BANDS, channels)
        self.bn1 = BatchNorm(store, f"{prefix}.bn1", channels)
        self.conv2 = Conv1d(store, f"{prefix}.conv2", channels, channels)
        self.bn2 = BatchNorm(store, f"{prefix}.bn2", channels)
        self.fc1 = Linear(store, f"{prefix}.fc1", channels, channels)
        self.bn3 = BatchNorm(store, f"{prefix}.bn3", channels)
        self.fc2 = Linear(store, f"{prefix}.fc2", channels, bottleneck)
        self.bn4 = BatchNorm(store, f"{prefix}.bn4", bottleneck)

    def __call__(self, chunks: Tensor, ctx: LayerCtx) -> Tensor:
        if chunks.data.ndim != 3 or chunks.data.shape[1:] != (CHUNK_FRAMES, MEL_BANDS):
            raise ShapeError(f"fen: expected (M, 43, 96), got {chunks.data.shape}")
        x = T.relu(self.bn1(self.conv1(chunks), ctx))
        x = T.relu(self.bn2(self.conv2(x), ctx))
        x = T.tmean(x, axis=1)  # pool over the 43 frames
        x = T.relu(self.bn3(self.fc1(x), ctx))
        x = T.relu(self.bn4(self.fc2(x), ctx))
        return x


class Model:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        cfg.validate()
        self.cfg = cfg
        self.store = store
        c = cfg.conv_channels
        bt = cfg.bottleneck
        h = cfg.rnn_hidden
        d = cfg.latent_dim

        self._fen = FEN(store, "fen", c, bt)

        self.enc = {}
        for attr in (SINGER, TECHNIQUE):
            s = _SUFFIX[attr]
            self.enc[attr] = _Stream(
                BLSTM(store, f"enc_{s}.blstm", bt, h),
                Linear(store, f"enc_{s}.mu", 2 * h, d),
                Linear(store, f"enc_{s}.log_sigma", 2 * h, d),
            )

        self.dec_blstm = BLSTM(store, "dec.blstm", 2 * d, h)
        self.dec_fc = Linear(store, "dec.fc", 2 * h, c)
        self.dec_bn1 = BatchNorm(store, "dec.bn1", c)
        self.dec_conv1 = Conv1d(store, "dec.conv1", c, c)
        self.dec_bn2 = BatchNorm(store, "dec.bn2", c)
        self.dec_conv2 = Conv1d(store, "dec.conv2", c, MEL_BANDS)

        self.refine_conv1 = Conv1d(store, "refine.conv1", MEL_BANDS, c)
        self.refine_conv2 = Conv1d(store, "refine.conv2", c, c)
        self.refine_conv3 = Conv1d(store, "refine.conv3", c, MEL_BANDS)

        self.attn = {a: Linear(store, f"attn_{_SUFFIX[a]}.f", d, 1) for a in self.enc}
        self.cls = {
            a: Linear(store, f"cls_{_SUFFIX[a]}.fc", d, cfg.classes(a))
            for a in self.enc
        }
        for attr in (SINGER, TECHNIQUE):
            store.add(
                f"prior_{_SUFFIX[attr]}.means",
                (cfg.classes(attr), d),
                init="xavier",
                fan=(d, d),
            )

    # ------------------------------------------------------------------
    def prior(self, attribute: str) -> MixturePrior:
        return MixturePrior(
            self.store[f"prior_{_SUFFIX[attribute]}.means"], self.cfg.fixed_variance
        )

    def fen(self, chunks: Tensor, ctx: LayerCtx) -> Tensor:
        """(M, 43, 96) chunks -> (M, bottleneck) features."""
        return self._fen(chunks, ctx)

    def encode(
        self, feats: Tensor, attribute: str, ctx: LayerCtx, eps=None
    ) -> tuple[GaussianSeq, LatentSeq]:
        """Per-chunk posteriors and reparameterized samples for one stream.

        ``eps`` is the standard-normal draw; ``None`` means posterior
        mean (the inference setting).
        """
        b, n, _ = feats.data.shape
        d = self.cfg.latent_dim
        stream = self.enc[attribute]
        hs = stream.blstm(feats)  # (B, N, 2H)
        flat = T.reshape(hs, (b * n, 2 * self.cfg.rnn_hidden))
        mu = T.reshape(stream.mu_head(flat), (b, n, d))
        log_sigma = T.clamp(
            T.reshape(stream.log_sigma_head(flat), (b, n, d)),
            LOG_SIGMA_MIN,
            LOG_SIGMA_MAX,
        )
        if eps is None:
            z = mu
        else:
            z = T.add(mu, T.mul(T.exp(log_sigma), Tensor(eps)))
        return GaussianSeq(mu, log_sigma), LatentSeq(z)

    def decode(self, z_s: Tensor, z_t: Tensor, ctx: LayerCtx) -> tuple[Tensor, Tensor]:
        """Latent sequences -> (reconstruction, refined reconstruction)."""
        if z_s.data.shape != z_t.data.shape:
            raise ShapeError(
                f"decode: stream shapes differ {z_s.data.shape} vs {z_t.data.shape}"
            )
        b, n, _ = z_s.data.shape
        c = self.cfg.conv_channels
        hs = self.dec_blstm(T.concat((z_s, z_t), axis=2))
        flat = T.reshape(hs, (b * n, 2 * self.cfg.rnn_hidden))
        x = T.relu(self.dec_bn1(self.dec_fc(flat), ctx))
        x = T.expand_time(x, CHUNK_FRAMES)  # (B*N, 43, C)
        x = T.relu(self.dec_bn2(self.dec_conv1(x), ctx))
        recon_flat = T.tanh(self.dec_conv2(x))

        r = T.relu(self.refine_conv1(recon_flat))
        r = T.relu(self.refine_conv2(r))
        correction = self.refine_conv3(r)
        refined_flat = T.tanh(T.add(recon_flat, correction))

        shape = (b, n, CHUNK_FRAMES, MEL_BANDS)
        return T.reshape(recon_flat, shape), T.reshape(refined_flat, shape)

    def attend(self, seq: Tensor, attribute: str) -> tuple[Tensor, Tensor]:
        """Sequence summary: weights over chunks and the pooled vector.

        Without the attention module the weights are exactly uniform.
        """
        b, n, d = seq.data.shape
        if self.cfg.use_attention:
            scores = self.attn[attribute](T.reshape(seq, (b * n, d)))
            alpha = T.softmax(T.reshape(scores, (b, n)), axis=1)
        else:
            alpha = Tensor(np.full((b, n), 1.0 / n, dtype=seq.data.dtype))
        pooled = T.tsum(T.mul(T.reshape(alpha, (b, n, 1)), seq), axis=1)
        return alpha, pooled

    def classify(self, pooled: Tensor, attribute: str) -> Tensor:
        return self.cls[attribute](pooled)

    # ------------------------------------------------------------------
    def forward(
        self,
        chunks,
        mode: str = "train",
        rng: np.random.Generator | None = None,
        eps_override=None,
        update_stats: bool | None = None,
    ) -> ForwardOut:
        """Full pass over one batch of equal-length recordings.

        ``chunks``: (B, N, 43, 96) or (N, 43, 96). In train mode the
        latent draw comes from ``rng`` (or ``eps_override`` as a pair of
        arrays, which gradient checking uses to freeze the noise);
        infer mode forces the posterior mean.
        """
        data = np.asarray(chunks, dtype=self.store.dtype)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[2:] != (CHUNK_FRAMES, MEL_BANDS):
            raise ShapeError(f"forward: bad chunk array shape {data.shape}")
        b, n = data.shape[:2]
        if mode not in ("train", "infer"):
            raise InvalidInput(f"unknown mode {mode!r}")
        train = mode == "train"
        ctx = (
            LayerCtx(train=True, update_stats=update_stats if update_stats is not None else True)
            if train
            else INFER_CTX
        )

        d = self.cfg.latent_dim
        if train:
            if eps_override is not None:
                eps_s = np.asarray(eps_override[0], dtype=self.store.dtype)
                eps_t = np.asarray(eps_override[1], dtype=self.store.dtype)
            else:
                if rng is None:
                    raise InvalidInput("train-mode forward needs an rng or eps_override")
                eps_s = rng.standard_normal((b, n, d)).astype(self.store.dtype)
                eps_t = rng.standard_normal((b, n, d)).astype(self.store.dtype)
        else:
            eps_s = eps_t = None

        feats = self.fen(Tensor(data.reshape(b * n, CHUNK_FRAMES, MEL_BANDS)), ctx)
        feats = T.reshape(feats, (b, n, self.cfg.bottleneck))
        singer_post, z_s = self.encode(feats, SINGER, ctx, eps_s)
        tech_post, z_t = self.encode(feats, TECHNIQUE, ctx, eps_t)
        recon, refined = self.decode(z_s.z, z_t.z, ctx)
        alpha_s, pooled_s = self.attend(singer_post.mu, SINGER)
        alpha_t, pooled_t = self.attend(tech_post.mu, TECHNIQUE)
        return ForwardOut(
            singer_post=singer_post,
            tech_post=tech_post,
            z_s=z_s,
            z_t=z_t,
            recon=recon,
            refined=refined,
            alpha_s=alpha_s,
            alpha_t=alpha_t,
            class_logits_s=self.classify(pooled_s, SINGER),
            class_logits_t=self.classify(pooled_t, TECHNIQUE),
        )

    def decode_latents(self, z_s: np.ndarray, z_t: np.ndarray) -> np.ndarray:
        """Inference-mode decode of raw latent arrays; returns refined mels."""
        with T.no_grad():
            _, refined = self.decode(
                Tensor(np.asarray(z_s, dtype=self.store.dtype)),
                Tensor(np.asarray(z_t, dtype=self.store.dtype)),
                INFER_CTX,
            )
        return refined.data


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Construct and initialize a model with its own ParamStore."""
    from gmvc.nn.params import xavier_init

    store = ParamStore(seed, dtype=dtype)
    model = Model(cfg, store)
    xavier_init(store)
    return model
