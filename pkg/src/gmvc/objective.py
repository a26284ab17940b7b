"""Training objective: Gaussian reconstruction log-likelihood,
closed-form diagonal-Gaussian KLD against mixture components weighted
by the attention distribution, and the two sequence-level
cross-entropy terms.

Sign convention: ``LossBreakdown.total`` is the minimization objective,
i.e. the negated lower bound: -recon + kld_s + kld_t + beta*ce_s +
gamma*ce_t, where ``recon`` is the (dropped-constant) log-likelihood
summed over both decoder heads and averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gmvc.errors import InvalidInput, InvalidLabel, NonFiniteLoss, ShapeError
from gmvc.model import ForwardOut, GaussianSeq, MixturePrior, ModelConfig
from gmvc.nn import tensor as T
from gmvc.nn.tensor import Tensor


LOG_HEADER = ["step", "recon", "kld_s", "kld_t", "ce_s", "ce_t", "total"]


@dataclass
class LossBreakdown:
    recon: float
    kld_s: float
    kld_t: float
    ce_s: float
    ce_t: float
    total: float
    node: Tensor  # differentiable total

    def as_row(self) -> list[float]:
        return [self.recon, self.kld_s, self.kld_t, self.ce_s, self.ce_t, self.total]


def recon_loglik(target, mu_x: Tensor) -> Tensor:
    """log N(X; mu_x, I) with the additive constant dropped.

    Summed over all cells of each recording, averaged over the batch
    (a 3-D input counts as batch size 1).
    """
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if t.data.shape != mu_x.data.shape:
        raise ShapeError(
            f"recon_loglik: target {t.data.shape} vs recon {mu_x.data.shape}"
        )
    batch = t.data.shape[0] if t.data.ndim == 4 else 1
    diff = T.sub(t, mu_x)
    return T.scale(T.tsum(T.mul(diff, diff)), -0.5 / batch)


def _kld_rows(mu: Tensor, log_sigma: Tensor, mean: Tensor, prior_var: float) -> Tensor:
    """KLD(q || N(mean, prior_var*I)) summed over the last axis."""
    # per-coordinate: log sigma_p - log sigma_q + (sigma_q^2 + (mu-m)^2) / (2 sigma_p^2) - 1/2
    half_log_var = 0.5 * math.log(prior_var)
    var_q = T.exp(T.scale(log_sigma, 2.0))
    diff = T.sub(mu, mean)
    quad = T.scale(T.add(var_q, T.mul(diff, diff)), 1.0 / (2.0 * prior_var))
    per_coord = T.shift(T.add(T.neg(log_sigma), quad), half_log_var - 0.5)
    return T.tsum(per_coord, axis=-1)


def kld_diag_gauss(mu, log_sigma, prior_mean, prior_var: float) -> Tensor:
    """Closed-form KLD for one diagonal-Gaussian row against one component."""
    if prior_var <= 0:
        raise InvalidInput(f"prior variance must be positive, got {prior_var}")
    mu_t = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, dtype=np.float64))
    ls_t = (
        log_sigma
        if isinstance(log_sigma, Tensor)
        else Tensor(np.asarray(log_sigma, dtype=np.float64))
    )
    mean_t = (
        prior_mean
        if isinstance(prior_mean, Tensor)
        else Tensor(np.asarray(prior_mean, dtype=np.float64))
    )
    return _kld_rows(mu_t, ls_t, mean_t, prior_var)


def weighted_kld(q: GaussianSeq, alpha, prior: MixturePrior, label: int) -> Tensor:
    """Attention-weighted KLD of one recording's chunk posteriors against
    the prior component for ``label``."""
    k = prior.n_components
    if not 0 <= int(label) < k:
        raise InvalidLabel(f"label {label} outside [0, {k})")
    mean = T.narrow(prior.means, 0, int(label), 1)  # (1, D) broadcasts over N
    rows = _kld_rows(q.mu, q.log_sigma, mean, prior.variance)  # (N,)
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha))
    return T.tsum(T.mul(a, rows))


def _batch_weighted_kld(
    q: GaussianSeq, alpha: Tensor, prior: MixturePrior, labels: np.ndarray
) -> Tensor:
    k = prior.n_components
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidLabel(f"labels {labels} outside [0, {k})")
    b, n, d = q.mu.data.shape
    means = T.reshape(T.take_rows(prior.means, labels), (b, 1, d))
    rows = _kld_rows(q.mu, q.log_sigma, means, prior.variance)  # (B, N)
    return T.tmean(T.tsum(T.mul(alpha, rows), axis=1))


def total_objective(
    fwd: ForwardOut,
    target,
    labels,
    cfg: ModelConfig,
    priors: tuple[MixturePrior, MixturePrior],
) -> LossBreakdown:
    """Assemble the full minimization objective for one batch.

    ``labels`` is ``(y_singer, y_technique)`` — scalars or (B,) arrays.
    Both decoder heads are supervised; the cross-entropy terms always
    appear in the breakdown but only join the total scaled by beta and
    gamma respectively (so beta = gamma = 0 leaves pure ELBO).
    """
    y_s = np.atleast_1d(np.asarray(labels[0], dtype=np.int64))
    y_t = np.atleast_1d(np.asarray(labels[1], dtype=np.int64))
    prior_s, prior_t = priors

    recon_node = T.add(
        recon_loglik(target, fwd.refined), recon_loglik(target, fwd.recon)
    )
    kld_s_node = _batch_weighted_kld(fwd.singer_post, fwd.alpha_s, prior_s, y_s)
    kld_t_node = _batch_weighted_kld(fwd.tech_post, fwd.alpha_t, prior_t, y_t)
    ce_s_node = T.cross_entropy(fwd.class_logits_s, y_s)
    ce_t_node = T.cross_entropy(fwd.class_logits_t, y_t)

    total = T.add(T.neg(recon_node), T.add(kld_s_node, kld_t_node))
    if cfg.beta != 0.0:
        total = T.add(total, T.scale(ce_s_node, cfg.beta))
    if cfg.gamma != 0.0:
        total = T.add(total, T.scale(ce_t_node, cfg.gamma))

    values = {
        "recon": float(recon_node.data),
        "kld_s": float(kld_s_node.data),
        "kld_t": float(kld_t_node.data),
        "ce_s": float(ce_s_node.data),
        "ce_t": float(ce_t_node.data),
        "total": float(total.data),
    }
    for term, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLoss(f"objective term {term!r} is {value}")
    return LossBreakdown(node=total, **values)
