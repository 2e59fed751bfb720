"""Contrastive and distillation losses with closed-form gradients.

All losses consume raw (unnormalized) vectors and handle the row
normalization internally, so gradients are exact with respect to the raw
inputs. Math is done in float64 regardless of input dtype; callers cast the
returned gradients back if they train in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

_MIN_NORM = 1e-30


@dataclass
class ContrastiveBatch:
    """Paired projections: row i of ``z`` and of ``z_prime`` are two views
    of the same item; all other rows act as negatives."""

    z: np.ndarray
    z_prime: np.ndarray
    temperature: float = 0.1

    def validate(self) -> None:
        z, zp = np.asarray(self.z), np.asarray(self.z_prime)
        if z.ndim != 2 or zp.ndim != 2 or z.shape != zp.shape:
            raise ConfigError(f"paired projections must share shape, got {z.shape} vs {zp.shape}")
        if z.shape[0] < 1 or z.shape[1] < 1:
            raise ConfigError(f"empty projection batch {z.shape}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def _as64(arr, what: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NumericError(f"{what} contains non-finite values")
    return out


def _normalize_rows(z: np.ndarray, what: str):
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < _MIN_NORM):
        raise NumericError(f"{what} has zero-norm rows; cosine is undefined")
    return z / norms[:, None], norms


def _normalize_backward(du: np.ndarray, u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d/dz of u = z/|z|: project out the radial component, then rescale.
    radial = (du * u).sum(axis=1, keepdims=True)
    return (du - radial * u) / norms[:, None]


def _nce_core(u: np.ndarray, v: np.ndarray, tau: float):
    """Softmax cross-entropy over cosine scores with positives on the
    diagonal. Returns (loss, dS) where S = u v^T / tau."""
    n = u.shape[0]
    scores = (u @ v.T) / tau
    shift = scores.max(axis=1, keepdims=True)
    expd = np.exp(scores - shift)
    denom = expd.sum(axis=1, keepdims=True)
    log_denom = shift[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(log_denom - np.diag(scores)))
    probs = expd / denom
    dscores = (probs - np.eye(n)) / (n * tau)
    return loss, dscores


def info_nce(batch: ContrastiveBatch) -> float:
    """Mean InfoNCE loss over the batch (natural log)."""
    return info_nce_grad(batch)[0]


def info_nce_grad(batch: ContrastiveBatch):
    """Returns (loss, d/dz, d/dz_prime) with gradients for the raw inputs."""
    batch.validate()
    z = _as64(batch.z, "z")
    zp = _as64(batch.z_prime, "z_prime")
    u, nu = _normalize_rows(z, "z")
    v, nv = _normalize_rows(zp, "z_prime")
    loss, dscores = _nce_core(u, v, batch.temperature)
    du = dscores @ v
    dv = dscores.T @ u
    return loss, _normalize_backward(du, u, nu), _normalize_backward(dv, v, nv)


def moclr_loss(z_v, zp_vp, z_vp, zp_v, temperature: float = 0.1) -> float:
    """Symmetrized contrastive loss: the online projection of each view is
    scored against the momentum projection of the other, and the two
    directions are summed."""
    return moclr_loss_grad(z_v, zp_vp, z_vp, zp_v, temperature)[0]


def moclr_loss_grad(z_v, zp_vp, z_vp, zp_v, temperature: float = 0.1):
    """Returns (loss, g_z_v, g_zp_vp, g_z_vp, g_zp_v).

    Arguments follow the slot convention: ``z_v``/``z_vp`` come from the
    online network on views v and v'; ``zp_vp``/``zp_v`` from the momentum
    network on views v' and v. Gradients are returned for every slot so the
    caller decides which ones flow (momentum slots are dropped when the
    momentum network is frozen, kept when both views train as in the
    no-momentum variant).
    """
    loss_a, g_z_v, g_zp_vp = info_nce_grad(ContrastiveBatch(z_v, zp_vp, temperature))
    loss_b, g_z_vp, g_zp_v = info_nce_grad(ContrastiveBatch(z_vp, zp_v, temperature))
    return loss_a + loss_b, g_z_v, g_zp_vp, g_z_vp, g_zp_v


def regression_mse(pred: np.ndarray, target_raw: np.ndarray) -> float:
    """Half mean squared error to the row-normalized target."""
    return regression_mse_grad(pred, target_raw)[0]


def regression_mse_grad(pred: np.ndarray, target_raw: np.ndarray):
    """Returns (loss, d/dpred). Targets are teacher outputs and stay frozen;
    predictions are compared against the normalized targets, and the
    predictions themselves are deliberately not normalized."""
    p = _as64(pred, "pred")
    t_raw = _as64(target_raw, "target")
    if p.shape != t_raw.shape or p.ndim != 2:
        raise ConfigError(f"pred/target shape mismatch: {p.shape} vs {t_raw.shape}")
    t, _ = _normalize_rows(t_raw, "target")
    diff = p - t
    n = p.shape[0]
    loss = float(0.5 * (diff * diff).sum() / n)
    return loss, diff / n


def distill_loss(pred_b, pred_k, z_b_raw, z_k_raw) -> float:
    """Two-teacher regression loss: half MSE to the normalized base-teacher
    projection plus half MSE to the normalized expert-teacher projection."""
    return distill_loss_grad(pred_b, pred_k, z_b_raw, z_k_raw)[0]


def distill_loss_grad(pred_b, pred_k, z_b_raw, z_k_raw):
    """Returns (loss, d/dpred_b, d/dpred_k)."""
    loss_b, dpred_b = regression_mse_grad(pred_b, z_b_raw)
    loss_k, dpred_k = regression_mse_grad(pred_k, z_k_raw)
    return loss_b + loss_k, dpred_b, dpred_k
