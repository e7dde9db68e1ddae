"""Aleatoric (predictive variance) and epistemic (orthonormal certificate) scores."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .model import BoundParams, bound

log = logging.getLogger(__name__)

PRED_LOGVAR_MIN, PRED_LOGVAR_MAX = -10.0, 10.0


@dataclass
class PredictiveDistribution:
    mean: float
    variance: float


@dataclass
class CertificateBank:
    C: np.ndarray  # (k, latent)

    @property
    def k(self) -> int:
        return self.C.shape[0]

    def orthonormality_error(self) -> float:
        """||C C^T - I||_F / k."""
        return float(np.linalg.norm(self.C @ self.C.T - np.eye(self.k)) / self.k)


def _as_batch(z) -> dc.Tensor:
    z = dc.as_tensor(z)
    return dc.reshape(z, (1, z.shape[0])) if z.ndim == 1 else z


def predict_standardized(z, params) -> tuple[dc.Tensor, dc.Tensor]:
    """Mean and log-variance heads, in standardized label units; each (b,)."""
    p: BoundParams = bound(params)
    z = _as_batch(z)
    if z.shape[1] != p.dims.latent:
        raise ValueError(f"latent length {z.shape[1]} != {p.dims.latent}")
    h = dc.ssp(z @ p["pred1.w"] + p["pred1.b"])
    h = dc.ssp(h @ p["pred2.w"] + p["pred2.b"])
    mean = h @ p["pred.mean.w"] + p["pred.mean.b"]
    logvar = dc.clip(h @ p["pred.logvar.w"] + p["pred.logvar.b"], PRED_LOGVAR_MIN, PRED_LOGVAR_MAX)
    b = z.shape[0]
    return dc.reshape(mean, (b,)), dc.reshape(logvar, (b,))


def predict_tensors(z, params) -> tuple[dc.Tensor, dc.Tensor]:
    """Mean and variance in original label units; each (b,)."""
    p = bound(params)
    mean, logvar = predict_standardized(z, p)
    return mean * p.label_std + p.label_mean, dc.exp(logvar) * (p.label_std ** 2)


def predict(z, params) -> PredictiveDistribution:
    mean, var = predict_tensors(z, params)
    return PredictiveDistribution(float(mean.data[0]), float(var.data[0]))


def aleatoric_u(z, params) -> dc.Tensor:
    """Predictive variance, differentiable in z; shape (b,)."""
    return predict_tensors(z, params)[1]


def epistemic_u(mu, C) -> dc.Tensor:
    """||C mu||_2 per latent; shape (b,)."""
    C = C.C if isinstance(C, CertificateBank) else C
    return dc.norm(_as_batch(mu) @ np.asarray(C).T, axis=1)


def oc_training_loss(C, latents, lambda_c: float = 1.0) -> dc.Tensor:
    """mean_i ||C mu_i||^2 + lambda_c ||C C^T - I||_F^2."""
    C = dc.as_tensor(C)
    mus = np.asarray(latents, dtype=np.float64)
    if mus.ndim != 2 or mus.shape[0] == 0:
        raise ValueError("oc_training_loss needs at least one latent row")
    recog = dc.mean(dc.tsum(dc.square(dc.matmul(mus, dc.transpose(C))), axis=1))
    gram = dc.matmul(C, dc.transpose(C)) - np.eye(C.shape[0])
    return recog + lambda_c * dc.tsum(dc.square(gram))


def train_certificates(latents: np.ndarray, k: int, seed: int = 0, lambda_c: float = 1.0,
                       lr: float = 1e-2, max_steps: int = 20000, tol: float = 0.05,
                       min_steps: int = 500) -> tuple[CertificateBank, dict]:
    """Fit a certificate bank on fixed latent means with Adam.

    Stops once the loss has plateaued and the bank is within ``tol`` of
    orthonormal, or at ``max_steps``.
    """
    latents = np.asarray(latents, dtype=np.float64)
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((k, latents.shape[1])) / np.sqrt(latents.shape[1])
    m, v = np.zeros_like(C), np.zeros_like(C)
    b1, b2, eps = 0.9, 0.999, 1e-8
    prev = np.inf
    loss_val = np.inf
    step = 0
    for step in range(1, max_steps + 1):
        Ct = dc.Tensor(C, requires_grad=True)
        loss = oc_training_loss(Ct, latents, lambda_c)
        (g,) = dc.grad(loss, [Ct])
        loss_val = loss.item()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        C = C - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        if step % 100 == 0:
            plateau = abs(prev - loss_val) <= 1e-6 * max(1.0, abs(loss_val))
            prev = loss_val
            if step >= min_steps and plateau and CertificateBank(C).orthonormality_error() <= tol:
                break
    bank = CertificateBank(C)
    info = {"steps": step, "loss": loss_val, "orthonormality_error": bank.orthonormality_error()}
    if info["orthonormality_error"] > tol:
        log.warning("certificate bank stopped at %.4f orthonormality error (> %.3f)",
                    info["orthonormality_error"], tol)
    return bank, info
