"""
Supervised β-TC variational autoencoder for 5-minute FHR segments

Two single-head transformer branches (time-domain patches and spectrum
patches) feed a Gaussian latent; a transformer decoder reconstructs the
signal and a dense head on the layer-normalised latent scores the outcome.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ad
from .autograd import Tensor
from .config import ModelConfig
from .errors import DataValidationError, NumericalError, ShapeError
from .models import FFT_BINS, SEGMENT_SAMPLES, MaskCode

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-7
LAMBDA_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)
_BLOCK_PARAMS = (
    "ln1.gain", "ln1.bias", "attn.query", "attn.key", "attn.value", "attn.output",
    "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)


@dataclass
class LatentStats:
    """Posterior mean and clamped log-variance, one row per segment."""
    mu: Tensor
    logvar: Tensor


@dataclass
class ForwardPass:
    stats: LatentStats
    z: Tensor
    reconstruction: Tensor
    scores: Tensor


@dataclass
class LossTerms:
    total: Tensor
    mse: float
    focal: float
    kl: float
    tc: float


@dataclass
class Inference:
    """Read-only model outputs (z = mu) as plain arrays."""
    mu: np.ndarray
    logvar: np.ndarray
    scores: np.ndarray
    reconstruction: np.ndarray


def fft_tokens(token_patch: int) -> int:
    return -(-FFT_BINS // token_patch)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, p, latent = config.d_model, config.token_patch, config.latent_dim
    n_fhr = SEGMENT_SAMPLES // p
    n_fft = fft_tokens(p)
    hidden = config.ffn_multiplier * d
    shapes: Dict[str, Tuple[int, ...]] = {
        "fhr_embed.weight": (p, d),
        "fhr_embed.bias": (d,),
        "fhr_embed.missing": (1, d),
        "fhr_embed.pad": (1, d),
        "fhr_embed.position": (n_fhr, d),
        "fft_embed.weight": (p, d),
        "fft_embed.bias": (d,),
        "fft_embed.position": (n_fft, d),
        "latent.weight": (2 * d, 2 * latent),
        "latent.bias": (2 * latent,),
        "decoder_expand.weight": (latent, n_fhr * d),
        "decoder_expand.bias": (n_fhr * d,),
        "decoder.position": (n_fhr, d),
        "decoder_out.weight": (d, p),
        "decoder_out.bias": (p,),
        "classifier.weight": (latent, 1),
        "classifier.bias": (1,),
    }
    block = {
        "ln1.gain": (d,), "ln1.bias": (d,),
        "attn.query": (d, d), "attn.key": (d, d), "attn.value": (d, d), "attn.output": (d, d),
        "ln2.gain": (d,), "ln2.bias": (d,),
        "ffn.w1": (d, hidden), "ffn.b1": (hidden,), "ffn.w2": (hidden, d), "ffn.b2": (d,),
    }
    for prefix in ("fhr_block", "fft_block", "decoder_block"):
        for name in _BLOCK_PARAMS:
            shapes[f"{prefix}.{name}"] = block[name]
    return dict(sorted(shapes.items()))


def init_params(config: ModelConfig, seed: Optional[int] = None) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = np.dtype(config.precision)
    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            value = np.ones(shape)
        elif leaf in ("bias", "b1", "b2"):
            value = np.zeros(shape)
        elif leaf in ("position", "missing", "pad"):
            value = rng.normal(0.0, 0.02, shape)
        else:
            value = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = value.astype(dtype)
    return params


class SupervisedVae:
    """Parameters plus the forward operations of the model"""

    def __init__(self, config: ModelConfig, params: Optional[Mapping[str, np.ndarray]] = None):
        self.config = config
        self.dtype = np.dtype(config.precision)
        expected = parameter_shapes(config)
        values = dict(params) if params is not None else init_params(config)
        if set(values) != set(expected):
            raise ShapeError(f"parameter names differ from the model layout: {sorted(set(values) ^ set(expected))}")
        for name, shape in expected.items():
            if tuple(values[name].shape) != shape:
                raise ShapeError(f"{name} has shape {values[name].shape}, expected {shape}")
        self.params: Dict[str, Tensor] = {
            name: ad.parameter(np.asarray(values[name], dtype=self.dtype), name) for name in expected
        }

    @property
    def n_fhr_tokens(self) -> int:
        return SEGMENT_SAMPLES // self.config.token_patch

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, values: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.asarray(values[name], dtype=self.dtype).copy()

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _const(self, value: np.ndarray) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype))

    def embed_inputs(
        self, std_values: np.ndarray, mask: np.ndarray, fft: np.ndarray
    ) -> Tuple[Tensor, Tensor]:
        """Patch embeddings; MISSING/PAD samples contribute their learned vectors in place of values."""
        std_values = np.atleast_2d(std_values)
        mask = np.atleast_2d(mask)
        fft = np.atleast_2d(fft)
        batch = std_values.shape[0]
        if std_values.shape != (batch, SEGMENT_SAMPLES) or mask.shape != std_values.shape:
            raise ShapeError(f"expected values and mask of shape (batch, {SEGMENT_SAMPLES})")
        if fft.shape != (batch, FFT_BINS):
            raise ShapeError(f"expected fft inputs of shape (batch, {FFT_BINS}), got {fft.shape}")
        p, n = self.config.token_patch, self.n_fhr_tokens

        valid = mask == MaskCode.VALID
        patches = self._const(np.where(valid, std_values, 0.0).reshape(batch, n, p))
        missing = self._const((mask == MaskCode.MISSING).reshape(batch, n, p).mean(axis=-1, keepdims=True))
        pad = self._const((mask == MaskCode.PAD).reshape(batch, n, p).mean(axis=-1, keepdims=True))
        fhr = ad.matmul(patches, self._p("fhr_embed.weight"))
        fhr = fhr + ad.matmul(missing, self._p("fhr_embed.missing"))
        fhr = fhr + ad.matmul(pad, self._p("fhr_embed.pad"))
        fhr = fhr + self._p("fhr_embed.bias") + self._p("fhr_embed.position")

        n_fft = fft_tokens(p)
        padded = np.zeros((batch, n_fft * p))
        padded[:, :FFT_BINS] = fft
        spectrum = ad.matmul(self._const(padded.reshape(batch, n_fft, p)), self._p("fft_embed.weight"))
        spectrum = spectrum + self._p("fft_embed.bias") + self._p("fft_embed.position")
        return fhr, spectrum

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        """Pre-norm single-head self-attention plus feed-forward, both residual."""
        eps = self.config.layer_norm_eps
        d = x.shape[-1]
        h = ad.layer_norm(x, eps) * self._p(f"{prefix}.ln1.gain") + self._p(f"{prefix}.ln1.bias")
        q = ad.matmul(h, self._p(f"{prefix}.attn.query"))
        k = ad.matmul(h, self._p(f"{prefix}.attn.key"))
        v = ad.matmul(h, self._p(f"{prefix}.attn.value"))
        weights = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d)))
        x = x + ad.matmul(ad.matmul(weights, v), self._p(f"{prefix}.attn.output"))
        h = ad.layer_norm(x, eps) * self._p(f"{prefix}.ln2.gain") + self._p(f"{prefix}.ln2.bias")
        hidden = ad.relu(ad.matmul(h, self._p(f"{prefix}.ffn.w1")) + self._p(f"{prefix}.ffn.b1"))
        return x + ad.matmul(hidden, self._p(f"{prefix}.ffn.w2")) + self._p(f"{prefix}.ffn.b2")

    def encode(self, fhr_tokens: Tensor, fft_tokens_: Tensor) -> LatentStats:
        latent = self.config.latent_dim
        pooled = ad.concat(
            [
                ad.mean(self._block(fhr_tokens, "fhr_block"), axis=1),
                ad.mean(self._block(fft_tokens_, "fft_block"), axis=1),
            ],
            axis=-1,
        )
        out = ad.matmul(pooled, self._p("latent.weight")) + self._p("latent.bias")
        mu = ad.take(out, (slice(None), slice(0, latent)))
        raw = ad.take(out, (slice(None), slice(latent, 2 * latent)))
        limit = self.config.logvar_limit
        logvar = ad.scale(ad.tanh(ad.scale(raw, 1.0 / limit)), limit)
        return LatentStats(mu=mu, logvar=logvar)

    def reparameterize(self, stats: LatentStats, noise: np.ndarray) -> Tensor:
        """z = mu + exp(logvar / 2) * noise, noise supplied by the caller."""
        noise = np.asarray(noise, dtype=self.dtype)
        if noise.shape != stats.mu.shape:
            raise ShapeError(f"noise shape {noise.shape} does not match latent shape {stats.mu.shape}")
        return stats.mu + ad.exp(ad.scale(stats.logvar, 0.5)) * self._const(noise)

    def decode(self, z: Tensor) -> Tensor:
        """Latent rows to standardised 1200-sample signals."""
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"decode expects (batch, {self.config.latent_dim}), got {z.shape}")
        batch, n, d = z.shape[0], self.n_fhr_tokens, self.config.d_model
        tokens = ad.matmul(z, self._p("decoder_expand.weight")) + self._p("decoder_expand.bias")
        tokens = ad.reshape(tokens, (batch, n, d)) + self._p("decoder.position")
        tokens = self._block(tokens, "decoder_block")
        samples = ad.matmul(tokens, self._p("decoder_out.weight")) + self._p("decoder_out.bias")
        return ad.reshape(samples, (batch, SEGMENT_SAMPLES))

    def classify(self, z: Tensor) -> Tensor:
        normed = ad.layer_norm(z, self.config.layer_norm_eps)
        logit = ad.matmul(normed, self._p("classifier.weight")) + self._p("classifier.bias")
        return ad.reshape(ad.sigmoid(logit), (z.shape[0],))

    def forward(
        self, std_values: np.ndarray, mask: np.ndarray, fft: np.ndarray, noise: Optional[np.ndarray] = None
    ) -> ForwardPass:
        stats = self.encode(*self.embed_inputs(std_values, mask, fft))
        z = stats.mu if noise is None else self.reparameterize(stats, noise)
        return ForwardPass(stats=stats, z=z, reconstruction=self.decode(z), scores=self.classify(z))

    def infer(
        self, std_values: np.ndarray, mask: np.ndarray, fft: np.ndarray, batch_size: int = 256
    ) -> Inference:
        n = std_values.shape[0]
        parts = []
        with ad.no_grad():
            for start in range(0, n, batch_size):
                stop = min(start + batch_size, n)
                out = self.forward(std_values[start:stop], mask[start:stop], fft[start:stop])
                parts.append((out.stats.mu.data, out.stats.logvar.data, out.scores.data, out.reconstruction.data))
        if not parts:
            latent = self.config.latent_dim
            empty = np.zeros((0, latent))
            return Inference(empty, empty.copy(), np.zeros(0), np.zeros((0, SEGMENT_SAMPLES)))
        mu, logvar, scores, recon = (np.concatenate(chunk) for chunk in zip(*parts))
        return Inference(mu=mu, logvar=logvar, scores=scores, reconstruction=recon)

    def decode_rows(self, latents: np.ndarray) -> np.ndarray:
        """Decode each latent row on its own, so a row's output never depends on its neighbours."""
        latents = np.atleast_2d(latents)
        out = np.zeros((latents.shape[0], SEGMENT_SAMPLES))
        with ad.no_grad():
            for i, row in enumerate(latents):
                out[i] = self.decode(self._const(row[None, :])).data[0]
        return out


def kl_per_dim(stats: LatentStats) -> Tensor:
    """Batch mean of the Gaussian KL to N(0, I), divided by the latent size."""
    mu, logvar = stats.mu, stats.logvar
    terms = ad.square(mu) + ad.exp(logvar) - logvar - 1.0
    return ad.scale(ad.mean(terms), 0.5)


def focal_bce(scores: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Batch mean of -(1 - p_t)^gamma * log(p_t)."""
    if np.any(scores.data <= 0.0) or np.any(scores.data >= 1.0):
        raise NumericalError("focal_bce needs scores strictly inside (0, 1)")
    y = np.asarray(labels, dtype=scores.dtype).reshape(scores.shape)
    p_t = scores * (2.0 * y - 1.0) + (1.0 - y)
    modulator = ad.exp(ad.scale(ad.log(1.0 - p_t), gamma))
    return ad.scale(ad.mean(modulator * ad.log(p_t)), -1.0)


def _log_weights(batch: int, dataset_size: int, dtype: np.dtype) -> np.ndarray:
    """Stratified minibatch weights: the own-sample term carries 1/N, the others share the rest."""
    n = max(dataset_size, batch)
    weights = np.full((batch, batch), math.log((n - 1) / (n * (batch - 1))) if n > 1 else 0.0)
    np.fill_diagonal(weights, math.log(1.0 / n))
    return weights.astype(dtype)


def tc_estimate(z: Tensor, stats: LatentStats, dataset_size: int) -> Tensor:
    """
    Minibatch estimate of the total correlation of the aggregate posterior:
    mean_i [log q(z_i) - sum_d log q(z_i,d)], each density a weighted mixture
    of the batch's Gaussian posteriors evaluated with log-sum-exp.
    """
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeError("tc_estimate needs a batch of at least 2 latent rows")
    m, d = z.shape
    shape = (m, m, d)
    zi = ad.broadcast_to(ad.reshape(z, (m, 1, d)), shape)
    mu_j = ad.broadcast_to(ad.reshape(stats.mu, (1, m, d)), shape)
    logvar_j = ad.broadcast_to(ad.reshape(stats.logvar, (1, m, d)), shape)
    diff = zi - mu_j
    log_q = ad.scale(ad.square(diff) * ad.exp(ad.scale(logvar_j, -1.0)) + logvar_j, -0.5) - 0.5 * _LOG_2PI

    weights = _log_weights(m, dataset_size, z.dtype)
    joint = ad.logsumexp(ad.sum(log_q, axis=2) + Tensor(weights), axis=1)
    per_dim = log_q + Tensor(np.broadcast_to(weights[:, :, None], shape).copy())
    marginals = ad.sum(ad.logsumexp(per_dim, axis=1), axis=1)
    return ad.mean(joint - marginals)


def coeff_update(
    coeff: float,
    observed: float,
    target: float,
    gain: float,
    bounds: Sequence[float],
    snap_to_zero: bool = False,
) -> float:
    """Multiplicative controller: grow the weight while the observed term exceeds its target."""
    updated = coeff * math.exp(gain * (observed - target) / max(target, 1.0))
    updated = min(max(updated, bounds[0]), bounds[1])
    if snap_to_zero and updated < LAMBDA_FLOOR:
        return 0.0
    return updated


def total_loss(
    out: ForwardPass,
    std_values: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    sd: float,
    beta: float,
    lam: float,
    dataset_size: int,
    gamma: float = 2.0,
) -> LossTerms:
    """MSE over VALID samples in raw bpm² + focal + β·KL per dim + λ·TC."""
    valid = (np.asarray(mask) == MaskCode.VALID).astype(out.reconstruction.dtype)
    n_valid = float(valid.sum())
    if n_valid == 0:
        raise DataValidationError("batch has no VALID positions to reconstruct")
    target = np.asarray(std_values, dtype=out.reconstruction.dtype)
    residual = (out.reconstruction - target) * valid
    mse = ad.scale(ad.sum(ad.square(residual)), sd * sd / n_valid)
    focal = focal_bce(ad.clip(out.scores, SCORE_EPS, 1.0 - SCORE_EPS), labels, gamma)
    kl = kl_per_dim(out.stats)
    tc = tc_estimate(out.z, out.stats, dataset_size) if out.z.shape[0] >= 2 else Tensor(0.0)
    total = mse + focal + ad.scale(kl, beta) + ad.scale(tc, lam)
    return LossTerms(total=total, mse=mse.item(), focal=focal.item(), kl=kl.item(), tc=tc.item())


def create_model(config: ModelConfig, params: Optional[Mapping[str, np.ndarray]] = None) -> SupervisedVae:
    """Factory function to create a model, freshly initialised unless params are given"""
    return SupervisedVae(config, params)


def iter_batches(n: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
