"""Small Gaussian VAE used as a density-style novelty scorer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


@dataclass
class VAEConfig:
    hidden: int = 32
    latent: int = 4
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    recon_sigma: float = 1.0
    seed: int = 0


def _init(rng, fan_in, shape):
    b = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-b, b, size=shape))


class VAE:
    """Encoder ``v -> (mu, logvar)``, decoder ``z -> v_hat``; one hidden layer each.

    Inputs are standardised with statistics frozen at the first fit, so the
    model keeps a fixed coordinate system while it is trained stage by stage.
    """

    def __init__(self, input_dim: int, config: VAEConfig | None = None):
        self.config = cfg = config or VAEConfig()
        self.input_dim = input_dim
        rng = np.random.default_rng([cfg.seed, 0x7AE])
        d, h, z = input_dim, cfg.hidden, cfg.latent
        self.params = {
            "enc.w": _init(rng, d, (d, h)), "enc.b": _init(rng, d, (h,)),
            "mu.w": _init(rng, h, (h, z)), "mu.b": _init(rng, h, (z,)),
            "logvar.w": _init(rng, h, (h, z)), "logvar.b": _init(rng, h, (z,)),
            "dec.w": _init(rng, z, (z, h)), "dec.b": _init(rng, z, (h,)),
            "out.w": _init(rng, h, (h, d)), "out.b": _init(rng, h, (d,)),
        }
        self.shift = None
        self.scale = None
        self.stages_seen = 0

    def _norm(self, v: np.ndarray) -> np.ndarray:
        return (v - self.shift) / self.scale

    def encode(self, v):
        p = self.params
        h = T.relu(T.add(T.matmul(v, p["enc.w"]), p["enc.b"]))
        return T.add(T.matmul(h, p["mu.w"]), p["mu.b"]), T.add(T.matmul(h, p["logvar.w"]), p["logvar.b"])

    def decode(self, z):
        p = self.params
        h = T.relu(T.add(T.matmul(z, p["dec.w"]), p["dec.b"]))
        return T.add(T.matmul(h, p["out.w"]), p["out.b"])

    def fit(self, v: np.ndarray) -> list[float]:
        """Continue training on ``v`` (no protection against forgetting)."""
        cfg = self.config
        v = np.asarray(v, dtype=np.float64)
        if self.shift is None:
            self.shift = v.mean(axis=0)
            self.scale = v.std(axis=0) + 1e-6
        data = self._norm(v)
        rng = np.random.default_rng([cfg.seed, self.stages_seen])
        self.stages_seen += 1
        params = list(self.params.values())
        inv2s = 1.0 / (2.0 * cfg.recon_sigma**2)
        losses = []
        for _ in range(cfg.epochs):
            for p in params:
                p.requires_grad = True
            perm = rng.permutation(len(data))
            total = 0.0
            for lo in range(0, len(data), cfg.batch_size):
                xb = Tensor._wrap(data[perm[lo : lo + cfg.batch_size]])
                eps = Tensor._wrap(rng.normal(size=(len(xb.data), cfg.latent)))
                with Tape() as tape:
                    mu, logvar = self.encode(xb)
                    z = T.add(mu, T.mul(T.exp(T.scale(logvar, 0.5)), eps))
                    recon = T.scale(T.sum_all(T.square(T.sub(self.decode(z), xb))), inv2s)
                    kl = T.scale(T.sum_all(T.sub(T.add(T.square(mu), T.exp(logvar)), T.add_scalar(logvar, 1.0))), 0.5)
                    loss = T.scale(T.add(recon, kl), 1.0 / len(xb.data))
                tape.backward(loss)
                T.sgd_step(params, cfg.lr)
                total += loss.item() * len(xb.data)
            losses.append(total / len(data))
        for p in params:
            p.requires_grad = False
        return losses

    def elbo(self, v: np.ndarray, samples: int = 8, seed: int = 0) -> np.ndarray:
        """Per-row ELBO estimate with analytic KL.

        The same ``samples`` standard-normal draws are reused for every row,
        so a row's score does not depend on the rest of the batch.
        """
        if self.shift is None:
            raise RuntimeError("VAE has not been trained")
        cfg = self.config
        x = self._norm(np.atleast_2d(np.asarray(v, dtype=np.float64)))
        mu, logvar = (t.data for t in self.encode(Tensor._wrap(x)))
        kl = 0.5 * (mu**2 + np.exp(logvar) - logvar - 1.0).sum(axis=1)
        eps = np.random.default_rng(seed).normal(size=(samples, cfg.latent))
        std = np.exp(0.5 * logvar)
        recon = np.zeros(len(x))
        for e in eps:
            xhat = self.decode(Tensor._wrap(mu + std * e)).data
            recon += ((xhat - x) ** 2).sum(axis=1)
        recon /= samples
        return -recon / (2.0 * cfg.recon_sigma**2) - kl

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "config": vars(self.config),
            "shift": None if self.shift is None else self.shift.tolist(),
            "scale": None if self.scale is None else self.scale.tolist(),
            "params": {k: p.data.tolist() for k, p in self.params.items()},
        }
