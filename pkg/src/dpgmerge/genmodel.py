"""Conditional VAE over elite (state, action) pairs.

Extracts behavioral knowledge from the elite buffer and supplies
deterministic reference actions (zero-latent decode) for the policy
regularizer. The reference action is treated as a constant when the policy
gradient is formed; no gradient flows back into the VAE from there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .nets import AdamState, NetworkParams

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


@dataclass
class VaeModel:
    encoder: NetworkParams  # (state, action) -> (latent mean, latent log-variance)
    decoder: NetworkParams  # (state, latent) -> action in [-1, 1]^m via tanh
    encoder_adam: AdamState
    decoder_adam: AdamState
    state_dim: int
    action_dim: int
    kl_weight: float = 1.0

    @property
    def latent_dim(self) -> int:
        return 2 * self.action_dim

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden, rate: float, rng) -> "VaeModel":
        latent = 2 * action_dim
        enc = nets.init_network([state_dim + action_dim, *hidden, 2 * latent],
                                ["relu"] * len(hidden) + ["identity"], rng)
        dec = nets.init_network([state_dim + latent, *hidden, action_dim],
                                ["relu"] * len(hidden) + ["tanh"], rng)
        return cls(enc, dec, AdamState.for_net(enc, rate), AdamState.for_net(dec, rate),
                   state_dim, action_dim)


def _encode(model: VaeModel, states, actions):
    enc_in = np.concatenate([states, actions], axis=1)
    enc_out, enc_cache = nets.forward_cached(model.encoder, enc_in)
    L = model.latent_dim
    mean = enc_out[:, :L]
    logvar_raw = enc_out[:, L:]
    logvar = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
    return mean, logvar, logvar_raw, enc_cache


def elbo_loss_and_grads(model: VaeModel, states, actions, latent_noise):
    """ELBO loss (reconstruction MSE + weighted KL to a standard normal) with a
    fixed reparameterization draw, plus flat gradients for encoder and decoder.

    Holding latent_noise fixed makes the loss deterministic in the parameters,
    which is what the finite-difference check exercises.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    n = states.shape[0]
    mean, logvar, logvar_raw, enc_cache = _encode(model, states, actions)
    std = np.exp(0.5 * logvar)
    z = mean + std * latent_noise
    dec_in = np.concatenate([states, z], axis=1)
    recon, dec_cache = nets.forward_cached(model.decoder, dec_in)

    err = recon - actions
    recon_loss = float((err * err).sum() / n)
    kl = 0.5 * (mean * mean + np.exp(logvar) - logvar - 1.0)
    kl_loss = float(kl.sum() / n)
    loss = recon_loss + model.kl_weight * kl_loss

    dec_grad, dec_in_grad = nets.backprop(model.decoder, dec_cache, 2.0 * err / n)
    g_z = dec_in_grad[:, model.state_dim:]
    g_mean = g_z + model.kl_weight * mean / n
    g_logvar = 0.5 * g_z * latent_noise * std \
        + model.kl_weight * 0.5 * (np.exp(logvar) - 1.0) / n
    g_logvar = g_logvar * ((logvar_raw > LOGVAR_MIN) & (logvar_raw < LOGVAR_MAX))
    enc_grad, _ = nets.backprop(model.encoder, enc_cache,
                                np.concatenate([g_mean, g_logvar], axis=1))
    return loss, enc_grad, dec_grad


def elbo_loss(model: VaeModel, states, actions, latent_noise) -> float:
    loss, _, _ = elbo_loss_and_grads(model, states, actions, latent_noise)
    return loss


def vae_train_step(model: VaeModel, batch, rng) -> float:
    """One Adam step on the ELBO with a fresh reparameterized latent sample.

    Returns the loss at the pre-update parameters, so a batch the decoder
    already reconstructs perfectly reports exactly the KL term.
    """
    if batch.source != "elite":
        raise ValueError("VAE trains on elite batches only")
    if len(batch) == 0:
        raise ValueError("empty batch")
    noise = rng.standard_normal((len(batch), model.latent_dim))
    loss, enc_grad, dec_grad = elbo_loss_and_grads(model, batch.states, batch.actions, noise)
    nets.adam_step(model.encoder_adam, model.encoder, enc_grad, "descent")
    nets.adam_step(model.decoder_adam, model.decoder, dec_grad, "descent")
    return loss


def reference_action(model: VaeModel, state) -> np.ndarray:
    """Deterministic reference: decode with the zero latent."""
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    S = state[None, :] if single else state
    dec_in = np.concatenate([S, np.zeros((S.shape[0], model.latent_dim))], axis=1)
    out = nets.forward(model.decoder, dec_in)
    return out[0] if single else out
