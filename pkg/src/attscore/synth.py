"""Synthetic speakers with heterogeneous per-subspace noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 64
    utts_per_speaker: int = 10
    latent_dim: int = 64
    within_speaker_noise: tuple = (0.1, 1.0)
    channel_noise: float = 0.0
    seed: int = 0
    # Assign the subspace noise scales to subspaces in a fresh random order for
    # every utterance, so which subspace is reliable varies across utterances.
    shuffle_subspaces: bool = True

    def __post_init__(self):
        object.__setattr__(self, "within_speaker_noise", tuple(float(s) for s in self.within_speaker_noise))
        if self.num_speakers < 1 or self.utts_per_speaker < 1 or self.latent_dim < 1:
            raise ConfigError("speaker, utterance and latent counts must be positive")
        if not self.within_speaker_noise:
            raise ConfigError("within_speaker_noise needs at least one subspace scale")
        if len(self.within_speaker_noise) > self.latent_dim:
            raise ConfigError("more noise subspaces than latent dimensions")
        if min(self.within_speaker_noise) < 0 or self.channel_noise < 0:
            raise ConfigError("noise scales must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")


@dataclass(frozen=True)
class SynthDataset:
    speaker_ids: list
    utterance_ids: list
    speaker_index: np.ndarray  # (n,) int
    latents: np.ndarray  # (n, latent_dim)
    centroids: np.ndarray  # (num_speakers, latent_dim)

    def __len__(self):
        return len(self.utterance_ids)

    def by_speaker(self) -> np.ndarray:
        """(num_speakers, utts_per_speaker) utterance index matrix."""
        n_spk = len(self.speaker_ids)
        return np.arange(len(self)).reshape(n_spk, -1)


def subspace_bounds(latent_dim: int, num_subspaces: int) -> np.ndarray:
    return np.linspace(0, latent_dim, num_subspaces + 1).round().astype(int)


def synth_generate(spec: SynthSpec, prefix: str = "spk") -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    S, U, L = spec.num_speakers, spec.utts_per_speaker, spec.latent_dim
    scales = np.asarray(spec.within_speaker_noise)
    bounds = subspace_bounds(L, len(scales))
    sub_of_dim = np.searchsorted(bounds, np.arange(L), side="right") - 1

    centroids = rng.standard_normal((S, L))
    if spec.shuffle_subspaces:
        assign = np.argsort(rng.random((S, U, len(scales))), axis=-1)
    else:
        assign = np.broadcast_to(np.arange(len(scales)), (S, U, len(scales)))
    per_dim_scale = scales[assign][..., sub_of_dim]
    noise = per_dim_scale * rng.standard_normal((S, U, L))
    channel = spec.channel_noise * rng.standard_normal((S, U, L))
    latents = centroids[:, None, :] + noise + channel
    latents = latents.reshape(S * U, L)

    width = len(str(S - 1))
    spk_ids = [f"{prefix}{s:0{width}d}" for s in range(S)]
    utt_ids = [f"{spk_ids[s]}-u{u:02d}" for s in range(S) for u in range(U)]
    return SynthDataset(spk_ids, utt_ids, np.repeat(np.arange(S), U), latents, centroids)
