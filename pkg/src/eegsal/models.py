"""Saliency VAE, EEG VAE, latent-space generator and discriminator.

Layer tables follow the published generator/discriminator architecture.
``ArchConfig.width`` scales every hidden convolution width (1.0 reproduces
the published channel counts); desk-scale runs use a fraction of it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

LATENT_DIM = 64


@dataclass(frozen=True)
class ArchConfig:
    width: float = 1.0
    latent_dim: int = LATENT_DIM
    n_frames: int = 401
    eeg_size: int = 32
    map_size: int = 81
    upsample_mode: str = "nearest"

    def ch(self, c: int) -> int:
        return max(min(c, 4), int(round(c * self.width)))

    def to_dict(self):
        return asdict(self)


def init_weights(module: nn.Module) -> None:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit/zero batch-norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            bound = 1.0 / np.sqrt(m.weight[0].numel())
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ResStack(nn.Module):
    """3x3 conv layers with batch norm and an identity (or 1x1) skip.

    With ``output=True`` the last conv is a plain projection: no batch norm
    and no activation after the residual sum.
    """

    def __init__(self, channels, act=None, output=False):
        super().__init__()
        self.act = act or nn.ReLU()
        self.output = output
        layers = []
        pairs = list(zip(channels[:-1], channels[1:]))
        for k, (cin, cout) in enumerate(pairs):
            last = k == len(pairs) - 1
            layers.append(nn.Conv2d(cin, cout, 3, padding=1))
            if not (last and output):
                layers.append(nn.BatchNorm2d(cout, momentum=0.1))
            if not last:
                layers.append(self.act)
        self.body = nn.Sequential(*layers)
        cin, cout = channels[0], channels[-1]
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        y = self.body(x) + self.skip(x)
        return y if self.output else self.act(y)


class GaussianHeads(nn.Module):
    def __init__(self, n_in, latent_dim):
        super().__init__()
        self.mean = nn.Linear(n_in, latent_dim)
        self.log_variance = nn.Linear(n_in, latent_dim)

    def forward(self, h):
        return self.mean(h), self.log_variance(h)


class ConvEncoder(nn.Module):
    """Residual conv stacks, global average pool, Linear -> 256 -> (mean, log-variance)."""

    def __init__(self, stacks, latent_dim=LATENT_DIM, hidden=256):
        super().__init__()
        blocks = []
        for k, chans in enumerate(stacks):
            if k:
                blocks.append(nn.MaxPool2d(2))
            blocks.append(ResStack(chans))
        self.features = nn.Sequential(*blocks)
        self.fc = nn.Linear(stacks[-1][-1], hidden)
        self.heads = GaussianHeads(hidden, latent_dim)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.heads(F.relu(self.fc(h)))


def eeg_encoder(arch: ArchConfig) -> ConvEncoder:
    c = arch.ch
    stacks = [
        [arch.n_frames, c(256), c(256), c(256), c(256)],
        [c(256), c(512), c(512), c(512)],
        [c(512), c(512), c(512)],
    ]
    return ConvEncoder(stacks, arch.latent_dim)


def saliency_encoder(arch: ArchConfig) -> ConvEncoder:
    c = arch.ch
    stacks = [
        [1, c(64), c(64), c(64)],
        [c(64), c(128), c(128), c(128)],
        [c(128), c(256), c(256), c(256)],
        [c(256), c(512), c(512), c(512)],
    ]
    return ConvEncoder(stacks, arch.latent_dim)


class SaliencyDecoder(nn.Module):
    """Linear 64 -> 512, unflatten to 1x1, upsample x2,3,3,3,2 to 108, crop to 81."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c = arch.ch
        self.arch = arch
        self.fc = nn.Linear(arch.latent_dim, c(512))
        plan = [
            (2, [c(512), c(512), c(512), c(512)]),
            (3, [c(512), c(256), c(256), c(256)]),
            (3, [c(256), c(128), c(128), c(128)]),
            (3, [c(128), c(64), c(64), c(64)]),
        ]
        blocks = []
        for factor, chans in plan:
            blocks += [nn.Upsample(scale_factor=factor, mode=arch.upsample_mode), ResStack(chans)]
        blocks += [nn.Upsample(scale_factor=2, mode=arch.upsample_mode),
                   ResStack([c(64), 4, 4, 1], output=True)]
        self.body = nn.Sequential(*blocks)

    def logits(self, z):
        h = F.relu(self.fc(z))[:, :, None, None]
        y = self.body(h)
        size = self.arch.map_size
        top = (y.shape[-2] - size) // 2
        left = (y.shape[-1] - size) // 2
        return y[..., top:top + size, left:left + size]

    def forward(self, z):
        return torch.sigmoid(self.logits(z))


class EEGDecoder(nn.Module):
    """Mirror of the EEG encoder with a linear output; masked pixels are zeroed."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c = arch.ch
        self.fc = nn.Sequential(nn.Linear(arch.latent_dim, 256), nn.ReLU(),
                                nn.Linear(256, c(512)), nn.ReLU())
        start = arch.eeg_size // 4
        up = dict(mode=arch.upsample_mode)
        self.body = nn.Sequential(
            nn.Upsample(scale_factor=start, **up),
            ResStack([c(512), c(512), c(512)]),
            nn.Upsample(scale_factor=2, **up),
            ResStack([c(512), c(512), c(512), c(256)]),
            nn.Upsample(scale_factor=2, **up),
            ResStack([c(256), c(256), c(256), c(256), arch.n_frames], output=True),
        )
        self.register_buffer("keep", torch.ones(1, 1, arch.eeg_size, arch.eeg_size))

    def set_zero_mask(self, zero_mask) -> None:
        keep = torch.as_tensor(~np.asarray(zero_mask, dtype=bool), dtype=self.keep.dtype)
        self.keep.copy_(keep[None, None])

    def forward(self, z):
        y = self.body(self.fc(z)[:, :, None, None])
        return y * self.keep


def sample_latent(mean, log_variance, generator=None, eps=None):
    """Reparameterized draw ``mean + exp(log_variance / 2) * eps``."""
    if eps is None:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + torch.exp(0.5 * log_variance) * eps


class VAE(nn.Module):
    def __init__(self, encoder, decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x, generator=None):
        mean, log_variance = self.encoder(x)
        z = sample_latent(mean, log_variance, generator)
        return self.decoder(z), mean, log_variance


def saliency_vae(arch: ArchConfig) -> VAE:
    model = VAE(saliency_encoder(arch), SaliencyDecoder(arch))
    init_weights(model)
    return model


def eeg_vae(arch: ArchConfig, zero_mask=None) -> VAE:
    model = VAE(eeg_encoder(arch), EEGDecoder(arch))
    init_weights(model)
    if zero_mask is not None:
        model.decoder.set_zero_mask(zero_mask)
    return model


class LatentMapper(nn.Module):
    """Linear 64->64, concat 64-d noise, Linear 128->256, Linear 256->64."""

    def __init__(self, latent_dim=LATENT_DIM, hidden=256):
        super().__init__()
        self.latent_dim = latent_dim
        self.fc_in = nn.Linear(latent_dim, latent_dim)
        self.fc_mix = nn.Linear(2 * latent_dim, hidden)
        self.fc_out = nn.Linear(hidden, latent_dim)

    def forward(self, z_eeg, noise):
        h = torch.cat([self.fc_in(z_eeg), noise], dim=1)
        return self.fc_out(F.leaky_relu(self.fc_mix(h), 0.2))


class Generator(nn.Module):
    """EEG encoder -> reparameterized sample -> latent mapper -> saliency decoder."""

    def __init__(self, eeg_encoder: ConvEncoder, saliency_decoder: SaliencyDecoder,
                 mapper: LatentMapper | None = None):
        super().__init__()
        self.eeg_encoder = eeg_encoder
        self.mapper = mapper or LatentMapper(eeg_encoder.heads.mean.out_features)
        self.saliency_decoder = saliency_decoder
        if mapper is None:
            init_weights(self.mapper)

    def forward(self, img, generator=None, noise=None, eps=None):
        mean, log_variance = self.eeg_encoder(img)
        z = sample_latent(mean, log_variance, generator, eps)
        if noise is None:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
        return self.saliency_decoder(self.mapper(z, noise)), mean, log_variance

    def boundary_parameters(self):
        """Names of the encoder/decoder tensors left trainable next to the latent space."""
        names = [f"eeg_encoder.heads.{n}" for n, _ in self.eeg_encoder.heads.named_parameters()]
        names += [f"saliency_decoder.fc.{n}" for n, _ in self.saliency_decoder.fc.named_parameters()]
        return names

    def frozen_mask(self) -> dict:
        trainable = set(self.boundary_parameters())
        return {
            name: not (name.startswith("mapper.") or name in trainable)
            for name, _ in self.named_parameters()
        }

    def freeze(self) -> None:
        mask = self.frozen_mask()
        for name, p in self.named_parameters():
            p.requires_grad_(not mask[name])

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen conv stacks keep their running batch-norm statistics
        if mode and any(self.frozen_mask().values()):
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d) and not m.weight.requires_grad:
                    m.eval()
        return self


class Discriminator(nn.Module):
    """Residual conv stacks 1 -> 256 channels, pool, Linear 256 -> 64 -> 1, sigmoid."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c = arch.ch
        act = nn.LeakyReLU(0.2)
        stacks = [
            [1, 3, c(32), c(32), c(32)],
            [c(32), c(64), c(64), c(64)],
            [c(64), c(128), c(128), c(128)],
            [c(128), c(256), c(256), c(256)],
        ]
        blocks = []
        for k, chans in enumerate(stacks):
            if k:
                blocks.append(nn.MaxPool2d(2))
            blocks.append(ResStack(chans, act=act))
        self.features = nn.Sequential(*blocks)
        self.fc = nn.Linear(c(256), 64)
        self.out = nn.Linear(64, 1)
        init_weights(self)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return torch.sigmoid(self.out(F.leaky_relu(self.fc(h), 0.2))).squeeze(1)


def trial_seed(seed: int, trial_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{trial_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generate_maps(gen: Generator, images, trial_ids, seed: int = 0, batch_size: int = 16) -> np.ndarray:
    """Predict one 81x81 map per EEG image in inference mode.

    The latent and mapper noise of each trial are drawn from a stream keyed
    on ``(seed, trial_id)``, so a prediction does not depend on batching.
    """
    gen.eval()
    dim = gen.mapper.latent_dim
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            ids = trial_ids[start:start + batch_size]
            x = torch.as_tensor(np.asarray(images[start:start + batch_size]), dtype=torch.float32)
            eps, noise = [], []
            for tid in ids:
                g = torch.Generator().manual_seed(trial_seed(seed, tid))
                eps.append(torch.randn(dim, generator=g))
                noise.append(torch.randn(dim, generator=g))
            y, _, _ = gen(x, noise=torch.stack(noise), eps=torch.stack(eps))
            out.append(y[:, 0].numpy().astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, 81, 81))


def assemble_generator(eeg_model: VAE, saliency_model: VAE, freeze: bool = True) -> Generator:
    """Join the EEG encoder and saliency decoder through a fresh latent mapper."""
    enc, dec = eeg_model.encoder, saliency_model.decoder
    if enc.heads.mean.out_features != dec.fc.in_features:
        raise ValueError(
            f"latent size mismatch: EEG encoder {enc.heads.mean.out_features}, "
            f"saliency decoder {dec.fc.in_features}"
        )
    gen = Generator(copy.deepcopy(enc), copy.deepcopy(dec))
    if freeze:
        gen.freeze()
    return gen


def architecture_fingerprint(model: nn.Module, arch: ArchConfig | None = None) -> str:
    table = [[name, list(t.shape)] for name, t in model.state_dict().items()]
    payload = {"class": type(model).__name__, "tensors": table}
    if arch is not None:
        payload["arch"] = arch.to_dict()
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def layer_shapes(model: nn.Module, *inputs) -> list:
    """Output shape of every leaf module during one forward pass."""
    rows, hooks = [], []
    for name, m in model.named_modules():
        if len(list(m.children())) == 0:
            hooks.append(m.register_forward_hook(
                lambda mod, inp, out, name=name: rows.append((name, tuple(out.shape)))))
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return rows
