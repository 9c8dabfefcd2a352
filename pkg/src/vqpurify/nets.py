"""Encoder, decoder, patch discriminator and the evaluation classifier.

Every builder is a pure function of ``(spec, seed)``: parameters are drawn
from one ``numpy`` generator in construction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import PowerIterState, Tensor
from .vq import Codebook, QuantizationResult, quantize, straight_through


class Module:
    """Parameter container: attributes that are Tensors, Modules or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, (Module, Codebook)):
                sub = value.named_parameters(f"{key}.") if isinstance(value, Module) else {
                    f"{key}.{k}": v for k, v in value.named_parameters().items()}
                out.update(sub)
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Non-trainable persistent state (spectral-norm singular vectors)."""
        out: dict[str, np.ndarray] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, PowerIterState):
                out[f"{key}.u"] = value.u
                out[f"{key}.v"] = value.v
            elif isinstance(value, Module):
                out.update(value.named_buffers(f"{key}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise DimensionError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]
        for name, buf in buffers.items():
            buf[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def norm_groups(channels: int) -> int:
    """min(32, C), falling back to a divisor of C when 32 does not divide it."""
    g = min(32, channels)
    return g if channels % g == 0 else math.gcd(channels, 32)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, spectral=False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.sn = PowerIterState(cout, cin * k * k, rng) if spectral else None

    def __call__(self, x, sn_update=True):
        w = self.weight
        if self.sn is not None:
            w = T.spectral_normalize(w, self.sn, update=sn_update)
        return T.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, stride=2, padding=1):
        self.stride, self.padding = stride, padding
        # fan-in of a stride-s transposed conv sees about cin*k*k/s^2 taps per output
        fan_in = max(1, cin * k * k // (stride * stride))
        self.weight = Tensor(_he_uniform(rng, (cin, cout, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return T.conv2d_transpose(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels):
        self.groups = norm_groups(channels)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return T.group_norm(x, self.groups, self.gamma, self.beta)


class Linear(Module):
    def __init__(self, fin, fout, rng):
        bound = 1.0 / math.sqrt(fin)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fin, fout)), requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class ResBlock(Module):
    """Pre-activation residual block: ``out = path(x) + shortcut(x)``.

    ``mode`` is "same", "down" (stride-2 conv) or "up" (stride-2 transposed conv).
    """

    def __init__(self, cin, cout, rng, mode="same"):
        self.mode = mode
        self.norm1 = GroupNorm(cin)
        if mode == "up":
            self.conv1 = ConvTranspose2d(cin, cout, 4, rng, stride=2, padding=1)
        else:
            self.conv1 = Conv2d(cin, cout, 3, rng, stride=2 if mode == "down" else 1)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        if mode == "up":
            self.shortcut = ConvTranspose2d(cin, cout, 2, rng, stride=2, padding=0)
        elif mode == "down" or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, rng, stride=2 if mode == "down" else 1, padding=0)
        else:
            self.shortcut = None

    def __call__(self, x):
        h = self.conv1(T.relu(self.norm1(x)))
        h = self.conv2(T.relu(self.norm2(h)))
        return h + (x if self.shortcut is None else self.shortcut(x))


class BasicBlock(Module):
    """Post-activation residual block as in ResNet: ``relu(norm(conv(relu(norm(conv x)))) + shortcut)``."""

    def __init__(self, cin, cout, rng, stride=1):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride)
        self.norm1 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.norm2 = GroupNorm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, rng, stride=stride, padding=0)
        else:
            self.shortcut = None

    def __call__(self, x):
        h = T.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return T.relu(h + (x if self.shortcut is None else self.shortcut(x)))


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass
class EncoderSpec:
    base_channels: int = 64
    n_res_blocks: int = 4
    downsample_factor: int = 4
    latent_dim: int = 256
    in_channels: int = 3

    @property
    def n_down(self) -> int:
        return int(round(math.log2(self.downsample_factor)))

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigError(f"downsample_factor must be a power of 2, got {f}")
        if self.n_res_blocks < max(1, self.n_down):
            raise ConfigError(f"{self.n_res_blocks} residual blocks cannot hold {self.n_down} stride-2 stages")
        if self.base_channels < 1 or self.latent_dim < 1:
            raise ConfigError("base_channels and latent_dim must be positive")

    def block_plan(self) -> list[tuple[int, int, bool]]:
        """(cin, cout, strided) per encoder block; channels double at each stride-2 stage."""
        n_down = self.n_down
        levels = max(1, n_down)
        per = [self.n_res_blocks // levels] * levels
        per[-1] += self.n_res_blocks - sum(per)
        plan, ch = [], self.base_channels
        for level, count in enumerate(per):
            for j in range(count):
                strided = j == 0 and level < n_down
                cout = ch * 2 if strided else ch
                plan.append((ch, cout, strided))
                ch = cout
        return plan

    @property
    def top_channels(self) -> int:
        return self.block_plan()[-1][1]


@dataclass
class DiscriminatorSpec:
    n_layers: int = 3
    base_channels: int = 64
    spectral_norm: bool = True
    in_channels: int = 3


@dataclass
class ClassifierSpec:
    n_classes: int = 10
    width: int = 16
    depth: int = 3
    in_channels: int = 3


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class Encoder(Module):
    def __init__(self, spec: EncoderSpec, rng):
        spec.validate()
        self.spec = spec
        self.conv_in = Conv2d(spec.in_channels, spec.base_channels, 3, rng)
        self.blocks = [ResBlock(cin, cout, rng, "down" if s else "same") for cin, cout, s in spec.block_plan()]
        self.norm_out = GroupNorm(spec.top_channels)
        self.conv_out = Conv2d(spec.top_channels, spec.latent_dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        f = self.spec.downsample_factor
        if x.ndim != 4 or x.shape[2] % f or x.shape[3] % f:
            raise ConfigError(f"input {x.shape} not divisible by downsample factor {f}")
        h = self.conv_in(x)
        for block in self.blocks:
            h = block(h)
        return self.conv_out(T.relu(self.norm_out(h)))


class Decoder(Module):
    def __init__(self, spec: EncoderSpec, rng):
        spec.validate()
        self.spec = spec
        self.conv_in = Conv2d(spec.latent_dim, spec.top_channels, 3, rng)
        self.blocks = [ResBlock(cout, cin, rng, "up" if s else "same")
                       for cin, cout, s in reversed(spec.block_plan())]
        self.norm_out = GroupNorm(spec.base_channels)
        self.conv_out = Conv2d(spec.base_channels, spec.in_channels, 3, rng)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.spec.latent_dim:
            raise DimensionError(f"decoder expects (N, {self.spec.latent_dim}, h, w), got {z.shape}")
        h = self.conv_in(z)
        for block in self.blocks:
            h = block(h)
        return T.sigmoid(self.conv_out(T.relu(self.norm_out(h))))


class Discriminator(Module):
    """PatchGAN critic: ``n_layers`` stride-2 convs then a 1-channel logit conv."""

    def __init__(self, spec: DiscriminatorSpec, rng):
        self.spec = spec
        sn = spec.spectral_norm
        chans = [spec.in_channels] + [spec.base_channels * 2 ** i for i in range(spec.n_layers)]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, spectral=sn)
                      for i in range(spec.n_layers)]
        self.norms = [GroupNorm(c) for c in chans[2:]]
        self.conv_out = Conv2d(chans[-1], 1, 3, rng, spectral=sn)

    def __call__(self, x: Tensor, sn_update: bool = True) -> Tensor:
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h, sn_update)
            if i > 0:
                h = self.norms[i - 1](h)
            h = T.leaky_relu(h, 0.2)
        return self.conv_out(h, sn_update)

    def conv_layers(self) -> list[Conv2d]:
        return [*self.convs, self.conv_out]


class Classifier(Module):
    """Compact residual CNN: stem, ``depth`` residual blocks, pooled linear head."""

    def __init__(self, spec: ClassifierSpec, rng):
        if spec.n_classes < 2 or spec.width < 1 or spec.depth < 1:
            raise ConfigError(f"invalid classifier spec {spec}")
        self.spec = spec
        w = spec.width
        self.stem = Conv2d(spec.in_channels, w, 3, rng)
        self.blocks, ch = [], w
        for i in range(spec.depth):
            down = i in (1, 2)
            cout = ch * 2 if down else ch
            self.blocks.append(BasicBlock(ch, cout, rng, stride=2 if down else 1))
            ch = cout
        self.head = Linear(ch, spec.n_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        return self.head(h.mean(axis=(2, 3)))

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self(Tensor(images[i:i + batch_size])).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class Generator(Module):
    """x -> encoder -> nearest-prototype bottleneck -> decoder -> x_hat."""

    def __init__(self, encoder: Encoder, codebook: Codebook, decoder: Decoder):
        if codebook.d != encoder.spec.latent_dim:
            raise ConfigError(f"codebook dim {codebook.d} != latent dim {encoder.spec.latent_dim}")
        self.encoder = encoder
        self.codebook = codebook
        self.decoder = decoder

    def forward(self, x: Tensor) -> tuple[Tensor, QuantizationResult]:
        z = T.permute(self.encoder(x), (0, 2, 3, 1))
        result = quantize(z, self.codebook)
        zq = T.permute(straight_through(result), (0, 3, 1, 2))
        return self.decoder(zq), result

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def reconstruct(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """One purification pass over a numpy batch, no gradient bookkeeping."""
        out = np.empty_like(images, dtype=np.float32)
        for i in range(0, len(images), batch_size):
            out[i:i + batch_size] = self(Tensor(images[i:i + batch_size])).data
        return out

    def encode_indices(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        grids = []
        for i in range(0, len(images), batch_size):
            z = T.permute(self.encoder(Tensor(images[i:i + batch_size])), (0, 2, 3, 1))
            grids.append(quantize(z, self.codebook).indices)
        return np.concatenate(grids)


def build_encoder(spec: EncoderSpec, rng_seed: int) -> Encoder:
    return Encoder(spec, np.random.default_rng([rng_seed, 1]))


def build_decoder(spec: EncoderSpec, rng_seed: int) -> Decoder:
    return Decoder(spec, np.random.default_rng([rng_seed, 2]))


def build_discriminator(spec: DiscriminatorSpec, rng_seed: int) -> Discriminator:
    return Discriminator(spec, np.random.default_rng([rng_seed, 3]))


def build_classifier(spec: ClassifierSpec, rng_seed: int) -> Classifier:
    return Classifier(spec, np.random.default_rng([rng_seed, 4]))


def build_generator(spec: EncoderSpec, K: int, rng_seed: int) -> Generator:
    return Generator(build_encoder(spec, rng_seed),
                     Codebook(K, spec.latent_dim, seed=rng_seed),
                     build_decoder(spec, rng_seed))
