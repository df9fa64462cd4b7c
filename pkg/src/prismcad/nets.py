"""Network definitions: voxel encoder, operation decoder, profile/envelope
decoders, 2D image encoder and the fixed profile downsampler.

Every network is a list of layer records whose spatial size chain is worked
out and checked when the network is constructed. Hidden channel widths are
multiplied by ``scale``; the interface widths (128 voxel embedding, 64 image
embedding, 1 output channel) never change.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

VOXEL_EMBEDDING = 128
IMAGE_EMBEDDING = 64
PROFILE_RES = 128
ENVELOPE_LEN = 64
VOXEL_RES = 64


def width(c: int, scale: float) -> int:
    return max(1, int(round(c * scale)))


@dataclass(frozen=True)
class Layer:
    kind: str  # conv2d | conv3d | convT1d | convT2d | linear
    cin: int
    cout: int
    k: int = 1
    s: int = 1
    p: int = 0

    def out_size(self, n: int) -> int:
        if self.kind in ("conv2d", "conv3d"):
            return (n + 2 * self.p - self.k) // self.s + 1
        if self.kind.startswith("convT"):
            return (n - 1) * self.s - 2 * self.p + self.k
        return n


def size_chain(layers, start: int) -> list:
    sizes = [start]
    for layer in layers:
        if layer.kind == "linear":
            continue
        sizes.append(layer.out_size(sizes[-1]))
    return sizes


class ArchitectureError(ValueError):
    pass


def _assert_chain(name, layers, start, expected):
    sizes = size_chain(layers, start)
    if sizes[-1] != expected:
        raise ArchitectureError(f"{name}: size chain {sizes} does not end at {expected}")
    return sizes


class ParamStore(dict):
    """Named parameter tensors, initialised deterministically from (seed, name)."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.seed = seed
        self.dtype = dtype
        self.frozen = set()

    def _rng(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def weight(self, name, shape, fan_in):
        if name not in self:
            bound = np.sqrt(6.0 / fan_in)
            data = self._rng(name).uniform(-bound, bound, size=shape).astype(self.dtype)
            self[name] = ad.Tensor(data, requires_grad=True, name=name)
        return self[name]

    def bias(self, name, n):
        if name not in self:
            self[name] = ad.Tensor(np.zeros(n, dtype=self.dtype), requires_grad=True, name=name)
        return self[name]

    def constant(self, name, data):
        if name not in self:
            self[name] = ad.Tensor(np.asarray(data, dtype=self.dtype), name=name)
            self.frozen.add(name)
        return self[name]

    def trainable(self):
        return [t for n, t in self.items() if n not in self.frozen]

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.items()}

    def load_arrays(self, arrays: dict):
        for n, a in arrays.items():
            if n in self:
                if self[n].shape != a.shape:
                    raise ValueError(f"{n}: checkpoint shape {a.shape} vs {self[n].shape}")
                self[n].data = np.array(a, dtype=self.dtype)

    def astype(self, dtype):
        for t in self.values():
            t.data = t.data.astype(dtype)
        self.dtype = dtype
        return self

    def digest(self) -> str:
        h = 0
        for n in sorted(self):
            h = zlib.crc32(n.encode(), h)
            h = zlib.crc32(np.ascontiguousarray(self[n].data).tobytes(), h)
        return f"{h:08x}"


class Network:
    layers: list

    def __init__(self, params: ParamStore, prefix: str, slope: float = 0.01):
        self.params = params
        self.prefix = prefix
        self.slope = slope
        for i, layer in enumerate(self.layers):
            self._init_layer(i, layer)

    def _init_layer(self, i, layer):
        name = f"{self.prefix}.{i}"
        if layer.kind == "linear":
            self.params.weight(name + ".w", (layer.cout, layer.cin), layer.cin)
        elif layer.kind.startswith("convT"):
            nd = int(layer.kind[-2])
            fan_in = layer.cin * layer.k ** nd / layer.s ** nd
            self.params.weight(name + ".w", (layer.cin, layer.cout) + (layer.k,) * nd, max(fan_in, 1.0))
        else:
            nd = int(layer.kind[-2])
            self.params.weight(name + ".w", (layer.cout, layer.cin) + (layer.k,) * nd, layer.cin * layer.k ** nd)
        self.params.bias(name + ".b", layer.cout)

    def _apply(self, i, x):
        layer = self.layers[i]
        w = self.params[f"{self.prefix}.{i}.w"]
        b = self.params[f"{self.prefix}.{i}.b"]
        if layer.kind == "linear":
            return ad.linear(x, w, b)
        fn = {"conv2d": ad.conv2d, "conv3d": ad.conv3d,
              "convT1d": ad.conv_transpose1d, "convT2d": ad.conv_transpose2d}[layer.kind]
        return fn(x, w, b, layer.s, layer.p)

    def describe(self) -> dict:
        return {"prefix": self.prefix, "class": type(self).__name__,
                "layers": [asdict(layer) for layer in self.layers]}


class VoxelEncoder(Network):
    """Strided 3D convolutions with leaky ReLU, then a linear map to the 128 embedding."""

    def __init__(self, params, scale=1.0, prefix="voxel_encoder", slope=0.01):
        ch = [1] + [width(c, scale) for c in (16, 32, 64, 128, 128)]
        convs = [Layer("conv3d", a, b, 4, 2, 1) for a, b in zip(ch[:-1], ch[1:])]
        sizes = size_chain(convs, VOXEL_RES)
        self.flat = ch[-1] * sizes[-1] ** 3
        self.layers = convs + [Layer("linear", self.flat, VOXEL_EMBEDDING)]
        super().__init__(params, prefix, slope)

    def __call__(self, x):
        if x.shape[1:] != (1, VOXEL_RES, VOXEL_RES, VOXEL_RES):
            raise ValueError(f"voxel encoder expects (N, 1, 64, 64, 64), got {x.shape}")
        for i in range(len(self.layers) - 1):
            x = ad.leaky_relu(self._apply(i, x), self.slope)
        x = ad.reshape(x, (x.shape[0], self.flat))
        return self._apply(len(self.layers) - 1, x)


class OperationDecoder(Network):
    """128 -> 512 -> 512 -> 128n with ReLU after every layer, split into n embeddings."""

    def __init__(self, params, n, scale=1.0, prefix="op_decoder", slope=0.01):
        if n < 1:
            raise ValueError("extrusion count must be at least 1")
        self.n = n
        hidden = width(512, scale)
        self.layers = [Layer("linear", VOXEL_EMBEDDING, hidden), Layer("linear", hidden, hidden),
                       Layer("linear", hidden, VOXEL_EMBEDDING * n)]
        super().__init__(params, prefix, slope)

    def raw(self, z):
        for i in range(len(self.layers)):
            z = ad.relu(self._apply(i, z))
        return z

    def __call__(self, z):
        return ad.split(self.raw(z), self.n, axis=1)


class ProfileDecoder(Network):
    """64-vector -> 128x128 logits through seven transposed convolutions.

    The first layer is 1x1; the next one grows 1 -> 4 with no padding and the
    remaining five double the size with padding 1.
    """

    def __init__(self, params, scale=1.0, prefix="profile_decoder", slope=0.01):
        ch = [IMAGE_EMBEDDING] + [width(c, scale) for c in (512, 64, 64, 32, 32, 16)] + [1]
        layers = [Layer("convT2d", ch[0], ch[1], 1, 1, 0), Layer("convT2d", ch[1], ch[2], 4, 2, 0)]
        layers += [Layer("convT2d", a, b, 4, 2, 1) for a, b in zip(ch[2:-1], ch[3:])]
        self.layers = layers
        self.sizes = _assert_chain(prefix, layers, 1, PROFILE_RES)
        super().__init__(params, prefix, slope)

    def __call__(self, e):
        x = ad.reshape(e, (e.shape[0], IMAGE_EMBEDDING, 1, 1))
        for i in range(len(self.layers)):
            x = self._apply(i, x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return ad.reshape(x, (x.shape[0], PROFILE_RES, PROFILE_RES))


class EnvelopeDecoder(Network):
    """128-vector -> 64 logits through six transposed 1D convolutions."""

    def __init__(self, params, scale=1.0, prefix="envelope_decoder", slope=0.01):
        ch = [VOXEL_EMBEDDING] + [width(c, scale) for c in (512, 64, 64, 32, 32)] + [1]
        layers = [Layer("convT1d", ch[0], ch[1], 1, 1, 0), Layer("convT1d", ch[1], ch[2], 4, 1, 0)]
        layers += [Layer("convT1d", a, b, 4, 2, 1) for a, b in zip(ch[2:-1], ch[3:])]
        self.layers = layers
        self.sizes = _assert_chain(prefix, layers, 1, ENVELOPE_LEN)
        super().__init__(params, prefix, slope)

    def __call__(self, e):
        x = ad.reshape(e, (e.shape[0], VOXEL_EMBEDDING, 1))
        for i in range(len(self.layers)):
            x = self._apply(i, x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return ad.reshape(x, (x.shape[0], ENVELOPE_LEN))


class ImageEncoder(Network):
    """Six stride-2 4x4 convolutions with leaky ReLU: 128x128 image -> 64-vector."""

    def __init__(self, params, scale=1.0, prefix="image_encoder", slope=0.01):
        ch = [1] + [width(c, scale) for c in (64, 64, 128, 256, 512)] + [IMAGE_EMBEDDING]
        layers = [Layer("conv2d", a, b, 4, 2, 1) for a, b in zip(ch[:-2], ch[1:-1])]
        layers.append(Layer("conv2d", ch[-2], ch[-1], 4, 2, 0))
        self.layers = layers
        self.sizes = _assert_chain(prefix, layers, PROFILE_RES, 1)
        super().__init__(params, prefix, slope)

    def __call__(self, img):
        if img.shape[1:] != (1, PROFILE_RES, PROFILE_RES):
            raise ValueError(f"image encoder expects (N, 1, 128, 128), got {img.shape}")
        x = img
        for i in range(len(self.layers)):
            x = self._apply(i, x)
            if i < len(self.layers) - 1:
                x = ad.leaky_relu(x, self.slope)
        return ad.reshape(x, (x.shape[0], IMAGE_EMBEDDING))


DOWNSAMPLE_WEIGHT = 1.0 / 3.0


def downsample_profile(p, params: ParamStore | None = None):
    """Fixed 3x3 stride-2 convolution (all weights 1/3): (N, 128, 128) -> (N, 64, 64)."""
    if p.shape[1:] != (PROFILE_RES, PROFILE_RES):
        raise ValueError(f"downsampler expects (N, 128, 128), got {p.shape}")
    wdata = np.full((1, 1, 3, 3), DOWNSAMPLE_WEIGHT, dtype=p.dtype)
    w = params.constant("downsample.w", wdata) if params is not None else ad.Tensor(wdata)
    x = ad.reshape(p, (p.shape[0], 1, PROFILE_RES, PROFILE_RES))
    y = ad.conv2d(x, w, None, stride=2, padding=1)
    return ad.reshape(y, (p.shape[0], VOXEL_RES, VOXEL_RES))


class ExtrusionNet:
    """The 3D model: voxel encoder, one operation decoder per recipe, and the
    shared profile and envelope decoders."""

    def __init__(self, recipe_steps: dict, scale=1.0, seed=0, dtype=np.float32, slope=0.01):
        self.scale = scale
        self.params = ParamStore(seed, dtype)
        self.encoder = VoxelEncoder(self.params, scale, slope=slope)
        self.op_decoders = {rid: OperationDecoder(self.params, n, scale, prefix=f"op_decoder.{rid}", slope=slope)
                            for rid, n in recipe_steps.items()}
        self.params.weight("profile_in.w", (IMAGE_EMBEDDING, VOXEL_EMBEDDING), VOXEL_EMBEDDING)
        self.params.bias("profile_in.b", IMAGE_EMBEDDING)
        self.profile_decoder = ProfileDecoder(self.params, scale, slope=slope)
        self.start_decoder = EnvelopeDecoder(self.params, scale, prefix="start_decoder", slope=slope)
        self.end_decoder = EnvelopeDecoder(self.params, scale, prefix="end_decoder", slope=slope)
        downsample_weight(self.params)

    def encode(self, sdf):
        return self.encoder(sdf)

    def profile(self, e):
        x = ad.linear(e, self.params["profile_in.w"], self.params["profile_in.b"])
        return self.profile_decoder(x)

    def describe(self) -> str:
        nets = [self.encoder, *self.op_decoders.values(), self.profile_decoder, self.start_decoder, self.end_decoder]
        return json.dumps({"scale": self.scale, "networks": [n.describe() for n in nets],
                           "profile_in": [VOXEL_EMBEDDING, IMAGE_EMBEDDING],
                           "downsample": {"k": 3, "s": 2, "p": 1, "weight": DOWNSAMPLE_WEIGHT}}, indent=1)


class ProfileAutoencoder:
    """2D autoencoder used to embed sketch images for retrieval."""

    def __init__(self, scale=1.0, seed=0, dtype=np.float32, slope=0.01):
        self.scale = scale
        self.params = ParamStore(seed, dtype)
        self.encoder = ImageEncoder(self.params, scale, slope=slope)
        self.decoder = ProfileDecoder(self.params, scale, prefix="image_decoder", slope=slope)

    def encode(self, img):
        return self.encoder(img)

    def decode(self, z):
        return self.decoder(z)

    def describe(self) -> str:
        return json.dumps({"scale": self.scale,
                           "networks": [self.encoder.describe(), self.decoder.describe()]}, indent=1)


def downsample_weight(params: ParamStore):
    return params.constant("downsample.w", np.full((1, 1, 3, 3), DOWNSAMPLE_WEIGHT))


# --------------------------------------------------------------------------
# single-sample entry points on plain arrays


def voxel_input(grid) -> np.ndarray:
    """Truncated SDF in voxel units scaled to [-1, 1]."""
    values = np.asarray(grid.values)
    return (np.clip(values / grid.spacing, -4.0, 4.0) / 4.0).astype(np.float32)


def encode_voxels(net: ExtrusionNet, grid) -> np.ndarray:
    """128-vector embedding of a 64^3 SDF grid."""
    if grid.values.shape != (VOXEL_RES,) * 3:
        raise ValueError(f"voxel encoder expects a {VOXEL_RES}^3 grid, got {grid.values.shape}")
    x = voxel_input(grid)[None, None].astype(net.params.dtype)
    return net.encode(ad.Tensor(x)).data[0]


def split_embedding(net: ExtrusionNet, z, recipe_id) -> list:
    """Per-extrusion embeddings e_0 .. e_{n-1} from the recipe's operation decoder."""
    z = np.asarray(z, dtype=net.params.dtype)[None]
    return [e.data[0] for e in net.op_decoders[recipe_id](ad.Tensor(z))]


def decode_profile(net: ExtrusionNet, e) -> np.ndarray:
    return net.profile(ad.Tensor(np.asarray(e, dtype=net.params.dtype)[None])).data[0]


def decode_envelope(net: ExtrusionNet, e, which="START") -> np.ndarray:
    dec = net.start_decoder if which == "START" else net.end_decoder
    return dec(ad.Tensor(np.asarray(e, dtype=net.params.dtype)[None])).data[0]


def encode_image2d(model: ProfileAutoencoder, image) -> np.ndarray:
    """64-vector embedding of a 128x128 image (SDF grid or plain array)."""
    img = np.asarray(getattr(image, "values", image))
    if img.shape != (PROFILE_RES, PROFILE_RES):
        raise ValueError(f"image encoder expects {PROFILE_RES}x{PROFILE_RES}, got {img.shape}")
    return model.encode(ad.Tensor(img[None, None].astype(model.params.dtype))).data[0]
