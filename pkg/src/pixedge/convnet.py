"""Forward pass of AlexNet-shaped convolutional feature extractors.

Networks are declared as a :class:`NetSpec` (an ordered list of layers plus
named tap points) and parameterized by a weight bundle, a plain ``dict``
mapping ``"<layer>/kernel"`` and ``"<layer>/bias"`` to arrays.  Activations are
``(H, W, C)`` float64 arrays.

Weight bundles are stored in the PXW1 container::

    b"PXW1" | u32 count | count * (u32 name_len | name (utf-8) | PXF1 record)

The NetSpec text format is one layer per line of ``key=value`` pairs::

    input_scale=1.0
    layer name=conv1 kind=conv out=96 kernel=11 stride=4 pad=5
    layer name=relu1 kind=relu
    tap name=Conv1            # taps the output of the preceding layer
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, FormatError, ShapeError
from .imagecore import as_plane, decode_tensor, encode_tensor

PXW_MAGIC = b"PXW1"
LAYER_KINDS = ("conv", "relu", "maxpool", "lrn")
ALEXNET_TAPS = ("Conv1", "Conv2", "Conv3", "Conv4", "Conv5")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    group: int = 1
    depth_radius: int = 2
    alpha: float = 1e-4
    beta: float = 0.75
    bias: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ContractError(f"layer {self.name!r}: need kernel>=1, stride>=1, pad>=0")
        if self.kind == "conv" and (self.out_channels < 1 or self.group < 1):
            raise ContractError(f"conv layer {self.name!r} needs out_channels>=1, group>=1")
        if self.kind == "conv" and self.out_channels % self.group:
            raise ContractError(f"conv layer {self.name!r}: out_channels not divisible by group")

    @property
    def spatial(self):
        """True for layers that move a sliding window (conv, maxpool)."""
        return self.kind in ("conv", "maxpool")


@dataclass(frozen=True)
class NetSpec:
    """Layers in order plus taps, each naming the layer index it reads after."""

    layers: tuple
    taps: dict = field(default_factory=dict)
    in_channels: int = 3
    input_scale: float = 1.0

    def __post_init__(self):
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ContractError(f"tap {name!r} points past the last layer")

    @property
    def tap_names(self):
        return sorted(self.taps, key=lambda n: (self.taps[n], n))

    def conv_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if l.kind == "conv"]

    def weight_shapes(self):
        """Expected ``{record name: shape}`` of a matching weight bundle."""
        shapes = {}
        channels = self.in_channels
        for layer in self.layers:
            if layer.kind == "conv":
                if channels % layer.group:
                    raise ContractError(f"{layer.name}: {channels} inputs not divisible by group")
                k = layer.kernel
                shapes[f"{layer.name}/kernel"] = (layer.out_channels, channels // layer.group, k, k)
                shapes[f"{layer.name}/bias"] = (layer.out_channels,)
                channels = layer.out_channels
        return shapes

    def tap_channels(self):
        """Channel count at each tap, in tap order."""
        out = {}
        channels = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                channels = layer.out_channels
            for name, idx in self.taps.items():
                if idx == i:
                    out[name] = channels
        return {n: out[n] for n in self.tap_names}

    def tap_strides(self):
        """Cumulative spatial stride at each tap."""
        strides = {}
        stride = 1
        for i, layer in enumerate(self.layers):
            if layer.spatial:
                stride *= layer.stride
            for name, idx in self.taps.items():
                if idx == i:
                    strides[name] = stride
        return {n: strides[n] for n in self.tap_names}

    def receptive_field(self, tap=None):
        """Receptive-field size (pixels) of one activation at ``tap`` (default: last tap)."""
        last = self.taps[tap] if tap is not None else max(self.taps.values(), default=len(self.layers) - 1)
        size, jump = 1, 1
        for layer in self.layers[: last + 1]:
            if layer.spatial:
                size += (layer.kernel - 1) * jump
                jump *= layer.stride
        return size

    def receptive_radius(self, tap=None):
        """Half-width of the receptive field, rounded up."""
        return self.receptive_field(tap) // 2


# --------------------------------------------------------------- layers


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)), constant_values=value)


def _out_size(n, kernel, stride, pad):
    return (n + 2 * pad - kernel) // stride + 1


def conv_forward(x, layer, kernel, bias):
    """Zero-padded strided cross-correlation.

    ``kernel`` has shape ``(out, in/group, k, k)``; output dims follow
    ``floor((n + 2*pad - k) / stride) + 1``.
    """
    x = as_plane(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    out_c, in_per_group, kh, kw = kernel.shape
    g = layer.group
    if x.shape[2] != in_per_group * g:
        raise ShapeError(
            f"{layer.name or 'conv'}: input has {x.shape[2]} channels, kernel expects {in_per_group * g}"
        )
    if kh != kw or kh != layer.kernel or out_c != layer.out_channels or bias.shape != (out_c,):
        raise ShapeError(f"{layer.name or 'conv'}: weight shape {kernel.shape} does not match layer")
    oh = _out_size(x.shape[0], kh, layer.stride, layer.pad)
    ow = _out_size(x.shape[1], kw, layer.stride, layer.pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"{layer.name or 'conv'}: output would be {oh}x{ow}")
    xp = _pad(x, layer.pad)
    s = layer.stride
    # (oh, ow, C, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[: (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    out = np.empty((oh, ow, out_c))
    per_out = out_c // g
    for gi in range(g):
        cols = win[:, :, gi * in_per_group : (gi + 1) * in_per_group].reshape(oh * ow, -1)
        kmat = kernel[gi * per_out : (gi + 1) * per_out].reshape(per_out, -1)
        out[:, :, gi * per_out : (gi + 1) * per_out] = (cols @ kmat.T).reshape(oh, ow, per_out)
    out += bias
    return out


def relu(x):
    return np.maximum(x, 0.0)


def maxpool(x, layer):
    """Per-channel window maximum; padding (if any) never wins the max."""
    x = as_plane(x)
    k, s = layer.kernel, layer.stride
    oh = _out_size(x.shape[0], k, s, layer.pad)
    ow = _out_size(x.shape[1], k, s, layer.pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"{layer.name or 'maxpool'}: output would be {oh}x{ow}")
    xp = _pad(x, layer.pad, -np.inf)
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[: (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    return win.max(axis=(3, 4))


def lrn(x, layer):
    """Cross-channel local response normalization.

    ``v / (bias + alpha * sum_{|c' - c| <= depth_radius} v[c']**2) ** beta``
    """
    x = as_plane(x)
    r = layer.depth_radius
    sq = np.pad(x * x, ((0, 0), (0, 0), (r + 1, r)))
    csum = np.cumsum(sq, axis=2)
    window = csum[:, :, 2 * r + 1 :] - csum[:, :, : -2 * r - 1]
    return x / (layer.bias + layer.alpha * window) ** layer.beta


def apply_layer(x, layer, weights):
    if layer.kind == "conv":
        return conv_forward(x, layer, weights[f"{layer.name}/kernel"], weights[f"{layer.name}/bias"])
    if layer.kind == "relu":
        return relu(x)
    if layer.kind == "maxpool":
        return maxpool(x, layer)
    return lrn(x, layer)


def forward_taps(image, net, weights, taps=None):
    """Run ``net`` on a (mean-subtracted) image.

    Returns a list of ``(tap_name, activation, cumulative_stride)`` in tap
    order.  With ``taps`` given, only those taps are returned and the pass
    stops after the deepest one requested.
    """
    x = as_plane(image) * net.input_scale
    if x.shape[2] != net.in_channels:
        raise ShapeError(f"net expects {net.in_channels} input channels, got {x.shape[2]}")
    wanted = list(net.tap_names if taps is None else taps)
    for name in wanted:
        if name not in net.taps:
            raise ContractError(f"unknown tap {name!r}; net has {net.tap_names}")
    if not wanted:
        return []
    last = max(net.taps[n] for n in wanted)
    strides = net.tap_strides()
    by_layer = {}
    for n in wanted:
        by_layer.setdefault(net.taps[n], []).append(n)
    found = {}
    for i, layer in enumerate(net.layers[: last + 1]):
        x = apply_layer(x, layer, weights)
        for n in by_layer.get(i, ()):
            found[n] = x
    return [(n, found[n], strides[n]) for n in wanted]


# ------------------------------------------------------ configurations


def alexnet_spec():
    """AlexNet's five convolutional stages with taps after each stage.

    Padding is chosen so every map is ``ceil(n / stride)`` on a side: Conv1 at
    stride 4, Conv2 at 8, Conv3-5 at 16.  Conv1/Conv2 are tapped after
    ReLU+LRN and before pooling; Conv3-5 after ReLU.
    """
    L = LayerSpec
    lrn_args = dict(depth_radius=2, alpha=1e-4, beta=0.75, bias=2.0)
    layers = (
        L("conv", "conv1", out_channels=96, kernel=11, stride=4, pad=5),
        L("relu", "relu1"),
        L("lrn", "norm1", **lrn_args),
        L("maxpool", "pool1", kernel=3, stride=2, pad=1),
        L("conv", "conv2", out_channels=256, kernel=5, pad=2, group=2),
        L("relu", "relu2"),
        L("lrn", "norm2", **lrn_args),
        L("maxpool", "pool2", kernel=3, stride=2, pad=1),
        L("conv", "conv3", out_channels=384, kernel=3, pad=1),
        L("relu", "relu3"),
        L("conv", "conv4", out_channels=384, kernel=3, pad=1, group=2),
        L("relu", "relu4"),
        L("conv", "conv5", out_channels=256, kernel=3, pad=1, group=2),
        L("relu", "relu5"),
    )
    taps = {"Conv1": 2, "Conv2": 6, "Conv3": 9, "Conv4": 11, "Conv5": 13}
    return NetSpec(layers, taps)


def toy_spec(channels=4, kernel=3):
    """Single conv layer with stride 1 and 'same' padding, tapped as ``Conv1``."""
    conv = LayerSpec("conv", "conv1", out_channels=channels, kernel=kernel, pad=kernel // 2)
    return NetSpec((conv,), {"Conv1": 0})


BUILTIN_SPECS = {"alexnet": alexnet_spec, "toy": toy_spec}


def random_weights(net, seed=0):
    """He-normal kernels and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in net.weight_shapes().items():
        if name.endswith("/bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return weights


def oriented_filter_bank(n_filters, size, in_channels=3):
    """Deterministic bank of oriented Gaussian-derivative filters.

    Cycles through luminance first/second derivatives (both polarities) at two
    scales and eight orientations, then red-green and blue-yellow opponent
    first derivatives.  Each filter is zero-mean with unit L1 norm.
    """
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size] - c
    lum = np.full(in_channels, 1.0 / in_channels)
    if in_channels == 3:
        opponents = [np.array([0.5, -0.5, 0.0]), np.array([0.25, 0.25, -0.5])]
    else:
        opponents = []
    sigmas = (size / 8.0, size / 5.0)
    thetas = np.arange(8) * np.pi / 8
    shapes = []
    for sigma in sigmas:
        for order in (1, 2):
            for sign in (1.0, -1.0):
                for th in thetas:
                    shapes.append((sigma, order, sign, th, lum))
    for colour in opponents:
        for sign in (1.0, -1.0):
            for th in thetas:
                shapes.append((sigmas[0], 1, sign, th, colour))
    bank = np.zeros((n_filters, in_channels, size, size))
    for i in range(n_filters):
        sigma, order, sign, th, colour = shapes[i % len(shapes)]
        u = xx * np.cos(th) + yy * np.sin(th)
        v = -xx * np.sin(th) + yy * np.cos(th)
        g = np.exp(-(u**2 + v**2) / (2 * sigma**2))
        resp = -u * g if order == 1 else (u**2 / sigma**2 - 1) * g
        resp = sign * (resp - resp.mean())
        resp /= np.abs(resp).sum()
        bank[i] = colour[:, None, None] * resp[None] * in_channels
    return bank


def filterbank_weights(net, seed=0):
    """Hand-crafted oriented filters in the first conv layer, seeded random elsewhere."""
    weights = random_weights(net, seed)
    first = net.conv_layers()[0][1]
    shape = net.weight_shapes()[f"{first.name}/kernel"]
    bank = oriented_filter_bank(shape[0], shape[2], shape[1])
    weights[f"{first.name}/kernel"] = bank.astype(np.float32)
    return weights


BUILTIN_WEIGHTS = {"random": random_weights, "filterbank": filterbank_weights}


def check_weights(net, weights):
    """Raise ShapeError unless every conv layer has correctly shaped records."""
    for name, shape in net.weight_shapes().items():
        if name not in weights:
            raise ShapeError(f"weight bundle lacks record {name!r}")
        got = tuple(np.shape(weights[name]))
        if got != tuple(shape):
            raise ShapeError(f"record {name!r} has shape {got}, net expects {tuple(shape)}")


# ----------------------------------------------------------------- PXW1


def encode_bundle(records):
    """Serialize ``{name: array}`` to PXW1 bytes, preserving insertion order."""
    parts = [PXW_MAGIC, struct.pack("<I", len(records))]
    for name, array in records.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(array))
    return b"".join(parts)


def decode_bundle(buf):
    if buf[:4] != PXW_MAGIC:
        raise FormatError(f"bad bundle magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 8:
        raise FormatError("truncated bundle header", 4)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    records = {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise FormatError("truncated record name length", pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + n:
            raise FormatError("truncated record name", pos)
        try:
            name = bytes(buf[pos : pos + n]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("record name is not utf-8", pos) from exc
        pos += n
        records[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record", pos)
    return records


def save_bundle(records, path):
    Path(path).write_bytes(encode_bundle(records))


def load_bundle(path):
    return decode_bundle(Path(path).read_bytes())


def load_weights(path, net):
    """Load a PXW1 weight bundle and check it against ``net``."""
    weights = load_bundle(path)
    check_weights(net, weights)
    return weights


# ------------------------------------------------------- NetSpec text

_INT_KEYS = {"out": "out_channels", "kernel": "kernel", "stride": "stride", "pad": "pad",
             "group": "group", "radius": "depth_radius"}
_FLOAT_KEYS = {"alpha": "alpha", "beta": "beta", "bias": "bias"}


def _pairs(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise FormatError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def parse_netspec(text):
    """Parse the plain-text NetSpec format (see module docstring)."""
    layers, taps = [], {}
    header = {"input_scale": 1.0, "in_channels": 3}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "layer":
            kv = _pairs(rest, lineno)
            kind = kv.pop("kind", None)
            name = kv.pop("name", f"layer{len(layers)}")
            args = {}
            try:
                for k, v in kv.items():
                    if k in _INT_KEYS:
                        args[_INT_KEYS[k]] = int(v)
                    elif k in _FLOAT_KEYS:
                        args[_FLOAT_KEYS[k]] = float(v)
                    else:
                        raise FormatError(f"line {lineno}: unknown layer key {k!r}")
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"line {lineno}: {exc}") from exc
            layers.append(LayerSpec(kind, name, **args))
        elif head == "tap":
            kv = _pairs(rest, lineno)
            if not layers:
                raise FormatError(f"line {lineno}: tap before any layer")
            taps[kv["name"]] = len(layers) - 1
        else:
            kv = _pairs([head, *rest], lineno)
            for k, v in kv.items():
                if k == "input_scale":
                    header[k] = float(v)
                elif k == "in_channels":
                    header[k] = int(v)
                else:
                    raise FormatError(f"line {lineno}: unknown key {k!r}")
    return NetSpec(tuple(layers), taps, header["in_channels"], header["input_scale"])


def format_netspec(net):
    lines = [f"input_scale={net.input_scale!r}", f"in_channels={net.in_channels}"]
    tap_at = {}
    for name in net.tap_names:
        tap_at.setdefault(net.taps[name], []).append(name)
    for i, l in enumerate(net.layers):
        parts = [f"layer name={l.name}", f"kind={l.kind}"]
        if l.kind == "conv":
            parts += [f"out={l.out_channels}", f"kernel={l.kernel}", f"stride={l.stride}",
                      f"pad={l.pad}", f"group={l.group}"]
        elif l.kind == "maxpool":
            parts += [f"kernel={l.kernel}", f"stride={l.stride}", f"pad={l.pad}"]
        elif l.kind == "lrn":
            parts += [f"radius={l.depth_radius}", f"alpha={l.alpha!r}", f"beta={l.beta!r}",
                      f"bias={l.bias!r}"]
        lines.append(" ".join(parts))
        lines += [f"tap name={n}" for n in tap_at.get(i, ())]
    return "\n".join(lines) + "\n"


def load_netspec(path):
    return parse_netspec(Path(path).read_text())
