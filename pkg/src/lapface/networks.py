"""Learned components: multi-level encoders, canonical decoders, view heads,
the channel-wise set aggregator, and the attribute-refining network.

All modules are plain parameter containers; a forward pass wraps parameters
onto the caller's tape (or runs tape-free numpy for inference) and builds the
graph functionally.  Weight names are hierarchical dotted paths, stable
across runs, and serialize through the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatch
from .objectives import ConfidencePair, sigma_from_raw
from .renderer import Light, Pose, albedo_from_raw, depth_from_raw
from .tensor import Tensor

CODE_DIM = 128
ENCODER_CHANNELS = (16, 32, 64, 128, 128, 128)
INJECTION_LEVELS = (8, 4, 1)


class Parameter:
    __slots__ = ("data",)

    def __init__(self, array):
        self.data = np.ascontiguousarray(array, dtype=np.float64)


def use(tape, param):
    """Wrap a parameter for the current pass; tape-free gives plain numpy."""
    if tape is None:
        return Tensor(param.data)
    return tape.leaf(param.data, key=param)


class Module:
    """Minimal parameter container; children discovered from attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, tensors):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing {missing[:3]}, extra {extra[:3]}")
        for name, p in params.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeMismatch("load_state_dict", arr.shape, p.data.shape, detail=name)
            p.data = arr


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, zero=False):
        shape = (cout, cin, kernel, kernel)
        self.weight = Parameter(np.zeros(shape) if zero else _uniform(rng, cin * kernel * kernel, shape))
        self.bias = Parameter(np.zeros(cout))
        self.stride = stride
        self.padding = padding

    def forward(self, tape, x):
        out = T.conv2d(x, use(tape, self.weight), self.stride, self.padding)
        b = use(tape, self.bias)
        return out + b.reshape((out.shape[0], 1, 1))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        self.weight = Parameter(np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))
        self.n_out = n_out

    def forward(self, tape, x):
        return x @ use(tape, self.weight) + use(tape, self.bias).reshape((1, self.n_out))


def _stage_plan(size):
    if size < 16 or size & (size - 1):
        raise ContractError(f"image size must be a power of two >= 16, got {size}")
    n_stride = int(np.log2(size)) - 2
    return list(ENCODER_CHANNELS[:n_stride])


def encoder_level_channels(size, code_dim=CODE_DIM):
    """Spatial size -> channel count of each pyramid level (1 = fused code)."""
    chans = _stage_plan(size)
    levels = {}
    s = size
    for ch in chans:
        s //= 2
        levels[s] = ch
    levels[1] = code_dim
    return levels


class PyramidEncoder(Module):
    """Strided stages down to 4x4, a final 4->1 stage, and a multi-level fuse.

    Every stage output goes through a 3x3 convolution and global average
    pooling; the pooled vectors are concatenated and fused by a 1x1
    convolution into the latent code.  The returned pyramid maps spatial
    size -> feature, with the 1x1 level being the fused code itself.
    """

    def __init__(self, in_ch, size, code_dim, rng):
        chans = _stage_plan(size)
        self.size = size
        self.code_dim = code_dim
        self.stages = []
        prev = in_ch
        for ch in chans:
            self.stages.append(Conv(prev, ch, 4, rng, stride=2, padding=1))
            prev = ch
        self.final = Conv(prev, ENCODER_CHANNELS[len(chans)], 4, rng)
        self.pyramid_convs = [Conv(ch, ch, 3, rng, padding=1) for ch in chans]
        self.pyramid_convs.append(Conv(self.final.weight.data.shape[0],
                                       self.final.weight.data.shape[0], 3, rng, padding=1))
        total = sum(ch for ch in chans) + self.final.weight.data.shape[0]
        self.fuse = Conv(total, code_dim, 1, rng)

    def forward(self, tape, image, inject=None):
        x = T.as_tensor(image)
        if x.shape[-2:] != (self.size, self.size):
            raise ShapeMismatch("encode", x.shape, (self.size, self.size))
        feats = []
        h = x
        s = self.size
        for conv in self.stages:
            h = T.leaky_relu(conv.forward(tape, h))
            s //= 2
            if inject and s in inject:
                h = h + inject[s]
            feats.append((s, h))
        h = T.leaky_relu(self.final.forward(tape, h))
        feats.append((1, h))
        pooled = []
        for (_, f), pconv in zip(feats, self.pyramid_convs):
            pooled.append(T.avg_pool2d(T.leaky_relu(pconv.forward(tape, f))))
        code_map = self.fuse.forward(tape, T.concat(pooled, axis=0))
        if inject and 1 in inject:
            code_map = code_map + inject[1]
        code = code_map.reshape((self.code_dim,))
        pyramid = dict(feats[:-1])
        pyramid[1] = code_map
        return code, pyramid


def _decoder_channels(size):
    return {4: 128, 8: 64, 16: 32}.get(size, 16)


class PyramidDecoder(Module):
    """Mirror decoder: nearest-upsample + 3x3 convolution per doubling."""

    def __init__(self, code_dim, out_ch, size, rng, zero_final=True):
        _stage_plan(size)
        self.size = size
        self.code_dim = code_dim
        self.convs = []
        self.sizes = []
        prev = code_dim
        s = 4
        while s <= size:
            ch = _decoder_channels(s)
            self.convs.append(Conv(prev, ch, 3, rng, padding=1))
            self.sizes.append(s)
            prev = ch
            s *= 2
        self.out = Conv(prev, out_ch, 3, rng, padding=1, zero=zero_final)

    def forward(self, tape, code):
        h = code.reshape((self.code_dim, 1, 1))
        for s, conv in zip(self.sizes, self.convs):
            h = T.upsample_nearest(h, 4 if s == 4 else 2)
            h = T.leaky_relu(conv.forward(tape, h))
        return self.out.forward(tape, h)


class ConvHead(Module):
    """Small strided encoder emitting an n-dim vector (zero-initialized)."""

    def __init__(self, in_ch, size, n_out, rng):
        chans = _stage_plan(size)
        self.stages = []
        prev = in_ch
        for ch in chans:
            self.stages.append(Conv(prev, ch, 4, rng, stride=2, padding=1))
            prev = ch
        self.bottleneck = Conv(prev, 128, 4, rng)
        self.out = Conv(128, n_out, 1, rng, zero=True)
        self.n_out = n_out

    def forward(self, tape, image):
        h = T.as_tensor(image)
        for conv in self.stages:
            h = T.leaky_relu(conv.forward(tape, h))
        h = T.leaky_relu(self.bottleneck.forward(tape, h))
        return self.out.forward(tape, h).reshape((self.n_out,))


class PoseHead(Module):
    def __init__(self, size, rng):
        self.head = ConvHead(3, size, 6, rng)

    def forward(self, tape, image):
        return Pose.from_raw(self.head.forward(tape, image))


class LightHead(Module):
    def __init__(self, size, rng):
        self.head = ConvHead(3, size, 4, rng)

    def forward(self, tape, image):
        return Light.from_raw(self.head.forward(tape, image))


class ConfidenceNet(Module):
    """Encoder-decoder emitting two positive scale maps (plain + flipped)."""

    def __init__(self, size, rng):
        self.size = size
        self.enc = [Conv(3, 16, 4, rng, stride=2, padding=1),
                    Conv(16, 32, 4, rng, stride=2, padding=1),
                    Conv(32, 64, 4, rng, stride=2, padding=1)]
        self.dec = [Conv(64, 32, 3, rng, padding=1),
                    Conv(32, 16, 3, rng, padding=1),
                    Conv(16, 16, 3, rng, padding=1)]
        self.out = Conv(16, 2, 3, rng, padding=1, zero=True)

    def forward(self, tape, image):
        h = T.as_tensor(image)
        for conv in self.enc:
            h = T.leaky_relu(conv.forward(tape, h))
        for conv in self.dec:
            h = T.leaky_relu(conv.forward(tape, T.upsample_nearest(h, 2)))
        raw = self.out.forward(tape, h)
        sig = sigma_from_raw(raw)
        s = self.size
        return ConfidencePair(
            sigma=T.slice_axis(sig, 0, 0, 1).reshape((s, s)),
            sigma_flip=T.slice_axis(sig, 0, 1, 2).reshape((s, s)),
        )


class CodeAggregator(Module):
    """Channel-wise adaptive fusion of per-image codes.

    A shared two-layer perceptron scores each code per channel; scores are
    softmax-normalized across the set and the codes combined by the
    resulting convex weights.  Reductions over the set axis are value-sorted,
    so the output is bit-exactly permutation invariant.
    """

    def __init__(self, code_dim, rng):
        self.code_dim = code_dim
        self.fc1 = Linear(code_dim, code_dim, rng)
        self.fc2 = Linear(code_dim, code_dim, rng)

    def raw_weights(self, tape, stacked):
        h = T.leaky_relu(self.fc1.forward(tape, stacked))
        return self.fc2.forward(tape, h)

    def aggregate_weighted(self, codes, raw_weights):
        """Combine codes [N each of c] with given raw scores [N,c]."""
        if not codes:
            raise ContractError("aggregate: empty code set")
        stacked = T.concat([c.reshape((1, self.code_dim)) for c in codes], axis=0)
        n = len(codes)
        m = raw_weights.max(axis=0, keepdims=True)
        e = T.exp(raw_weights - T.broadcast_to(m, (n, self.code_dim)))
        den = T.ordered_sum(e, axis=0).reshape((1, self.code_dim))
        wbar = e / T.broadcast_to(den, (n, self.code_dim))
        return T.ordered_sum(wbar * stacked, axis=0)

    def aggregate(self, tape, codes):
        codes = [T.as_tensor(c) for c in codes]
        if not codes:
            raise ContractError("aggregate: empty code set")
        stacked = T.concat([c.reshape((1, self.code_dim)) for c in codes], axis=0)
        return self.aggregate_weighted(codes, self.raw_weights(tape, stacked))


class ChannelGate(Module):
    """Per-channel sigmoid gate computed from the globally pooled feature."""

    def __init__(self, channels, rng):
        self.channels = channels
        self.fc1 = Linear(channels, channels, rng)
        self.fc2 = Linear(channels, channels, rng)

    def forward(self, tape, feature, override=None):
        if override is not None:
            gate = Tensor(np.full((self.channels, 1, 1), float(override)))
        else:
            pooled = T.avg_pool2d(feature).reshape((1, self.channels))
            gate = T.sigmoid(self.fc2.forward(tape, T.leaky_relu(self.fc1.forward(tape, pooled))))
            gate = gate.reshape((self.channels, 1, 1))
        return feature * T.broadcast_to(gate, feature.shape)


class FilteredConnection(Module):
    """Skip connection gated by a learned spatial attention mask."""

    def __init__(self, enc_ch, dec_ch, rng):
        self.conv = Conv(enc_ch + dec_ch, 1, 3, rng, padding=1)

    def forward(self, tape, f_enc, f_dec, override=None):
        if f_enc.shape[-2:] != f_dec.shape[-2:]:
            raise ShapeMismatch("filtered_connection", f_enc.shape, f_dec.shape)
        if override is not None:
            attention = Tensor(np.full((1,) + f_enc.shape[-2:], float(override)))
        else:
            attention = T.sigmoid(self.conv.forward(tape, T.concat([f_enc, f_dec], axis=0)))
        fused = T.concat([f_dec, f_enc * T.broadcast_to(attention, f_enc.shape)], axis=0)
        return attention, fused


class RefinerNet(Module):
    """Modify a canonical map toward a target image.

    The canonical map is encoded by `phi`; target-image features from the
    attribute encoder are channel-gated and added at the three coarsest
    pyramid levels (8, 4, 1) before the code fuse; the decoder mirrors `phi`
    with a filtered connection at every resolution the encoder provides.
    """

    def __init__(self, in_ch, size, code_dim, rng):
        self.size = size
        self.code_dim = code_dim
        self.phi = PyramidEncoder(in_ch, size, code_dim, rng)
        self.att = PyramidEncoder(3, size, code_dim, rng)
        levels = encoder_level_channels(size, code_dim)
        self.gates = {lvl: ChannelGate(levels[lvl], rng) for lvl in INJECTION_LEVELS}
        self.gate8 = self.gates[8]
        self.gate4 = self.gates[4]
        self.gate1 = self.gates[1]
        self.dec_convs = []
        self.skips = []
        self.dec_sizes = []
        prev = code_dim
        s = 4
        while s <= size:
            ch = _decoder_channels(s)
            if 8 <= s <= size // 2:
                self.skips.append(FilteredConnection(levels[s], prev, rng))
                self.dec_convs.append(Conv(prev + levels[s], ch, 3, rng, padding=1))
            else:
                self.skips.append(None)
                self.dec_convs.append(Conv(prev, ch, 3, rng, padding=1))
            self.dec_sizes.append(s)
            prev = ch
            s *= 2
        self.out = Conv(prev, in_ch, 3, rng, padding=1, zero=True)

    def attribute_gate(self, tape, pyramid, level, override=None):
        """Gate one pyramid level of the attribute encoder for injection."""
        if level not in INJECTION_LEVELS:
            raise ContractError(f"attribute_gate: level {level} is not an injection level {INJECTION_LEVELS}")
        return self.gates[level].forward(tape, pyramid[level], override)

    def forward(self, tape, canon, target, gate_override=None, attention_override=None):
        _, pyr_att = self.att.forward(tape, target)
        inject = {lvl: self.attribute_gate(tape, pyr_att, lvl, gate_override)
                  for lvl in INJECTION_LEVELS}
        code, pyr_phi = self.phi.forward(tape, canon, inject=inject)
        h = code.reshape((self.code_dim, 1, 1))
        for s, conv, skip in zip(self.dec_sizes, self.dec_convs, self.skips):
            h = T.upsample_nearest(h, 4 if s == 4 else 2)
            if skip is not None:
                _, h = skip.forward(tape, pyr_phi[s], h, attention_override)
            h = T.leaky_relu(conv.forward(tape, h))
        return self.out.forward(tape, h)


@dataclass
class FactorSet:
    """Disentangled per-image factors."""

    depth: Tensor
    albedo: Tensor
    pose: Pose
    light: Light
    confidence: ConfidencePair


AGGREGATION_GROUP = ("delta_a", "delta_d", "phi_a", "phi_d", "agg_a", "agg_d",
                     "pose_head", "light_head", "conf_net")
REFINER_GROUP = ("refiner_a", "refiner_d")


class FaceModel(Module):
    """The full pipeline: aggregation networks, view heads, refiners."""

    def __init__(self, size=64, code_dim=CODE_DIM, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.size = size
        self.code_dim = code_dim
        self.delta_a = PyramidEncoder(3, size, code_dim, rng)
        self.delta_d = PyramidEncoder(3, size, code_dim, rng)
        self.phi_a = PyramidDecoder(code_dim, 3, size, rng)
        self.phi_d = PyramidDecoder(code_dim, 1, size, rng)
        self.agg_a = CodeAggregator(code_dim, rng)
        self.agg_d = CodeAggregator(code_dim, rng)
        self.pose_head = PoseHead(size, rng)
        self.light_head = LightHead(size, rng)
        self.conf_net = ConfidenceNet(size, rng)
        self.refiner_a = RefinerNet(3, size, code_dim, rng)
        self.refiner_d = RefinerNet(1, size, code_dim, rng)

    def encode_views(self, tape, images):
        codes_a, codes_d = [], []
        for img in images:
            codes_a.append(self.delta_a.forward(tape, img)[0])
            codes_d.append(self.delta_d.forward(tape, img)[0])
        return codes_a, codes_d

    def canonical(self, tape, images):
        """Aggregate a photo set into the canonical albedo and depth."""
        codes_a, codes_d = self.encode_views(tape, images)
        xa = self.agg_a.aggregate(tape, codes_a)
        xd = self.agg_d.aggregate(tape, codes_d)
        albedo = albedo_from_raw(self.phi_a.forward(tape, xa))
        depth = depth_from_raw(self.phi_d.forward(tape, xd)).reshape((self.size, self.size))
        return albedo, depth

    def view_factors(self, tape, image):
        pose = self.pose_head.forward(tape, image)
        light = self.light_head.forward(tape, image)
        conf = self.conf_net.forward(tape, image)
        return pose, light, conf

    def refine(self, tape, albedo_c, depth_c, target,
               gate_override=None, attention_override=None):
        """Scene-specific albedo/depth for one target image."""
        raw_a = self.refiner_a.forward(tape, albedo_c, target,
                                       gate_override, attention_override)
        d_in = depth_c.reshape((1, self.size, self.size))
        raw_d = self.refiner_d.forward(tape, d_in, target,
                                       gate_override, attention_override)
        albedo_t = albedo_from_raw(raw_a)
        depth_t = depth_from_raw(raw_d).reshape((self.size, self.size))
        return albedo_t, depth_t

    def group_parameters(self, group):
        prefixes = {"aggregation": AGGREGATION_GROUP, "refiner": REFINER_GROUP,
                    "all": AGGREGATION_GROUP + REFINER_GROUP}[group]
        return {name: p for name, p in self.named_parameters()
                if name.split(".", 1)[0] in prefixes}
