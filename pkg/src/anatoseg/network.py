"""Residual encoder-decoder with token conditioning and a generated 162-parameter head.

Data flow for a batch of images with per-sample (class, scale) ids::

    e0 = stem(image)
    e_b = E_b(e_{b-1} + cond[slice_b])          b = 1..B, E_b = pool + residual block
    omega = phi(GAP(e_B) + cond[gap slice])      162 numbers per sample
    M = proj(decoder(e_0..e_B))                  8 channels
    P = head(M; omega)                           2 channels, softmax, channel 1 = foreground

``cond`` comes from a conditioner: the :class:`~anatoseg.tokenbank.TokenBank`
(class token + scale token) or, for ablations, :class:`OneHotEmbedding`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffops as F
from .diffops import DTYPE, Parameter, Tensor
from .tokenbank import N_SCALES, BlockWidths, TokenBank, slice_bounds

HEAD_CHANNELS = 8
OUT_CHANNELS = 2
HEAD_LAYOUT = ((HEAD_CHANNELS, HEAD_CHANNELS), (HEAD_CHANNELS, HEAD_CHANNELS), (OUT_CHANNELS, HEAD_CHANNELS))
HEAD_PARAMS = sum(o * i + o for o, i in HEAD_LAYOUT)  # 72 + 72 + 18 = 162


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[int, ...] = (16, 32, 64, 128)
    d_gap: int = 128
    in_channels: int = 3

    def __post_init__(self):
        if len(self.blocks) < 2:
            raise ValueError("need at least 2 encoder blocks")

    @property
    def widths(self) -> BlockWidths:
        return BlockWidths(tuple(self.blocks), self.d_gap)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


@dataclass
class DynamicHeadParams:
    w1: object
    b1: object
    w2: object
    b2: object
    w3: object
    b3: object

    def layers(self):
        return [(self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3)]


def split_omega(omega) -> DynamicHeadParams:
    """Split generated parameters (..., 162) into three (weight, bias) pairs.

    Works on numpy arrays and on Tensors; the order is w1, b1, w2, b2, w3, b3.
    """
    n = omega.shape[-1]
    if n != HEAD_PARAMS:
        raise ValueError(f"expected {HEAD_PARAMS} head parameters, got {n}")
    lead = omega.shape[:-1]
    parts, pos = [], 0
    for o, i in HEAD_LAYOUT:
        w = omega[..., pos:pos + o * i]
        parts.append(w.reshape(*lead, o, i))
        pos += o * i
        parts.append(omega[..., pos:pos + o])
        pos += o
    return DynamicHeadParams(*parts)


def apply_head(feat: Tensor, params: DynamicHeadParams) -> Tensor:
    """Three per-sample 1x1 convolutions, ReLU after the first two. feat: (N, 8, H, W)."""
    n, c, h, w = feat.shape
    x = feat.reshape(n, c, h * w)
    layers = params.layers()
    for k, (wk, bk) in enumerate(layers):
        wk, bk = _as_tensor(wk), _as_tensor(bk)
        x = F.matmul(wk, x) + bk.reshape(n, -1, 1)
        if k < len(layers) - 1:
            x = F.relu(x)
    return x.reshape(n, OUT_CHANNELS, h, w)


def _conv_param(rng, name, cout, cin, k, gain=2.0):
    std = np.sqrt(gain / (cin * k * k))
    w = Parameter((rng.standard_normal((cout, cin, k, k)) * std).astype(DTYPE), name + ".w")
    b = Parameter(np.zeros(cout, DTYPE), name + ".b")
    return w, b


def _norm_param(name, c):
    return Parameter(np.ones(c, DTYPE), name + ".g"), Parameter(np.zeros(c, DTYPE), name + ".b")


class ResBlock:
    """conv3-norm-relu-conv3-norm plus identity (or 1x1 projection) shortcut, then relu.

    The norm is a single-group GroupNorm, so a per-channel token shift on the
    block input survives normalization.
    """

    def __init__(self, rng, name: str, cin: int, cout: int):
        self.w1, self.b1 = _conv_param(rng, name + ".conv1", cout, cin, 3)
        self.w2, self.b2 = _conv_param(rng, name + ".conv2", cout, cout, 3, gain=1.0)
        self.n1 = _norm_param(name + ".norm1", cout)
        self.n2 = _norm_param(name + ".norm2", cout)
        self.proj = _conv_param(rng, name + ".skip", cout, cin, 1, gain=1.0) if cin != cout else None

    def parameters(self):
        ps = [self.w1, self.b1, *self.n1, self.w2, self.b2, *self.n2]
        return ps + list(self.proj) if self.proj else ps

    def __call__(self, x: Tensor) -> Tensor:
        h = F.relu(F.group_norm(F.conv2d(x, self.w1, self.b1, padding=1), *self.n1))
        h = F.group_norm(F.conv2d(h, self.w2, self.b2, padding=1), *self.n2)
        s = F.conv2d(x, *self.proj) if self.proj else x
        return F.relu(h + s)


class DecoderBlock:
    """1x1 fusion of the upsampled features with the skip, then a residual block."""

    def __init__(self, rng, name: str, cin: int, cout: int):
        self.fuse = _conv_param(rng, name + ".fuse", cout, cin, 1)
        self.res = ResBlock(rng, name, cout, cout)

    def parameters(self):
        return list(self.fuse) + self.res.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return self.res(F.relu(F.conv2d(x, *self.fuse)))


class OneHotEmbedding:
    """Ablation conditioner: one-hot(class) ++ one-hot(scale) through a learned affine map to d."""

    def __init__(self, n_classes: int, widths: BlockWidths, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.widths = widths
        self.n_classes = n_classes
        fan = n_classes + N_SCALES
        self.weight = Parameter((rng.standard_normal((fan, widths.d)) * 0.02).astype(DTYPE), "onehot.w")
        self.bias = Parameter(np.zeros(widths.d, DTYPE), "onehot.b")

    def parameters(self):
        return [self.weight, self.bias]

    def check_ids(self, class_ids, scale_ids):
        TokenBank.check_ids(self, class_ids, scale_ids)

    def condition(self, class_ids, scale_ids) -> Tensor:
        n = len(class_ids)
        onehot = np.zeros((n, self.n_classes + N_SCALES), self.weight.dtype)
        onehot[np.arange(n), class_ids] = 1
        onehot[np.arange(n), self.n_classes + np.asarray(scale_ids)] = 1
        return F.linear(Tensor(onehot), self.weight, self.bias)


def token_condition(bank: TokenBank, class_ids, scale_ids) -> Tensor:
    ci = np.asarray(class_ids, dtype=np.intp)
    si = np.asarray(scale_ids, dtype=np.intp)
    return F.getitem(bank.class_tokens, ci) + F.getitem(bank.scale_tokens, si)


def condition(conditioner, class_ids, scale_ids) -> Tensor:
    conditioner.check_ids(class_ids, scale_ids)
    if isinstance(conditioner, TokenBank):
        return token_condition(conditioner, class_ids, scale_ids)
    return conditioner.condition(class_ids, scale_ids)


class SegNet:
    """Backbone, fusion controller and head; holds no class-dependent parameters."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        blocks = list(config.blocks)
        outs = blocks[1:] + [config.d_gap]
        self.stem = _conv_param(rng, "stem", blocks[0], config.in_channels, 3)
        self.encoder = [ResBlock(rng, f"enc{b + 1}", blocks[b], outs[b]) for b in range(len(blocks))]
        # decoder level b (deepest first) upsamples and fuses the skip e_{b-1} of width blocks[b-1]
        self.decoder = []
        below = config.d_gap
        for b in range(len(blocks), 0, -1):
            self.decoder.append(DecoderBlock(rng, f"dec{b}", below + blocks[b - 1], blocks[b - 1]))
            below = blocks[b - 1]
        self.proj = _conv_param(rng, "proj", HEAD_CHANNELS, blocks[0], 1, gain=1.0)
        # small enough that the cubic head starts unsaturated for any seed
        phi_std = 0.25 / np.sqrt(config.d_gap)
        self.phi_w = Parameter((rng.standard_normal((config.d_gap, HEAD_PARAMS)) * phi_std).astype(DTYPE), "phi.w")
        self.phi_b = Parameter(np.zeros(HEAD_PARAMS, DTYPE), "phi.b")

    # -- parameter bookkeeping ----------------------------------------
    def backbone_parameters(self) -> list[Parameter]:
        ps = list(self.stem)
        for blk in self.encoder + self.decoder:
            ps += blk.parameters()
        return ps + list(self.proj)

    def phi_parameters(self) -> list[Parameter]:
        return [self.phi_w, self.phi_b]

    def parameters(self) -> list[Parameter]:
        return self.backbone_parameters() + self.phi_parameters()

    def astype(self, dtype) -> "SegNet":
        new = SegNet.__new__(SegNet)
        new.__dict__.update(self.__dict__)
        new.stem = tuple(Parameter(p.data, p.name, dtype) for p in self.stem)
        new.encoder = [_cast_block(b, dtype) for b in self.encoder]
        new.decoder = [_cast_decoder(b, dtype) for b in self.decoder]
        new.proj = tuple(Parameter(p.data, p.name, dtype) for p in self.proj)
        new.phi_w = Parameter(self.phi_w.data, "phi.w", dtype)
        new.phi_b = Parameter(self.phi_b.data, "phi.b", dtype)
        return new

    # -- forward --------------------------------------------------------
    def fusion_controller(self, gap_feat, class_gap, scale_gap):
        """omega = phi(gap + class slice + scale slice); accepts Tensors or arrays."""
        shapes = {np.shape(getattr(v, "data", v))[-1] for v in (gap_feat, class_gap, scale_gap)}
        if len(shapes) != 1 or shapes.pop() != self.config.d_gap:
            raise ValueError("fusion inputs must all have length d_gap")
        fused = F.add(F.add(_as_tensor(gap_feat), _as_tensor(class_gap)), _as_tensor(scale_gap))
        return self._phi(fused)

    def _phi(self, fused: Tensor) -> Tensor:
        if fused.ndim == 1:
            return F.linear(fused.reshape(1, -1), self.phi_w, self.phi_b).reshape(-1)
        return F.linear(fused, self.phi_w, self.phi_b)

    def forward(self, images, class_ids: Sequence[int], scale_ids: Sequence[int], conditioner):
        """Return (foreground probability (N, H, W), logits (N, 2, H, W))."""
        x = _as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        n, _, h, w = x.shape
        class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.intp), (n,))
        scale_ids = np.broadcast_to(np.asarray(scale_ids, dtype=np.intp), (n,))
        step = 2 ** self.config.n_blocks
        if h % step or w % step:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {step}")
        cond = condition(conditioner, class_ids, scale_ids)
        widths = self.config.widths

        e = F.relu(F.conv2d(x, *self.stem, padding=1))
        skips = [e]
        for b, blk in enumerate(self.encoder, start=1):
            s, t = slice_bounds(widths, b)
            tok = cond[:, s:t].reshape(n, t - s, 1, 1)
            e = blk(F.max_pool2(e + tok))
            skips.append(e)

        # cond already holds class token + scale token, so its tail is both gap slices summed
        omega = self._phi(F.global_avg_pool(e) + cond[:, widths.d - widths.d_gap:])

        d = e
        for blk, skip in zip(self.decoder, reversed(skips[:-1])):
            d = blk(F.concat_channels(F.upsample_nearest2(d), skip))
        feat = F.conv2d(d, *self.proj)
        logits = apply_head(feat, split_omega(omega))
        prob = F.softmax_channels(logits)
        return prob[:, 1], logits

    __call__ = forward


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _cast_block(blk: ResBlock, dtype) -> ResBlock:
    new = ResBlock.__new__(ResBlock)
    new.w1, new.b1, new.w2, new.b2 = (Parameter(p.data, p.name, dtype) for p in (blk.w1, blk.b1, blk.w2, blk.b2))
    new.n1 = tuple(Parameter(p.data, p.name, dtype) for p in blk.n1)
    new.n2 = tuple(Parameter(p.data, p.name, dtype) for p in blk.n2)
    new.proj = tuple(Parameter(p.data, p.name, dtype) for p in blk.proj) if blk.proj else None
    return new


def _cast_decoder(blk: DecoderBlock, dtype) -> DecoderBlock:
    new = DecoderBlock.__new__(DecoderBlock)
    new.fuse = tuple(Parameter(p.data, p.name, dtype) for p in blk.fuse)
    new.res = _cast_block(blk.res, dtype)
    return new


def count_parameters(model: SegNet, conditioner=None) -> dict[str, int]:
    counts = {
        "backbone": sum(p.data.size for p in model.backbone_parameters()),
        "phi": sum(p.data.size for p in model.phi_parameters()),
        "head (generated per image)": HEAD_PARAMS,
    }
    if conditioner is not None:
        for p in conditioner.parameters():
            counts[p.name] = p.data.size
    return counts
