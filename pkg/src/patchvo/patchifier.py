"""Convolutional feature extractor and patch sampler.

Topology (fixed; only head widths and the optional pyramid branch follow the
configuration):

* stem: 3x3 conv (bins -> 32), stride 1, instance norm, ReLU;
* two residual stages of two 3x3 convs each (32 -> 128 at /2,
  128 -> 256 at /4); with ``use_bypass`` the stage is a residual block whose
  skip is a strided 1x1 projection, without it a plain conv stack;
* matching head: 1x1 conv (256 -> mf_channels);
* context head: 1x1 conv (256 -> cf_channels);
* pyramid branch (``use_pyramid``): two more residual stages at /8 and /16
  followed by a 1x1 head to mf_channels.

Inputs are zero-padded on the bottom/right to multiples of 16 so every
downsampling halves cleanly; patch centers are never sampled from the
padded margin.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError
from .graph import Patch

TRUNK_CHANNELS = (32, 128, 256)  # stem, stage1, stage2 widths
NORM_EPS = 1e-5


class ConvLayer(NamedTuple):
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    scale: int      # total downsample factor of the layer output
    normed: bool    # followed by an instance norm (own gamma/beta tensors)


def pad16(size):
    return (size + 15) // 16 * 16


def conv_layer_plan(config):
    """Every conv layer implied by the configuration, in execution order."""
    c0, c1, c2 = TRUNK_CHANNELS
    layers = [ConvLayer("patchifier.stem.conv", config.bins, c0, 3, 1, 1, True)]

    def stage(name, cin, cout, scale):
        entries = [
            ConvLayer(f"{name}.conv1", cin, cout, 3, 2, scale, True),
            ConvLayer(f"{name}.conv2", cout, cout, 3, 1, scale, True),
        ]
        if config.use_bypass:
            entries.append(ConvLayer(f"{name}.skip", cin, cout, 1, 2, scale, False))
        return entries

    layers += stage("patchifier.stage1", c0, c1, 2)
    layers += stage("patchifier.stage2", c1, c2, 4)
    layers.append(ConvLayer("patchifier.mf_head", c2, config.mf_channels, 1, 1, 4, False))
    layers.append(ConvLayer("patchifier.cf_head", c2, config.cf_channels, 1, 1, 4, False))
    if config.use_pyramid:
        layers += stage("patchifier.pyr1", c2, c2, 8)
        layers += stage("patchifier.pyr2", c2, c2, 16)
        layers.append(ConvLayer("patchifier.pyr_head", c2, config.mf_channels, 1, 1, 16, False))
    return layers


def bypass_tensor_names(config):
    """Names of the tensors that exist only when by-pass connections are on."""
    names = []
    stages = ["patchifier.stage1", "patchifier.stage2"]
    if config.use_pyramid:
        stages += ["patchifier.pyr1", "patchifier.pyr2"]
    for stage in stages:
        names += [f"{stage}.skip.weight", f"{stage}.skip.bias"]
    return names


@dataclass
class FeatureSet:
    """Per-frame extractor outputs.

    ``mf``/``cf`` are (H/4, W/4, C) arrays on the padded grid; ``pyr`` is the
    (H/16, W/16, mf_channels) level when the pyramid branch is enabled.
    ``density`` is the absolute event mass pooled to /4, used by the
    event-density patch scorer.
    """

    mf: np.ndarray
    cf: np.ndarray
    pyr: Optional[np.ndarray]
    frame_id: int
    density: Optional[np.ndarray] = None


def _conv2d(x, weight, bias, stride, counter=None):
    """3x3 (pad 1) or 1x1 convolution on (H, W, Cin) via im2col + matmul."""
    cout, cin, k, _ = weight.shape
    if k == 3:
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
        windows = windows[::stride, ::stride]          # (H', W', C, 3, 3)
        h, w = windows.shape[:2]
        cols = windows.reshape(h * w, cin * 9)
        wmat = weight.transpose(1, 2, 3, 0).reshape(cin * 9, cout)
    else:
        xs = x[::stride, ::stride]
        h, w = xs.shape[:2]
        cols = xs.reshape(h * w, cin)
        wmat = weight.transpose(1, 2, 3, 0).reshape(cin, cout)
    if counter is not None:
        counter.add(h * w * cout * cin * k * k)
    out = cols @ wmat
    if bias is not None:
        out = out + bias
    return out.reshape(h, w, cout)


def _instance_norm(x, gamma, beta):
    mean = x.mean(axis=(0, 1), keepdims=True)
    var = x.var(axis=(0, 1), keepdims=True)
    return (x - mean) / np.sqrt(var + NORM_EPS) * gamma + beta


def _relu(x):
    return np.maximum(x, 0.0)


def _stage(x, weights, name, use_bypass, counter):
    w = weights
    main = _conv2d(x, w[f"{name}.conv1.weight"], w[f"{name}.conv1.bias"], 2, counter)
    main = _relu(_instance_norm(main, w[f"{name}.norm1.gamma"], w[f"{name}.norm1.beta"]))
    main = _conv2d(main, w[f"{name}.conv2.weight"], w[f"{name}.conv2.bias"], 1, counter)
    main = _instance_norm(main, w[f"{name}.norm2.gamma"], w[f"{name}.norm2.beta"])
    if use_bypass:
        skip = _conv2d(x, w[f"{name}.skip.weight"], w[f"{name}.skip.bias"], 2, counter)
        main = main + skip
    return _relu(main)


def extract_features(evg, weights, config, counter=None):
    """Run the extractor on one voxel grid; deterministic for fixed inputs."""
    if evg.num_bins != config.bins:
        raise ConfigError(f"voxel grid has {evg.num_bins} bins, config expects {config.bins}")
    if evg.width != config.width or evg.height != config.height:
        raise ConfigError(
            f"voxel grid is {evg.width}x{evg.height}, config expects "
            f"{config.width}x{config.height}"
        )
    ph, pw = pad16(config.height), pad16(config.width)
    x = np.zeros((ph, pw, config.bins), dtype=np.float32)
    x[:evg.height, :evg.width] = evg.bins.transpose(1, 2, 0)

    w = weights
    h = _conv2d(x, w["patchifier.stem.conv.weight"], w["patchifier.stem.conv.bias"], 1, counter)
    h = _relu(_instance_norm(h, w["patchifier.stem.norm.gamma"], w["patchifier.stem.norm.beta"]))
    h = _stage(h, w, "patchifier.stage1", config.use_bypass, counter)
    trunk = _stage(h, w, "patchifier.stage2", config.use_bypass, counter)

    mf = _conv2d(trunk, w["patchifier.mf_head.weight"], w["patchifier.mf_head.bias"], 1, counter)
    cf = _conv2d(trunk, w["patchifier.cf_head.weight"], w["patchifier.cf_head.bias"], 1, counter)
    pyr = None
    if config.use_pyramid:
        p = _stage(trunk, w, "patchifier.pyr1", config.use_bypass, counter)
        p = _stage(p, w, "patchifier.pyr2", config.use_bypass, counter)
        pyr = _conv2d(p, w["patchifier.pyr_head.weight"], w["patchifier.pyr_head.bias"], 1, counter)

    # absolute event mass pooled 4x4, for the event-density patch scorer
    mass = np.abs(evg.bins).sum(axis=0)
    padded_mass = np.zeros((ph, pw))
    padded_mass[:evg.height, :evg.width] = mass
    density = padded_mass.reshape(ph // 4, 4, pw // 4, 4).sum(axis=(1, 3))

    return FeatureSet(mf=mf, cf=cf, pyr=pyr, frame_id=evg.frame_id, density=density)


def sample_patches(fs, config, seed=0):
    """Sample ``patches_per_frame`` distinct 3x3 patches from a feature set.

    The default ``event_density`` strategy takes the highest-mass interior
    locations (ties broken row-major); ``uniform_random`` draws without
    replacement, deterministically for a fixed seed. Centers stay at least
    one cell away from the content border and never touch the padded margin.
    """
    n = config.patches_per_frame
    cw, ch = config.width // 4, config.height // 4
    interior_w, interior_h = cw - 2, ch - 2
    if interior_w < 1 or interior_h < 1 or n > interior_w * interior_h:
        raise ConfigError(
            f"cannot place {n} patches on a {cw}x{ch} feature map "
            f"({interior_w * interior_h} interior locations)"
        )
    vs, us = np.mgrid[1:ch - 1, 1:cw - 1]
    vs, us = vs.ravel(), us.ravel()

    if config.sample_strategy == "uniform_random":
        order = np.random.default_rng(seed).permutation(len(us))[:n]
    else:
        scores = fs.density[vs, us]
        order = np.lexsort((np.arange(len(us)), -scores))[:n]

    patches = []
    for v, u in zip(vs[order], us[order]):
        patches.append(Patch(
            patch_id=-1,
            frame_id=fs.frame_id,
            center=np.array([float(u), float(v)]),
            feature=fs.mf[v - 1:v + 2, u - 1:u + 2, :].copy(),
            context=fs.cf[v, u, :].copy(),
        ))
    return patches
