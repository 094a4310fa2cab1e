"""Siamese convolutional descriptor networks, from scratch in numpy.

One shared-weight branch turns a patch block (density or vorticity
channels) into a unit-norm descriptor: a stack of valid/same convolutions
with tanh activations and max-pooling down to 2 samples per axis, then a
flatten and an L2 normalization. Training couples two branch passes with
either the plain hinge loss on a scalar score head or the hinge embedding
loss directly on descriptor distances.
"""

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (DimensionMismatchError, FormatError,
                     TrainingDivergedError)
from .solver import resample_array

NORM_EPS = 1e-12


def is_degenerate_descriptor(d):
    """Zero output of the normalization guard; treated as 'no match'."""
    return float(np.linalg.norm(d)) < 0.5


# ---------------------------------------------------------------------------
# layers

class Layer:
    params = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def param_arrays(self):
        return [getattr(self, p) for p in self.params]

    def grad_arrays(self):
        return [getattr(self, "g" + p) for p in self.params]


class Conv(Layer):
    """N-dimensional convolution (stride 1) via im2col."""

    params = ("w", "b")

    def __init__(self, ndim, in_ch, out_ch, kernel, pad, rng):
        self.ndim = ndim
        self.kernel = kernel
        self.pad = pad
        kshape = (out_ch, in_ch) + (kernel,) * ndim
        fan_in = in_ch * kernel ** ndim
        self.w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), kshape)
        self.b = np.zeros(out_ch)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def _pad(self, x):
        if self.pad == 0:
            return x
        width = [(0, 0), (0, 0)] + [(self.pad, self.pad)] * self.ndim
        return np.pad(x, width)

    def forward(self, x):
        xp = self._pad(x)
        k, nd = self.kernel, self.ndim
        win = sliding_window_view(xp, (k,) * nd, axis=tuple(range(2, 2 + nd)))
        # (B, C, *S', *k) -> (B, *S', C, *k)
        win = np.moveaxis(win, 1, 1 + nd)
        self._out_spatial = win.shape[1:1 + nd]
        cols = win.reshape(win.shape[0] * int(np.prod(self._out_spatial)), -1)
        self._cols = cols
        self._in_shape = x.shape
        wflat = self.w.reshape(self.w.shape[0], -1)
        y = cols @ wflat.T + self.b
        y = y.reshape((x.shape[0],) + self._out_spatial + (self.w.shape[0],))
        return np.moveaxis(y, -1, 1)

    def backward(self, dy):
        nd = self.ndim
        dyf = np.moveaxis(dy, 1, -1).reshape(self._cols.shape[0],
                                             self.w.shape[0])
        wflat = self.w.reshape(self.w.shape[0], -1)
        self.gw += (dyf.T @ self._cols).reshape(self.w.shape)
        self.gb += dyf.sum(axis=0)
        dcols = dyf @ wflat
        b = self._in_shape[0]
        in_ch = self._in_shape[1]
        dcols = dcols.reshape((b,) + self._out_spatial + (in_ch,)
                              + (self.kernel,) * nd)
        dcols = np.moveaxis(dcols, 1 + nd, 1)  # (B, C, *S', *k)
        padded_shape = ((b, in_ch)
                        + tuple(s + 2 * self.pad for s in self._in_shape[2:]))
        dxp = np.zeros(padded_shape)
        for off in itertools.product(*(range(self.kernel),) * nd):
            sl = (slice(None), slice(None)) + tuple(
                slice(o, o + s) for o, s in zip(off, self._out_spatial))
            dxp[sl] += dcols[(Ellipsis,) + off]
        if self.pad:
            core = (slice(None), slice(None)) + (slice(self.pad, -self.pad),) * nd
            dxp = dxp[core]
        return dxp


class MaxPool(Layer):
    """Max pooling with window/stride per axis (stride 1 overlaps)."""

    def __init__(self, ndim, window=2, stride=None):
        self.ndim = ndim
        self.window = window
        self.stride = window if stride is None else stride

    def forward(self, x):
        nd, w, s = self.ndim, self.window, self.stride
        win = sliding_window_view(x, (w,) * nd, axis=tuple(range(2, 2 + nd)))
        stepped = win[(slice(None), slice(None))
                      + (slice(None, None, s),) * nd]
        self._out_spatial = stepped.shape[2:2 + nd]
        flat = stepped.reshape(stepped.shape[:2 + nd] + (-1,))
        self._arg = np.argmax(flat, axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        nd, w, s = self.ndim, self.window, self.stride
        offs = np.unravel_index(self._arg, (w,) * nd)
        grids = np.meshgrid(*[np.arange(n) for n in self._arg.shape],
                            indexing="ij")
        idx = [grids[0], grids[1]]
        for a in range(nd):
            idx.append(grids[2 + a] * s + offs[a])
        dx = np.zeros(self._in_shape)
        np.add.at(dx, tuple(idx), dy)
        return dx


class Tanh(Layer):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y ** 2)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    params = ("w", "b")

    def __init__(self, n_in, n_out, rng):
        self.w = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_out, n_in))
        self.b = np.zeros(n_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.gw += dy.T @ self._x
        self.gb += dy.sum(axis=0)
        return dy @ self.w


class L2Normalize(Layer):
    """Row-wise unit normalization; all-zero rows pass through as zeros."""

    def forward(self, x):
        norms = np.linalg.norm(x, axis=1)
        self._live = norms > NORM_EPS
        self._n = np.where(self._live, norms, 1.0)
        self._y = np.where(self._live[:, None], x / self._n[:, None], 0.0)
        bad = ~np.isfinite(norms)
        if np.any(bad):  # divergence must surface, not hide behind the guard
            self._y[bad] = np.nan
        return self._y

    def backward(self, dy):
        dot = np.sum(self._y * dy, axis=1, keepdims=True)
        dx = (dy - self._y * dot) / self._n[:, None]
        dx[~self._live] = 0.0
        return dx


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def param_layers(self):
        return [l for l in self.layers if l.params]

    def zero_grads(self):
        for layer in self.param_layers():
            for g in layer.grad_arrays():
                g.fill(0.0)


# ---------------------------------------------------------------------------
# network specs

INPUT_RES = {2: 36, 3: 12}
DESCRIPTOR_DIM = {2: 128, 3: 256}


@dataclass
class NetworkSpec:
    ndim: int
    channels: int
    variant: str = "embedding"   # or "score"
    seed: int = 0

    @property
    def input_res(self):
        return INPUT_RES[self.ndim]

    @property
    def descriptor_dim(self):
        return DESCRIPTOR_DIM[self.ndim]


def _branch_layers(spec, rng):
    nd, c = spec.ndim, spec.channels
    if nd == 2:
        # 36 -> 32 -> 16 -> 12 -> 6 -> 4 -> 2, 32 features
        return [Conv(2, c, 4, 5, 0, rng), Tanh(), MaxPool(2),
                Conv(2, 4, 16, 5, 0, rng), Tanh(), MaxPool(2),
                Conv(2, 16, 32, 3, 0, rng), Tanh(), MaxPool(2),
                Flatten()]
    # 12 -> 12 -> 6 -> 6 -> 3 -> 3 -> 2, 32 features
    return [Conv(3, c, 4, 5, 2, rng), Tanh(), MaxPool(3),
            Conv(3, 4, 16, 5, 2, rng), Tanh(), MaxPool(3),
            Conv(3, 16, 32, 3, 1, rng), Tanh(), MaxPool(3, 2, 1),
            Flatten()]


class DescriptorNet:
    """Shared branch plus a normalized descriptor layer.

    The ``score`` variant adds the optional decision layers (one hidden
    fully-connected layer and a scalar output node) evaluated on the raw
    concatenated branch outputs of a pair.
    """

    def __init__(self, spec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.branch = Sequential(_branch_layers(spec, rng))
        self.norm = L2Normalize()
        feat = spec.descriptor_dim
        if spec.variant == "score":
            self.head = Sequential([Dense(2 * feat, 64, rng), Tanh(),
                                    Dense(64, 1, rng)])
        else:
            self.head = None

    def check_input(self, x):
        want = (self.spec.channels,) + (self.spec.input_res,) * self.spec.ndim
        if x.shape[1:] != want:
            raise DimensionMismatchError(
                f"network input shape {x.shape[1:]} != {want}")

    def features(self, x):
        self.check_input(x)
        return self.branch.forward(np.asarray(x, dtype=np.float64))

    def descriptors(self, x):
        """Unit-norm descriptors for a batch; zero rows flag degenerates."""
        return self.norm.forward(self.features(x))

    def descriptor(self, block):
        return self.descriptors(np.asarray(block)[None])[0]

    def scores(self, x1, x2):
        f = self.features(np.concatenate([x1, x2], axis=0))
        n = len(x1)
        return self.head.forward(np.concatenate([f[:n], f[n:]], axis=1))[:, 0]

    def all_param_layers(self):
        layers = self.branch.param_layers()
        if self.head is not None:
            layers += self.head.param_layers()
        return layers

    def zero_grads(self):
        self.branch.zero_grads()
        if self.head is not None:
            self.head.zero_grads()


# ---------------------------------------------------------------------------
# losses

def hinge_loss(score, y):
    """max(0, 1 - s) for related pairs, max(0, 1 + s) for unrelated."""
    return np.maximum(0.0, 1.0 - y * score)


def hinge_loss_grad(score, y):
    return np.where(1.0 - y * score > 0.0, -y, 0.0)


def hinge_embedding_loss(d1, d2, y, alpha_p=0.0, alpha_n=0.7):
    """Margin loss on the descriptor distance."""
    dist = np.linalg.norm(np.atleast_2d(d1) - np.atleast_2d(d2), axis=1)
    y = np.asarray(y, dtype=np.float64)
    loss = np.where(y > 0, np.maximum(0.0, alpha_p + dist),
                    np.maximum(0.0, alpha_n - dist))
    return loss if loss.size > 1 else float(loss[0])


def hinge_embedding_grads(d1, d2, y, alpha_p=0.0, alpha_n=0.7):
    diff = d1 - d2
    dist = np.linalg.norm(diff, axis=1)
    y = np.asarray(y, dtype=np.float64)
    active = np.where(y > 0, alpha_p + dist > 0.0, alpha_n - dist > 0.0)
    safe = np.maximum(dist, NORM_EPS)
    unit = diff / safe[:, None]
    g = np.where((active & (dist > NORM_EPS))[:, None],
                 np.where(y[:, None] > 0, unit, -unit), 0.0)
    return g, -g


def combine_descriptors(d_den, d_mot, w_m):
    """Concatenate density and motion halves; unit inputs stay unit."""
    d_den = np.asarray(d_den, dtype=np.float64)
    d_mot = np.asarray(d_mot, dtype=np.float64)
    scale = 1.0 / np.sqrt(1.0 + w_m ** 2)
    return scale * np.concatenate([d_den, w_m * d_mot], axis=-1)


SIMPLE_DENSITY_RES = 7
SIMPLE_CURL_RES = 5


def simple_descriptor(density_block, curl_block):
    """Downsampled-and-normalized raw blocks as a baseline descriptor."""
    nd = np.asarray(density_block).ndim
    den = resample_array(np.asarray(density_block, dtype=np.float64),
                         (SIMPLE_DENSITY_RES,) * nd).ravel()
    curl = np.asarray(curl_block, dtype=np.float64)
    if curl.ndim == nd:
        curl = curl[None]
    cparts = [resample_array(c, (SIMPLE_CURL_RES,) * nd).ravel()
              for c in curl]
    crl = np.concatenate(cparts)

    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > NORM_EPS else np.zeros_like(v)

    return np.concatenate([unit(den), unit(crl)])


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 10
    batch: int = 64
    neg_ratio: int = 1
    seed: int = 0
    alpha_p: float = 0.0
    alpha_n: float = 0.7
    lr_decay: float = 0.1


@dataclass
class TrainingSet:
    """Positive coarse/fine block pairs with their provenance."""
    coarse: np.ndarray
    fine: np.ndarray
    patch_ids: np.ndarray
    frames: np.ndarray

    def __len__(self):
        return len(self.coarse)


def default_negative_sampler(tset, for_indices, rng, min_frame_gap=0):
    """Random non-matching fine block for each sampled coarse input."""
    n = len(tset)
    out = np.empty(len(for_indices), dtype=np.int64)
    for slot, i in enumerate(for_indices):
        while True:
            j = int(rng.integers(n))
            if j == i:
                continue
            if (tset.patch_ids[j] == tset.patch_ids[i]
                    and abs(int(tset.frames[j]) - int(tset.frames[i]))
                    < min_frame_gap):
                continue
            out[slot] = j
            break
    return out


class _Momentum:
    def __init__(self, layers):
        self.layers = layers
        self.vel = [[np.zeros_like(p) for p in l.param_arrays()]
                    for l in layers]

    def step(self, lr, momentum):
        for layer, vels in zip(self.layers, self.vel):
            for p, g, v in zip(layer.param_arrays(), layer.grad_arrays(),
                               vels):
                v *= momentum
                v -= lr * g
                p += v


def train(net, tset, config, negative_sampler=default_negative_sampler,
          min_frame_gap=0, log_fn=None):
    """SGD with momentum over positive pairs plus per-batch random negatives.

    Returns the per-epoch mean loss curve; the net is trained in place.
    Deterministic for a fixed config seed.
    """
    if len(tset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = _Momentum(net.all_param_layers())
    n_pos = max(1, config.batch // (1 + config.neg_ratio))
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(tset))
        lr = config.lr / (1.0 + config.lr_decay * epoch)
        losses = []
        for start in range(0, len(order), n_pos):
            pos = order[start:start + n_pos]
            neg_src = pos.repeat(config.neg_ratio)
            neg = negative_sampler(tset, neg_src, rng, min_frame_gap)
            x1 = np.concatenate([tset.coarse[pos], tset.coarse[neg_src]])
            x2 = np.concatenate([tset.fine[pos], tset.fine[neg]])
            y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
            net.zero_grads()
            loss = _pair_batch_backward(net, x1, x2, y, config)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}")
            losses.append(loss)
            opt.step(lr, config.momentum)
        curve.append(float(np.mean(losses)))
        if log_fn:
            log_fn(epoch, curve[-1])
    return curve


def _pair_batch_backward(net, x1, x2, y, config):
    n = len(x1)
    stacked = np.concatenate([x1, x2], axis=0)
    feats = net.features(stacked)
    if net.spec.variant == "score":
        pair_feats = np.concatenate([feats[:n], feats[n:]], axis=1)
        score = net.head.forward(pair_feats)[:, 0]
        loss = float(np.mean(hinge_loss(score, y)))
        ds = hinge_loss_grad(score, y)[:, None] / n
        dpair = net.head.backward(ds)
        dfeat = np.concatenate([dpair[:, :feats.shape[1]],
                                dpair[:, feats.shape[1]:]], axis=0)
        net.branch.backward(dfeat)
        return loss
    descs = net.norm.forward(feats)
    d1, d2 = descs[:n], descs[n:]
    loss = float(np.mean(hinge_embedding_loss(
        d1, d2, y, config.alpha_p, config.alpha_n)))
    g1, g2 = hinge_embedding_grads(d1, d2, y, config.alpha_p, config.alpha_n)
    dnorm = net.norm.backward(np.concatenate([g1, g2], axis=0) / n)
    net.branch.backward(dnorm)
    return loss


# ---------------------------------------------------------------------------
# weight file

NET_MAGIC = b"SPNET"
NET_VERSION = 1
_VARIANTS = ["embedding", "score"]


def save_network(net, path):
    layers = net.all_param_layers()
    with open(path, "wb") as f:
        f.write(NET_MAGIC)
        f.write(struct.pack("<I", NET_VERSION))
        f.write(struct.pack("<4I", net.spec.ndim, net.spec.channels,
                            _VARIANTS.index(net.spec.variant),
                            net.spec.seed))
        f.write(struct.pack("<I", len(layers)))
        for layer in layers:
            arrays = layer.param_arrays()
            f.write(struct.pack("<I", len(arrays)))
            for arr in arrays:
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_network(path):
    with open(path, "rb") as f:
        if f.read(5) != NET_MAGIC:
            raise FormatError("bad network magic")
        version, = struct.unpack("<I", f.read(4))
        if version != NET_VERSION:
            raise FormatError(f"unsupported network version {version}")
        ndim, channels, variant, seed = struct.unpack("<4I", f.read(16))
        net = DescriptorNet(NetworkSpec(ndim, channels,
                                        _VARIANTS[variant], seed))
        count, = struct.unpack("<I", f.read(4))
        layers = net.all_param_layers()
        if count != len(layers):
            raise FormatError("layer count mismatch")
        for layer in layers:
            n_arrays, = struct.unpack("<I", f.read(4))
            arrays = layer.param_arrays()
            if n_arrays != len(arrays):
                raise FormatError("parameter count mismatch")
            for arr in arrays:
                nd, = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{nd}I", f.read(4 * nd))
                if shape != arr.shape:
                    raise FormatError(
                        f"weight shape {shape} != expected {arr.shape}")
                raw = f.read(4 * int(np.prod(shape)))
                arr[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return net
