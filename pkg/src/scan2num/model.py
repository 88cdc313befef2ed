"""Late-fusion slice network: a shared 2-D conv column, mean fusion, affine head."""
from dataclasses import dataclass, field, fields
from itertools import product

import numpy as np

from scan2num import checkpoint, nn
from scan2num.errors import CheckpointError
from scan2num.kernels import conv_out_size, pool_out_size

POOL_KERNEL = 2
POOL_STRIDE = 2


def _tup(v):
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class NetworkConfig:
    num_slices: int = 16
    input_size: int = 512
    conv_channels: tuple = (32, 128, 256, 512, 1024)
    kernels: tuple = (5, 5, 3, 3, 3)
    strides: tuple = (2, 2, 2, 2, 1)
    pool_after: frozenset = frozenset({1, 2, 3})
    feature_dim: int = 1024
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", _tup(self.conv_channels))
        object.__setattr__(self, "kernels", _tup(self.kernels))
        object.__setattr__(self, "strides", _tup(self.strides))
        object.__setattr__(self, "pool_after", frozenset(int(i) for i in self.pool_after))
        if not len(self.conv_channels) == len(self.kernels) == len(self.strides):
            raise ValueError("conv_channels, kernels and strides must have equal length")
        if self.num_slices < 1:
            raise ValueError("num_slices must be >= 1")
        if min(self.kernels) < 1 or min(self.strides) < 1 or min(self.conv_channels) < 1:
            raise ValueError("kernels, strides and channels must be >= 1")
        if self.feature_dim != self.conv_channels[-1]:
            raise ValueError(f"feature_dim {self.feature_dim} != last conv width {self.conv_channels[-1]}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        bad = [i for i in self.pool_after if not 1 <= i <= len(self.kernels)]
        if bad:
            raise ValueError(f"pool_after refers to missing conv layers {bad}")
        self.shape_chain()

    @property
    def num_convs(self):
        return len(self.kernels)

    def shape_chain(self):
        """``[(layer, channels, spatial size), ...]`` from input to features.

        Raises ValueError naming the first stage that cannot be applied or,
        if the chain does not end at size 1, the last stage.
        """
        size = self.input_size
        chain = [("input", 1, size)]
        for i, (c, k, s) in enumerate(zip(self.conv_channels, self.kernels, self.strides), start=1):
            if size < k:
                raise ValueError(f"conv{i}: input size {size} smaller than kernel {k}")
            size = conv_out_size(size, k, s)
            chain.append((f"conv{i}", c, size))
            if i in self.pool_after:
                if POOL_KERNEL > size + POOL_STRIDE:
                    raise ValueError(f"pool{i}: input size {size} too small")
                size = pool_out_size(size, POOL_KERNEL, POOL_STRIDE)
                chain.append((f"pool{i}", c, size))
        if size != 1:
            raise ValueError(f"{chain[-1][0]}: shape chain ends at {size}, expected 1")
        return chain

    def param_shapes(self):
        shapes = {}
        cin = 1
        for i, (c, k) in enumerate(zip(self.conv_channels, self.kernels), start=1):
            shapes[f"conv{i}.weight"] = (c, cin, k, k)
            shapes[f"conv{i}.bias"] = (c,)
            cin = c
        shapes["fc6.weight"] = (self.feature_dim, 1)
        shapes["fc6.bias"] = (1,)
        return shapes

    def to_meta(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, frozenset)):
                v = ",".join(str(x) for x in sorted(v)) if isinstance(v, frozenset) else ",".join(map(str, v))
            out[f"network.{f.name}"] = str(v)
        return out

    @classmethod
    def from_meta(cls, meta):
        kw = {}
        for f in fields(cls):
            raw = meta[f"network.{f.name}"]
            if f.name in ("conv_channels", "kernels", "strides"):
                kw[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "pool_after":
                kw[f.name] = frozenset(int(x) for x in raw.split(",") if x)
            elif f.name == "dropout_rate":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


def scaled_config(input_size, num_slices, width_factor=1.0, dropout_rate=0.5):
    """Shrink the default column to a smaller input and width.

    Channel widths are scaled by ``width_factor`` (rounded, at least 1).
    Kernel sizes are kept.  The downsampling steps (stride-2 convs, then
    pools, in network order) are kept greedily: the first feasible pattern
    in keep-before-drop order whose chain ends at spatial size 1 wins.
    For ``input_size=512`` every step is kept, which is the default layout.
    """
    base = NetworkConfig()
    channels = tuple(max(1, int(round(c * width_factor))) for c in base.conv_channels)
    # ordered switchable steps: ("s", conv index) or ("p", conv index)
    steps = []
    for i, s in enumerate(base.strides, start=1):
        if s > 1:
            steps.append(("s", i))
        if i in base.pool_after:
            steps.append(("p", i))
    for keep in product((True, False), repeat=len(steps)):
        on = {st for st, k in zip(steps, keep) if k}
        strides = tuple(s if ("s", i) in on else 1 for i, s in enumerate(base.strides, start=1))
        pools = frozenset(i for i in base.pool_after if ("p", i) in on)
        try:
            return NetworkConfig(num_slices=num_slices, input_size=input_size,
                                 conv_channels=channels, kernels=base.kernels, strides=strides,
                                 pool_after=pools, feature_dim=channels[-1],
                                 dropout_rate=dropout_rate)
        except ValueError:
            continue
    raise ValueError(_diagnose(input_size, base))


def _diagnose(input_size, base):
    # too small: the least-reducing chain fails; too large: the most-reducing one
    def run(strides, pools):
        size = input_size
        for i, (k, s) in enumerate(zip(base.kernels, strides), start=1):
            if size < k:
                return f"conv{i}: input size {size} smaller than kernel {k}"
            size = conv_out_size(size, k, s)
            if i in pools:
                size = pool_out_size(size, POOL_KERNEL, POOL_STRIDE)
        return None if size == 1 else f"conv{len(base.kernels)}: chain ends at {size}, expected 1"

    small = run((1,) * len(base.kernels), frozenset())
    if small and "smaller than kernel" in small:
        return f"no valid chain for input {input_size}: {small}"
    return f"no valid chain for input {input_size}: {run(base.strides, base.pool_after) or small}"


@dataclass
class ScanPrediction:
    score: float
    per_slice: np.ndarray = field(repr=False)


class Scan2NumNet:
    """Shared per-slice conv column -> mean fusion -> dropout -> fc6.

    Parameters live in :attr:`params`, a dict from ``"conv1.weight"`` style
    names to :class:`~scan2num.nn.Param`.
    """

    def __init__(self, config, params=None, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        shapes = config.param_shapes()
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {}
            for name, shape in shapes.items():
                if name.endswith(".bias"):
                    value = np.zeros(shape, dtype=self.dtype)
                else:
                    fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                    value = nn.xavier_init(shape, fan_in, rng, dtype=self.dtype)
                params[name] = nn.Param(name, value)
        else:
            for name, shape in shapes.items():
                if name not in params or params[name].value.shape != tuple(shape):
                    raise ValueError(f"parameter {name!r} missing or not of shape {shape}")
            extra = set(params) - set(shapes)
            if extra:
                raise ValueError(f"unexpected parameters {sorted(extra)}")
        self.params = params
        self._cache = None

    # ----------------------------------------------------------- forward
    def _check_input(self, stacks):
        stacks = np.asarray(stacks)
        if stacks.ndim == 3:
            stacks = stacks[None]
        cfg = self.config
        if stacks.ndim != 4 or stacks.shape[1:] != (cfg.num_slices, cfg.input_size, cfg.input_size):
            raise ValueError(f"expected stacks of shape (B, {cfg.num_slices}, {cfg.input_size}, "
                             f"{cfg.input_size}), got {stacks.shape}")
        return stacks.astype(self.dtype, copy=False)

    def slice_features(self, x, keep_cache=False):
        """Run the conv column on ``(M, 1, H, W)`` slices -> ``(M, F)``."""
        caches = []
        p = self.params
        # channel-major internally: (C, M, H, W)
        x = x.reshape(1, x.shape[0], x.shape[2], x.shape[3])
        for i, s in enumerate(self.config.strides, start=1):
            x, cc = nn.conv2d_cnhw_forward(x, p[f"conv{i}.weight"].value, p[f"conv{i}.bias"].value, s)
            x, rmask = nn.relu_forward(x)
            pc = None
            if i in self.config.pool_after:
                x, pc = nn.maxpool2d_forward(x, POOL_KERNEL, POOL_STRIDE)
            if keep_cache:
                caches.append((cc, rmask, pc))
        return np.ascontiguousarray(x.reshape(x.shape[0], -1).T), caches

    def forward(self, stacks, training=False, rng=None):
        """Return ``(scores (B,), per_slice (B, n))``.

        ``per_slice`` always uses the head without dropout, so its mean equals
        the score whenever dropout is inactive.
        """
        stacks = self._check_input(stacks)
        b, n, h, w = stacks.shape
        feats, caches = self.slice_features(stacks.reshape(b * n, 1, h, w), keep_cache=training)
        feats = feats.reshape(b, n, -1)
        fused, _ = nn.mean_fuse_forward(feats)
        dropped, dmask = nn.dropout_forward(fused, self.config.dropout_rate, training, rng)
        w6, b6 = self.params["fc6.weight"].value, self.params["fc6.bias"].value
        out, acache = nn.affine_forward(dropped, w6, b6)
        per_slice = (feats @ w6 + b6)[..., 0]
        if training:
            self._cache = (caches, n, dmask, acache, (b, n, h, w))
        return out[:, 0], per_slice

    def predict(self, stack):
        scores, per_slice = self.forward(stack, training=False)
        return ScanPrediction(float(scores[0]), per_slice[0].astype(np.float64))

    # ---------------------------------------------------------- backward
    def backward(self, dscores, want_input_grad=False):
        """Accumulate parameter gradients for ``d loss / d score``.

        The input gradient is only formed on request since training never needs it.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a training-mode forward pass")
        caches, n, dmask, acache, (b, _, h, w) = self._cache
        self._cache = None
        p = self.params
        dout = np.asarray(dscores, dtype=self.dtype).reshape(-1, 1)
        dx, dw, db = nn.affine_backward(dout, acache)
        p["fc6.weight"].grad += dw
        p["fc6.bias"].grad += db
        dx = nn.dropout_backward(dx, dmask)
        dfeat = nn.mean_fuse_backward(dx, n).reshape(b * n, self.config.feature_dim)
        dfeat = np.ascontiguousarray(dfeat.T).reshape(self.config.feature_dim, b * n, 1, 1)
        for i in range(self.config.num_convs, 0, -1):
            cc, rmask, pc = caches[i - 1]
            if pc is not None:
                dfeat = nn.maxpool2d_backward(dfeat, pc)
            dfeat = nn.relu_backward(dfeat, rmask)
            dfeat, dw, db = nn.conv2d_cnhw_backward(dfeat, cc, need_dx=i > 1 or want_input_grad)
            p[f"conv{i}.weight"].grad += dw
            p[f"conv{i}.bias"].grad += db
        return dfeat.reshape(b, n, h, w) if want_input_grad else None

    def zero_grad(self):
        for prm in self.params.values():
            prm.zero_grad()

    def astype(self, dtype):
        params = {k: nn.Param(k, v.value.astype(dtype)) for k, v in self.params.items()}
        return Scan2NumNet(self.config, params=params, dtype=dtype)

    def copy(self):
        params = {k: nn.Param(k, v.value.copy(), v.grad.copy(), v.momentum.copy())
                  for k, v in self.params.items()}
        return Scan2NumNet(self.config, params=params, dtype=self.dtype)

    def with_output_affine(self, scale, shift):
        """Copy whose outputs are ``scale * out + shift``, folded into fc6."""
        net = self.copy()
        if scale == 1.0 and shift == 0.0:
            return net
        p = net.params
        p["fc6.weight"].value[...] = p["fc6.weight"].value * np.float32(scale)
        p["fc6.bias"].value[...] = p["fc6.bias"].value * np.float32(scale) + np.float32(shift)
        return net

    # ------------------------------------------------------------- disk
    def tensors(self, momentum=True, prefix=""):
        out = {}
        for k, v in self.params.items():
            out[prefix + k] = v.value.astype(np.float32, copy=False)
        if momentum:
            for k, v in self.params.items():
                out[prefix + k + ".momentum"] = v.momentum.astype(np.float32, copy=False)
        return out

    def save(self, path, meta=None, extra_tensors=None):
        tensors = self.tensors()
        if extra_tensors:
            tensors.update(extra_tensors)
        checkpoint.save(path, tensors, {**self.config.to_meta(), **(meta or {})})

    @classmethod
    def from_tensors(cls, config, tensors, prefix=""):
        params = {}
        for name in config.param_shapes():
            value = tensors[prefix + name].copy()
            mom = tensors.get(prefix + name + ".momentum")
            params[name] = nn.Param(name, value, momentum=None if mom is None else mom.copy())
        return cls(config, params=params)

    @classmethod
    def load(cls, path):
        """Return ``(net, meta)`` from a self-describing checkpoint."""
        tensors, meta = checkpoint.load(path)
        if "network.num_slices" not in meta:
            raise CheckpointError(f"{path}: checkpoint has no network config record")
        config = NetworkConfig.from_meta(meta)
        return cls.from_tensors(config, tensors), meta


def network_gradient_check(config, stacks, targets, rng=None, eps=1e-6, max_coords=40, bias_jitter=0.0):
    """Finite-difference check of :meth:`Scan2NumNet.backward` in float64.

    Dropout is switched off so the loss is a deterministic function of the
    weights.  ``bias_jitter > 0`` draws biases from U(0, bias_jitter) so that
    tiny nets with dead channels do not sit exactly on a ReLU kink.
    Returns ``(max relative error, per-parameter errors)``.
    """
    from dataclasses import replace

    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = replace(config, dropout_rate=0.0)
    net = Scan2NumNet(cfg, rng=rng, dtype=np.float64)
    if bias_jitter > 0:
        for k, p in net.params.items():
            if k.endswith(".bias"):
                p.value[...] = rng.uniform(0.0, bias_jitter, p.value.shape)
    stacks = np.asarray(stacks, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    scores, _ = net.forward(stacks, training=True, rng=rng)
    _, dscore = nn.l2_loss(scores, targets)
    net.zero_grad()
    net.backward(dscore)
    arrays = {k: p.value for k, p in net.params.items()}
    analytic = {k: p.grad.copy() for k, p in net.params.items()}

    def loss(_arrays):
        s, _ = net.forward(stacks, training=False)
        return nn.l2_loss(s, targets)[0]

    return nn.gradient_check(loss, arrays, analytic, eps, max_coords, rng)
