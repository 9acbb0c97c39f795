"""Multi-branch polar-domain network.

One branch per projection (SVC, DVC, CC).  Each branch runs a polar feature
extractor (PFEM) and a small residual trunk; branch features are optionally
gated by a clinical prior, channel-concatenated (middle fusion) and passed
through a fusion block whose activations feed both the classifier and the
class-activation maps.

Polar maps are cyclic along the angular axis, so every convolution and
pooling window pads rows circularly and columns with the usual fill.  The
MKAC/MKPM convolution paths carry no bias terms, which keeps the PFEM output
exactly zero for zero input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .grids import GridSpec, PriorMatrix, PROJECTIONS, prior_gate_map


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every shape below derives from these."""

    branches: int = 3
    input_size: tuple = (224, 224)             # (theta, r)
    in_channels: int = 1
    mkac_kernels: tuple = ((3, 1), (3, 2), (3, 4))   # (kernel, dilation)
    mkpm_kernels: tuple = (2, 3, 5)
    pfem_channels: int = 16
    trunk_channels: tuple = (32, 32, 64, 64)
    fused_channels: int = 128
    classes: int = 2
    cbam_reduction: int = 4
    spatial_kernel: int = 7
    leaky_slope: float = 0.01

    def __post_init__(self):
        if not self.mkac_kernels or not self.mkpm_kernels:
            raise ConfigError("need at least one MKAC and one MKPM kernel")
        for k, d in self.mkac_kernels:
            if k % 2 == 0 or k < 1 or d < 1:
                raise ConfigError(f"MKAC kernels must be odd with dilation >= 1, got {(k, d)}")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial attention kernel must be odd")
        if self.branches < 1 or not self.trunk_channels:
            raise ConfigError("need at least one branch and one trunk block")
        h, w = self.input_size
        ds = 2 ** self.total_downsamplings()
        if h % ds or w % ds:
            raise ConfigError(f"input {self.input_size} not divisible by the "
                              f"{ds}x downsampling chain")

    @property
    def pfem_out_channels(self) -> int:
        return self.pfem_channels + self.in_channels

    def trunk_plan(self):
        """(in_ch, out_ch, stride) per trunk block; stride 2 whenever the
        channel count changes."""
        plan = []
        prev = self.pfem_out_channels
        for ch in self.trunk_channels:
            plan.append((prev, ch, 2 if ch != prev else 1))
            prev = ch
        return plan

    def branch_downsamplings(self) -> int:
        return sum(1 for _, _, s in self.trunk_plan() if s == 2)

    def total_downsamplings(self) -> int:
        fused_in = self.trunk_channels[-1] * self.branches
        fusion_stride = 2 if self.fused_channels != fused_in else 1
        return self.branch_downsamplings() + (1 if fusion_stride == 2 else 0)

    def fusion_map_size(self):
        ds = 2 ** self.total_downsamplings()
        return (self.input_size[0] // ds, self.input_size[1] // ds)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["mkac_kernels"] = tuple(tuple(p) for p in d["mkac_kernels"])
        d["mkpm_kernels"] = tuple(d["mkpm_kernels"])
        d["trunk_channels"] = tuple(d["trunk_channels"])
        return cls(**d)


class ParamStore:
    """Flat, ordered registry of named parameters."""

    def __init__(self):
        self._params = {}

    def add(self, name, array) -> T.Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter {name}")
        t = T.Tensor(np.asarray(array, dtype=np.float32),
                     requires_grad=True, name=name)
        self._params[name] = t
        return t

    def named(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def __getitem__(self, name) -> T.Tensor:
        return self._params[name]

    def load(self, arrays):
        for name, t in self._params.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != t.data.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape "
                                  f"{arrays[name].shape} != {t.data.shape}")
            t.data = arrays[name].astype(np.float32).copy()

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()


def _he_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


@dataclass
class ForwardCache:
    """Activations kept alive for explanation after a forward pass."""

    logits: T.Tensor
    fusion: T.Tensor                      # A^k of the last fusion block
    branch_maps: list = field(default_factory=list)  # post-prior, pre-fusion


class PolarNetModel:
    """Parameter collection plus the forward graph builder."""

    def __init__(self, config: ModelConfig, seed=0, prior: PriorMatrix = None,
                 grid_spec: GridSpec = None):
        self.config = config
        self.prior = prior
        self.grid_spec = grid_spec or GridSpec("ETDRS")
        self.params = ParamStore()
        self._prior_maps = None
        # Per-projection (mean, std) input statistics, set by training and
        # persisted with checkpoints; None means raw inputs.
        self.normalization = None
        rng = np.random.default_rng(seed)
        cfg = config
        for b in range(cfg.branches):
            p = f"branch{b}"
            for i, (k, _) in enumerate(cfg.mkac_kernels):
                self.params.add(f"{p}.mkac.conv{i}.weight",
                                _he_init(rng, (cfg.pfem_channels, cfg.in_channels, k, k),
                                         cfg.in_channels * k * k))
                self.params.add(f"{p}.mkac.scale{i}",
                                np.full((1,), 1.0 / len(cfg.mkac_kernels)))
            for i in range(len(cfg.mkpm_kernels)):
                self.params.add(f"{p}.mkpm.scale{i}",
                                np.full((1,), 1.0 / len(cfg.mkpm_kernels)))
            c = cfg.pfem_out_channels
            hidden = max(4, c // cfg.cbam_reduction)  # narrow MLPs go dead
            self.params.add(f"{p}.cbam.mlp0.weight", _he_init(rng, (hidden, c), c))
            self.params.add(f"{p}.cbam.mlp0.bias", np.full(hidden, 0.1))
            self.params.add(f"{p}.cbam.mlp1.weight", _he_init(rng, (c, hidden), hidden))
            self.params.add(f"{p}.cbam.mlp1.bias", np.zeros(c))
            ks = cfg.spatial_kernel
            self.params.add(f"{p}.cbam.spatial.weight",
                            _he_init(rng, (1, 2, ks, ks), 2 * ks * ks))
            self.params.add(f"{p}.cbam.spatial.bias", np.zeros(1))
            for i, (cin, cout, stride) in enumerate(cfg.trunk_plan()):
                self._add_block(rng, f"{p}.block{i}", cin, cout, stride)
        fused_in = cfg.trunk_channels[-1] * cfg.branches
        stride = 2 if cfg.fused_channels != fused_in else 1
        self._add_block(rng, "fusion", fused_in, cfg.fused_channels, stride)
        # Small head: logits start near zero so the first optimizer steps
        # are gentle (there is no normalization to absorb an early blowup).
        self.params.add("classifier.weight",
                        0.1 * _he_init(rng, (cfg.classes, cfg.fused_channels),
                                       cfg.fused_channels))
        self.params.add("classifier.bias", np.zeros(cfg.classes))

    def _add_block(self, rng, name, cin, cout, stride):
        self.params.add(f"{name}.conv1.weight",
                        _he_init(rng, (cout, cin, 3, 3), cin * 9))
        self.params.add(f"{name}.conv1.bias", np.zeros(cout))
        self.params.add(f"{name}.conv2.weight",
                        _he_init(rng, (cout, cout, 3, 3), cout * 9))
        self.params.add(f"{name}.conv2.bias", np.zeros(cout))
        if stride != 1 or cin != cout:
            self.params.add(f"{name}.shortcut.weight",
                            _he_init(rng, (cout, cin, 1, 1), cin))
            self.params.add(f"{name}.shortcut.bias", np.zeros(cout))

    # -- module forwards ---------------------------------------------------

    def mkac(self, branch, x):
        """Weighted sum of parallel atrous convolutions, LeakyReLU'd."""
        cfg = self.config
        total = None
        for i, (k, d) in enumerate(cfg.mkac_kernels):
            h = T.conv2d(x, self.params[f"branch{branch}.mkac.conv{i}.weight"],
                         dilation=d, padding="same", row_pad="circular")
            h = T.scale_by(h, self.params[f"branch{branch}.mkac.scale{i}"])
            total = h if total is None else T.add(total, h)
        return T.leaky_relu(total, cfg.leaky_slope)

    def mkpm(self, branch, x):
        """Residual multi-kernel max pooling, LeakyReLU'd."""
        cfg = self.config
        total = x
        for i, k in enumerate(cfg.mkpm_kernels):
            h = T.maxpool2d(x, k, stride=1, padding="same", row_pad="circular")
            h = T.scale_by(h, self.params[f"branch{branch}.mkpm.scale{i}"])
            total = T.add(total, h)
        return T.leaky_relu(total, cfg.leaky_slope)

    def cbam(self, branch, x):
        """Channel attention then spatial attention, both sigmoid gated."""
        p = f"branch{branch}.cbam"

        def mlp(desc):
            h = T.relu(T.linear(desc, self.params[f"{p}.mlp0.weight"],
                                self.params[f"{p}.mlp0.bias"]))
            return T.linear(h, self.params[f"{p}.mlp1.weight"],
                            self.params[f"{p}.mlp1.bias"])

        gate = T.sigmoid(T.add(mlp(T.global_avg_pool(x)),
                               mlp(T.global_max_pool(x))))
        x = T.scale_channels(x, gate)
        desc = T.concat([T.channel_mean(x), T.channel_max(x)], axis=1)
        smap = T.sigmoid(T.conv2d(desc, self.params[f"{p}.spatial.weight"],
                                  self.params[f"{p}.spatial.bias"],
                                  padding="same", row_pad="circular"))
        return T.scale_spatial(x, smap)

    def pfem(self, branch, x):
        fused = T.concat([self.mkac(branch, x), self.mkpm(branch, x)], axis=1)
        return self.cbam(branch, fused)

    def _block(self, name, x, cin, cout, stride):
        # Leaky activations throughout the trunk: with no normalization
        # layers, plain-ReLU blocks strand weight slices of channels that go
        # dead on small batches, and training at desk scale is noticeably
        # less stable.  The class-activation maps stay meaningful because
        # importance is read out against the predicted class, whose evidence
        # is positively encoded regardless of the activations' sign.
        slope = self.config.leaky_slope
        p1 = "same" if stride == 1 else 1
        h = T.conv2d(x, self.params[f"{name}.conv1.weight"],
                     self.params[f"{name}.conv1.bias"],
                     stride=stride, padding=p1, row_pad="circular")
        h = T.leaky_relu(h, slope)
        h = T.conv2d(h, self.params[f"{name}.conv2.weight"],
                     self.params[f"{name}.conv2.bias"],
                     padding="same", row_pad="circular")
        if stride != 1 or cin != cout:
            sc = T.conv2d(x, self.params[f"{name}.shortcut.weight"],
                          self.params[f"{name}.shortcut.bias"],
                          stride=stride, padding=0, row_pad="circular")
        else:
            sc = x
        return T.leaky_relu(T.add(h, sc), slope)

    def trunk(self, branch, x):
        for i, (cin, cout, stride) in enumerate(self.config.trunk_plan()):
            x = self._block(f"branch{branch}.block{i}", x, cin, cout, stride)
        return x

    def _branch_prior_map(self, branch, h, w):
        """Gate tensor for one branch, built lazily per spatial size."""
        if self.prior is None:
            return None
        key = (h, w)
        if self._prior_maps is None or self._prior_maps[0] != key:
            maps = {}
            for proj in PROJECTIONS[:self.config.branches]:
                maps[proj] = prior_gate_map(self.prior.for_projection(proj),
                                            h, w, self.grid_spec)
            self._prior_maps = (key, maps)
        return self._prior_maps[1][PROJECTIONS[branch]]

    def forward(self, inputs, prior: PriorMatrix = None) -> ForwardCache:
        """Run the full network.

        inputs: one (N, in_channels, theta, r) tensor per branch in
        SVC, DVC, CC order.  Passing `prior` overrides the model's own
        prior matrix for this call.
        """
        cfg = self.config
        if len(inputs) != cfg.branches:
            raise ConfigError(f"expected {cfg.branches} branch inputs, got {len(inputs)}")
        if prior is not None:
            self.prior, saved = prior, self.prior
            self._prior_maps = None
        else:
            saved = self.prior
        try:
            branch_maps = []
            for b, x in enumerate(inputs):
                x = x if isinstance(x, T.Tensor) else T.Tensor(x)
                if x.ndim != 4 or x.shape[1] != cfg.in_channels:
                    raise ConfigError(f"branch {b}: bad input shape {x.shape}")
                f = self.trunk(b, self.pfem(b, x))
                gate = self._branch_prior_map(b, f.shape[2], f.shape[3])
                if gate is not None:
                    full = np.broadcast_to(gate, f.shape)
                    f = T.mul(f, T.Tensor(np.ascontiguousarray(full)))
                branch_maps.append(f)
            fused_in = T.concat(branch_maps, axis=1)
            cin = cfg.trunk_channels[-1] * cfg.branches
            stride = 2 if cfg.fused_channels != cin else 1
            fusion = self._block("fusion", fused_in, cin, cfg.fused_channels, stride)
            pooled = T.global_avg_pool(fusion)
            logits = T.linear(pooled, self.params["classifier.weight"],
                              self.params["classifier.bias"])
        finally:
            if prior is not None:
                self.prior = saved
                self._prior_maps = None
        return ForwardCache(logits=logits, fusion=fusion, branch_maps=branch_maps)


def predict(model: PolarNetModel, inputs) -> np.ndarray:
    """Class probabilities (N, classes); rows sum to 1."""
    with T.no_grad():
        cache = model.forward(inputs)
    return T.softmax(cache.logits.data)
