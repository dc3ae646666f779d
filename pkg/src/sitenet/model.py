"""Two-branch convolutional classifier with a projection head.

Topology: a stem conv feeds two parallel branches after a 2x downsample. The
upper branch is four plain conv units (each conv + optional norm + ReLU) that
emit features at successively coarser scales; the lower branch is a stack of
densely connected conv blocks (no normalization inside) with a 2x pool after
each block. The upper features are average-pooled to the lower branch's final
scale and fused by channel concatenation, giving the final feature maps. GAP
(when enabled) turns those into the embedding e; a single dense layer maps e
to class logits. A separate two-layer ProjectionHead maps e to the vector z
used by the contrastive loss.

Normalization modes: none, one shared BatchNorm per conv (stem + upper), or
one BatchNorm per site at each of those positions (dispatched by site id).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import DsbnState, NormLayerState, batch_norm, dsbn

NORM_MODES = ("none", "shared_bn", "per_site_dsbn")

VARIANTS = {
    # variant name -> (norm_mode, use_gap)
    "original": ("none", False),
    "redesign": ("shared_bn", True),
    "redesign_dsbn": ("per_site_dsbn", True),
}


class BuildError(ValueError):
    """Configuration cannot produce a well-formed model."""


@dataclass
class ModelConfig:
    input_size: tuple = (32, 32)
    stem_channels: int = 8
    upper_channels: tuple = (8, 16, 16, 32)
    lower_blocks: int = 2
    block_layers: int = 3
    growth: int = 8
    norm_mode: str = "shared_bn"
    use_gap: bool = True
    num_classes: int = 2
    head_dims: tuple = (64, 32)
    sites: tuple = (0, 1)
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.upper_channels = tuple(self.upper_channels)
        self.head_dims = tuple(self.head_dims)
        self.sites = tuple(self.sites)
        if len(self.upper_channels) != 4:
            raise BuildError(
                f"upper branch must have exactly 4 conv layers, got {len(self.upper_channels)}"
            )
        if self.num_classes < 2:
            raise BuildError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.norm_mode not in NORM_MODES:
            raise BuildError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if len(self.head_dims) != 2:
            raise BuildError(f"head_dims must be two widths, got {self.head_dims}")
        if self.lower_blocks < 1 or self.block_layers < 1 or self.growth < 1:
            raise BuildError("lower_blocks, block_layers, and growth must be >= 1")

    @property
    def lower_out_channels(self):
        return self.stem_channels + self.lower_blocks * self.block_layers * self.growth

    @property
    def fused_channels(self):
        return self.lower_out_channels + sum(self.upper_channels)

    @property
    def final_size(self):
        h, w = self.input_size
        factor = 2 ** (1 + self.lower_blocks)
        return h // factor, w // factor

    @property
    def embedding_dim(self):
        if self.use_gap:
            return self.fused_channels
        fh, fw = self.final_size
        return self.fused_channels * fh * fw

    @classmethod
    def for_variant(cls, variant, **overrides):
        try:
            norm_mode, use_gap = VARIANTS[variant]
        except KeyError:
            raise BuildError(
                f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}"
            ) from None
        return cls(norm_mode=norm_mode, use_gap=use_gap, **overrides)


def _he_conv(rng, out_ch, in_ch, k):
    scale = np.sqrt(2.0 / (in_ch * k * k))
    return Tensor(rng.normal(0.0, scale, size=(out_ch, in_ch, k, k)), requires_grad=True)


def _he_dense(rng, d_in, d_out):
    scale = np.sqrt(2.0 / d_in)
    return Tensor(rng.normal(0.0, scale, size=(d_in, d_out)), requires_grad=True)


class ConvUnit:
    """3x3 same-padding conv, optional normalization, ReLU."""

    def __init__(self, in_ch, out_ch, rng, norm_mode, sites, momentum, epsilon):
        self.w = _he_conv(rng, out_ch, in_ch, 3)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        if norm_mode == "shared_bn":
            self.norm = NormLayerState(out_ch, momentum=momentum, epsilon=epsilon)
        elif norm_mode == "per_site_dsbn":
            self.norm = DsbnState(out_ch, sites, momentum=momentum, epsilon=epsilon)
        else:
            self.norm = None

    def __call__(self, x, site, training):
        h = ad.conv2d(x, self.w, self.b, padding=1)
        if isinstance(self.norm, DsbnState):
            h = dsbn(h, self.norm, site, training)
        elif self.norm is not None:
            h = batch_norm(h, self.norm, training)
        return ad.relu(h)

    def parameters(self):
        out = [("conv.w", self.w), ("conv.b", self.b)]
        if isinstance(self.norm, DsbnState):
            out += [(f"norm.{n}", p) for n, p in self.norm.parameters()]
        elif self.norm is not None:
            out += [(f"norm.{n}", p) for n, p in self.norm.parameters()]
        return out


class DenseBlock:
    """Densely connected 3x3 conv layers; layer i sees all earlier outputs.

    No normalization inside the block; the output concatenates the block input
    with every layer's output, so channels grow by layers * growth.
    """

    def __init__(self, in_ch, layers, growth, rng):
        self.convs = []
        ch = in_ch
        for _ in range(layers):
            w = _he_conv(rng, growth, ch, 3)
            b = Tensor(np.zeros(growth), requires_grad=True)
            self.convs.append((w, b))
            ch += growth
        self.out_channels = ch

    def __call__(self, x, training):
        feats = [x]
        for w, b in self.convs:
            inp = feats[0] if len(feats) == 1 else ad.concat_channels(feats)
            feats.append(ad.relu(ad.conv2d(inp, w, b, padding=1)))
        return ad.concat_channels(feats)

    def parameters(self):
        out = []
        for i, (w, b) in enumerate(self.convs):
            out += [(f"layer{i}.w", w), (f"layer{i}.b", b)]
        return out


class Model:
    """Built network; use ``build`` rather than constructing directly."""

    def __init__(self, config, seed):
        h, w = config.input_size
        for _ in range(1 + config.lower_blocks):
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise BuildError(
                    f"input {config.input_size} cannot survive {1 + config.lower_blocks} "
                    f"2x downsamples"
                )
            h, w = h // 2, w // 2
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        nm, sites = config.norm_mode, config.sites
        mom, eps = config.bn_momentum, config.bn_epsilon
        self.stem = ConvUnit(1, config.stem_channels, rng, nm, sites, mom, eps)
        self.upper = []
        ch = config.stem_channels
        for width in config.upper_channels:
            self.upper.append(ConvUnit(ch, width, rng, nm, sites, mom, eps))
            ch = width
        self.lower = []
        ch = config.stem_channels
        for _ in range(config.lower_blocks):
            block = DenseBlock(ch, config.block_layers, config.growth, rng)
            self.lower.append(block)
            ch = block.out_channels
        self.classifier_w = _he_dense(rng, config.embedding_dim, config.num_classes)
        self.classifier_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

    def forward(self, x, site=None, training=False, return_features=False):
        """Run images [N, 1, H, W] through the network.

        Returns (logits, embedding); with return_features also the pre-GAP
        fused feature maps. DSBN models require ``site`` and the whole batch
        is normalized with that site's statistics.
        """
        cfg = self.config
        if cfg.norm_mode == "per_site_dsbn" and site is None:
            raise ValueError("per_site_dsbn model requires a site id for forward()")
        if cfg.norm_mode != "per_site_dsbn" and site is not None:
            raise ValueError(
                f"norm_mode {cfg.norm_mode!r} has no per-site state; do not pass a site id"
            )
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != 1 or x.data.shape[2:] != cfg.input_size:
            raise ad.ShapeError(
                f"expected images [N, 1, {cfg.input_size[0]}, {cfg.input_size[1]}], "
                f"got {x.data.shape}"
            )
        t = ad.avg_pool2d(self.stem(x, site, training), 2)
        u = t
        upper_feats = []
        for i, unit in enumerate(self.upper):
            u = unit(u, site, training)
            upper_feats.append(u)
            if i < cfg.lower_blocks:
                u = ad.avg_pool2d(u, 2)
        l = t
        for block in self.lower:
            l = ad.avg_pool2d(block(l, training), 2)
        target = l.data.shape[2]
        pooled = [l]
        for f in upper_feats:
            k = f.data.shape[2] // target
            pooled.append(ad.avg_pool2d(f, k) if k > 1 else f)
        fused = ad.concat_channels(pooled)
        if cfg.use_gap:
            e = ad.global_avg_pool(fused)
        else:
            e = ad.reshape(fused, (fused.data.shape[0], -1))
        logits = ad.dense(e, self.classifier_w, self.classifier_b)
        if return_features:
            return logits, e, fused
        return logits, e

    def parameters(self):
        out = [(f"stem.{n}", p) for n, p in self.stem.parameters()]
        for i, unit in enumerate(self.upper):
            out += [(f"upper{i}.{n}", p) for n, p in unit.parameters()]
        for i, block in enumerate(self.lower):
            out += [(f"lower{i}.{n}", p) for n, p in block.parameters()]
        out += [("classifier.w", self.classifier_w), ("classifier.b", self.classifier_b)]
        return out

    def backbone_parameters(self):
        return [(n, p) for n, p in self.parameters() if not n.startswith("classifier.")]

    def classifier_parameters(self):
        return [("classifier.w", self.classifier_w), ("classifier.b", self.classifier_b)]

    def norm_states(self):
        """All normalization states as (name, NormLayerState), per-site expanded."""
        out = []
        units = [("stem", self.stem)] + [
            (f"upper{i}", u) for i, u in enumerate(self.upper)
        ]
        for prefix, unit in units:
            if isinstance(unit.norm, DsbnState):
                for s in sorted(unit.norm.per_site):
                    out.append((f"{prefix}.norm.site{s}", unit.norm.per_site[s]))
            elif unit.norm is not None:
                out.append((f"{prefix}.norm", unit.norm))
        return out

    def parameter_count(self):
        """Parameter totals by group, for audits against closed forms."""
        counts = {"conv": 0, "norm": 0, "classifier": 0}
        for name, p in self.parameters():
            if name.startswith("classifier."):
                counts["classifier"] += p.data.size
            elif ".norm." in name or name.endswith(("gamma", "beta")):
                counts["norm"] += p.data.size
            else:
                counts["conv"] += p.data.size
        counts["total"] = sum(counts.values())
        return counts


def build(config, seed=0):
    """Deterministically initialize a Model from its config and a seed."""
    return Model(config, seed)


class ProjectionHead:
    """Two dense layers with a ReLU between, mapping embeddings e to vectors z."""

    def __init__(self, embedding_dim, head_dims, seed=0):
        if len(head_dims) != 2:
            raise BuildError(f"head_dims must be two widths, got {head_dims}")
        rng = np.random.default_rng(int(seed))
        self.embedding_dim = int(embedding_dim)
        self.w1 = _he_dense(rng, embedding_dim, head_dims[0])
        self.b1 = Tensor(np.zeros(head_dims[0]), requires_grad=True)
        self.w2 = _he_dense(rng, head_dims[0], head_dims[1])
        self.b2 = Tensor(np.zeros(head_dims[1]), requires_grad=True)

    def project(self, e):
        if e.data.ndim != 2 or e.data.shape[1] != self.embedding_dim:
            raise ad.ShapeError(
                f"head expects embeddings [N, {self.embedding_dim}], got {e.data.shape}"
            )
        return ad.dense(ad.relu(ad.dense(e, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self):
        return [("fc1.w", self.w1), ("fc1.b", self.b1),
                ("fc2.w", self.w2), ("fc2.b", self.b2)]


def project(head, e):
    return head.project(e)


def gradient_partition(model, head, loss_ce, loss_con, alpha):
    """Route gradients so each parameter group sees the right objective.

    The head is optimized with the contrastive loss alone (unscaled by alpha);
    backbone parameters receive d(ce)/d + alpha * d(con)/d; the classifier,
    which the contrastive path never touches, receives cross-entropy gradients
    only. Gradients accumulate into ``.grad``; callers zero beforehand.
    """
    loss_con.backward()
    if alpha != 1.0:
        # head parameters are not in model.parameters(), so they keep the
        # unscaled contrastive gradient
        for _, p in model.parameters():
            if p.grad is not None:
                p.grad = None if alpha == 0.0 else p.grad * alpha
    loss_ce.backward()
