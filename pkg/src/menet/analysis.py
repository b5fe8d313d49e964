"""Inter-group connectivity math, structural dependency analysis and
multiply-accumulate / parameter accounting.

Connectivity reports use exact rationals so the closed-form and brute-force
paths can be compared without tolerance. Cost accounting walks a built
network symbolically (no forward pass) under a swappable counting policy.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .layers import (
    AvgPool3x3s2,
    BatchNorm2d,
    ChannelShuffle,
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool3x3s2,
    ReLU,
    Sigmoid,
    conv_out_size,
)
from .me_module import MEModule
from .network import Network


# ---------------------------------------------------------------------------
# inter-group connectivity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConnectivityReport:
    channels: int
    groups: int
    n_total: Fraction
    n_actual: Fraction
    lost_ratio: Fraction

    def as_floats(self):
        return (float(self.n_total), float(self.n_actual),
                float(self.lost_ratio))


def _check_cg(channels, groups):
    if groups < 1:
        raise ValueError(f"groups must be >= 1, got {groups}")
    if channels % groups:
        raise ValueError(
            f"channels={channels} not divisible by groups={groups}")


def connectivity_formula(channels, groups):
    """Closed-form inter-group connection counts for two consecutive grouped
    layers of ``channels`` channels linked by a channel shuffle."""
    _check_cg(channels, groups)
    c, g = channels, groups
    if g == 1:
        return ConnectivityReport(c, g, Fraction(0), Fraction(0), Fraction(0))
    n_total = Fraction(c * c * (g - 1), 2 * g)
    n_actual = Fraction(c * c * (g - 1), 2 * g * g)
    lost = Fraction(g - 1, g)
    return ConnectivityReport(c, g, n_total, n_actual, lost)


def connectivity_bruteforce(channels, groups):
    """Enumerate the two-layer counting construction explicitly.

    n_total: unordered channel pairs whose group indices differ, were the
    layers fully connected (pure pair enumeration). n_actual: walk every
    second-layer channel and every former-layer group; a shuffled group
    receives a C/G^2 share of channels from each former-layer group, so
    each cross-group (channel, origin) combination contributes that share.
    Shares are exact rationals; the ordered sum is halved for unordered
    pairs.

    The C/G^2 share is the construction's premise; a walk of the realized
    shuffle permutation (``connectivity_realized``) reproduces it exactly
    whenever G divides C/G, i.e. the shuffle distributes groups evenly.
    """
    _check_cg(channels, groups)
    c, g = channels, groups
    n = c // g
    n_total = Fraction(sum(
        1 for i in range(c) for j in range(i + 1, c) if i // n != j // n))
    if g == 1:
        return ConnectivityReport(c, g, n_total, Fraction(0), Fraction(0))
    share = Fraction(c, g * g)  # channels received from each former group
    ordered = Fraction(0)
    for p in range(c):
        own_group = p // n
        for origin in range(g):
            if origin != own_group:
                ordered += share
    n_actual = ordered / 2
    lost = Fraction(1) - n_actual / n_total if n_total else Fraction(0)
    return ConnectivityReport(c, g, n_total, n_actual, lost)


def connectivity_realized(channels, groups):
    """Inter-group connection count under the realized shuffle permutation:
    for each second-layer channel, count the source channels in its shuffled
    group whose original group differs from the channel's own."""
    _check_cg(channels, groups)
    c, g = channels, groups
    n = c // g
    n_total = connectivity_bruteforce(c, g).n_total
    if g == 1:
        return ConnectivityReport(c, g, n_total, Fraction(0), Fraction(0))
    perm = ChannelShuffle.permutation(c, g)
    ordered = 0
    for p in range(c):
        own_group = p // n
        for slot in range(own_group * n, (own_group + 1) * n):
            if perm[slot] // n != own_group:
                ordered += 1
    n_actual = Fraction(ordered, 2)
    lost = Fraction(1) - n_actual / n_total if n_total else Fraction(0)
    return ConnectivityReport(c, g, n_total, n_actual, lost)


# ---------------------------------------------------------------------------
# structural channel-dependency patterns
# ---------------------------------------------------------------------------

def grouped_conv_pattern(in_channels, out_channels, groups):
    """Boolean (out, in) matrix: output channel o reads input channel i."""
    m = np.zeros((out_channels, in_channels), dtype=bool)
    ipg = in_channels // groups
    opg = out_channels // groups
    for a in range(groups):
        m[a * opg:(a + 1) * opg, a * ipg:(a + 1) * ipg] = True
    return m


def shuffle_pattern(channels, groups):
    perm = ChannelShuffle.permutation(channels, groups)
    m = np.zeros((channels, channels), dtype=bool)
    m[np.arange(channels), perm] = True
    return m


def layer_dependency(layer, in_channels=None):
    """Channel-dependency matrix of one layer; BN/activations are
    channel-wise identities."""
    if isinstance(layer, Conv2d):
        if layer.depthwise:
            return np.eye(layer.in_channels, dtype=bool)
        return grouped_conv_pattern(layer.in_channels, layer.out_channels,
                                    layer.groups)
    if isinstance(layer, ChannelShuffle):
        if in_channels is None:
            raise ValueError("shuffle pattern needs in_channels")
        return shuffle_pattern(in_channels, layer.groups)
    if isinstance(layer, (BatchNorm2d, ReLU, Sigmoid, MaxPool3x3s2,
                          AvgPool3x3s2, GlobalAvgPool)):
        if in_channels is None:
            raise ValueError("channel-wise layer pattern needs in_channels")
        return np.eye(in_channels, dtype=bool)
    raise TypeError(f"no dependency rule for {type(layer).__name__}")


def compose(*patterns):
    """Compose dependency matrices, first-applied first."""
    out = patterns[0]
    for m in patterns[1:]:
        out = (m.astype(int) @ out.astype(int)) > 0
    return out


def module_dependency_pattern(module: MEModule, include_fusion=True,
                              through_pw2=False):
    """Dependency pattern of the bottleneck path of a module: channel
    shuffle, then depthwise conv fused (or not) with the merging/evolution
    branch, optionally continued through the second pointwise group conv."""
    b = module.cfg.bottleneck_channels
    shuf = shuffle_pattern(b, module.cfg.groups)
    dw = compose(shuf, np.eye(b, dtype=bool))
    if include_fusion:
        # merging is dense, evolution ends dense over fusion channels:
        # anything reaching the fusion branch reaches every output channel
        fusion = compose(shuf, np.ones((b, b), dtype=bool))
        pattern = dw | fusion
    else:
        pattern = dw
    if through_pw2:
        pw2 = grouped_conv_pattern(b, module.cfg.residual_out_channels,
                                   module.cfg.groups)
        pattern = compose(pattern, pw2)
    return pattern


def perturbation_pattern(module: MEModule, include_fusion=True, spatial=4,
                         eps=1e-3):
    """Numeric cross-check of ``module_dependency_pattern``.

    Runs the bottleneck path with strictly positive weights and BN in
    identity mode, perturbs each input channel upward and records which
    output channels change.
    """
    cfg = module.cfg
    b = cfg.bottleneck_channels
    module.set_bn_mode("identity")
    for layer in module.named_layers().values():
        if isinstance(layer, Conv2d):
            w = np.abs(layer.params["weight"]) + 0.05
            # keep pre-activations O(1) so the sigmoid stays responsive
            fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            layer.params["weight"][...] = w / fan_in

    def path(x):
        s = module.shuffle.forward(x)
        d = module.bn_dw.forward(module.dw.forward(s))
        if not include_fusion:
            return d
        z = module.merging.forward(s)
        f = module.evolution.forward(z)
        return d * f if cfg.combine_mode == "product" else d + f

    rng = np.random.default_rng(7)
    x = np.abs(rng.normal(1.0, 0.2, size=(1, b, spatial, spatial)))
    base = path(x)
    pattern = np.zeros((b, b), dtype=bool)
    for i in range(b):
        xp = x.copy()
        xp[:, i] += eps
        diff = np.abs(path(xp) - base).max(axis=(0, 2, 3))
        pattern[:, i] = diff > 0
    return pattern


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostPolicy:
    """Which layer kinds contribute to the MAC total; 1 MAC = 1 FLOP."""
    name: str = "conv-fc-macs"
    count_conv: bool = True
    count_fc: bool = True
    count_bn: bool = False
    count_pool: bool = False
    count_activation: bool = False


DEFAULT_POLICY = CostPolicy()


@dataclass
class CostEntry:
    name: str
    output_shape: tuple
    macs: int
    params: int


@dataclass
class CostReport:
    policy: CostPolicy
    entries: list = field(default_factory=list)

    @property
    def total_macs(self):
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self):
        return sum(e.params for e in self.entries)


def _conv_entry(name, layer: Conv2d, c, h, w, policy):
    oh = conv_out_size(h, layer.kernel, layer.stride, layer.pad)
    ow = conv_out_size(w, layer.kernel, layer.stride, layer.pad)
    macs = (oh * ow * layer.kernel * layer.kernel
            * (layer.in_channels // layer.groups) * layer.out_channels)
    params = layer.params["weight"].size
    if "bias" in layer.params:
        params += layer.params["bias"].size
    if not policy.count_conv:
        macs = 0
    return CostEntry(name, (layer.out_channels, oh, ow), macs, params), \
        (layer.out_channels, oh, ow)


def _module_entries(name, module: MEModule, c, h, w, policy):
    """Sub-layer cost entries with branch-aware resolutions: pw1 and the
    merging tap run at the input resolution; the evolution 3x3, depthwise
    and second pointwise run at the (possibly halved) output resolution."""
    cfg = module.cfg
    b = cfg.bottleneck_channels
    f = cfg.fusion_channels
    ds = cfg.downsample
    oh = conv_out_size(h, 3, 2, 1) if ds else h
    ow = conv_out_size(w, 3, 2, 1) if ds else w
    named = module.named_layers()
    plan = [
        ("pw1", (c, h, w)), ("bn1", (b, h, w)),
        ("merge.conv", (b, h, w)), ("merge.bn", (f, h, w)),
        ("evo.conv_e", (f, h, w)), ("evo.bn_e", (f, oh, ow)),
        ("evo.conv_m", (f, oh, ow)), ("evo.bn_m", (b, oh, ow)),
        ("dw", (b, h, w)), ("bn_dw", (b, oh, ow)),
        ("pw2", (b, oh, ow)),
        ("bn2", (cfg.residual_out_channels, oh, ow)),
    ]
    entries = []
    for ln, in_shape in plan:
        layer = named[ln]
        if isinstance(layer, Conv2d):
            e, _ = _conv_entry(f"{name}/{ln}", layer, *in_shape, policy)
            entries.append(e)
        else:
            macs = 2 * np.prod(in_shape) if policy.count_bn else 0
            entries.append(CostEntry(f"{name}/{ln}", in_shape, int(macs),
                                     2 * layer.channels))
    return entries, (cfg.out_channels, oh, ow)


def count_cost(net: Network, input_shape=None, input_size=None,
               policy=DEFAULT_POLICY) -> CostReport:
    """Per-layer MAC and parameter counts via symbolic shape propagation."""
    if input_shape is None:
        size = input_size if input_size is not None else net.input_size
        input_shape = (net.in_channels, size, size)
    c, h, w = input_shape
    report = CostReport(policy=policy)
    for name, item in net:
        if isinstance(item, Conv2d):
            entry, (c, h, w) = _conv_entry(name, item, c, h, w, policy)
            report.entries.append(entry)
        elif isinstance(item, MEModule):
            # dataflow inside the module needs the pre-module shape but its
            # branches diverge; handled by _module_entries
            entries, (c, h, w) = _module_entries(name, item, c, h, w, policy)
            report.entries.extend(entries)
        elif isinstance(item, BatchNorm2d):
            macs = 2 * c * h * w if policy.count_bn else 0
            report.entries.append(CostEntry(name, (c, h, w), macs,
                                            2 * item.channels))
        elif isinstance(item, (MaxPool3x3s2, AvgPool3x3s2)):
            h = conv_out_size(h, 3, 2, 1)
            w = conv_out_size(w, 3, 2, 1)
            macs = 9 * c * h * w if policy.count_pool else 0
            report.entries.append(CostEntry(name, (c, h, w), macs, 0))
        elif isinstance(item, GlobalAvgPool):
            macs = c * h * w if policy.count_pool else 0
            h = w = 1
            report.entries.append(CostEntry(name, (c, 1, 1), macs, 0))
        elif isinstance(item, Linear):
            macs = item.in_features * item.out_features if policy.count_fc else 0
            params = item.params["weight"].size + item.params["bias"].size
            c = item.out_features
            report.entries.append(CostEntry(name, (c, 1, 1), macs, params))
        elif isinstance(item, (ReLU, Sigmoid)):
            macs = c * h * w if policy.count_activation else 0
            report.entries.append(CostEntry(name, (c, h, w), macs, 0))
        elif isinstance(item, ChannelShuffle):
            report.entries.append(CostEntry(name, (c, h, w), 0, 0))
        else:
            raise TypeError(f"no cost rule for {type(item).__name__}")
    return report
