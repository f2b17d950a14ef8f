"""Parameter audits for multi-branch discriminators.

Three discriminator families are described here:

``stargan``
    :class:`~mbdgan.networks.MultiBranchDiscriminator` with 6 stride-2 layers
    doubling 64 -> 2048 channels on a 128x128 input. Body convs carry a bias,
    both heads do not. The class head spans the whole 2x2 final map; its
    width (84 logits) is chosen so that the branch-independent overhead
    (first layer, biases, heads = 713,664 scalars) matches the published
    counts for every branch number.
``pix2pix``
    70x70 PatchGAN on a 6-channel (input + target) image: 64-128-256-512,
    the last body layer at stride 1, affine normalisation and no bias on the
    normalised layers.
``cyclegan``
    Two PatchGANs (one per domain) with an extra stride-2 stage
    (64-128-256-512-512), non-affine instance norm and biases everywhere.

Reference generator sizes are the differences between the published GAN
totals and discriminator counts; they are only used to fill the
``total_params`` column.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .layers import Conv2d, InstanceNorm, LayerInfo, Module
from .networks import LEAK, MultiBranchDiscriminator, MultiBranchDiscriminatorSpec

PUBLISHED_DISC_MILLIONS = {
    "pix2pix": {1: 2.77, 2: 1.39, 4: 0.70, 8: 0.36, 16: 0.19, 32: 0.10, 64: 0.06},
    "cyclegan": {1: 13.92, 2: 6.98, 4: 3.50, 8: 1.77, 16: 0.90, 32: 0.46, 64: 0.24},
    "stargan": {1: 45.41, 2: 23.06, 4: 11.89, 8: 6.30, 16: 3.51, 32: 2.11, 64: 1.41},
}
REFERENCE_GENERATOR_MILLIONS = {"pix2pix": 54.41, "cyclegan": 22.77, "stargan": 12.90}
DEFAULT_BRANCHES = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class ParamAudit:
    per_layer: list[LayerInfo]
    total: int
    branch_config: int = 1

    def hidden_connections(self) -> int:
        return sum(row.weights for row in self.per_layer if row.role == "hidden")

    def overhead(self) -> int:
        """Scalars that do not shrink with the branch count."""
        return self.total - self.hidden_connections()


def count_parameters(network: Module, branches: int | None = None) -> ParamAudit:
    rows = network.layer_infos()
    if branches is None:
        spec = getattr(network, "spec", None)
        branches = getattr(spec, "branches", getattr(network, "branches", 1))
    return ParamAudit(rows, sum(r.params for r in rows), branches)


class PatchDiscriminator(Module):
    """Multi-branch PatchGAN with a configurable body.

    ``widths``/``strides`` list the body convs (k=4, pad=1). ``norm`` is
    None, ``"affine"`` or ``"plain"``; it is applied to every body layer but
    the first. A final k=4 stride-1 conv maps each branch to a 1-channel patch
    map.
    """

    def __init__(self, in_channels, widths, strides, *, norm=None, hidden_bias=True, branches=1, copies=1, seed=0, dtype=np.float32):
        super().__init__()
        if any(w % branches for w in widths):
            raise ConfigurationError(f"widths {widths} are not divisible by {branches} branches")
        rng = np.random.default_rng(seed)
        self.branches, self.copies = branches, copies
        self.nets = []
        for c in range(copies):
            body = []
            cin = in_channels
            for i, (cout, stride) in enumerate(zip(widths, strides)):
                first = i == 0
                bias = True if first else hidden_bias
                conv = Conv2d(cin, cout, 4, stride, 1, bias=bias, groups=1 if first else branches, rng=rng, dtype=dtype,
                              slope=LEAK, role="first" if first else "hidden")
                conv = self.add_module(f"d{c}_conv{i}", conv)
                nrm = None
                if norm and not first:
                    nrm = self.add_module(f"d{c}_norm{i}", InstanceNorm(cout, affine=norm == "affine", dtype=dtype))
                body.append((conv, nrm))
                cin = cout
            head = self.add_module(f"d{c}_head", Conv2d(cin, branches, 4, 1, 1, groups=branches, rng=rng, dtype=dtype, role="head"))
            self.nets.append((body, head))

    def forward(self, img: Tensor, copy: int = 0) -> list[Tensor]:
        body, head = self.nets[copy]
        h = img
        for conv, nrm in body:
            h = conv(h)
            if nrm is not None:
                h = nrm(h)
            h = ad.leaky_relu(h, LEAK)
        out = ad.sigmoid(head(h))
        return [out[:, i : i + 1] for i in range(self.branches)]


def stargan_audit_spec(branches: int = 1) -> MultiBranchDiscriminatorSpec:
    return MultiBranchDiscriminatorSpec(
        branches=branches, base_channels=64, n_layers=6, num_classes=84, image_side=128, in_channels=3,
        max_channels=2048, head_bias=False,
    )


def build_family(method: str, branches: int, seed: int = 0) -> Module:
    if method == "stargan":
        return MultiBranchDiscriminator(stargan_audit_spec(branches), np.random.default_rng(seed))
    if method == "pix2pix":
        return PatchDiscriminator(6, [64, 128, 256, 512], [2, 2, 2, 1], norm="affine", hidden_bias=False,
                                  branches=branches, seed=seed)
    if method == "cyclegan":
        return PatchDiscriminator(3, [64, 128, 256, 512, 512], [2, 2, 2, 2, 1], norm="plain", hidden_bias=True,
                                  branches=branches, copies=2, seed=seed)
    raise ConfigurationError(f"unknown audit method {method!r}")


@dataclass
class ScalingRow:
    method: str
    branches: int
    disc_params: int
    total_params: int
    ratio: float
    hidden_connections: int
    overhead: int
    published: float | None = None

    @property
    def rel_error(self) -> float | None:
        if self.published is None:
            return None
        return abs(self.disc_params / 1e6 - self.published) / self.published


@dataclass
class ScalingTable:
    rows: list[ScalingRow] = field(default_factory=list)

    def for_method(self, method: str) -> list[ScalingRow]:
        return [r for r in self.rows if r.method == method]


def audit_branch_scaling(method: str, branch_list=DEFAULT_BRANCHES, seed: int = 0) -> ScalingTable:
    """Build ``method`` for every branch count and tabulate its size.

    The ratio to the single-branch count lies in [1/N, 1/N + overhead(N)/P(1)].
    """
    if method == "stargan":
        for n in branch_list:
            stargan_audit_spec(n).validate()
    table = ScalingTable()
    base_total = None
    for n in branch_list:
        if n < 1:
            raise ConfigurationError(f"invalid branch count {n}")
        audit = count_parameters(build_family(method, n, seed), n)
        if base_total is None:
            base_total = audit.total if n == 1 else count_parameters(build_family(method, 1, seed), 1).total
        gen = int(round(REFERENCE_GENERATOR_MILLIONS[method] * 1e6))
        table.rows.append(ScalingRow(
            method, n, audit.total, audit.total + gen, audit.total / base_total,
            audit.hidden_connections(), audit.overhead(), PUBLISHED_DISC_MILLIONS[method].get(n),
        ))
    return table


def audit_custom(network: Module, label: str = "custom") -> ScalingRow:
    audit = count_parameters(network)
    return ScalingRow(label, audit.branch_config, audit.total, audit.total, 1.0, audit.hidden_connections(), audit.overhead())


def format_table(table: ScalingTable) -> str:
    header = f"{'method':<10} {'branches':>8} {'disc_params':>12} {'disc (M)':>9} {'published':>9} {'rel.err':>8} {'ratio':>7} {'total (M)':>9}"
    lines = [header, "-" * len(header)]
    for r in table.rows:
        pub = f"{r.published:9.2f}" if r.published is not None else f"{'-':>9}"
        err = f"{100 * r.rel_error:7.2f}%" if r.rel_error is not None else f"{'-':>8}"
        lines.append(
            f"{r.method:<10} {r.branches:>8d} {r.disc_params:>12,d} {r.disc_params / 1e6:9.2f} {pub} {err} {r.ratio:7.4f} {r.total_params / 1e6:9.2f}"
        )
    return "\n".join(lines)


def format_layers(audit: ParamAudit) -> str:
    lines = [f"{'layer':<24} {'kind':<6} {'in':>6} {'out':>6} {'k':>3} {'groups':>6} {'params':>12}"]
    for r in audit.per_layer:
        lines.append(f"{r.name:<24} {r.kind:<6} {r.in_ch:>6} {r.out_ch:>6} {r.kernel:>3} {r.groups:>6} {r.params:>12,d}")
    lines.append(f"{'total':<24} {'':<6} {'':>6} {'':>6} {'':>3} {'':>6} {audit.total:>12,d}")
    return "\n".join(lines)


def table_csv(table: ScalingTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "branches", "disc_params", "total_params"])
    for r in table.rows:
        w.writerow([r.method, r.branches, r.disc_params, r.total_params])
    return buf.getvalue()
