"""The shared inpainting / segmentation U-Net.

Parameters live in one ordered ``name -> Tensor`` dict and are partitioned
into three groups: ``encoder`` (down path including the bottleneck),
``decoder`` (up path) and ``post`` (the final 1x1 conv).  Transfer and
freezing act on whole groups.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .tensorcore import Conv2D, GroupNormWS, ShapeError, Tape, Tensor, Upsample2x

GROUPS = ("encoder", "decoder", "post")
ENCODER_ONLY = "encoder"
ENCODER_AND_DECODER = "encoder+decoder"
SCOPES = {ENCODER_ONLY: ("encoder",), ENCODER_AND_DECODER: ("encoder", "decoder")}


class ConfigError(ValueError):
    pass


class IncompatibleError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_filters: int = 8
    in_channels: int = 1
    out_channels: int = 4
    groups: int = 8
    seed: int = 0
    head: str = "segment"  # "segment" -> sigmoid, "inpaint" -> identity

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 1 or self.in_channels < 1:
            raise ConfigError("base_filters and in_channels must be positive")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.head not in ("segment", "inpaint"):
            raise ConfigError(f"unknown head {self.head!r}")
        for lvl in range(self.depth):
            ch = self.channels(lvl)
            if ch % self.norm_groups(ch):
                raise ConfigError(f"{ch} channels not divisible by {self.norm_groups(ch)} groups")

    def channels(self, level: int) -> int:
        return self.base_filters * 2 ** level

    def norm_groups(self, channels: int) -> int:
        return min(self.groups, channels)

    def compatible_body(self, other: "UNetConfig") -> bool:
        keys = ("depth", "base_filters", "in_channels", "groups")
        return all(getattr(self, k) == getattr(other, k) for k in keys)


@dataclass(frozen=True)
class Block:
    """One named layer application inside the U-Net graph."""

    name: str
    layer: object
    group: str
    params: tuple = ()


def layer_plan(cfg: UNetConfig) -> list[Block]:
    """Ordered list of parameterized layers with their parameter names."""
    plan = []

    def conv_block(prefix, group, cin, cout):
        g = cfg.norm_groups(cout)
        for a, ci in ((1, cin), (2, cout)):
            plan.append(Block(f"{prefix}_conv{a}", Conv2D(3, ci, cout, standardize=True), group,
                              (f"{prefix}_conv{a}_w", f"{prefix}_conv{a}_b")))
            plan.append(Block(f"{prefix}_gn{a}", GroupNormWS(g, cout), group,
                              (f"{prefix}_gn{a}_gamma", f"{prefix}_gn{a}_beta")))

    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        conv_block(f"enc{lvl}", "encoder", cin, cfg.channels(lvl))
        cin = cfg.channels(lvl)
    for lvl in range(cfg.depth - 2, -1, -1):
        ch = cfg.channels(lvl)
        plan.append(Block(f"dec{lvl}_up", Upsample2x(cfg.channels(lvl + 1), ch), "decoder",
                          (f"dec{lvl}_up_w", f"dec{lvl}_up_b")))
        plan.append(Block(f"dec{lvl}_upgn", GroupNormWS(cfg.norm_groups(ch), ch), "decoder",
                          (f"dec{lvl}_upgn_gamma", f"dec{lvl}_upgn_beta")))
        conv_block(f"dec{lvl}", "decoder", 2 * ch, ch)
    plan.append(Block("post", Conv2D(1, cfg.base_filters, cfg.out_channels, standardize=False),
                      "post", ("post_w", "post_b")))
    return plan


def _init_block(block: Block, rng: np.random.Generator) -> dict:
    layer = block.layer
    out = {}
    if isinstance(layer, (Conv2D, Upsample2x)):
        wshape, bshape = layer.param_shapes()
        fan_in = wshape[0] * wshape[1] * wshape[2]
        out[block.params[0]] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape), block.params[0])
        out[block.params[1]] = Tensor(np.zeros(bshape), block.params[1])
    elif isinstance(layer, GroupNormWS):
        out[block.params[0]] = Tensor(np.ones(layer.channels), block.params[0])
        out[block.params[1]] = Tensor(np.zeros(layer.channels), block.params[1])
    return out


@dataclass
class WeightBundle:
    encoder: dict
    decoder: dict
    post: dict
    freeze_flags: dict = field(default_factory=lambda: {g: False for g in GROUPS})

    def group(self, name: str) -> dict:
        return getattr(self, name)


@dataclass
class UNet:
    config: UNetConfig
    params: dict                # name -> Tensor, in plan order
    frozen: frozenset = frozenset()

    @property
    def plan(self) -> list[Block]:
        return layer_plan(self.config)

    def group_of(self, name: str) -> str:
        if name.startswith("enc"):
            return "encoder"
        if name.startswith("dec"):
            return "decoder"
        return "post"

    def group_params(self, group: str) -> dict:
        return {k: v for k, v in self.params.items() if self.group_of(k) == group}

    @property
    def bundle(self) -> WeightBundle:
        return WeightBundle(*(self.group_params(g) for g in GROUPS),
                            freeze_flags={g: g in self.frozen for g in GROUPS})

    def frozen_names(self) -> set:
        return {k for k in self.params if self.group_of(k) in self.frozen}

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def with_params(self, params: dict) -> "UNet":
        return UNet(self.config, dict(params), self.frozen)


def build(config: UNetConfig) -> UNet:
    """He-initialized U-Net; identical seeds give bitwise-identical weights."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for block in layer_plan(config):
        if block.group == "post":
            # post init uses its own stream so swap_post_layer can reproduce it
            params.update(_init_block(block, np.random.default_rng([config.seed, 1, config.out_channels])))
        else:
            params.update(_init_block(block, rng))
    return UNet(config, params)


def run(model: UNet, batch, tape: Optional[Tape] = None) -> Tensor:
    """Forward pass on an N x H x W x C_in batch; output keeps H and W."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = model.config
    if x.data.ndim != 4:
        raise ShapeError(f"expected N x H x W x C batch, got shape {x.shape}")
    if x.shape[-1] != cfg.in_channels:
        raise ShapeError(f"batch has {x.shape[-1]} channels, model expects {cfg.in_channels}")
    div = 2 ** (cfg.depth - 1)
    if x.shape[1] % div or x.shape[2] % div:
        raise ShapeError(f"H, W = {x.shape[1:3]} must be divisible by {div} for depth {cfg.depth}")

    p = model.params

    def apply(block_name, block_layer, names, inp):
        return tc.forward(block_layer, [p[n] for n in names], inp, tape)

    blocks = {b.name: b for b in layer_plan(cfg)}

    def conv_block(prefix, inp):
        h = inp
        for a in (1, 2):
            cb, gb = blocks[f"{prefix}_conv{a}"], blocks[f"{prefix}_gn{a}"]
            h = apply(cb.name, cb.layer, cb.params, h)
            h = apply(gb.name, gb.layer, gb.params, h)
            h = tc.relu(tape, h)
        return h

    skips = []
    h = x
    for lvl in range(cfg.depth):
        if lvl > 0:
            h = tc.maxpool2x2(tape, h)
        h = conv_block(f"enc{lvl}", h)
        skips.append(h)
    for lvl in range(cfg.depth - 2, -1, -1):
        ub, gb = blocks[f"dec{lvl}_up"], blocks[f"dec{lvl}_upgn"]
        h = apply(ub.name, ub.layer, ub.params, h)
        h = tc.relu(tape, apply(gb.name, gb.layer, gb.params, h))
        h = tc.concat_channels(tape, [skips[lvl], h])
        h = conv_block(f"dec{lvl}", h)
    pb = blocks["post"]
    out = apply(pb.name, pb.layer, pb.params, h)
    if cfg.head == "segment":
        out = tc.sigmoid(tape, out)
    return out


def swap_post_layer(model: UNet, new_out_channels: int, seed: Optional[int] = None,
                    head: str = "segment") -> UNet:
    """Replace the post-processing conv; encoder and decoder tensors are kept as is."""
    if new_out_channels < 1:
        raise ConfigError(f"new_out_channels must be >= 1, got {new_out_channels}")
    cfg = replace(model.config, out_channels=new_out_channels, head=head,
                  seed=model.config.seed if seed is None else seed)
    cfg.validate()
    post = [b for b in layer_plan(cfg) if b.group == "post"][0]
    fresh = _init_block(post, np.random.default_rng([cfg.seed, 1, new_out_channels]))
    params = {k: v for k, v in model.params.items() if model.group_of(k) != "post"}
    params.update(fresh)
    return UNet(cfg, params, model.frozen)


def transfer(src, dst: UNet, scope: str) -> UNet:
    """Copy the scoped weight groups of ``src`` (a UNet or WeightBundle) into ``dst``.

    The compatibility check covers every scoped tensor before anything is
    copied, so a mismatch leaves ``dst`` untouched.
    """
    if scope not in SCOPES:
        raise ConfigError(f"unknown transfer scope {scope!r}")
    bundle = src.bundle if isinstance(src, UNet) else src
    if isinstance(src, UNet) and not src.config.compatible_body(dst.config):
        a, b = src.config, dst.config
        diff = [k for k in ("depth", "base_filters", "in_channels", "groups") if getattr(a, k) != getattr(b, k)]
        raise IncompatibleError(f"architectures differ in {diff[0]}: {getattr(a, diff[0])} vs {getattr(b, diff[0])}")
    updates = {}
    for group in SCOPES[scope]:
        src_group = bundle.group(group)
        dst_group = dst.group_params(group)
        for name, t in dst_group.items():
            if name not in src_group:
                raise IncompatibleError(f"source has no parameter {name!r}")
            if src_group[name].shape != t.shape:
                raise IncompatibleError(f"parameter {name!r}: source shape {src_group[name].shape} != {t.shape}")
        extra = set(src_group) - set(dst_group)
        if extra:
            raise IncompatibleError(f"source parameter {sorted(extra)[0]!r} missing in destination")
        updates.update(src_group)
    params = {k: updates.get(k, v) for k, v in dst.params.items()}
    return UNet(dst.config, params, dst.frozen)


def set_frozen(model: UNet, scope, frozen: bool) -> UNet:
    """Freeze or unfreeze weight groups. ``scope`` is a scope name, group name, or iterable of groups."""
    if isinstance(scope, str):
        groups = SCOPES.get(scope, (scope,))
    else:
        groups = tuple(scope)
    for g in groups:
        if g not in GROUPS:
            raise ConfigError(f"unknown weight group {g!r}")
    new = set(model.frozen)
    new = new | set(groups) if frozen else new - set(groups)
    return UNet(model.config, model.params, frozenset(new))


# --------------------------------------------------------------------------
# checkpoint files: <stem>.json manifest + <stem>.bin little-endian float64 blob


def save_checkpoint(model: UNet, path) -> None:
    path = Path(path)
    manifest = {"config": asdict(model.config), "seed": model.config.seed,
                "frozen": sorted(model.frozen), "dtype": "<f8", "groups": {g: [] for g in GROUPS}}
    offset = 0
    chunks = []
    for name, t in model.params.items():
        manifest["groups"][model.group_of(name)].append(
            {"name": name, "shape": list(t.shape), "offset": offset})
        buf = t.data.astype("<f8").tobytes()
        chunks.append(buf)
        offset += len(buf)
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> UNet:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    cfg = UNetConfig(**manifest["config"])
    entries = {}
    for g in GROUPS:
        for e in manifest["groups"][g]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
            entries[e["name"]] = Tensor(arr.astype(np.float64), e["name"])
    order = [n for b in layer_plan(cfg) for n in b.params]
    if set(order) != set(entries):
        raise IncompatibleError("checkpoint parameters do not match the declared architecture")
    return UNet(cfg, {n: entries[n] for n in order}, frozenset(manifest.get("frozen", [])))
