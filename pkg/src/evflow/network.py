"""Encoder-decoder flow network over (4, D/2, H, W) voxel grids.

Layout (``b`` = base channels, defaults in parentheses for b = 32)::

    enc3d_1  conv3d (s_1,3,3) stride (s_1,2,2)   4 -> b     H/2   time T -> T/s_1
    enc3d_2  conv3d (s_2,3,3) stride (s_2,2,2)   b -> 2b    H/4   time -> 1
             reshape (2b, 1, H/4, W/4) -> (2b, H/4, W/4)
    enc2d_1  conv2d 3x3 stride 2                 2b -> 4b   H/8
    enc2d_2  conv2d 3x3 stride 2                 4b -> 8b   H/16
    res_1, res_2                                 8b         H/16
    dec_k    concat(prev, skip_k[, flow_{k-1}]) -> convT 4x4 s2 -> conv 3x3 -> 1x1 flow head

Decoder skips pair resolutions: dec_1 takes enc2d_2, dec_2 enc2d_1, dec_3 the
flattened enc3d_2 and dec_4 the flattened enc3d_1 (C * T_k channels). Each
decoder k > 1 also receives the flow predicted by decoder k-1, which already
lives at its input resolution. Flows come out at 1/8, 1/4, 1/2 and 1/1 of the
input size, in full-resolution pixel units.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from evflow import tensor as T
from evflow.serialization import PathLike, load_tensor, save_tensor
from evflow.tensor import Tensor


class ConfigError(ValueError):
    """Network configuration or checkpoint is inconsistent."""


def default_temporal_strides(t_extent: int) -> tuple[int, int]:
    """Two strides whose product is ``t_extent`` (the voxel grid's D/2)."""
    if t_extent < 1:
        raise ConfigError(f"temporal extent must be >= 1, got {t_extent}")
    for s1 in range(2, t_extent + 1):
        if t_extent % s1 == 0:
            return s1, t_extent // s1
    return 1, 1


@dataclass(frozen=True)
class NetworkConfig:
    D: int = 8
    base_channels: int = 32
    temporal_strides: Optional[tuple[int, int]] = None

    @property
    def t_extent(self) -> int:
        return self.D // 2

    @property
    def strides(self) -> tuple[int, int]:
        if self.temporal_strides is not None:
            return tuple(int(s) for s in self.temporal_strides)
        return default_temporal_strides(self.t_extent)

    def validate(self) -> None:
        if self.D < 2 or self.D % 2:
            raise ConfigError(f"D must be even and >= 2, got {self.D}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        s1, s2 = self.strides
        if s1 < 1 or s2 < 1 or s1 * s2 != self.t_extent:
            raise ConfigError(f"temporal strides {self.strides} must multiply to D/2 = {self.t_extent}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temporal_strides"] = list(self.strides)
        return d


def layer_table(cfg: NetworkConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Parameter name -> shape for every layer, in forward order."""
    cfg.validate()
    b = cfg.base_channels
    s1, s2 = cfg.strides
    t1 = cfg.t_extent // s1  # temporal extent after enc3d_1
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()

    def conv(name, cout, cin, *k):
        shapes[f"{name}.weight"] = (cout, cin) + tuple(k)
        shapes[f"{name}.bias"] = (cout,)

    def convT(name, cin, cout, k):
        shapes[f"{name}.weight"] = (cin, cout, k, k)
        shapes[f"{name}.bias"] = (cout,)

    conv("enc3d_1", b, 4, s1, 3, 3)
    conv("enc3d_2", 2 * b, b, s2, 3, 3)
    conv("enc2d_1", 4 * b, 2 * b, 3, 3)
    conv("enc2d_2", 8 * b, 4 * b, 3, 3)
    for r in (1, 2):
        conv(f"res_{r}.conv_a", 8 * b, 8 * b, 3, 3)
        conv(f"res_{r}.conv_b", 8 * b, 8 * b, 3, 3)

    skips = [8 * b, 4 * b, 2 * b * 1, b * t1]
    outs = [4 * b, 2 * b, b, b]
    prev = 8 * b
    for k in range(4):
        cin = prev + skips[k] + (2 if k > 0 else 0)
        convT(f"dec_{k + 1}.up", cin, outs[k], 4)
        conv(f"dec_{k + 1}.conv", outs[k], outs[k], 3, 3)
        conv(f"dec_{k + 1}.flow", 2, outs[k], 1, 1)
        prev = outs[k]
    _check_skip_law(shapes, skips, outs, b)
    return shapes


def _check_skip_law(shapes, skips, outs, b) -> None:
    prev = 8 * b
    for k in range(4):
        name = f"dec_{k + 1}.up.weight"
        expect = prev + skips[k] + (2 if k > 0 else 0)
        if shapes[name][0] != expect:
            raise ConfigError(f"{name}: input channels {shapes[name][0]} != {prev} + {skips[k]} + flow")
        prev = outs[k]


@dataclass
class NetworkParams:
    tensors: "OrderedDict[str, Tensor]"
    config: NetworkConfig
    init_seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if ".up." in name:  # transposed conv weight is (Cin, Cout, k, k)
        return shape[0] * int(np.prod(shape[2:]))
    return int(np.prod(shape[1:]))


def init_params(seed: int = 0, config: Optional[NetworkConfig] = None) -> NetworkParams:
    """He-uniform weights (variance 2 / fan_in), zero biases."""
    config = config or NetworkConfig()
    table = layer_table(config)
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in table.items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return NetworkParams(tensors, config, int(seed))


def count_params(params: Union[NetworkParams, NetworkConfig]) -> int:
    if isinstance(params, NetworkConfig):
        return sum(int(np.prod(s)) for s in layer_table(params).values())
    return sum(t.size for t in params.tensors.values())


@dataclass
class FlowPyramid:
    flows: list[Tensor]
    activations: dict = field(default_factory=dict)

    @property
    def final(self) -> Tensor:
        return self.flows[-1]

    def __len__(self) -> int:
        return len(self.flows)

    def item(self, i: int) -> "FlowPyramid":
        """Select one sample of a batched pyramid."""
        return FlowPyramid([f[i] for f in self.flows])


def _flatten_time(a: Tensor) -> Tensor:
    n, c, d, h, w = a.shape
    return T.reshape(a, (n, c * d, h, w))


def forward(params: NetworkParams, x, return_activations: bool = False) -> FlowPyramid:
    """Run the network on (4, D/2, H, W) or batched (N, 4, D/2, H, W) input."""
    from evflow.encoder import VoxelGrid

    if isinstance(x, VoxelGrid):
        x = x.data
    x = T.as_tensor(x)
    batched = x.ndim == 5
    if not batched:
        if x.ndim != 4:
            raise T.ShapeError(f"input: expected (4, D/2, H, W), got {x.shape}")
        x = T.reshape(x, (1,) + x.shape)
    cfg = params.config
    _, c, d, h, w = x.shape
    if c != 4:
        raise T.ShapeError(f"enc3d_1: expected 4 input channels, got {c}")
    if d != cfg.t_extent:
        raise T.ShapeError(f"enc3d_1: temporal extent {d} does not match configured D/2 = {cfg.t_extent}")
    if h % 16 or w % 16:
        raise T.ShapeError(f"enc2d_2: spatial size {h}x{w} must be divisible by 16")
    s1, s2 = cfg.strides
    p = params.tensors
    relu = T.relu
    acts: dict[str, tuple[int, ...]] = {}

    e1 = relu(T.conv3d(x, p["enc3d_1.weight"], p["enc3d_1.bias"], stride=(s1, 2, 2), padding=(0, 1, 1)))
    e2 = relu(T.conv3d(e1, p["enc3d_2.weight"], p["enc3d_2.bias"], stride=(s2, 2, 2), padding=(0, 1, 1)))
    acts["enc3d_1"] = e1.shape
    acts["enc3d_2"] = e2.shape
    if e2.shape[2] != 1:
        raise T.ShapeError(f"enc3d_2: temporal extent {e2.shape[2]} after 3D encoders, expected 1")
    e2_flat = _flatten_time(e2)
    e1_flat = _flatten_time(e1)
    e3 = relu(T.conv2d(e2_flat, p["enc2d_1.weight"], p["enc2d_1.bias"], stride=2, padding=1))
    e4 = relu(T.conv2d(e3, p["enc2d_2.weight"], p["enc2d_2.bias"], stride=2, padding=1))
    acts["enc2d_1"] = e3.shape
    acts["enc2d_2"] = e4.shape

    r = e4
    for k in (1, 2):
        a = relu(T.conv2d(r, p[f"res_{k}.conv_a.weight"], p[f"res_{k}.conv_a.bias"], stride=1, padding=1))
        a = T.conv2d(a, p[f"res_{k}.conv_b.weight"], p[f"res_{k}.conv_b.bias"], stride=1, padding=1)
        r = relu(T.add(r, a))

    skips = [e4, e3, e2_flat, e1_flat]
    flows: list[Tensor] = []
    prev = r
    for k in range(4):
        name = f"dec_{k + 1}"
        parts = [prev, skips[k]] + ([flows[-1]] if flows else [])
        z = T.concat(parts, axis=1)
        acts[f"{name}.in"] = z.shape
        z = relu(T.conv_transpose2d(z, p[f"{name}.up.weight"], p[f"{name}.up.bias"], stride=2, padding=1))
        z = relu(T.conv2d(z, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"], stride=1, padding=1))
        flows.append(T.conv2d(z, p[f"{name}.flow.weight"], p[f"{name}.flow.bias"], stride=1, padding=0))
        prev = z

    if not batched:
        flows = [T.reshape(f, f.shape[1:]) for f in flows]
    return FlowPyramid(flows, acts if return_activations else {})


# ---------------------------------------------------------------- checkpoints


def _safe_name(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(path: PathLike, params: NetworkParams, extra: Optional[dict] = None,
                    extra_tensors: Optional[dict] = None) -> None:
    """Write manifest.json plus one EVT1 blob per tensor into directory ``path``."""
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, t in params.tensors.items():
        fname = f"{_safe_name(name)}.evt"
        save_tensor(os.path.join(path, fname), t.data)
        entries.append({"name": name, "shape": list(t.shape), "path": fname})
    aux = []
    for name, arr in (extra_tensors or {}).items():
        fname = f"aux.{_safe_name(name)}.evt"
        save_tensor(os.path.join(path, fname), arr)
        aux.append({"name": name, "shape": list(np.shape(arr)), "path": fname})
    manifest = {"config": params.config.to_dict(), "init_seed": params.init_seed, "tensors": entries,
                "aux_tensors": aux, "extra": extra or {}}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path: PathLike, expect: Optional[NetworkConfig] = None):
    """Return (params, extra, aux_tensors); shape mismatches name the layer."""
    path = os.fspath(path)
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    c = manifest["config"]
    cfg = NetworkConfig(int(c["D"]), int(c["base_channels"]), tuple(c["temporal_strides"]))
    if expect is not None:
        if (expect.D, expect.base_channels, expect.strides) != (cfg.D, cfg.base_channels, cfg.strides):
            table = layer_table(expect)
            for e in manifest["tensors"]:
                if tuple(table.get(e["name"], ())) != tuple(e["shape"]):
                    raise ConfigError(f"checkpoint layer {e['name']} has shape {tuple(e['shape'])}, "
                                      f"config expects {table.get(e['name'])}")
            raise ConfigError(f"checkpoint config {cfg} differs from requested {expect}")
    table = layer_table(cfg)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for e in manifest["tensors"]:
        arr = load_tensor(os.path.join(path, e["path"]))
        if e["name"] not in table or tuple(table[e["name"]]) != arr.shape:
            raise ConfigError(f"checkpoint layer {e['name']} has shape {arr.shape}, "
                              f"config expects {table.get(e['name'])}")
        tensors[e["name"]] = Tensor(arr, requires_grad=True)
    missing = [n for n in table if n not in tensors]
    if missing:
        raise ConfigError(f"checkpoint is missing layer {missing[0]}")
    aux = {e["name"]: load_tensor(os.path.join(path, e["path"])) for e in manifest.get("aux_tensors", [])}
    return NetworkParams(tensors, cfg, int(manifest.get("init_seed", 0))), manifest.get("extra", {}), aux
