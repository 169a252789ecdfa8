"""Desk-scale residual CNN with STEAM units at planned positions.

Layout: stem conv -> S stages of basic residual blocks (conv-relu-conv plus
skip) -> global average pool -> linear classifier. When the spatial size
halves, the first block of the stage downsamples with a 4x4 stride-2 conv and
a 2x2 stride-2 projection shortcut. A STEAM unit recalibrates the block output
before the skip-add.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .rng import Rng
from .unit import SteamConfig, SteamUnit
from .zoo import PlacementPlan, StageSpec, plan_placement


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng: Rng, pad: int | None = None):
        self.stride, self.pad = stride, k // 2 if pad is None else pad
        std = math.sqrt(2.0 / (cin * k * k))  # He fan-in
        self.weight = Tensor(rng.normal((cout, cin, k, k), std=std), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def named_parameters(self, prefix: str) -> list:
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: Rng):
        self.weight = Tensor(rng.normal((fan_in, fan_out), std=math.sqrt(1.0 / fan_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)

    def named_parameters(self, prefix: str) -> list:
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class BasicBlock:
    def __init__(self, cin: int, cout: int, stride: int, rng: Rng, steam: SteamUnit | None = None):
        # 4x4/pad-1 and 2x2 kernels halve even sizes exactly at stride 2
        self.conv1 = Conv2d(cin, cout, 3, 1, rng) if stride == 1 else Conv2d(cin, cout, 4, 2, rng, pad=1)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng)
        self.shortcut = None
        if stride != 1:
            self.shortcut = Conv2d(cin, cout, 2, 2, rng, pad=0)
        elif cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, 1, rng)
        self.steam = steam

    def __call__(self, x: Tensor, training: bool, rng: Rng | None) -> Tensor:
        out = self.conv2(ad.relu(self.conv1(x)))
        if self.steam is not None:
            out = self.steam(out, training, rng)
        skip = self.shortcut(x) if self.shortcut is not None else x
        return ad.relu(out + skip)

    def named_parameters(self, prefix: str) -> list:
        params = self.conv1.named_parameters(prefix + "conv1.") + self.conv2.named_parameters(prefix + "conv2.")
        if self.shortcut is not None:
            params += self.shortcut.named_parameters(prefix + "shortcut.")
        if self.steam is not None:
            params += self.steam.named_parameters(prefix + "steam.")
        return params


def _stride(prev: int, cur: int, where: str) -> int:
    if cur < 1 or prev % cur or prev // cur not in (1, 2):
        raise ConfigError(f"{where}: spatial size {prev} -> {cur} needs stride 1 or 2")
    return prev // cur


class DeskCNN:
    def __init__(self, spec: StageSpec, steam: SteamConfig | None, rng: Rng,
                 input_shape=(1, 28, 28), num_classes: int = 10, policy: str = "adaptive"):
        if not spec.channels_per_stage or not spec.spatial_per_stage:
            raise ConfigError("desk CNN needs channels and spatial sizes for every stage")
        self.spec, self.steam_cfg = spec, steam
        self.input_shape, self.num_classes, self.policy = tuple(input_shape), num_classes, policy
        self.plan: PlacementPlan = plan_placement(spec, policy) if steam else PlacementPlan(
            tuple(0 for _ in spec.blocks_per_stage), tuple(() for _ in spec.blocks_per_stage))

        cin, h, w = self.input_shape
        (h0, w0), c0 = spec.spatial_per_stage[0], spec.channels_per_stage[0]
        stem_stride = _stride(h, h0, "stem")
        if _stride(w, w0, "stem") != stem_stride:
            raise ConfigError("stem must downsample H and W equally")
        self.stem = Conv2d(cin, c0, 3, 1, rng) if stem_stride == 1 else Conv2d(cin, c0, 4, 2, rng, pad=1)

        positions = set(self.plan.positions())
        self.blocks = []
        prev_c, prev_h = c0, h0
        for s, n_blocks in enumerate(spec.blocks_per_stage):
            (hs, ws), cs = spec.spatial_per_stage[s], spec.channels_per_stage[s]
            stride = _stride(prev_h, hs, f"stage {s + 1}")
            for b in range(n_blocks):
                unit = None
                if (s, b) in positions:
                    if hs % steam.m or ws % steam.m:
                        raise ConfigError(f"stage {s + 1} spatial {hs}x{ws} is not divisible by m={steam.m}")
                    if cs < 3:
                        raise ConfigError(f"stage {s + 1} has {cs} channels; STEAM needs >= 3")
                    unit = SteamUnit(steam, rng)
                self.blocks.append((s, BasicBlock(prev_c, cs, stride if b == 0 else 1, rng, unit)))
                prev_c = cs
            prev_h = hs
        self.fc = Linear(prev_c, num_classes, rng)

    # -- parameters --------------------------------------------------------------------
    def named_parameters(self) -> list:
        params = self.stem.named_parameters("stem.")
        for i, (s, block) in enumerate(self.blocks):
            params += block.named_parameters(f"stage{s + 1}.block{i}.")
        return params + self.fc.named_parameters("fc.")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def steam_units(self) -> list:
        return [b.steam for _, b in self.blocks if b.steam is not None]

    @property
    def steam_params(self) -> int:
        return sum(u.num_params for u in self.steam_units)

    def config_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "steam": self.steam_cfg.to_dict() if self.steam_cfg else None,
                "input_shape": list(self.input_shape), "num_classes": self.num_classes, "policy": self.policy}

    def config_digest(self) -> str:
        blob = json.dumps(self.config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- forward ---------------------------------------------------------------------------
    def __call__(self, x, training: bool = False, rng: Rng | None = None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"model expects inputs {self.input_shape}, got {tuple(x.shape[1:])}")
        out = ad.relu(self.stem(x))
        for _, block in self.blocks:
            out = block(out, training, rng)
        return self.fc(out.mean(axis=(2, 3)))


def build_desk_cnn(spec: StageSpec, steam: SteamConfig | None, rng: Rng, input_shape=(1, 28, 28),
                   num_classes: int = 10, policy: str = "adaptive") -> DeskCNN:
    return DeskCNN(spec, steam, rng, input_shape, num_classes, policy)


def model_from_config(config: dict, rng: Rng) -> DeskCNN:
    """Rebuild a model from :meth:`DeskCNN.config_dict` output (weights are freshly drawn)."""
    s = config["spec"]
    spec = StageSpec(tuple(s["blocks"]), tuple(s["channels"]), tuple(tuple(hw) for hw in s["spatial"]), s["name"])
    steam = SteamConfig(**config["steam"]) if config.get("steam") else None
    return DeskCNN(spec, steam, rng, tuple(config["input_shape"]), config["num_classes"], config["policy"])
