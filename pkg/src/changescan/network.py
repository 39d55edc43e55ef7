"""The end-to-end model: a weight-shared two-stream encoder whose stage
outputs are modulated by cross-temporal scan blocks, plus a small
multi-scale difference head that predicts the change mask at one quarter
of the input resolution.

Stage i runs at 1/4, 1/8, 1/16, 1/32 of the (padded) input. The same
stage weights process both temporal inputs, so identical inputs yield
bitwise-identical features. Between stages the modulated features are
added back onto the stage output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .block import BlockConfig, CrossTemporalScanBlock
from .layers import Conv
from .tensor import (
    Tensor,
    concat,
    crop2d,
    gelu,
    load_ltns,
    no_grad,
    reflect_pad2d,
    save_ltns,
    upsample_nearest,
)

__all__ = ["ModelConfig", "ChangeModel", "save_checkpoint", "load_checkpoint"]

STAGE_SCALES = (4, 8, 16, 32)


@dataclass
class ModelConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64, 96)
    state_size: int = 8
    top_k: int = 6
    tau: float = 1.0
    shift_set: tuple[int, ...] = (0, 1, 2, 3, 4)
    variant: str = "ctss_lass"
    direction_param_sharing: bool = True
    branch_param_sharing: bool = True
    head_hidden: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ValueError(f"exactly four stage widths are required, got {self.stage_channels}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def block_config(self, stage: int) -> BlockConfig:
        return BlockConfig(
            channels=self.stage_channels[stage],
            state_size=self.state_size,
            top_k=self.top_k,
            tau=self.tau,
            shift_set=tuple(self.shift_set),
            variant=self.variant,
            direction_param_sharing=self.direction_param_sharing,
            branch_param_sharing=self.branch_param_sharing,
        )


class EncoderStage:
    """One downsampling stage: strided 3x3 conv, GeLU, 3x3 conv.

    The first stage uses stride 2 twice so it lands at 1/4 resolution;
    later stages halve once.
    """

    def __init__(self, cin: int, cout: int, first: bool, rng: np.random.Generator, dtype):
        self.conv1 = Conv(cin, cout, 3, rng, stride=2, padding=1, dtype=dtype)
        self.conv2 = Conv(cout, cout, 3, rng, stride=2 if first else 1, padding=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(gelu(self.conv1(x)))

    def named(self, prefix: str):
        return self.conv1.named(f"{prefix}.conv1") + self.conv2.named(f"{prefix}.conv2")


class ChangeHead:
    """Fuse per-scale signed feature differences into 2-channel logits.

    Differences are upsampled to the 1/4-scale map, concatenated, passed
    through a 1x1-conv MLP with GeLU, enriched with a depthwise 3x3 of
    the fused map, and projected to change/no-change logits.
    """

    def __init__(self, stage_channels, hidden: int, rng: np.random.Generator, dtype):
        total = sum(stage_channels)
        self.mlp1_a = Conv(total, hidden, 1, rng, dtype=dtype)
        self.mlp1_b = Conv(hidden, hidden, 1, rng, dtype=dtype)
        self.dw = Conv(hidden, hidden, 3, rng, padding=1, groups=hidden, dtype=dtype)
        self.mlp2_a = Conv(2 * hidden, hidden, 1, rng, dtype=dtype)
        self.mlp2_b = Conv(hidden, 2, 1, rng, dtype=dtype)

    def __call__(self, pairs: list[tuple[Tensor, Tensor]]) -> Tensor:
        if len(pairs) != 4:
            raise ValueError(f"expected four scales, got {len(pairs)}")
        diffs = []
        for idx, (m1, m2) in enumerate(pairs):
            d = m1 - m2
            if idx:
                d = upsample_nearest(d, 2**idx)
            diffs.append(d)
        fused = concat(diffs, axis=0)
        g = self.mlp1_b(gelu(self.mlp1_a(fused)))
        both = concat([g, self.dw(g)], axis=0)
        return self.mlp2_b(gelu(self.mlp2_a(both)))

    def named(self, prefix: str):
        out = []
        for name, layer in (
            ("mlp1_a", self.mlp1_a),
            ("mlp1_b", self.mlp1_b),
            ("dw", self.dw),
            ("mlp2_a", self.mlp2_a),
            ("mlp2_b", self.mlp2_b),
        ):
            out += layer.named(f"{prefix}.{name}")
        return out


class ChangeModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        chans = cfg.stage_channels
        self.stages = [
            EncoderStage(cfg.in_channels if i == 0 else chans[i - 1], chans[i], i == 0, rng, dt)
            for i in range(4)
        ]
        self.blocks = [CrossTemporalScanBlock(cfg.block_config(i), rng, dt) for i in range(4)]
        self.head = ChangeHead(chans, cfg.head_hidden, rng, dt)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, s in enumerate(self.stages):
            out += s.named(f"stage{i + 1}")
        for i, b in enumerate(self.blocks):
            out += b.named_params(f"block{i + 1}")
        out += self.head.named(f"head")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def _prep(self, t: Tensor | np.ndarray) -> tuple[Tensor, tuple[int, int]]:
        x = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=self.cfg.np_dtype))
        if x.dtype != self.cfg.np_dtype:
            x = Tensor(x.data.astype(self.cfg.np_dtype), requires_grad=x.requires_grad)
        c, h, w = x.shape
        ph, pw = (-h) % 32, (-w) % 32
        if ph or pw:
            x = reflect_pad2d(x, (0, ph, 0, pw))
        return x, (h, w)

    def forward_features(
        self,
        t1,
        t2,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        """Logits at 1/4 of the padded input plus per-stage modulated pairs."""
        x1, (h, w) = self._prep(t1)
        x2, _ = self._prep(t2)
        if x1.shape != x2.shape:
            raise ValueError(f"temporal inputs differ in shape: {x1.shape} vs {x2.shape}")
        hp, wp = x1.shape[-2], x1.shape[-1]
        pairs = []
        for i, (stage, block) in enumerate(zip(self.stages, self.blocks)):
            f1 = stage(x1)
            f2 = stage(x2)
            scale = STAGE_SCALES[i]
            expect = (hp // scale, wp // scale)
            if (f1.shape[-2], f1.shape[-1]) != expect:
                raise AssertionError(f"stage {i + 1} resolution {f1.shape[-2:]} != {expect}")
            m1, m2 = block.forward(f1, f2, rng=rng, training=training)
            pairs.append((m1, m2))
            x1 = f1 + m1
            x2 = f2 + m2
        logits = self.head(pairs)
        if (hp, wp) != (h, w):
            logits = crop2d(logits, 0, 0, (h + 3) // 4, (w + 3) // 4)
        return logits, pairs

    def forward(self, t1, t2, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
        logits, _ = self.forward_features(t1, t2, rng=rng, training=training)
        return logits

    def predict_mask(self, t1, t2) -> np.ndarray:
        """Hard change mask at input resolution (quarter-scale argmax,
        nearest-upsampled back)."""
        with no_grad():
            logits = self.forward(t1, t2)
        small = (logits.data[1] > logits.data[0]).astype(np.uint8)
        h = np.asarray(t1.data if isinstance(t1, Tensor) else t1).shape[-2]
        w = np.asarray(t1.data if isinstance(t1, Tensor) else t1).shape[-1]
        big = np.repeat(np.repeat(small, 4, axis=0), 4, axis=1)
        return big[:h, :w]


def stage_fuse(f_prev: Tensor, modulated: Tensor) -> Tensor:
    """Residual fusion of a stage output with its modulated features."""
    if f_prev.shape != modulated.shape:
        raise ValueError(f"shape mismatch: {f_prev.shape} vs {modulated.shape}")
    return f_prev + modulated


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: ChangeModel, directory, trained: bool = False) -> None:
    """Write a manifest plus one LTNS file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (name, t) in enumerate(model.named_params()):
        fname = f"p{idx:04d}.ltns"
        save_ltns(directory / fname, t)
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "f32" if t.dtype == np.float32 else "f64",
                "file": fname,
            }
        )
    manifest = {
        "format": "changescan-checkpoint",
        "version": 1,
        "trained": bool(trained),
        "seed": 0,
        "config": asdict(model.cfg),
        "params": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory, require_trained: bool = False) -> ChangeModel:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "changescan-checkpoint":
        raise ValueError(f"{mpath} is not a checkpoint manifest")
    if require_trained and not manifest.get("trained", False):
        raise ValueError(f"checkpoint at {directory} is untrained; train it first")
    cfg_d = dict(manifest["config"])
    cfg_d["stage_channels"] = tuple(cfg_d["stage_channels"])
    cfg_d["shift_set"] = tuple(cfg_d["shift_set"])
    model = ChangeModel(ModelConfig(**cfg_d))
    named = dict(model.named_params())
    if len(named) != len(manifest["params"]):
        raise ValueError("checkpoint parameter count does not match the model")
    for entry in manifest["params"]:
        t = named[entry["name"]]
        arr = load_ltns(directory / entry["file"])
        if list(arr.shape) != entry["shape"] or list(arr.shape) != list(t.shape):
            raise ValueError(f"shape mismatch for parameter {entry['name']}")
        t.data = arr.astype(t.dtype)
    return model
