"""The cross-temporal adaptive scan block.

One block modulates a pair of same-scale feature maps: the maps are
concatenated, normalized, mixed, and then scanned once per configured
shift index. Each shifted pass scores the bi-temporal difference,
selects and merges top-k windows, lays the two maps out as one
interleaved sequence per window (plus the background), runs the
selective kernel over four traversal directions, and scatters the
results back. Branch outputs are aggregated with a 1x1 convolution and
split back into the two temporal maps.

Diagonal shifts are folded into the gather/scatter index maps, so a
branch whose scan is a passthrough returns every value to its original
pixel bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scan
from .layers import ChannelNorm, Conv, Linear
from .ssm import SelectiveScanParams, selective_scan
from .tensor import (
    Tensor,
    concat,
    crop2d,
    expand,
    index_select,
    narrow,
    reflect_pad2d,
    reshape,
    roll2d,
    tabs,
    tmean,
    upsample_nearest,
)

__all__ = ["BlockConfig", "CrossTemporalScanBlock"]


@dataclass
class BlockConfig:
    """Configuration of one scan block.

    ``channels`` is the width of each temporal map (the block operates
    on twice that after concatenation). ``shift_set`` picks which of the
    five diagonal shifts run as branches.
    """

    channels: int
    state_size: int = 8
    top_k: int = 6
    tau: float = 1.0
    shift_set: tuple[int, ...] = (0, 1, 2, 3, 4)
    variant: str = "ctss_lass"
    direction_param_sharing: bool = True
    branch_param_sharing: bool = True

    def __post_init__(self):
        if not self.shift_set:
            raise ValueError("shift_set must not be empty")
        if not all(i in (0, 1, 2, 3, 4) for i in self.shift_set):
            raise ValueError(f"shift indices must be in 0..4, got {self.shift_set}")
        if not 1 <= self.top_k <= 16:
            raise ValueError(f"top_k must be in 1..16, got {self.top_k}")
        if self.variant not in scan.SCAN_VARIANTS:
            raise ValueError(f"unknown scan variant '{self.variant}'")


class CrossTemporalScanBlock:
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        c2 = 2 * cfg.channels
        nb = len(cfg.shift_set)
        self.norm_in = ChannelNorm(c2, dtype)
        self.lin_in = Linear(c2, c2, rng, dtype)
        self.dw = Conv(c2, c2, 3, rng, padding=1, groups=c2, dtype=dtype)
        n_sets = 1 if cfg.branch_param_sharing else nb
        if not cfg.direction_param_sharing:
            n_sets *= 4
        self.mixers = [SelectiveScanParams.init(cfg.channels, cfg.state_size, rng, dtype) for _ in range(n_sets)]
        self.branch_norms = [ChannelNorm(c2, dtype) for _ in range(nb)]
        self.branch_lins = [Linear(c2, c2, rng, dtype) for _ in range(nb)]
        self.agg = Conv(nb * c2, c2, 1, rng, dtype=dtype)

    # -- parameter registry ----------------------------------------------------

    def named_params(self, prefix: str = "block") -> list[tuple[str, Tensor]]:
        out = self.norm_in.named(f"{prefix}.norm_in") + self.lin_in.named(f"{prefix}.lin_in") + self.dw.named(f"{prefix}.dw")
        for i, m in enumerate(self.mixers):
            out += m.named(f"{prefix}.mixer{i}")
        for i, (nrm, lin) in enumerate(zip(self.branch_norms, self.branch_lins)):
            out += nrm.named(f"{prefix}.branch{i}.norm") + lin.named(f"{prefix}.branch{i}.lin")
        out += self.agg.named(f"{prefix}.agg")
        return out

    # -- internals ----------------------------------------------------------------

    def _mixer_id(self, branch_pos: int, direction: int) -> int:
        pid = 0 if self.cfg.branch_param_sharing else branch_pos
        if not self.cfg.direction_param_sharing:
            pid = pid * 4 + direction
        return pid

    def _head(self, f1: Tensor, f2: Tensor) -> tuple[Tensor, tuple[int, int], tuple[int, int]]:
        """Concat, normalize, mix, and pad to shift-compatible dims."""
        if f1.shape != f2.shape:
            raise ValueError(f"temporal shapes differ: {f1.shape} vs {f2.shape}")
        c, h, w = f1.shape
        if c != self.cfg.channels:
            raise ValueError(f"expected {self.cfg.channels} channels, got {c}")
        fc = concat([f1, f2], axis=0)
        flat = reshape(fc, 2 * c, h * w)
        flat = self.lin_in(self.norm_in(flat))
        fcp = self.dw(reshape(flat, 2 * c, h, w))
        ph = (-h) % 8
        pw = (-w) % 8
        if ph or pw:
            fcp = reflect_pad2d(fcp, (0, ph, 0, pw))
        return fcp, (h, w), (h + ph, w + pw)

    def _split_pair(self, fcp: Tensor, hp: int, wp: int) -> tuple[Tensor, Tensor, Tensor]:
        c = self.cfg.channels
        f1p = narrow(fcp, 0, 0, c)
        f2p = narrow(fcp, 0, c, c)
        x2 = scan.interleave_pair(reshape(f1p, c, hp * wp), reshape(f2p, c, hp * wp))
        return f1p, f2p, x2

    def _branch_inputs(self, pair, hp: int, wp: int, i: int, rng, training: bool):
        """Plan and gated interleaved sequence for one shift index."""
        c = self.cfg.channels
        f1p, f2p, x2 = pair
        pmap = scan.shifted_to_original(i, hp, wp)
        if self.cfg.variant != "ctss_lass":
            return x2, scan.segment_plan(self.cfg.variant, hp, wp, pixel_map=pmap)
        dh, dw = scan.shift_spec(i, hp, wp).offset
        phi = tmean(tabs(f1p - f2p), axis=0)
        phi_s = roll2d(phi, dh, dw) if i else phi
        sw = scan.score_window(phi_s, self.cfg.tau, hard=not training, rng=rng if training else None)
        mask = scan.top_k_cells(sw, self.cfg.top_k)
        wl = scan.build_window_labels(mask, hp, wp)
        plan = scan.segment_plan("ctss_lass", hp, wp, labels=wl.labels, pixel_map=pmap)
        if training:
            # window pixels carry their cell's straight-through gate,
            # background pixels the complement; forward values are all
            # ones, the backward pass feeds the scorer
            g16 = scan.straight_through_gates(sw, mask)
            m16 = Tensor(mask.reshape(-1).astype(self.dtype))
            gate_cells = g16 * m16 + (1.0 - g16) * (1.0 - m16)
            gmap = upsample_nearest(reshape(gate_cells, 4, 4), (hp // 4, wp // 4))
            if i:
                gmap = roll2d(gmap, -dh, -dw)
            g_pix = reshape(gmap, hp * wp, 1)
            g2 = reshape(expand(g_pix, (hp * wp, 2)), 1, 2 * hp * wp)
            x2 = x2 * expand(g2, (c, 2 * hp * wp))
        return x2, plan

    def _branch_tail(self, out2: Tensor, pos: int, hp: int, wp: int) -> Tensor:
        c = self.cfg.channels
        even = np.arange(0, 2 * hp * wp, 2, dtype=np.intp)
        s1 = index_select(out2, even, unique=True)
        s2 = index_select(out2, even + 1, unique=True)
        cat = concat([s1, s2], axis=0)
        return reshape(self.branch_lins[pos](self.branch_norms[pos](cat)), 2 * c, hp, wp)

    # -- public surface --------------------------------------------------------------

    def branch(self, fc_prime: Tensor, i: int, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
        """One shifted scan pass over an already mixed [2C, H, W] map.

        The output lives at the original (unshifted) pixel positions.
        """
        c2, h, w = fc_prime.shape
        ph, pw = (-h) % 8, (-w) % 8
        fcp = reflect_pad2d(fc_prime, (0, ph, 0, pw)) if ph or pw else fc_prime
        hp, wp = h + ph, w + pw
        pos = self.cfg.shift_set.index(i)
        pair = self._split_pair(fcp, hp, wp)
        x2, plan = self._branch_inputs(pair, hp, wp, i, rng, training)
        scan_fn = lambda pid, xs: selective_scan(xs, self.mixers[pid])
        (out2,) = scan.apply_plans([(x2, plan)], scan_fn, param_of=lambda s, d: self._mixer_id(pos, d))
        out = self._branch_tail(out2, pos, hp, wp)
        return crop2d(out, 0, 0, h, w) if ph or pw else out

    def forward(self, f1: Tensor, f2: Tensor, rng: np.random.Generator | None = None, training: bool = False) -> tuple[Tensor, Tensor]:
        """Modulate a bi-temporal pair; shapes are preserved."""
        fcp, (h, w), (hp, wp) = self._head(f1, f2)
        c = self.cfg.channels
        pair = self._split_pair(fcp, hp, wp)
        sources = []
        for i in self.cfg.shift_set:
            sources.append(self._branch_inputs(pair, hp, wp, i, rng, training))
        scan_fn = lambda pid, xs: selective_scan(xs, self.mixers[pid])
        outs = scan.apply_plans(sources, scan_fn, param_of=self._mixer_id)
        tails = [self._branch_tail(out2, pos, hp, wp) for pos, out2 in enumerate(outs)]
        merged = self.agg(concat(tails, axis=0))
        if hp != h or wp != w:
            merged = crop2d(merged, 0, 0, h, w)
        return narrow(merged, 0, 0, c), narrow(merged, 0, c, c)
