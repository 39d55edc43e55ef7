"""Index machinery for scanning bi-temporal feature maps.

Everything here is reindexing: score-driven top-k window selection on a
fixed 4x4 grid, merging of adjacent selected windows, the permutation
that lays window pixels out contiguously, four-direction traversals,
pixel-wise interleaving of the two temporal maps, and diagonal cyclic
shifts. All of it is exactly invertible, so composition tests demand
bitwise equality.

The scan variants used for ablations (whole-map four-direction scan,
fixed quadrant windows, width-concatenation, row-alternation) are
expressed through the same plan representation: per direction, per
segment, an index array into the interleaved bi-temporal pixel axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, avg_pool2d, concat, expand, index_select, reshape, roll2d, softmax, straight_through, transpose

GRID = 4  # score grid is 4x4: 16 candidate windows per map

SCAN_VARIANTS = ("ss2d", "local_fixed", "cds", "rrs", "ctss_lass")

__all__ = [
    "GRID",
    "SCAN_VARIANTS",
    "ScoreWindow",
    "WindowLabels",
    "ScanPermutation",
    "ShiftSpec",
    "SegmentPlan",
    "score_window",
    "top_k_cells",
    "straight_through_gates",
    "merge_connected",
    "build_window_labels",
    "scan_order",
    "gather_sequence",
    "scatter_sequence",
    "shift_spec",
    "cyclic_shift",
    "cyclic_unshift",
    "shifted_to_original",
    "direction_orders",
    "directional_expand",
    "directional_collapse",
    "interleave_pair",
    "deinterleave",
    "segment_plan",
    "apply_plans",
    "ablation_scan",
    "region_sequence_gap",
]


# -- scoring and window selection -----------------------------------------------


@dataclass
class ScoreWindow:
    """Normalized per-cell scores over the 4x4 grid.

    ``logits`` are the temperature-scaled (and possibly noised) pooled
    means before the softmax; selection ranks on them so that small
    temperatures cannot lose the tail ordering to underflow.
    """

    scores: Tensor  # [4, 4], sums to 1
    logits: np.ndarray  # [16]
    tau: float
    hard: bool


def score_window(phi: Tensor, tau: float, hard: bool = True, rng: np.random.Generator | None = None) -> ScoreWindow:
    """Pool a difference-magnitude map into 4x4 cells and normalize.

    With ``rng`` given, Gumbel noise perturbs the pooled means before the
    temperature softmax, giving a differentiable approximation to the
    discrete choice; without it the ranking equals a plain argsort of
    the pooled means.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    h, w = phi.shape[-2], phi.shape[-1]
    if h % GRID or w % GRID:
        raise ValueError(f"map dims ({h}, {w}) not divisible by {GRID}; pad the input first")
    pooled = avg_pool2d(phi, (h // GRID, w // GRID))
    if rng is not None:
        u = rng.random(GRID * GRID).reshape(GRID, GRID)
        gumbel = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
        pooled = pooled + Tensor(gumbel.astype(pooled.dtype))
    logits = reshape(pooled * (1.0 / tau), GRID * GRID)
    scores = reshape(softmax(logits, axis=0), GRID, GRID)
    return ScoreWindow(scores=scores, logits=logits.data.copy(), tau=tau, hard=hard)


def top_k_cells(sw: ScoreWindow, k: int) -> np.ndarray:
    """Boolean 4x4 mask of the k best cells; ties go to the smaller flat index."""
    if not 1 <= k <= GRID * GRID:
        raise ValueError(f"k must be in 1..{GRID * GRID}, got {k}")
    winners = np.argsort(-sw.logits, kind="stable")[:k]
    mask = np.zeros(GRID * GRID, dtype=bool)
    mask[winners] = True
    return mask.reshape(GRID, GRID)


def straight_through_gates(sw: ScoreWindow, mask: np.ndarray) -> Tensor:
    """Per-cell gate values: hard 0/1 forward, soft scores on the way back.

    The soft surrogate is k * scores so its scale matches the hard mask
    in expectation. With ``sw.hard`` the gates are constants and carry no
    gradient (the inference path, and the one finite differences see).
    """
    hard = mask.reshape(-1).astype(sw.scores.dtype)
    if sw.hard:
        return Tensor(hard)
    k = int(mask.sum())
    soft = reshape(sw.scores, GRID * GRID) * float(k)
    return straight_through(hard, soft)


def merge_connected(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected flood fill over selected cells.

    Returns grid labels in {0..k'} with components numbered by their
    smallest flat cell index.
    """
    labels = np.zeros((GRID, GRID), dtype=np.int64)
    nxt = 0
    for start in range(GRID * GRID):
        r, c = divmod(start, GRID)
        if not mask[r, c] or labels[r, c]:
            continue
        nxt += 1
        queue = [(r, c)]
        labels[r, c] = nxt
        while queue:
            i, j = queue.pop()
            for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= ni < GRID and 0 <= nj < GRID and mask[ni, nj] and not labels[ni, nj]:
                    labels[ni, nj] = nxt
                    queue.append((ni, nj))
    return labels, nxt


@dataclass
class WindowLabels:
    """Pixel-level window assignment: 0 is background, 1..k' are merged windows."""

    labels: np.ndarray  # [H, W] int
    k: int
    k_merged: int
    grid_labels: np.ndarray  # [4, 4] int
    window_cells: list[list[tuple[int, int]]]  # per label, its grid cells

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def build_window_labels(mask: np.ndarray, h: int, w: int) -> WindowLabels:
    """Merge the selected cells and upsample the labeling to pixel level."""
    if h % GRID or w % GRID:
        raise ValueError(f"map dims ({h}, {w}) not divisible by {GRID}")
    grid_labels, k_merged = merge_connected(mask)
    labels = np.repeat(np.repeat(grid_labels, h // GRID, axis=0), w // GRID, axis=1)
    cells = [
        [(int(r), int(c)) for r, c in zip(*np.nonzero(grid_labels == v))]
        for v in range(1, k_merged + 1)
    ]
    return WindowLabels(labels=labels, k=int(mask.sum()), k_merged=k_merged, grid_labels=grid_labels, window_cells=cells)


# -- the window-ordered permutation ----------------------------------------------


@dataclass
class ScanPermutation:
    """A bijection on pixel indices with its inverse."""

    order: np.ndarray
    inverse: np.ndarray

    def __len__(self) -> int:
        return len(self.order)


def scan_order(wl: WindowLabels) -> ScanPermutation:
    """Background pixels in row-major order, then each merged window's
    pixels in row-major order, window by window."""
    flat = wl.labels.reshape(-1)
    parts = [np.flatnonzero(flat == v) for v in range(wl.k_merged + 1)]
    order = np.concatenate([p for p in parts if p.size]).astype(np.intp)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size, dtype=np.intp)
    return ScanPermutation(order=order, inverse=inverse)


def gather_sequence(x: Tensor, p: ScanPermutation) -> Tensor:
    """Flatten [C, H, W] into [C, H*W] following the permutation."""
    c = x.shape[0]
    hw = x.shape[-2] * x.shape[-1]
    if len(p) != hw:
        raise ValueError(f"permutation length {len(p)} does not match map size {hw}")
    return index_select(reshape(x, c, hw), p.order, unique=True)


def scatter_sequence(seq: Tensor, p: ScanPermutation, h: int, w: int) -> Tensor:
    """Inverse of :func:`gather_sequence`; exact round trip."""
    if seq.shape[-1] != len(p) or h * w != len(p):
        raise ValueError(f"sequence length {seq.shape[-1]} does not match permutation {len(p)}")
    return reshape(index_select(seq, p.inverse, unique=True), seq.shape[0], h, w)


# -- diagonal cyclic shifts --------------------------------------------------------


@dataclass
class ShiftSpec:
    i: int
    offset: tuple[int, int]


def shift_spec(i: int, h: int, w: int) -> ShiftSpec:
    """Offset table: one eighth of the map along each diagonal, index 0 is no shift."""
    if i not in (0, 1, 2, 3, 4):
        raise ValueError(f"shift index must be 0..4, got {i}")
    if i == 0:
        return ShiftSpec(0, (0, 0))
    if h % 8 or w % 8:
        raise ValueError(f"map dims ({h}, {w}) must be divisible by 8 for shifts")
    dh, dw = h // 8, w // 8
    table = {1: (dh, dw), 2: (dh, -dw), 3: (-dh, -dw), 4: (-dh, dw)}
    return ShiftSpec(i, table[i])


def cyclic_shift(x: Tensor, i: int) -> Tensor:
    dh, dw = shift_spec(i, x.shape[-2], x.shape[-1]).offset
    return roll2d(x, dh, dw) if i else x


def cyclic_unshift(x: Tensor, i: int) -> Tensor:
    dh, dw = shift_spec(i, x.shape[-2], x.shape[-1]).offset
    return roll2d(x, -dh, -dw) if i else x


def shifted_to_original(i: int, h: int, w: int) -> np.ndarray:
    """Lookup from shifted-map flat pixel index to original flat index."""
    dh, dw = shift_spec(i, h, w).offset
    r, c = np.divmod(np.arange(h * w, dtype=np.intp), w)
    return ((r - dh) % h) * w + (c - dw) % w


# -- four-direction traversals and bi-temporal interleaving -------------------------


def _order_pixels(pixels: np.ndarray, w: int, direction: int) -> np.ndarray:
    """Traverse a pixel set row-major (0), column-major (1), or reversed (2, 3)."""
    if direction in (0, 2):
        out = np.sort(pixels)
    else:
        r, c = np.divmod(pixels, w)
        out = pixels[np.lexsort((r, c))]
    return out[::-1] if direction >= 2 else out


def direction_orders(hf: int, wf: int) -> list[np.ndarray]:
    pix = np.arange(hf * wf, dtype=np.intp)
    return [_order_pixels(pix, wf, d) for d in range(4)]


def directional_expand(win: Tensor) -> list[Tensor]:
    """Unfold a [C, Hf, Wf] window into four 1-d sequences."""
    c, hf, wf = win.shape
    flat = reshape(win, c, hf * wf)
    return [index_select(flat, o, unique=True) for o in direction_orders(hf, wf)]


def directional_collapse(seqs: list[Tensor], hf: int, wf: int) -> Tensor:
    """Invert each traversal and sum pixel-wise; equals 4x the window when
    the sequences are untouched."""
    orders = direction_orders(hf, wf)
    total = None
    for seq, o in zip(seqs, orders):
        inv = np.empty_like(o)
        inv[o] = np.arange(o.size, dtype=np.intp)
        back = index_select(seq, inv, unique=True)
        total = back if total is None else total + back
    return reshape(total, seqs[0].shape[0], hf, wf)


def interleave_pair(sa: Tensor, sb: Tensor) -> Tensor:
    """Merge two [C, L] sequences pixel by pixel into [C, 2L]."""
    if sa.shape != sb.shape:
        raise ValueError(f"length mismatch: {sa.shape} vs {sb.shape}")
    c, length = sa.shape
    stacked = concat([reshape(sa, c, length, 1), reshape(sb, c, length, 1)], axis=2)
    return reshape(stacked, c, 2 * length)


def deinterleave(s: Tensor) -> tuple[Tensor, Tensor]:
    """Split a pixel-merged [C, 2L] sequence back into its two halves."""
    c, length2 = s.shape
    if length2 % 2:
        raise ValueError(f"cannot split odd-length sequence of length {length2}")
    even = np.arange(0, length2, 2, dtype=np.intp)
    return index_select(s, even, unique=True), index_select(s, even + 1, unique=True)


# -- segment plans ------------------------------------------------------------------


@dataclass
class SegmentPlan:
    """Per direction, per segment: indices into the interleaved axis.

    The interleaved axis has length 2*H*W; entry 2q is temporal-1 pixel q
    and 2q+1 is temporal-2 pixel q, both in original map coordinates.
    Every direction covers all slots exactly once.
    """

    dir_segments: list[list[np.ndarray]]
    h: int
    w: int

    @property
    def segment_lengths(self) -> list[int]:
        return [seg.size for seg in self.dir_segments[0]]


def _interleave_idx(pixels: np.ndarray) -> np.ndarray:
    out = np.empty(2 * pixels.size, dtype=np.intp)
    out[0::2] = 2 * pixels
    out[1::2] = 2 * pixels + 1
    return out


def segment_plan(variant: str, h: int, w: int, labels: np.ndarray | None = None, pixel_map: np.ndarray | None = None) -> SegmentPlan:
    """Build the scan layout for one map.

    ``labels`` is required for the adaptive variant. ``pixel_map`` sends
    shifted-map pixel indices to original indices so a diagonal shift
    can be folded into the plan instead of moving data.
    """
    if variant not in SCAN_VARIANTS:
        raise ValueError(f"unknown scan variant '{variant}' (choose from {SCAN_VARIANTS})")
    ident = np.arange(h * w, dtype=np.intp)
    pmap = ident if pixel_map is None else np.asarray(pixel_map, dtype=np.intp)

    if variant in ("cds", "rrs"):
        # one segment; the two temporal maps are arranged side by side
        # (width concatenation) or row/column alternating
        dirs = []
        for d in range(4):
            if variant == "cds":
                virt = _order_pixels(np.arange(h * 2 * w, dtype=np.intp), 2 * w, d)
                r, c = np.divmod(virt, 2 * w)
                t2 = c >= w
                idx = 2 * pmap[r * w + np.where(t2, c - w, c)] + t2
            else:
                if d in (0, 2):
                    rows = [np.concatenate([2 * pmap[r * w : (r + 1) * w], 2 * pmap[r * w : (r + 1) * w] + 1]) for r in range(h)]
                else:
                    cols = [np.concatenate([2 * pmap[ident[c::w]], 2 * pmap[ident[c::w]] + 1]) for c in range(w)]
                    rows = cols
                idx = np.concatenate(rows)
                if d >= 2:
                    idx = idx[::-1]
            dirs.append([np.ascontiguousarray(idx)])
        return SegmentPlan(dirs, h, w)

    if variant == "ss2d":
        segments = [ident]
    elif variant == "local_fixed":
        r, c = np.divmod(ident, w)
        segments = [
            ident[(r < h // 2) & (c < w // 2)],
            ident[(r < h // 2) & (c >= w // 2)],
            ident[(r >= h // 2) & (c < w // 2)],
            ident[(r >= h // 2) & (c >= w // 2)],
        ]
    else:  # ctss_lass
        if labels is None:
            raise ValueError("the adaptive variant needs a window labeling")
        flat = labels.reshape(-1)
        segments = [np.flatnonzero(flat == v) for v in range(int(flat.max()) + 1)]
        segments = [s for s in segments if s.size]

    dirs = []
    for d in range(4):
        dirs.append([_interleave_idx(pmap[_order_pixels(seg, w, d)]) for seg in segments])
    return SegmentPlan(dirs, h, w)


def apply_plans(sources, scan_fn, param_of=None) -> list[Tensor]:
    """Run segment scans for several (sequence, plan) sources at once.

    ``sources`` is a list of (x2, plan) with x2 of shape [C, 2*H*W].
    Rows (one per source, direction, segment) are grouped by equal
    length so each group runs as one batched scan; ``scan_fn(pid, xs)``
    receives [S, L, C] and must return the same shape. ``param_of``
    maps (source index, direction) to the parameter-set id handed to
    ``scan_fn``; by default everything shares set 0.

    Returns one [C, 2*H*W] tensor per source: scanned segments scattered
    back to interleaved-axis positions and summed over the four
    directions.
    """
    if param_of is None:
        param_of = lambda s, d: 0
    c = sources[0][0].shape[0]
    n2 = sources[0][0].shape[1]
    xcat = sources[0][0] if len(sources) == 1 else concat([s[0] for s in sources], axis=1)

    rows = []  # (pid, dir, src, global idx array)
    for si, (_, plan) in enumerate(sources):
        for d, segs in enumerate(plan.dir_segments):
            pid = param_of(si, d)
            for seg_idx in segs:
                rows.append((pid, d, si, seg_idx + si * n2))

    groups: dict[tuple[int, int], list[int]] = {}
    for ri, (pid, _, _, idx) in enumerate(rows):
        groups.setdefault((pid, idx.size), []).append(ri)

    # gather each group (one index_select per direction keeps indices unique),
    # run the batched scan, and remember where every row's output lives
    out_cols: list[Tensor] = []
    row_position = np.empty(len(rows), dtype=np.intp)
    offset = 0
    for (pid, length), members in groups.items():
        pieces = []
        for d in range(4):
            dir_members = [ri for ri in members if rows[ri][1] == d]
            if not dir_members:
                continue
            idx = np.concatenate([rows[ri][3] for ri in dir_members])
            pieces.append(index_select(xcat, idx, unique=True))
            for ri in dir_members:
                row_position[ri] = offset
                offset += length
        gathered = pieces[0] if len(pieces) == 1 else concat(pieces, axis=1)
        xs = reshape(transpose(gathered, (1, 0)), len(members), length, c)
        ys = scan_fn(pid, xs)
        if ys.shape != xs.shape:
            raise ValueError(f"scan_fn changed the sequence shape: {xs.shape} -> {ys.shape}")
        out_cols.append(transpose(reshape(ys, len(members) * length, c), (1, 0)))
    ycat = out_cols[0] if len(out_cols) == 1 else concat(out_cols, axis=1)

    results = []
    for si in range(len(sources)):
        acc = None
        for d in range(4):
            pos = np.empty(n2, dtype=np.intp)
            for ri, (pid, rd, rsrc, idx) in enumerate(rows):
                if rd == d and rsrc == si:
                    pos[idx - si * n2] = row_position[ri] + np.arange(idx.size, dtype=np.intp)
            part = index_select(ycat, pos, unique=True)
            acc = part if acc is None else acc + part
        results.append(acc)
    return results


def ablation_scan(variant: str, f1: Tensor, f2: Tensor, scan_fn, labels: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scan a bi-temporal pair under the chosen layout and return the pair.

    ``scan_fn(xs)`` maps [S, L, C] to [S, L, C] (a selective mixer or
    any sequence map). Outputs keep the input spatial layout.
    """
    c, h, w = f1.shape
    if f2.shape != f1.shape:
        raise ValueError(f"temporal shapes differ: {f1.shape} vs {f2.shape}")
    plan = segment_plan(variant, h, w, labels=labels)
    x2 = interleave_pair(reshape(f1, c, h * w), reshape(f2, c, h * w))
    (out2,) = apply_plans([(x2, plan)], lambda pid, xs: scan_fn(xs))
    s1, s2 = deinterleave(out2)
    return reshape(s1, c, h, w), reshape(s2, c, h, w)


# -- locality measurement ------------------------------------------------------------


def region_sequence_gap(order: np.ndarray, region_pixels: np.ndarray) -> int:
    """Largest run of foreign pixels between consecutive region pixels in
    the scan sequence; 0 means the region is contiguous."""
    inverse = np.empty(order.size, dtype=np.intp)
    inverse[order] = np.arange(order.size, dtype=np.intp)
    pos = np.sort(inverse[region_pixels])
    if pos.size < 2:
        return 0
    return int(np.max(np.diff(pos)) - 1)
