"""Template scoring, the rearranged feature map and coarse-to-fine search.

A template score is the weighted fraction of template features whose mask
shares at least one bit with the input orientation mask at the offset
pixel.  Numerators are integer weight sums, so every scoring path below
produces bit-identical floats.

The rearranged map stores, for every anchor pixel, the 4x4 window of
gradient masks followed by the 4x4 window of normal masks as one
contiguous 32-byte record.  One record read per template feature then
yields that feature's contribution to all 16 anchors of a 4x4 block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InvalidArgumentError
from .geometry import TREE_DEPTH
from .pose import Pose6D
from .refine import initial_pose

BLOCK = 4
LANES = BLOCK * BLOCK
DEFAULT_MARGIN = 0.1


# --------------------------------------------------------------------------
# naive scoring


@numba.njit(cache=True, nogil=True)
def _hits(xs, ys, oris, ws, omap, x, y):
    h, w = omap.shape
    acc = 0
    for i in range(xs.shape[0]):
        px = x + xs[i]
        py = y + ys[i]
        if 0 <= px < w and 0 <= py < h and (omap[py, px] & oris[i]) != 0:
            acc += ws[i]
    return acc


def score_naive(t, omap, x, y):
    """Weighted fraction of features of ``t`` matched at anchor ``(x, y)``."""
    total = t.total_weight
    if total == 0:
        return 0.0
    hits = _hits(t.x.astype(np.int64), t.y.astype(np.int64), t.ori, t.w.astype(np.int64), omap, int(x), int(y))
    return hits / total


def combined_score(tg, tn, gmap, nmap, x, y):
    return (score_naive(tg, gmap, x, y) + score_naive(tn, nmap, x, y)) * 0.5


# --------------------------------------------------------------------------
# rearranged map


@dataclass(eq=False)
class RearrangedMap:
    """Per-anchor 32-byte records of a gradient/normal map pair (``(H, W, 32)`` uint8)."""

    records: np.ndarray
    gradient: np.ndarray
    normal: np.ndarray

    @property
    def shape(self):
        return self.records.shape[:2]

    @property
    def nbytes(self):
        return self.records.nbytes

    @property
    def words(self):
        return self.records.view(np.uint64)


@numba.njit(cache=True, nogil=True)
def _rearrange(g, n, out):
    h, w = g.shape
    for y in range(h):
        for x in range(w):
            for dy in range(BLOCK):
                yy = y + dy
                if yy >= h:
                    break
                for dx in range(BLOCK):
                    xx = x + dx
                    if xx >= w:
                        break
                    out[y, x, dy * BLOCK + dx] = g[yy, xx]
                    out[y, x, LANES + dy * BLOCK + dx] = n[yy, xx]


def rearrange(gradient, normal):
    gradient = np.ascontiguousarray(gradient, dtype=np.uint8)
    normal = np.ascontiguousarray(normal, dtype=np.uint8)
    if gradient.shape != normal.shape:
        raise InvalidArgumentError(f"map sizes differ: {gradient.shape} vs {normal.shape}")
    out = np.zeros(gradient.shape + (2 * LANES,), dtype=np.uint8)
    _rearrange(gradient, normal, out)
    return RearrangedMap(out, gradient, normal)


# A record is read as four little-endian uint64 words (gradient lanes 0-7,
# 8-15, then normal lanes 0-7, 8-15), and all eight lanes of a word are
# tested at once.  Hits become 0/1 bytes, which are split into even and odd
# bytes so each sits in its own 16-bit field before being multiplied by the
# feature weight.  The 16-bit fields are flushed into int64 totals before
# they could overflow.
_LO7 = np.uint64(0x7F7F7F7F7F7F7F7F)
_ONES = np.uint64(0x0101010101010101)
_EVEN = np.uint64(0x00FF00FF00FF00FF)
_FIELD_MAX = 0xFFFF


@numba.njit(inline="always")
def _nonzero_bytes(v):
    return ((((v & _LO7) + _LO7) | v) >> np.uint64(7)) & _ONES


@numba.njit(cache=True, nogil=True)
def _flush(acc16, acc):
    for word in range(4):
        even = acc16[2 * word]
        odd = acc16[2 * word + 1]
        for k in range(4):
            acc[8 * word + 2 * k] += np.int64((even >> np.uint64(16 * k)) & np.uint64(_FIELD_MAX))
            acc[8 * word + 2 * k + 1] += np.int64((odd >> np.uint64(16 * k)) & np.uint64(_FIELD_MAX))
        acc16[2 * word] = 0
        acc16[2 * word + 1] = 0


@numba.njit(cache=True, nogil=True)
def _block_rearranged(fx, fy, fog, fwg, fon, fwn, tot_g, tot_n, words, gmap, nmap, bx, by, acc, acc16, out):
    """Combined scores of the 16 anchors of block (bx, by) into ``out`` (16,).

    ``words`` is the record array viewed as ``(H, W, 4)`` uint64; ``acc``
    (32 int64) and ``acc16`` (8 uint64) are scratch.
    """
    h, w = gmap.shape
    acc[:] = 0
    acc16[:] = 0
    run_g = 0
    run_n = 0
    for i in range(fx.shape[0]):
        px = bx + fx[i]
        py = by + fy[i]
        if px >= w or py >= h or px <= -BLOCK or py <= -BLOCK:
            continue
        og = fog[i]
        on = fon[i]
        wg = fwg[i]
        wn = fwn[i]
        if px >= 0 and py >= 0:
            if run_g + wg > _FIELD_MAX or run_n + wn > _FIELD_MAX:
                _flush(acc16, acc)
                run_g = 0
                run_n = 0
            run_g += wg
            run_n += wn
            mg = np.uint64(og) * _ONES
            mn = np.uint64(on) * _ONES
            ug = np.uint64(wg)
            un = np.uint64(wn)
            h0 = _nonzero_bytes(words[py, px, 0] & mg)
            h1 = _nonzero_bytes(words[py, px, 1] & mg)
            h2 = _nonzero_bytes(words[py, px, 2] & mn)
            h3 = _nonzero_bytes(words[py, px, 3] & mn)
            acc16[0] += (h0 & _EVEN) * ug
            acc16[1] += ((h0 >> np.uint64(8)) & _EVEN) * ug
            acc16[2] += (h1 & _EVEN) * ug
            acc16[3] += ((h1 >> np.uint64(8)) & _EVEN) * ug
            acc16[4] += (h2 & _EVEN) * un
            acc16[5] += ((h2 >> np.uint64(8)) & _EVEN) * un
            acc16[6] += (h3 & _EVEN) * un
            acc16[7] += ((h3 >> np.uint64(8)) & _EVEN) * un
        else:
            # record anchor left of / above the image: window partly inside, read raw maps
            for dy in range(BLOCK):
                for dx in range(BLOCK):
                    xx = px + dx
                    yy = py + dy
                    if 0 <= xx < w and 0 <= yy < h:
                        lane = dy * BLOCK + dx
                        acc[lane] += wg * ((gmap[yy, xx] & og) != 0)
                        acc[LANES + lane] += wn * ((nmap[yy, xx] & on) != 0)
    _flush(acc16, acc)
    for lane in range(LANES):
        out[lane] = (acc[lane] / tot_g + acc[LANES + lane] / tot_n) * 0.5


@numba.njit(cache=True, nogil=True)
def _block_naive(gx, gy, go, gw, nx, ny, no, nw, tot_g, tot_n, gmap, nmap, bx, by, out):
    for dy in range(BLOCK):
        for dx in range(BLOCK):
            sg = _hits(gx, gy, go, gw, gmap, bx + dx, by + dy)
            sn = _hits(nx, ny, no, nw, nmap, bx + dx, by + dy)
            out[dy * BLOCK + dx] = (sg / tot_g + sn / tot_n) * 0.5


@dataclass(eq=False)
class PackedTemplates:
    """Flat arrays for all template pairs of one tree depth.

    ``*_start`` index into the per-modality feature arrays (naive layout);
    ``m_*`` hold the merged layout where each pixel appears once with both
    modality masks (0 where a modality has no feature at that pixel).
    """

    g_start: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    go: np.ndarray
    gw: np.ndarray
    n_start: np.ndarray
    nx: np.ndarray
    ny: np.ndarray
    no: np.ndarray
    nw: np.ndarray
    tot_g: np.ndarray
    tot_n: np.ndarray
    m_start: np.ndarray
    mx: np.ndarray
    my: np.ndarray
    mog: np.ndarray
    mwg: np.ndarray
    mon: np.ndarray
    mwn: np.ndarray


def merge_pair_features(tg, tn):
    """Union of feature pixels of both templates, in row-major order."""
    keys = {}
    for x, y in zip(tg.x.tolist(), tg.y.tolist()):
        keys.setdefault((y, x), len(keys))
    for x, y in zip(tn.x.tolist(), tn.y.tolist()):
        keys.setdefault((y, x), len(keys))
    order = sorted(keys)
    idx = {k: i for i, k in enumerate(order)}
    m = len(order)
    mx = np.array([k[1] for k in order], dtype=np.int64)
    my = np.array([k[0] for k in order], dtype=np.int64)
    og = np.zeros(m, dtype=np.uint8)
    wg = np.zeros(m, dtype=np.int64)
    on = np.zeros(m, dtype=np.uint8)
    wn = np.zeros(m, dtype=np.int64)
    for x, y, o, w in zip(tg.x.tolist(), tg.y.tolist(), tg.ori.tolist(), tg.w.tolist()):
        og[idx[(y, x)]] = o
        wg[idx[(y, x)]] = w
    for x, y, o, w in zip(tn.x.tolist(), tn.y.tolist(), tn.ori.tolist(), tn.w.tolist()):
        on[idx[(y, x)]] = o
        wn[idx[(y, x)]] = w
    return mx, my, og, wg, on, wn


def pack_templates(pairs):
    def cat(arrs, dtype):
        return np.concatenate([np.asarray(a, dtype=dtype) for a in arrs]) if arrs else np.zeros(0, dtype)

    def starts(lengths):
        return np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)

    for p in pairs:
        for t in (p.grad, p.norm):
            if len(t) and (t.w.min() < 0 or t.w.max() > _FIELD_MAX):
                raise InvalidArgumentError("feature weights must lie in [0, 65535]")
    merged = [merge_pair_features(p.grad, p.norm) for p in pairs]
    return PackedTemplates(
        g_start=starts([len(p.grad) for p in pairs]),
        gx=cat([p.grad.x for p in pairs], np.int64),
        gy=cat([p.grad.y for p in pairs], np.int64),
        go=cat([p.grad.ori for p in pairs], np.uint8),
        gw=cat([p.grad.w for p in pairs], np.int64),
        n_start=starts([len(p.norm) for p in pairs]),
        nx=cat([p.norm.x for p in pairs], np.int64),
        ny=cat([p.norm.y for p in pairs], np.int64),
        no=cat([p.norm.ori for p in pairs], np.uint8),
        nw=cat([p.norm.w for p in pairs], np.int64),
        tot_g=np.array([p.grad.total_weight for p in pairs], dtype=np.int64),
        tot_n=np.array([p.norm.total_weight for p in pairs], dtype=np.int64),
        m_start=starts([len(m[0]) for m in merged]),
        mx=cat([m[0] for m in merged], np.int64),
        my=cat([m[1] for m in merged], np.int64),
        mog=cat([m[2] for m in merged], np.uint8),
        mwg=cat([m[3] for m in merged], np.int64),
        mon=cat([m[4] for m in merged], np.uint8),
        mwn=cat([m[5] for m in merged], np.int64),
    )


def score_block(tg, tn, rmap, block_x, block_y):
    """Combined scores for the 16 anchors of a 4-aligned block, as a (4, 4) array [dy, dx]."""
    if block_x % BLOCK or block_y % BLOCK:
        raise InvalidArgumentError("block anchor must be 4-aligned")
    mx, my, og, wg, on, wn = merge_pair_features(tg, tn)
    out = np.empty(LANES)
    _block_rearranged(mx, my, og, wg, on, wn, max(tg.total_weight, 1), max(tn.total_weight, 1),
                      rmap.words, rmap.gradient, rmap.normal, int(block_x), int(block_y),
                      np.zeros(2 * LANES, np.int64), np.zeros(8, np.uint64), out)
    return out.reshape(BLOCK, BLOCK)


def score_block_naive(tg, tn, gmap, nmap, block_x, block_y):
    """Reference for :func:`score_block` evaluated pixel by pixel on the raw maps."""
    out = np.empty((BLOCK, BLOCK))
    for dy in range(BLOCK):
        for dx in range(BLOCK):
            out[dy, dx] = combined_score(tg, tn, gmap, nmap, block_x + dx, block_y + dy)
    return out


@numba.njit(cache=True, nogil=True)
def _run_blocks_rearranged(tasks, P_start, mx, my, mog, mwg, mon, mwn, tot_g, tot_n, words, gmap, nmap, out):
    acc = np.zeros(2 * LANES, dtype=np.int64)
    acc16 = np.zeros(8, dtype=np.uint64)
    for k in range(tasks.shape[0]):
        node = tasks[k, 0]
        s, e = P_start[node], P_start[node + 1]
        _block_rearranged(mx[s:e], my[s:e], mog[s:e], mwg[s:e], mon[s:e], mwn[s:e],
                          tot_g[node], tot_n[node], words, gmap, nmap, tasks[k, 1], tasks[k, 2], acc, acc16, out[k])


@numba.njit(cache=True, nogil=True)
def _run_blocks_naive(tasks, g_start, gx, gy, go, gw, n_start, nx, ny, no, nw, tot_g, tot_n, gmap, nmap, out):
    for k in range(tasks.shape[0]):
        node = tasks[k, 0]
        gs, ge = g_start[node], g_start[node + 1]
        ns, ne = n_start[node], n_start[node + 1]
        _block_naive(gx[gs:ge], gy[gs:ge], go[gs:ge], gw[gs:ge], nx[ns:ne], ny[ns:ne], no[ns:ne], nw[ns:ne],
                     tot_g[node], tot_n[node], gmap, nmap, tasks[k, 1], tasks[k, 2], out[k])


@numba.njit(cache=True, nogil=True)
def _scan(g_start, gx, gy, go, gw, n_start, nx, ny, no, nw, tot_g, tot_n, gmap, nmap, node, out):
    h, w = gmap.shape
    gs, ge = g_start[node], g_start[node + 1]
    ns, ne = n_start[node], n_start[node + 1]
    for y in range(h):
        for x in range(w):
            sg = _hits(gx[gs:ge], gy[gs:ge], go[gs:ge], gw[gs:ge], gmap, x, y)
            sn = _hits(nx[ns:ne], ny[ns:ne], no[ns:ne], nw[ns:ne], nmap, x, y)
            out[y, x] = (sg / tot_g[node] + sn / tot_n[node]) * 0.5


# --------------------------------------------------------------------------
# search


@dataclass(eq=False)
class Detection:
    x: int  # level-0 anchor pixel
    y: int
    node: int  # leaf lattice index
    score: float
    pose: Pose6D | None = None
    level_scores: dict = field(default_factory=dict)


def packed_tree(tree):
    packed = getattr(tree, "_packed", None)
    if packed is None:
        packed = [pack_templates(p) for p in tree.pairs]
        tree._packed = packed
    return packed


@dataclass
class SearchStats:
    root_candidates: int = 0
    blocks: list = field(default_factory=list)
    rearrange_s: float = 0.0
    root_s: float = 0.0
    refine_s: float = 0.0


def detect(pyr, tree, threshold, margin=DEFAULT_MARGIN, rearranged=True, nms_radius=None, stats=None,
           rmaps=None, max_candidates=None):
    """Coarse-to-fine search of the tree over a feature pyramid.

    Depth-0 templates are scanned exhaustively at the coarsest level; each
    surviving (node, x, y) expands to its children on the 4-aligned 4x4 block
    containing (2x, 2y) one level finer.  Coarse levels keep scores
    >= threshold - margin, the finest keeps scores >= threshold.
    """
    import time

    if not 0.0 < threshold <= 1.0:
        raise InvalidArgumentError(f"threshold must lie in (0, 1], got {threshold}")
    if pyr.levels != TREE_DEPTH:
        raise InvalidArgumentError(f"pyramid needs {TREE_DEPTH} levels")
    if (pyr.intrinsics[0].width, pyr.intrinsics[0].height) != (tree.intrinsics.width, tree.intrinsics.height):
        raise InvalidArgumentError("pyramid and model image sizes differ")
    stats = stats if stats is not None else SearchStats()
    packed = packed_tree(tree)
    top = TREE_DEPTH - 1
    coarse_thr = threshold - margin

    t0 = time.perf_counter()
    P = packed[0]
    gmap, nmap = pyr.gradient[top], pyr.normal[top]
    cand = []
    buf = np.empty(gmap.shape)
    for node in range(len(tree.pairs[0])):
        _scan(P.g_start, P.gx, P.gy, P.go, P.gw, P.n_start, P.nx, P.ny, P.no, P.nw, P.tot_g, P.tot_n,
              gmap, nmap, node, buf)
        ys, xs = np.nonzero(buf >= coarse_thr)
        cand.extend(zip([node] * len(xs), xs.tolist(), ys.tolist(), buf[ys, xs].tolist()))
    stats.root_candidates = len(cand)
    stats.root_s = time.perf_counter() - t0

    lattice = tree.lattice
    for depth in range(1, TREE_DEPTH):
        level = top - depth
        if max_candidates and len(cand) > max_candidates:
            cand.sort(key=lambda c: (-c[3], c[2], c[1], c[0]))
            cand = cand[:max_candidates]
        tasks = sorted({
            (child, (2 * x) // BLOCK * BLOCK, (2 * y) // BLOCK * BLOCK)
            for node, x, y, _ in cand
            for child in lattice.children(depth - 1, node)
        })
        stats.blocks.append(len(tasks))
        if not tasks:
            cand = []
            break
        tasks = np.array(tasks, dtype=np.int64)
        out = np.empty((len(tasks), LANES))
        gmap, nmap = pyr.gradient[level], pyr.normal[level]
        P = packed[depth]
        if rearranged:
            t1 = time.perf_counter()
            if rmaps is not None and level in rmaps:
                rm = rmaps[level]
            else:
                rm = rearrange(gmap, nmap)
                if rmaps is not None:
                    rmaps[level] = rm
            stats.rearrange_s += time.perf_counter() - t1
            t1 = time.perf_counter()
            _run_blocks_rearranged(tasks, P.m_start, P.mx, P.my, P.mog, P.mwg, P.mon, P.mwn, P.tot_g, P.tot_n,
                                   rm.words, gmap, nmap, out)
        else:
            t1 = time.perf_counter()
            _run_blocks_naive(tasks, P.g_start, P.gx, P.gy, P.go, P.gw, P.n_start, P.nx, P.ny, P.no, P.nw,
                              P.tot_g, P.tot_n, gmap, nmap, out)
        stats.refine_s += time.perf_counter() - t1
        thr = threshold if level == 0 else coarse_thr
        h, w = gmap.shape
        k, lane = np.nonzero(out >= thr)
        xs = tasks[k, 1] + lane % BLOCK
        ys = tasks[k, 2] + lane // BLOCK
        inside = (xs < w) & (ys < h)
        cand = list(zip(tasks[k, 0][inside].tolist(), xs[inside].tolist(), ys[inside].tolist(),
                        out[k, lane][inside].tolist()))

    dets = [Detection(x, y, node, s) for node, x, y, s in cand]
    dets.sort(key=_nms_key)
    if nms_radius is not None:
        dets = nms(dets, nms_radius)
    for d in dets:
        d.pose = initial_pose(d, tree.intrinsics, tree.lattice)
    return dets


def _nms_key(d):
    return (-d.score, d.y, d.x, d.node)


def nms(dets, radius):
    """Greedy suppression of detections within ``radius`` px of a better one."""
    if radius <= 0:
        raise InvalidArgumentError("radius must be positive")
    kept = []
    r2 = radius * radius
    for d in sorted(dets, key=_nms_key):
        if all((d.x - k.x) ** 2 + (d.y - k.y) ** 2 > r2 for k in kept):
            kept.append(d)
    return kept
