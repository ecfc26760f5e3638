"""Spatial gating kernels.

The gating step splits tokens channel-wise into a value half and a gate half,
mixes the gate half spatially with a learned token-by-token weight per head,
and multiplies: Y = Z1 * (W Z2 + b). Windowed variants apply the same rule
independently inside each window group of a :class:`~gswin.windows.WindowGrid`;
partial windows of a shifted grid slice the center window's weights by index
offset instead of padding, which is numerically identical to zero-padding
(verified against :func:`zero_padding_shift_oracle`) but cheaper.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor, take
from .windows import WindowGrid, window_partition, window_reverse


def toeplitz_index_map(window: tuple[int, int],
                       block: tuple[int, int] | None = None) -> np.ndarray:
    """Indices into a relative-offset table for every token pair of a block.

    The table is laid out for the full ``window`` = (h, w): entry for relative
    offset (dy, dx) lives at (dy + h - 1) * (2w - 1) + (dx + w - 1). ``block``
    restricts the token set to a (bh, bw) sub-window (offsets shrink, the
    table layout does not). Returns an int array of shape (bh*bw, bh*bw).
    """
    h, w = window
    bh, bw = block if block is not None else window
    if not (1 <= bh <= h and 1 <= bw <= w):
        raise ValueError(f"block {block} exceeds window {window}")
    ys, xs = np.divmod(np.arange(bh * bw), bw)
    dy = ys[:, None] - ys[None, :]
    dx = xs[:, None] - xs[None, :]
    return (dy + h - 1) * (2 * w - 1) + (dx + w - 1)


def materialize_relative_bias(rel_table: Tensor, window: tuple[int, int],
                              block: tuple[int, int] | None = None) -> Tensor:
    """Expand a relative-offset table (L, K) to mixing-weight form (T, T, K).

    Output entry [(x, y), (x', y'), k] = rel_table[index(x - x', y - y'), k];
    equal relative offsets share one table row, and gradients scatter-add
    back onto it.
    """
    h, w = window
    L = (2 * h - 1) * (2 * w - 1)
    if rel_table.shape[0] != L:
        raise ValueError(f"table has {rel_table.shape[0]} rows, window {window} needs {L}")
    idx = toeplitz_index_map(window, block)
    T = idx.shape[0]
    K = rel_table.shape[1]
    return take(rel_table, idx.reshape(-1)).reshape(T, T, K)


@dataclass
class SguParams:
    """Learned state of one windowed gating unit.

    w_win: (h*w, h*w, K) spatial mixing weight per head.
    b_win: (h*w, K) spatial bias per head.
    rel_table: optional ((2h-1)*(2w-1), K) relative-offset bias table.
    channels_per_head: gate-half channels handled by each head.
    """

    w_win: Tensor
    b_win: Tensor
    window: tuple[int, int]
    heads: int
    channels_per_head: int
    rel_table: Tensor | None = None

    def __post_init__(self):
        h, w = self.window
        T = h * w
        if self.w_win.shape != (T, T, self.heads):
            raise ValueError(f"w_win shape {self.w_win.shape}, expected {(T, T, self.heads)}")
        if self.b_win.shape != (T, self.heads):
            raise ValueError(f"b_win shape {self.b_win.shape}, expected {(T, self.heads)}")
        if self.rel_table is not None:
            L = (2 * h - 1) * (2 * w - 1)
            if self.rel_table.shape != (L, self.heads):
                raise ValueError(f"rel_table shape {self.rel_table.shape}, expected {(L, self.heads)}")

    @property
    def gate_channels(self) -> int:
        return self.heads * self.channels_per_head


def init_sgu_params(window: tuple[int, int], heads: int, gate_channels: int,
                    rel_bias: bool = True, prefix: str = "sgu",
                    dtype=np.float64) -> SguParams:
    """Identity-initialized gating parameters: zero mixing, unit bias.

    At this state the gate multiplies by exactly 1 everywhere, so the unit
    passes the value half through unchanged.
    """
    h, w = window
    if heads < 1:
        raise ValueError("heads must be >= 1")
    if gate_channels % heads:
        raise ValueError(f"heads {heads} must divide gate channels {gate_channels}")
    T = h * w
    w_win = Parameter(np.zeros((T, T, heads)), f"{prefix}.w_win", dtype=dtype)
    b_win = Parameter(np.ones((T, heads)), f"{prefix}.b_win", dtype=dtype)
    rel = None
    if rel_bias:
        L = (2 * h - 1) * (2 * w - 1)
        rel = Parameter(np.zeros((L, heads)), f"{prefix}.rel_table", dtype=dtype)
    return SguParams(w_win=w_win, b_win=b_win, window=(h, w), heads=heads,
                     channels_per_head=gate_channels // heads, rel_table=rel)


def _mix_tokens(z2: Tensor, w_eff: Tensor, bias: Tensor, heads: int) -> Tensor:
    """Per-head spatial mixing: (B, T, C) tokens -> (B, T, C).

    w_eff is (T, T, K), bias (T, K); channels split into K contiguous head
    blocks, each mixed with its own T x T weight.
    """
    B, T, C = z2.shape
    ch = C // heads
    zh = z2.reshape(B, T, heads, ch).transpose((2, 0, 1, 3))      # (K, B, T, ch)
    w = w_eff.transpose((2, 0, 1)).reshape(heads, 1, T, T)
    b = bias.transpose((1, 0)).reshape(heads, 1, T, 1)
    mixed = w @ zh + b
    return mixed.transpose((1, 2, 0, 3)).reshape(B, T, C)


def sgu(z: Tensor, params: SguParams) -> Tensor:
    """Plain gating over one full window of tokens.

    ``z`` is (N, 2C): N tokens carrying value and gate halves. N must equal
    the window's token count.
    """
    N, C2 = z.shape
    if C2 % 2:
        raise ValueError(f"channel extent {C2} is odd; need value/gate halves")
    C = C2 // 2
    if C != params.gate_channels:
        raise ValueError(f"gate half has {C} channels, params expect {params.gate_channels}")
    h, w = params.window
    if N != h * w:
        raise ValueError(f"{N} tokens do not fill a {h}x{w} window")
    z1 = z[:, :C]
    z2 = z[:, C:]
    w_eff = params.w_win
    if params.rel_table is not None:
        w_eff = w_eff + materialize_relative_bias(params.rel_table, params.window)
    mixed = _mix_tokens(z2.reshape(1, N, C), w_eff, params.b_win, params.heads)
    return z1 * mixed.reshape(N, C)


def _group_weights(params: SguParams, group_shape: tuple[int, int],
                   w_offset: tuple[int, int]) -> tuple[Tensor, Tensor]:
    """Effective (T_g, T_g, K) weights and (T_g, K) bias for one grid group.

    Partial windows slice the center weights at the group's index offsets;
    the relative-offset bias depends only on index differences, so it is
    materialized directly on the group's shape.
    """
    h, w = params.window
    gh, gw = group_shape
    ro, co = w_offset
    K = params.heads
    Tg = gh * gw
    if gh == h and gw == w:
        w_sub = params.w_win
        b_sub = params.b_win
    else:
        w5 = params.w_win.reshape(h, w, h, w, K)
        w_sub = w5[ro:ro + gh, co:co + gw, ro:ro + gh, co:co + gw, :].reshape(Tg, Tg, K)
        b_sub = params.b_win.reshape(h, w, K)[ro:ro + gh, co:co + gw, :].reshape(Tg, K)
    if params.rel_table is not None:
        w_sub = w_sub + materialize_relative_bias(params.rel_table, params.window, (gh, gw))
    return w_sub, b_sub


def multi_head_window_sgu(x: Tensor, params: SguParams, grid: WindowGrid) -> Tensor:
    """Windowed multi-head gating over a (B, H, W, 2C) feature map.

    The gate half is mixed within each window group (partial windows use
    index-offset weight slices), reassembled, and multiplied into the value
    half. Output is (B, H, W, C).
    """
    B, H, W, C2 = x.shape
    if C2 % 2:
        raise ValueError(f"channel extent {C2} is odd; need value/gate halves")
    C = C2 // 2
    if C % params.heads:
        raise ValueError(f"heads {params.heads} do not divide gate channels {C}")
    if C != params.gate_channels:
        raise ValueError(f"gate half has {C} channels, params expect {params.gate_channels}")
    if grid.window != params.window:
        raise ValueError(f"grid window {grid.window} differs from params window {params.window}")
    if (H, W) != grid.image:
        raise ValueError(f"grid built for {grid.image}, input map is {(H, W)}")
    z1 = x[:, :, :, :C]
    z2 = x[:, :, :, C:]
    mixed_groups = []
    for g, wins in zip(grid.groups, window_partition(z2, grid)):
        w_sub, b_sub = _group_weights(params, g.shape, g.w_offset)
        mixed_groups.append(_mix_tokens(wins, w_sub, b_sub, params.heads))
    mixed = window_reverse(mixed_groups, grid)
    return z1 * mixed


def zero_padding_shift_oracle(x: Tensor, params: SguParams, grid: WindowGrid) -> np.ndarray:
    """Reference path: pad to uniform windows, run the full-window gate, crop.

    Deliberately plain numpy with explicit per-window, per-head loops; shares
    no arithmetic with :func:`multi_head_window_sgu`. Forward values only (no
    graph). Zero-padded gate inputs contribute nothing to surviving rows, and
    cropped rows discard the padding's own outputs, so this must match the
    padding-free path to within accumulation noise.
    """
    B, H, W, C2 = x.shape
    if C2 % 2:
        raise ValueError(f"channel extent {C2} is odd; need value/gate halves")
    C = C2 // 2
    if C % params.heads:
        raise ValueError(f"heads {params.heads} do not divide gate channels {C}")
    if grid.window != params.window:
        raise ValueError(f"grid window {grid.window} differs from params window {params.window}")
    if (H, W) != grid.image:
        raise ValueError(f"grid built for {grid.image}, input map is {(H, W)}")
    h, w = params.window
    oy, ox = grid.offset
    pad_top = (h - oy) % h
    pad_left = (w - ox) % w
    pad_bottom = (-(pad_top + H)) % h
    pad_right = (-(pad_left + W)) % w

    data = np.asarray(x.data, dtype=np.float64)
    z1 = data[:, :, :, :C]
    z2 = data[:, :, :, C:]
    z2p = np.pad(z2, ((0, 0), (pad_top, pad_bottom), (pad_left, pad_right), (0, 0)))

    w_full = np.asarray(params.w_win.data, dtype=np.float64)
    if params.rel_table is not None:
        table = np.asarray(params.rel_table.data, dtype=np.float64)
        idx = toeplitz_index_map((h, w))
        w_full = w_full + table[idx]
    b_full = np.asarray(params.b_win.data, dtype=np.float64)

    K = params.heads
    ch = C // K
    Hp, Wp = z2p.shape[1], z2p.shape[2]
    mixed = np.empty_like(z2p)
    for n in range(B):
        for wy in range(0, Hp, h):
            for wx in range(0, Wp, w):
                tile = z2p[n, wy:wy + h, wx:wx + w, :].reshape(h * w, C)
                out = np.empty_like(tile)
                for k in range(K):
                    blk = tile[:, k * ch:(k + 1) * ch]
                    out[:, k * ch:(k + 1) * ch] = w_full[:, :, k] @ blk + b_full[:, k:k + 1]
                mixed[n, wy:wy + h, wx:wx + w, :] = out.reshape(h, w, C)
    cropped = mixed[:, pad_top:pad_top + H, pad_left:pad_left + W, :]
    return z1 * cropped
