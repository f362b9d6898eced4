"""Blockwise evaluation of the resolvent operator.

The attention matrix is split into its block-diagonal part and an off-block
residual. The diagonal tiles are solved exactly. The residual is pooled
into a ``k x k`` system, solved with the same operator, and replicated back
to token resolution. The output is the sum of the two branches.

Cost with ``k = ceil(n / m)`` tiles: the local branch is ``O(n m d)`` and the
reduced system ``O(k^2 d)``. Pooling the residual reads only ``k^2``
entries with the strided sampler and every off-block entry with the mean
sampler.
"""

import enum
import re
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import as_strided

from ._validation import check_matrix, check_positive_int, check_same_rows, check_square
from .resolvent import ResolventConfig, _as_config, _check_attention, resolve_stack
from .tensor_core import CausalAttention

__all__ = [
    "BlockPlan",
    "SamplerKind",
    "SamplerPair",
    "BlockwiseOutput",
    "make_plan",
    "parse_block_size",
    "make_samplers",
    "block_split",
    "local_branch",
    "residual_branch",
    "blockwise_apply",
    "per_head_apply",
]


@dataclass(frozen=True)
class BlockPlan:
    """Partition of ``[0, n)`` into contiguous tiles of nominal size ``m``.

    All tiles have length ``m`` except possibly the last, which holds the
    remaining ``n - (k - 1) m`` tokens.
    """

    n: int
    m: int
    k: int = field(init=False)
    tiles: tuple = field(init=False, repr=False)

    def __post_init__(self):
        n = check_positive_int(self.n, "n")
        m = check_positive_int(self.m, "m")
        if m > n:
            raise ValueError(f"block size m={m} exceeds sequence length n={n}")
        k = -(-n // m)
        tiles = tuple((b * m, min((b + 1) * m, n)) for b in range(k))
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "tiles", tiles)

    @property
    def starts(self):
        return np.arange(0, self.n, self.m)

    @property
    def sizes(self):
        return np.array([e - s for s, e in self.tiles])

    @property
    def n_full(self):
        """Number of leading tiles of exactly ``m`` tokens."""
        return self.n // self.m

    def tile_of(self, i):
        return i // self.m


def make_plan(n, m):
    return BlockPlan(n, m)


_DIVISOR = re.compile(r"^\s*n\s*//\s*(\d+)\s*$")


def parse_block_size(value, n):
    """Resolve a block size given as an int, ``"n"`` or ``"n//K"``."""
    if isinstance(value, str):
        text = value.strip()
        match = _DIVISOR.match(text)
        if text == "n":
            value = n
        elif match:
            divisor = int(match.group(1))
            if divisor < 1:
                raise ValueError(f"bad divisor in {text!r}")
            value = max(1, n // divisor)
        else:
            try:
                value = int(text)
            except ValueError:
                raise ValueError(f"cannot parse block size {text!r}; use an int or 'n//K'") from None
    return check_positive_int(value, "m")


class SamplerKind(enum.Enum):
    MEAN = "mean"  # average of the tile
    STRIDED = "strided"  # first token of the tile

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown sampler {value!r}; expected 'mean' or 'strided'") from None


@dataclass(frozen=True)
class SamplerPair:
    """Down-sampler ``P`` (``k x n``) and up-sampler ``U`` (``n x k``).

    ``P`` maps each tile to one row (mean or first-token pick) and ``U``
    copies row ``b`` to every token of tile ``b``. Application goes through
    pooling and replication passes; :attr:`p` and :attr:`u` build sparse
    matrices for inspection only.
    """

    kind: SamplerKind
    plan: BlockPlan

    @property
    def p(self):
        plan = self.plan
        if self.kind is SamplerKind.MEAN:
            rows = np.repeat(np.arange(plan.k), plan.sizes)
            vals = np.repeat(1.0 / plan.sizes, plan.sizes)
            return sp.csr_matrix((vals, (rows, np.arange(plan.n))), shape=(plan.k, plan.n))
        return sp.csr_matrix(
            (np.ones(plan.k), (np.arange(plan.k), plan.starts)), shape=(plan.k, plan.n)
        )

    @property
    def u(self):
        plan = self.plan
        cols = np.repeat(np.arange(plan.k), plan.sizes)
        return sp.csr_matrix((np.ones(plan.n), (np.arange(plan.n), cols)), shape=(plan.n, plan.k))

    def down(self, x):
        """``P @ x`` for an ``n x d`` array."""
        plan = self.plan
        if self.kind is SamplerKind.STRIDED:
            return np.array(x[plan.starts], dtype=np.float64)
        pooled = np.add.reduceat(x, plan.starts, axis=0) if x.shape[1] else np.empty((plan.k, 0))
        return pooled / plan.sizes[:, None]

    def up(self, y):
        """``U @ y`` for a ``k x d`` array."""
        return np.repeat(y, self.plan.sizes, axis=0)

    def reduce(self, mat):
        """``P R P^T`` where ``R`` is ``mat`` with its diagonal tiles zeroed.

        ``mat`` must be lower triangular. Neither the diagonal tiles nor the
        upper triangle are read, so passing the full attention matrix or its
        residual gives identical results.
        """
        plan = self.plan
        starts = plan.starts
        if self.kind is SamplerKind.STRIDED:
            return np.tril(np.asarray(mat[np.ix_(starts, starts)], dtype=np.float64), -1)
        sizes = plan.sizes.astype(np.float64)
        reduced = np.zeros((plan.k, plan.k))
        for b in range(1, plan.k):
            s, e = plan.tiles[b]
            col_sums = mat[s:e, :s].sum(axis=0)
            reduced[b, :b] = np.add.reduceat(col_sums, starts[:b]) / (sizes[b] * sizes[:b])
        return reduced


def make_samplers(plan, kind=SamplerKind.MEAN):
    return SamplerPair(SamplerKind.parse(kind), plan)


@dataclass(frozen=True)
class BlockwiseOutput:
    """Sum ``y`` of the local branch ``y_blk`` and the residual branch ``y_res``."""

    y: np.ndarray
    y_blk: np.ndarray
    y_res: np.ndarray


def _diagonal_stacks(mat, plan):
    """Yield ``(first_row, stack)`` for the full tiles and the ragged tail.

    The full tiles come back as one strided ``(k_full, m, m)`` view into
    ``mat``; nothing is copied.
    """
    n, m = plan.n, plan.m
    n_full = plan.n_full
    if n_full:
        row, col = mat.strides
        view = as_strided(
            mat, shape=(n_full, m, m), strides=(m * (row + col), row, col), writeable=False
        )
        yield 0, view
    tail = n - n_full * m
    if tail:
        s = n_full * m
        yield s, np.asarray(mat[s:, s:])[None]


def _group_tiles(tiles, plan):
    """Stack a list of tile matrices the same way :func:`_diagonal_stacks` does."""
    if len(tiles) != plan.k:
        raise ValueError(f"expected {plan.k} tiles, got {len(tiles)}")
    for (s, e), tile in zip(plan.tiles, tiles):
        if tile.shape != (e - s, e - s):
            raise ValueError(f"tile for rows [{s}, {e}) has shape {tile.shape}")
    n_full = plan.n_full
    if n_full:
        yield 0, np.stack(tiles[:n_full])
    if n_full < plan.k:
        yield n_full * plan.m, np.asarray(tiles[-1], dtype=np.float64)[None]


def _local_from_stacks(stacks, v, gamma):
    n, d = v.shape
    out = np.empty((n, d))
    for start, stack in stacks:
        count, size, _ = stack.shape
        stop = start + count * size
        vals = v[start:stop].reshape(count, size, d)
        out[start:stop] = resolve_stack(stack, vals, gamma).reshape(count * size, d)
    return out


def _residual_from_reduced(reduced, samplers, v, gamma):
    pooled = samplers.down(v)
    solved = resolve_stack(reduced[None], pooled[None], gamma)[0]
    return samplers.up(solved)


def block_split(a, plan):
    """Split ``A`` into its diagonal tiles and the off-block residual.

    Returns
    -------
    tiles : list of ndarray
        Copies of the diagonal blocks, in order.
    a_res : ndarray of shape (n, n)
        ``A`` with the diagonal tiles set to exactly zero.
    """
    a = _check_attention(a)
    if a.n != plan.n:
        raise ValueError(f"plan covers n={plan.n} but attention has n={a.n}")
    mat = np.asarray(a.mat, dtype=np.float64)
    tiles = [mat[s:e, s:e].copy() for s, e in plan.tiles]
    a_res = mat.copy()
    for s, e in plan.tiles:
        a_res[s:e, s:e] = 0.0
    return tiles, a_res


def local_branch(tiles, v, cfg, plan):
    """Exact resolvent on each diagonal tile, concatenated in tile order."""
    cfg = _as_config(cfg)
    v = check_matrix(v, name="V")
    check_same_rows(plan.n, v)
    tiles = [check_square(t, name="tile") for t in tiles]
    if v.shape[1] == 0:
        return np.empty(v.shape)
    return _local_from_stacks(_group_tiles(tiles, plan), v, cfg.gamma)


def residual_branch(a_res, v, cfg, samplers):
    """Reduced-system evaluation of the off-block residual.

    Computes ``A~ = P a_res P^T`` and ``V~ = P V``, solves the ``k x k``
    resolvent system and lifts the result with ``U``. Rows within one tile
    are identical.
    """
    cfg = _as_config(cfg)
    plan = samplers.plan
    a_res = check_square(a_res, name="a_res")
    if a_res.shape[0] != plan.n:
        raise ValueError(f"plan covers n={plan.n} but a_res is {a_res.shape}")
    v = check_matrix(v, name="V")
    check_same_rows(plan.n, v)
    if np.triu(a_res, 1).any():
        raise ValueError("a_res has entries above the diagonal; causal input required")
    for s, e in plan.tiles:
        if a_res[s:e, s:e].any():
            raise ValueError(f"a_res has nonzero entries in diagonal tile [{s}, {e})")
    if v.shape[1] == 0:
        return np.empty(v.shape)
    return _residual_from_reduced(samplers.reduce(a_res), samplers, v, cfg.gamma)


class _PreparedBlockwise:
    """The value-independent half of the blockwise evaluation."""

    def __init__(self, a, m, kind):
        self.plan = make_plan(a.n, m)
        self.samplers = make_samplers(self.plan, kind)
        self.stacks = list(_diagonal_stacks(a.mat, self.plan))
        self.reduced = self.samplers.reduce(a.mat)

    def apply(self, v, gamma, local=True, residual=True):
        n, d = v.shape
        y_blk = _local_from_stacks(self.stacks, v, gamma) if local and d else np.zeros((n, d))
        if residual and d:
            y_res = _residual_from_reduced(self.reduced, self.samplers, v, gamma)
        else:
            y_res = np.zeros((n, d))
        return BlockwiseOutput(y_blk + y_res, y_blk, y_res)


def blockwise_apply(a, v, cfg=ResolventConfig(), m=None, kind=SamplerKind.MEAN):
    """Blockwise resolvent attention: exact local tiles plus reduced residual.

    Parameters
    ----------
    a : CausalAttention
    v : array_like of shape (n, d)
    cfg : ResolventConfig or float
    m : int or str, optional
        Block size, as an int or ``"n//K"``. Defaults to ``n`` (one tile,
        which reproduces :func:`~blockres.resolvent.resolvent_apply`).
    kind : SamplerKind or str
        Down-sampler, ``"mean"`` (default) or ``"strided"``.

    Returns
    -------
    BlockwiseOutput
    """
    a = _check_attention(a)
    cfg = _as_config(cfg)
    v = check_matrix(v, name="V")
    check_same_rows(a.n, v)
    m = a.n if m is None else parse_block_size(m, a.n)
    return _PreparedBlockwise(a, m, kind).apply(v, cfg.gamma)


def per_head_apply(heads, v_heads, cfg=ResolventConfig(), m=None, kind=SamplerKind.MEAN):
    """Independent :func:`blockwise_apply` per head."""
    heads, v_heads = list(heads), list(v_heads)
    if len(heads) != len(v_heads):
        raise ValueError(f"{len(heads)} attention heads but {len(v_heads)} value matrices")
    return [blockwise_apply(a, v, cfg, m, kind) for a, v in zip(heads, v_heads)]
