"""The recommendation network.

Item representations come from a linear projection of precomputed text and
image feature vectors (or, in the no-modality ablation, a learned table).
N blocks of (layer-norm -> linear recurrence -> dropout) followed by
(layer-norm -> gated feed-forward -> residual) map the sequence to a hidden
state; the state at the final position scores every item against the same
embedding matrix that encoded the input (weights are shared, not copied).

Every 2-D weight sits under a ladder mask, so the channel prefix [0:m] of a
forward pass is itself a complete width-m model. With segment-wise
normalization one full-width pass therefore yields the activations of every
ladder size at once; `extract(params, m)` slices the prefix out into a
standalone dense model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import rng as nrng
from . import tensor as T
from .config import ModelConfig
from .errors import DataError
from .lru import LruParams, build_lru, lru_scan
from .nesting import MaskedLinear, SizeLadder

__all__ = [
    "RunContext", "FusionParams", "BlockParams", "ModelParams",
    "build_model", "item_embeddings", "block_forward", "hidden_states",
    "forward_scores", "score_all_sizes", "nested_loss", "extract",
]


@dataclass
class RunContext:
    """Per-call mode switches: dropout only fires when training."""

    training: bool = False
    seed: int = 0
    step: int = 0

    def key(self, site: str):
        return (self.seed, site, self.step)


EVAL = RunContext()


@dataclass
class FusionParams:
    """Linear projection of concatenated modality features to item space."""

    w_proj: MaskedLinear          # output_only, (d_features, D), bias = b_proj
    features: np.ndarray          # (|V|, d_features), frozen inputs


@dataclass
class BlockParams:
    ln1_alpha: T.Tensor
    ln1_beta: T.Tensor
    lru: LruParams
    ln2_alpha: T.Tensor
    ln2_beta: T.Tensor
    ffn_gate: MaskedLinear        # up, D -> k*D
    ffn_in: MaskedLinear          # up, D -> k*D
    ffn_out: MaskedLinear         # down, k*D -> D


@dataclass
class ModelParams:
    config: ModelConfig
    ladder: SizeLadder
    fusion: FusionParams | None
    id_table: MaskedLinear | None     # (|V|, D) learned rows, ablation mode
    blocks: list[BlockParams] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.ladder.width

    @property
    def vocab_size(self) -> int:
        if self.id_table is not None:
            return self.id_table.weight.shape[0]
        return self.fusion.features.shape[0]

    def named_parameters(self):
        """(name, tensor, slicing-rule) for every trainable leaf.

        Rules say how a width-m prefix reads the buffer: ("mat", case, k)
        follows the mask geometry, ("vec", mult) keeps the first mult*m
        entries.
        """
        out = []
        if self.fusion is not None:
            out.append(("fusion.w_proj.weight", self.fusion.w_proj.weight,
                        ("mat", "output_only", 1)))
            out.append(("fusion.b_proj", self.fusion.w_proj.bias, ("vec", 1)))
        if self.id_table is not None:
            out.append(("embed.table", self.id_table.weight,
                        ("mat", "output_only", 1)))
        for i, blk in enumerate(self.blocks):
            p = f"block{i}"
            k = blk.ffn_gate.k
            out.append((f"{p}.ln1.alpha", blk.ln1_alpha, ("vec", 1)))
            out.append((f"{p}.ln1.beta", blk.ln1_beta, ("vec", 1)))
            out.extend(blk.lru.named(f"{p}.lru"))
            out.append((f"{p}.ln2.alpha", blk.ln2_alpha, ("vec", 1)))
            out.append((f"{p}.ln2.beta", blk.ln2_beta, ("vec", 1)))
            out.append((f"{p}.ffn_gate.weight", blk.ffn_gate.weight,
                        ("mat", "up", k)))
            out.append((f"{p}.ffn_gate.bias", blk.ffn_gate.bias, ("vec", k)))
            out.append((f"{p}.ffn_in.weight", blk.ffn_in.weight,
                        ("mat", "up", k)))
            out.append((f"{p}.ffn_in.bias", blk.ffn_in.bias, ("vec", k)))
            out.append((f"{p}.ffn_out.weight", blk.ffn_out.weight,
                        ("mat", "down", k)))
            out.append((f"{p}.ffn_out.bias", blk.ffn_out.bias, ("vec", 1)))
        return out

    def parameters(self):
        return [t for _, t, _ in self.named_parameters()]


def _feature_matrix(cfg: ModelConfig, lang: np.ndarray | None,
                    img: np.ndarray | None) -> np.ndarray:
    mode = cfg.modality_mode
    if mode == "both":
        if lang is None or img is None:
            raise DataError("modality_mode=both needs text and image features")
        if lang.shape[0] != img.shape[0]:
            raise DataError(
                f"feature row counts differ: text {lang.shape[0]} vs image "
                f"{img.shape[0]}")
        return np.concatenate([lang, img], axis=1)
    if mode == "text":
        if lang is None:
            raise DataError("modality_mode=text needs text features")
        return lang
    if mode == "image":
        if img is None:
            raise DataError("modality_mode=image needs image features")
        return img
    raise ValueError(f"no feature matrix in modality mode {mode}")


def build_model(cfg: ModelConfig, lang: np.ndarray | None = None,
                img: np.ndarray | None = None) -> ModelParams:
    ladder = cfg.ladder()
    width = cfg.d_model
    dtype = cfg.dtype()
    gen = nrng.generator(cfg.seed, "init")

    fusion = None
    id_table = None
    if cfg.modality_mode == "none":
        if cfg.vocab_size < 1:
            raise DataError("modality_mode=none needs vocab_size to size "
                            "the embedding table")
        table = (gen.standard_normal((cfg.vocab_size, width))
                 / np.sqrt(width)).astype(dtype)
        id_table = MaskedLinear.build(T.param(table), None, "output_only",
                                      ladder)
    else:
        feats = _feature_matrix(cfg, lang, img).astype(dtype)
        cfg.vocab_size = feats.shape[0]
        d_in = feats.shape[1]
        w = (gen.standard_normal((d_in, width)) / np.sqrt(d_in)).astype(dtype)
        b = np.zeros(width, dtype=dtype)
        fusion = FusionParams(
            w_proj=MaskedLinear.build(T.param(w), T.param(b), "output_only",
                                      ladder),
            features=feats)

    k = cfg.ffn_scale
    blocks = []
    for i in range(cfg.n_blocks):
        lru = build_lru(ladder, cfg.r_min, cfg.r_max, cfg.seed,
                        f"block{i}.lru", dtype=dtype, use_gamma=cfg.use_gamma)

        def up():
            w = (gen.standard_normal((width, k * width))
                 / np.sqrt(width)).astype(dtype)
            return MaskedLinear.build(
                T.param(w), T.param(np.zeros(k * width, dtype=dtype)),
                "up", ladder)

        wd = (gen.standard_normal((k * width, width))
              / np.sqrt(k * width)).astype(dtype)
        blocks.append(BlockParams(
            ln1_alpha=T.param(np.ones(width, dtype=dtype)),
            ln1_beta=T.param(np.zeros(width, dtype=dtype)),
            lru=lru,
            ln2_alpha=T.param(np.ones(width, dtype=dtype)),
            ln2_beta=T.param(np.zeros(width, dtype=dtype)),
            ffn_gate=up(),
            ffn_in=up(),
            ffn_out=MaskedLinear.build(
                T.param(wd), T.param(np.zeros(width, dtype=dtype)),
                "down", ladder),
        ))
    return ModelParams(config=cfg, ladder=ladder, fusion=fusion,
                       id_table=id_table, blocks=blocks)


def _vec_at(v: T.Tensor, m: int) -> T.Tensor:
    return v if v.shape[0] == m else T.narrow(v, 0, 0, m)


def item_embeddings(params: ModelParams, width: int | None = None) -> T.Tensor:
    """Item representation matrix [|V|, m]; doubles as the scoring matrix."""
    m = params.width if width is None else width
    if params.id_table is not None:
        w = params.id_table.weight
        return w if m == w.shape[1] else T.narrow(w, 1, 0, m)
    x = T.Tensor(params.fusion.features)
    return params.fusion.w_proj(x, None if m == params.width else m)


def _segments(params: ModelParams, m: int) -> list[int] | None:
    if params.config.norm_mode == "segment":
        return params.ladder.segments(m)
    return None


def block_forward(x: T.Tensor, blk: BlockParams, params: ModelParams,
                  ctx: RunContext, width: int | None = None,
                  site: str = "block", trace: dict | None = None) -> T.Tensor:
    m = x.shape[-1]
    segs = _segments(params, m)
    eps = params.config.eps
    rate = params.config.dropout
    w = None if m == params.width else m

    h = T.layer_norm(x, _vec_at(blk.ln1_alpha, m), _vec_at(blk.ln1_beta, m),
                     eps, segments=segs)
    u = lru_scan(blk.lru, h, width=w)
    u = T.dropout(u, rate, ctx.training, ctx.key(f"{site}/lru"))
    if trace is not None:
        trace[f"{site}.lru_out"] = np.array(u.data, copy=True)

    z = T.layer_norm(u, _vec_at(blk.ln2_alpha, m), _vec_at(blk.ln2_beta, m),
                     eps, segments=segs)
    gate = T.silu(blk.ffn_gate(z, w))
    lin = blk.ffn_in(z, w)
    prod = T.mul(gate, lin)
    prod = T.dropout(prod, rate, ctx.training, ctx.key(f"{site}/ffn"))
    out = T.add(blk.ffn_out(prod, w), u)
    if trace is not None:
        trace[f"{site}.out"] = np.array(out.data, copy=True)
    return out


def _check_ids(params: ModelParams, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"sequence batch must be 2-D, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"sequence ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() > params.vocab_size):
        raise DataError(
            f"item id out of range [0, {params.vocab_size}] in batch")
    empty = np.where(~(ids != 0).any(axis=1))[0]
    if empty.size:
        raise DataError(
            f"sequence at batch index {int(empty[0])} is all padding")
    return ids


def hidden_states(params: ModelParams, ids, ctx: RunContext = EVAL,
                  width: int | None = None,
                  trace: dict | None = None) -> tuple[T.Tensor, T.Tensor]:
    """Run the network; return (last-position state [B, m], embeddings [|V|, m]).

    Sequences are left-padded with id 0, which embeds as a zero vector; item
    ids are 1-based rows of the embedding matrix.
    """
    m = params.width if width is None else width
    if m not in params.ladder:
        raise ValueError(f"width {m} is not in ladder {params.ladder.spec()}")
    ids = _check_ids(params, ids)
    bsz, length = ids.shape

    emb = item_embeddings(params, m)
    pad_row = T.Tensor(np.zeros((1, m), dtype=emb.data.dtype))
    table = T.concat([pad_row, emb], axis=0)
    x = T.gather_rows(table, ids)
    if trace is not None:
        trace["embed"] = np.array(x.data, copy=True)

    for i, blk in enumerate(params.blocks):
        x = block_forward(x, blk, params, ctx, width=width,
                          site=f"block{i}", trace=trace)
    z_t = T.reshape(T.narrow(x, 1, length - 1, length), (bsz, m))
    if trace is not None:
        trace["z_t"] = np.array(z_t.data, copy=True)
    return z_t, emb


def forward_scores(params: ModelParams, ids, ctx: RunContext = EVAL,
                   width: int | None = None,
                   trace: dict | None = None) -> T.Tensor:
    """Scores over the catalog [B, |V|] at one ladder width."""
    z_t, emb = hidden_states(params, ids, ctx, width, trace)
    return T.matmul(z_t, T.transpose2d(emb))


def score_all_sizes(params: ModelParams, ids,
                    ctx: RunContext = EVAL) -> dict[int, T.Tensor]:
    """Catalog scores for every ladder width.

    Segment-norm models share one full-width pass: the channel prefix of the
    final state IS the smaller model's state, so each extra width costs only
    its scoring product. Full-norm models fall back to one sliced pass per
    width.
    """
    if params.config.norm_mode == "segment":
        z_t, emb = hidden_states(params, ids, ctx)
        out = {}
        for m in params.ladder:
            z_m = _prefix_cols(z_t, m)
            e_m = _prefix_cols(emb, m)
            out[m] = T.matmul(z_m, T.transpose2d(e_m))
        return out
    return {m: forward_scores(params, ids, ctx, width=m)
            for m in params.ladder}


def _prefix_cols(x: T.Tensor, m: int) -> T.Tensor:
    return x if x.shape[-1] == m else T.narrow(x, x.ndim - 1, 0, m)


def nested_loss(params: ModelParams, ids, labels, ctx: RunContext,
                weights: list[float] | None = None
                ) -> tuple[T.Tensor, dict[int, float]]:
    """Sum of per-width cross-entropies against the same next-item labels.

    Labels are 1-based item ids. Returns the scalar loss and a per-width
    float breakdown for logging.
    """
    labels = np.asarray(labels)
    scores = score_all_sizes(params, ids, ctx)
    sizes = list(params.ladder)
    if weights is None:
        weights = [1.0] * len(sizes)
    if len(weights) != len(sizes):
        raise ValueError(
            f"{len(weights)} loss weights for {len(sizes)} ladder sizes")
    label_rows = labels - 1
    total = None
    per_size: dict[int, float] = {}
    for m, w in zip(sizes, weights):
        ce = T.softmax_cross_entropy(scores[m], label_rows)
        per_size[m] = ce.item()
        term = T.mul(ce, float(w))
        total = term if total is None else T.add(total, term)
    return total, per_size


# ---------------------------------------------------------------------------
# extraction


def _slice_lru(lru: LruParams, m: int) -> LruParams:
    return LruParams(
        nu=T.param(lru.nu.data[:m].copy()),
        theta=T.param(lru.theta.data[:m].copy()),
        gamma=T.param(lru.gamma.data[:m].copy()),
        b_re=lru.b_re.sliced(m), b_im=lru.b_im.sliced(m),
        c_out=lru.c_out.sliced(m), d_skip=lru.d_skip.sliced(m),
        use_gamma=lru.use_gamma)


def extract(params: ModelParams, m: int) -> ModelParams:
    """Slice the width-m model out as a standalone dense network.

    The result has no masks (none are needed: its weights are exactly the
    live region) and a truncated ladder, and its forward pass reproduces
    the parent's width-m scores.
    """
    if m not in params.ladder:
        raise ValueError(f"width {m} is not in ladder {params.ladder.spec()}")
    cfg = dataclasses.replace(
        params.config, d_model=m,
        ladder_spec=params.ladder.prefix(m).spec(),
        ladder_min=params.ladder.sizes[0])
    fusion = None
    id_table = None
    if params.fusion is not None:
        fusion = FusionParams(w_proj=params.fusion.w_proj.sliced(m),
                              features=params.fusion.features)
    if params.id_table is not None:
        id_table = params.id_table.sliced(m)
    blocks = []
    for blk in params.blocks:
        blocks.append(BlockParams(
            ln1_alpha=T.param(blk.ln1_alpha.data[:m].copy()),
            ln1_beta=T.param(blk.ln1_beta.data[:m].copy()),
            lru=_slice_lru(blk.lru, m),
            ln2_alpha=T.param(blk.ln2_alpha.data[:m].copy()),
            ln2_beta=T.param(blk.ln2_beta.data[:m].copy()),
            ffn_gate=blk.ffn_gate.sliced(m),
            ffn_in=blk.ffn_in.sliced(m),
            ffn_out=blk.ffn_out.sliced(m),
        ))
    return ModelParams(config=cfg, ladder=params.ladder.prefix(m),
                       fusion=fusion, id_table=id_table, blocks=blocks)
