"""Block-causal scale-wise decoder.

The flattened sequence is [start] ++ scale_1 ++ ... ++ scale_S. The start position
carries the pooled prompt vector; scale-s positions carry a linear projection of the
cumulative reconstruction from scales < s (scale 1 gets a learned start-content
vector) plus a scale-membership term. Attention is full within a scale and causal
across scales, so logits at scale s depend only on the prompt and scales < s.
Each block is pre-norm: self-attention (rotary positions, optional QK-norm), then
cross-attention over the prompt's word rows, then an MLP. A final normalization
feeds the vocabulary head; those pre-logit features also drive the mask-head sampler.

Training can crop the last two scales to an aligned random window: non-window tokens
of those scales leave the sequence entirely (earlier scales stay complete), which is
where the attention-cost saving comes from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .conditioning import MAX_WORDS
from .nn.tensor import Tensor
from .rope import RopeConfig, ScaleEmbedding, apply_rope
from .tokenizer import Codebook, ScaleSchedule, TokenPyramid, next_scale_input

MASK_BIAS = np.float32(-1e9)


@dataclass(frozen=True)
class ModelConfig:
    schedule: ScaleSchedule
    depth: int = 4
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 256
    feat_dim: int = 16
    mlp_ratio: int = 4
    pos_encoding: str = "normalized"
    qk_norm: bool = True
    grid_h: float = 8.0
    grid_w: float = 8.0
    freq_base: float = 10000.0
    window_side: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 4:
            raise ValueError("head dim must be divisible by 4")
        self.rope().validate_schedule(self.schedule)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def rope(self) -> RopeConfig:
        return RopeConfig(self.grid_h, self.grid_w, self.d_head, self.freq_base, self.pos_encoding)


@dataclass
class SequenceLayout:
    """Geometry of one flattened (possibly cropped) pyramid sequence.

    Position 0 is the start token (scale 0, coords 0). `kept[s-1]` holds the indices
    into scale s's row-major cells that remain in the sequence; `full_index` maps each
    position to its index in the configured schedule's full flattened token order
    (-1 for the start), which is what learned absolute tables are keyed on.
    """

    sides: tuple[tuple[int, int], ...]
    scale_of: np.ndarray
    coord_i: np.ndarray
    coord_j: np.ndarray
    full_index: np.ndarray
    blocks: tuple[tuple[int, int], ...]
    kept: tuple[np.ndarray, ...]

    @property
    def total_len(self) -> int:
        return len(self.scale_of)

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    def scale_slice(self, s: int) -> slice:
        off, length = self.blocks[s - 1]
        return slice(off, off + length)


def build_layout(
    schedule: ScaleSchedule,
    upto_scale: int | None = None,
    crops: dict[int, tuple[int, int, int]] | None = None,
) -> SequenceLayout:
    """Layout for scales 1..upto_scale, with optional (r0, c0, side) crops per scale."""
    s_max = schedule.num_scales if upto_scale is None else upto_scale
    if not 1 <= s_max <= schedule.num_scales:
        raise ValueError(f"upto_scale {s_max} out of range")
    crops = crops or {}
    scale_of = [0]
    ci = [0]
    cj = [0]
    full_index = [-1]
    blocks = []
    kept = []
    base = 0
    for s, (h, w) in enumerate(schedule.sides[:s_max], start=1):
        gi, gj = np.divmod(np.arange(h * w), w)
        if s in crops:
            r0, c0, side = crops[s]
            if not (0 <= r0 <= h - side and 0 <= c0 <= w - side and side >= 1):
                raise ValueError(f"crop {crops[s]} does not fit scale {s} ({h}x{w})")
            keep_mask = (gi >= r0) & (gi < r0 + side) & (gj >= c0) & (gj < c0 + side)
            keep_idx = np.nonzero(keep_mask)[0]
        else:
            keep_idx = np.arange(h * w)
        blocks.append((len(scale_of), len(keep_idx)))
        kept.append(keep_idx)
        scale_of.extend([s] * len(keep_idx))
        ci.extend((gi[keep_idx] + 1).tolist())
        cj.extend((gj[keep_idx] + 1).tolist())
        full_index.extend((base + keep_idx).tolist())
        base += h * w
    return SequenceLayout(
        sides=schedule.sides[:s_max],
        scale_of=np.asarray(scale_of, dtype=np.int32),
        coord_i=np.asarray(ci, dtype=np.int32),
        coord_j=np.asarray(cj, dtype=np.int32),
        full_index=np.asarray(full_index, dtype=np.int64),
        blocks=tuple(blocks),
        kept=tuple(kept),
    )


def window_crops(schedule: ScaleSchedule, window_side: int, rng: np.random.Generator) -> dict[int, tuple[int, int, int]]:
    """Aligned random crops for the last two scales.

    `window_side` names the crop side at the finest scale; the next-to-last scale
    gets a proportional side, and both share one normalized offset so the windows
    cover the same image region.
    """
    if window_side <= 0 or schedule.num_scales < 2:
        return {}
    h_last = schedule.sides[-1][0]
    if window_side >= h_last:
        return {}
    u, v = rng.random(2)
    crops = {}
    for s in (schedule.num_scales - 1, schedule.num_scales):
        h, w = schedule.sides[s - 1]
        side = max(1, math.ceil(h * window_side / h_last))
        if side >= h:
            continue
        r0 = int(u * (h - side + 1))
        c0 = int(v * (w - side + 1))
        crops[s] = (r0, c0, side)
    return crops


def block_causal_mask(layout: SequenceLayout) -> np.ndarray:
    """allowed[r, c]: column's scale is at or before the row's scale."""
    s = layout.scale_of
    return s[None, :] <= s[:, None]


def attention_bias(layout: SequenceLayout) -> np.ndarray:
    """Additive float mask: 0 where attention is allowed, -1e9 where it is not."""
    return np.where(block_causal_mask(layout), np.float32(0.0), MASK_BIAS)


def rope_tables(layout: SequenceLayout, config: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin per position (start gets identity rotation): two (L, d_head) arrays."""
    pairs = config.d_head // 4
    freqs = config.freq_base ** (-4.0 * np.arange(pairs) / config.d_head)
    px = np.zeros(layout.total_len, dtype=np.float64)
    py = np.zeros(layout.total_len, dtype=np.float64)
    if config.mode != "absolute":
        for s, (h, w) in enumerate(layout.sides, start=1):
            sl = layout.scale_slice(s)
            i = layout.coord_i[sl].astype(np.float64)
            j = layout.coord_j[sl].astype(np.float64)
            if config.mode == "normalized":
                px[sl] = (i / h) * config.grid_h
                py[sl] = (j / w) * config.grid_w
            else:
                px[sl] = i
                py[sl] = j
    ang = np.concatenate([px[:, None] * freqs, py[:, None] * freqs], axis=1)
    cos = np.repeat(np.cos(ang), 2, axis=1).astype(np.float32)
    sin = np.repeat(np.sin(ang), 2, axis=1).astype(np.float32)
    return cos, sin


def pyramid_input_features(
    pyramid: TokenPyramid, codebook: Codebook, schedule: ScaleSchedule, upto_scale: int | None = None
) -> list[np.ndarray | None]:
    """Per-scale transformer input features: entry s-1 is (h_s*w_s, feat_dim).

    Scale 1 has no previous reconstruction, so its entry is None (the model inserts
    its learned start-content vector there).
    """
    s_max = schedule.num_scales if upto_scale is None else upto_scale
    feats: list[np.ndarray | None] = [None]
    for s in range(2, s_max + 1):
        grid = next_scale_input(pyramid, codebook, schedule, s)
        feats.append(grid.reshape(-1, grid.shape[-1]))
    return feats


class StarTransformer:
    """Scale-wise decoder over token pyramids with prompt conditioning."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.scale_emb = ScaleEmbedding(config.d_model, rng)
        self.params.update(self.scale_emb.params)
        self._init_params(rng)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, v = cfg.d_model, cfg.vocab_size
        p = self.params
        p["emb.in_proj"] = nn.normal_param(rng, (cfg.feat_dim, d), 0.02)
        p["emb.in_bias"] = nn.zeros_param((d,))
        p["emb.start_content"] = nn.normal_param(rng, (d,), 0.02)
        if cfg.pos_encoding == "absolute":
            p["pos.abs_emb"] = nn.normal_param(rng, (cfg.schedule.total_tokens, d), 0.02)
        out_scale = 1.0 / math.sqrt(2.0 * cfg.depth)
        for b in range(cfg.depth):
            pre = f"blk{b}."
            for ln in ("ln1", "lnc", "ln2"):
                p[pre + ln + ".g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
                p[pre + ln + ".b"] = nn.zeros_param((d,))
            for name in ("attn", "cross"):
                for w in ("wq", "wk", "wv"):
                    p[pre + name + "." + w] = nn.normal_param(rng, (d, d), 0.02)
                    p[pre + name + ".b" + w[1]] = nn.zeros_param((d,))
                p[pre + name + ".wo"] = nn.normal_param(rng, (d, d), 0.02 * out_scale)
                p[pre + name + ".bo"] = nn.zeros_param((d,))
            p[pre + "attn.log_temp"] = Tensor(
                np.full((cfg.n_heads, 1, 1), np.log(10.0), dtype=np.float32), requires_grad=True
            )
            p[pre + "mlp.w1"] = nn.normal_param(rng, (d, cfg.mlp_ratio * d), 0.02)
            p[pre + "mlp.b1"] = nn.zeros_param((cfg.mlp_ratio * d,))
            p[pre + "mlp.w2"] = nn.normal_param(rng, (cfg.mlp_ratio * d, d), 0.02 * out_scale)
            p[pre + "mlp.b2"] = nn.zeros_param((d,))
        p["final.ln.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        p["final.ln.b"] = nn.zeros_param((d,))
        p["head.w"] = nn.zeros_param((d, v))
        p["head.b"] = nn.zeros_param((v,))

    # ------------------------------------------------------------------ embedding
    def embed_inputs(self, feats_batch: np.ndarray | None, pooled: Tensor, layout: SequenceLayout) -> Tensor:
        """Assemble (B, L, d_model) input embeddings.

        `feats_batch` is the concatenated per-token input features for scales >= 2,
        shape (B, L - 1 - n_1, feat_dim); None when the layout stops at scale 1.
        """
        cfg = self.config
        batch = pooled.shape[0]
        n1 = layout.blocks[0][1]
        rows = [nn.reshape(pooled, (batch, 1, cfg.d_model))]
        start_content = nn.reshape(self.params["emb.start_content"], (1, 1, cfg.d_model))
        ones = np.ones((batch, n1, 1), dtype=np.float32)
        rows.append(nn.mul(start_content, ones))
        if layout.total_len - 1 - n1 > 0:
            if feats_batch is None:
                raise ValueError("layout has scales >= 2 but no input features were given")
            proj = nn.add(nn.matmul(nn.as_tensor(feats_batch), self.params["emb.in_proj"]), self.params["emb.in_bias"])
            rows.append(proj)
        x = nn.concat(rows, axis=1)
        scale_rows = nn.embedding(self.params["pos.scale_emb"], layout.scale_of[1:] - 1)
        if cfg.pos_encoding == "absolute":
            if layout.full_index[1:].max(initial=-1) >= self.params["pos.abs_emb"].shape[0]:
                raise ValueError("absolute position table does not cover this layout")
            scale_rows = nn.add(scale_rows, nn.embedding(self.params["pos.abs_emb"], layout.full_index[1:]))
        zero_start = np.zeros((1, cfg.d_model), dtype=np.float32)
        pos_rows = nn.concat([nn.as_tensor(zero_start), scale_rows], axis=0)
        return nn.add(x, pos_rows)

    # ------------------------------------------------------------------ blocks
    def _ln(self, x: Tensor, name: str) -> Tensor:
        return nn.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _heads(self, t: Tensor, batch: int, length: int) -> Tensor:
        cfg = self.config
        return nn.transpose(nn.reshape(t, (batch, length, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))

    def _merge_heads(self, t: Tensor, batch: int, length: int) -> Tensor:
        cfg = self.config
        return nn.reshape(nn.transpose(t, (0, 2, 1, 3)), (batch, length, cfg.d_model))

    def self_attention(
        self,
        block: int,
        x: Tensor,
        bias: np.ndarray,
        cos: np.ndarray,
        sin: np.ndarray,
        qk_norm: bool,
        attn_sink: list | None = None,
    ) -> Tensor:
        p = self.params
        pre = f"blk{block}.attn."
        batch, length = x.shape[0], x.shape[1]
        q = self._heads(nn.add(nn.matmul(x, p[pre + "wq"]), p[pre + "bq"]), batch, length)
        k = self._heads(nn.add(nn.matmul(x, p[pre + "wk"]), p[pre + "bk"]), batch, length)
        v = self._heads(nn.add(nn.matmul(x, p[pre + "wv"]), p[pre + "bv"]), batch, length)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        if qk_norm:
            q = nn.unit_normalize(q)
            k = nn.unit_normalize(k)
            scores = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), nn.exp(p[pre + "log_temp"]))
        else:
            scores = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.config.d_head))
        scores = nn.add(scores, bias)
        attn = nn.softmax(scores)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        out = self._merge_heads(nn.matmul(attn, v), batch, length)
        return nn.add(nn.matmul(out, p[pre + "wo"]), p[pre + "bo"])

    def cross_attention(self, block: int, x: Tensor, tokens: Tensor, valid: np.ndarray) -> Tensor:
        if not valid.any(axis=1).all():
            raise ValueError("cross-attention requires at least one valid prompt row per example")
        p = self.params
        pre = f"blk{block}.cross."
        batch, length = x.shape[0], x.shape[1]
        m = tokens.shape[1]
        q = self._heads(nn.add(nn.matmul(x, p[pre + "wq"]), p[pre + "bq"]), batch, length)
        k = self._heads(nn.add(nn.matmul(tokens, p[pre + "wk"]), p[pre + "bk"]), batch, m)
        v = self._heads(nn.add(nn.matmul(tokens, p[pre + "wv"]), p[pre + "bv"]), batch, m)
        scores = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.config.d_head))
        bias = np.where(valid[:, None, None, :], np.float32(0.0), MASK_BIAS)
        scores = nn.add(scores, bias)
        attn = nn.softmax(scores)
        out = self._merge_heads(nn.matmul(attn, v), batch, length)
        return nn.add(nn.matmul(out, p[pre + "wo"]), p[pre + "bo"])

    def _mlp(self, block: int, x: Tensor) -> Tensor:
        p = self.params
        pre = f"blk{block}.mlp."
        h = nn.gelu(nn.add(nn.matmul(x, p[pre + "w1"]), p[pre + "b1"]))
        return nn.add(nn.matmul(h, p[pre + "w2"]), p[pre + "b2"])

    # ------------------------------------------------------------------ forward
    def forward(
        self,
        feats_batch: np.ndarray | None,
        pooled: Tensor,
        tokens: Tensor,
        valid: np.ndarray,
        layout: SequenceLayout,
        return_attn: bool = False,
    ) -> tuple[Tensor, Tensor, list[np.ndarray]]:
        """Run the decoder; returns (logits (B, L, V), pre-logit features (B, L, d), attns)."""
        cfg = self.config
        x = self.embed_inputs(feats_batch, pooled, layout)
        bias = attention_bias(layout)
        cos, sin = rope_tables(layout, cfg.rope())
        attns: list[np.ndarray] = []
        sink = attns if return_attn else None
        for b in range(cfg.depth):
            x = nn.add(x, self.self_attention(b, self._ln(x, f"blk{b}.ln1"), bias, cos, sin, cfg.qk_norm, sink))
            x = nn.add(x, self.cross_attention(b, self._ln(x, f"blk{b}.lnc"), tokens, valid))
            x = nn.add(x, self._mlp(b, self._ln(x, f"blk{b}.ln2")))
        phi = self._ln(x, "final.ln")
        logits = nn.add(nn.matmul(phi, self.params["head.w"]), self.params["head.b"])
        return logits, phi, attns

    # ------------------------------------------------------------------ losses
    def gather_targets(self, pyramids: list[TokenPyramid], layout: SequenceLayout) -> np.ndarray:
        """Flattened supervision targets aligned with layout positions 1..L-1: (B, L-1)."""
        rows = []
        for pyr in pyramids:
            parts = [pyr.maps[s - 1].reshape(-1)[layout.kept[s - 1]] for s in range(1, layout.num_scales + 1)]
            rows.append(np.concatenate(parts))
        return np.stack(rows).astype(np.int64)

    def teacher_forcing_loss(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Mean cross-entropy over every supervised position of the layout."""
        batch, length, v = logits.shape
        if targets.shape != (batch, length - 1):
            raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
        sup = nn.narrow(logits, 1, 1, length - 1)
        return nn.cross_entropy(nn.reshape(sup, (batch * (length - 1), v)), targets.reshape(-1))

    def token_accuracy(self, logits: Tensor, targets: np.ndarray) -> float:
        pred = logits.data[:, 1:, :].argmax(axis=-1)
        return float((pred == targets).mean())


def build_sequence(
    model: StarTransformer,
    pyramid: TokenPyramid,
    codebook: Codebook,
    pooled: Tensor,
    schedule: ScaleSchedule,
    upto_scale: int | None = None,
) -> tuple[Tensor, SequenceLayout]:
    """Single-example input embeddings + layout (the spec-level sequence builder)."""
    layout = build_layout(schedule, upto_scale)
    feats = pyramid_input_features(pyramid, codebook, schedule, upto_scale)
    parts = [f for f in feats if f is not None]
    feats_batch = np.stack([np.concatenate(parts, axis=0)]) if parts else None
    emb = model.embed_inputs(feats_batch, nn.reshape(pooled, (1, model.config.d_model)), layout)
    return emb, layout
