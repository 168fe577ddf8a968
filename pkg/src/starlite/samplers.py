"""Token selection per scale: top-k/top-p, gumbel-argmax, and the mask-head sampler.

The mask-head sampler turns one-shot parallel sampling into a short causal chain
inside a scale: draw provisional tokens, keep the most confident fraction as fixed
context, then let a shallow mask-prediction head fill the rest over a few iterations,
unmasking the most confident predictions first (cosine schedule). With keep_ratio=1
it degenerates to the plain top-k baseline, token for token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .conditioning import PromptEmbedding, PromptEncoder
from .model import ModelConfig, StarTransformer, build_layout
from .nn.tensor import Tensor
from .rope import RopeConfig, rope_angles
from .tokenizer import Codebook, ScaleSchedule, TokenPyramid, resize_bilinear


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "topk"
    top_k: int = 600
    top_p: float = 1.0
    temperature: float = 1.0
    causal_from: int | None = None  # first scale using the mask-head chain; None = S-2
    steps_per_scale: tuple[int, ...] = (4, 6, 8)
    keep_ratio: float = 0.5
    gumbel_sigma: tuple[float, ...] | None = None  # None = linear 1 -> 0 over scales
    cfg_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("topk", "gumbel", "causal"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.keep_ratio <= 1.0:
            raise ValueError("keep_ratio must be in [0, 1]")
        if any(t < 1 for t in self.steps_per_scale):
            raise ValueError("steps_per_scale entries must be >= 1")
        if self.gumbel_sigma is not None:
            sig = self.gumbel_sigma
            if any(s < 0 for s in sig):
                raise ValueError("gumbel sigma must be nonnegative")
            if any(b > a for a, b in zip(sig, sig[1:])):
                raise ValueError("gumbel sigma must be nonincreasing across scales")

    def sigma_for(self, num_scales: int) -> np.ndarray:
        if self.gumbel_sigma is not None:
            if len(self.gumbel_sigma) < num_scales:
                raise ValueError("gumbel sigma schedule shorter than scale count")
            return np.asarray(self.gumbel_sigma[:num_scales], dtype=np.float64)
        if num_scales == 1:
            return np.array([1.0])
        return np.linspace(1.0, 0.0, num_scales)

    def first_causal_scale(self, num_scales: int) -> int:
        return max(1, num_scales - 2) if self.causal_from is None else self.causal_from

    def steps_for(self, s: int, num_scales: int) -> int:
        first = self.first_causal_scale(num_scales)
        idx = min(s - first, len(self.steps_per_scale) - 1)
        return self.steps_per_scale[max(0, idx)]


def softmax_probs(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def top_k_top_p(
    logits: np.ndarray, k: int, p: float, temperature: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample one token per row: truncate to top-k, then the smallest top-p prefix.

    Ties in the ranking go to the lower token index (stable sort on logits).
    Accepts (V,) or (N, V); returns () or (N,) int64.
    """
    arr = np.asarray(logits)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < p <= 1.0:
        raise ValueError("p must be in (0, 1]")
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    n, v = rows.shape
    kk = min(k, v)
    order = np.argsort(-rows, axis=-1, kind="stable")[:, :kk]
    top = np.take_along_axis(rows, order, axis=-1)
    probs = softmax_probs(top, temperature)
    cum = probs.cumsum(axis=-1)
    # smallest prefix with cumulative probability >= p stays live
    cutoff = (cum >= p - 1e-12).argmax(axis=-1)
    live = np.arange(kk)[None, :] <= cutoff[:, None]
    probs = np.where(live, probs, 0.0)
    probs /= probs.sum(axis=-1, keepdims=True)
    u = rng.random(n)
    pick = (probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
    pick = np.minimum(pick, kk - 1)
    out = np.take_along_axis(order, pick[:, None], axis=-1)[:, 0]
    return out[0] if single else out


def gumbel_smooth(
    logits_per_scale: list[np.ndarray], sigmas: np.ndarray, rng: np.random.Generator
) -> list[np.ndarray]:
    """Argmax over logits + sigma_s * Gumbel(0,1) noise, sigma nonincreasing in s."""
    if len(sigmas) < len(logits_per_scale):
        raise ValueError("noise schedule shorter than scale count")
    if np.any(np.asarray(sigmas) < 0):
        raise ValueError("negative noise scale")
    out = []
    for logits, sigma in zip(logits_per_scale, sigmas):
        g = -np.log(-np.log(rng.random(logits.shape)))
        out.append(np.argmax(logits.astype(np.float64) + sigma * g, axis=-1).astype(np.int64))
    return out


class MaskHead:
    """Shallow within-scale mask predictor.

    Per position: embed the (possibly [MASK]) token, concatenate the backbone's
    pre-logit feature, project down, run `depth` bidirectional attention blocks with
    the scale's rotary table, and emit vocabulary logits.
    """

    MASK = -1  # sentinel in integer token grids; embedded as row `vocab_size`

    def __init__(self, config: ModelConfig, rng: np.random.Generator, width: int | None = None, depth: int = 2, n_heads: int = 2):
        self.config = config
        self.width = width or config.d_model // 2
        self.depth = depth
        self.n_heads = n_heads
        if (self.width // n_heads) % 4:
            raise ValueError("mask head width/heads must give head dim divisible by 4")
        w, v, d = self.width, config.vocab_size, config.d_model
        self.params: dict[str, Tensor] = {}
        p = self.params
        p["mask.tok_emb"] = nn.normal_param(rng, (v + 1, w), 0.02)
        p["mask.in_proj"] = nn.normal_param(rng, (d + w, w), 0.02)
        p["mask.in_bias"] = nn.zeros_param((w,))
        for b in range(depth):
            pre = f"mask.blk{b}."
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".g"] = Tensor(np.ones(w, dtype=np.float32), requires_grad=True)
                p[pre + ln + ".b"] = nn.zeros_param((w,))
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = nn.normal_param(rng, (w, w), 0.02)
            p[pre + "attn.bias"] = nn.zeros_param((w,))
            p[pre + "mlp.w1"] = nn.normal_param(rng, (w, 2 * w), 0.02)
            p[pre + "mlp.b1"] = nn.zeros_param((2 * w,))
            p[pre + "mlp.w2"] = nn.normal_param(rng, (2 * w, w), 0.02)
            p[pre + "mlp.b2"] = nn.zeros_param((w,))
        p["mask.final.g"] = Tensor(np.ones(w, dtype=np.float32), requires_grad=True)
        p["mask.final.b"] = nn.zeros_param((w,))
        p["mask.head.w"] = nn.zeros_param((w, v))
        p["mask.head.b"] = nn.zeros_param((v,))

    def _rope(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = RopeConfig(
            self.config.grid_h,
            self.config.grid_w,
            self.width // self.n_heads,
            self.config.freq_base,
            "normalized" if self.config.pos_encoding == "absolute" else self.config.pos_encoding,
        )
        ang = np.stack([rope_angles(i, j, h, w, cfg) for i in range(1, h + 1) for j in range(1, w + 1)])
        return (
            np.repeat(np.cos(ang), 2, axis=1).astype(np.float32),
            np.repeat(np.sin(ang), 2, axis=1).astype(np.float32),
        )

    def forward(self, tokens: np.ndarray, phi: np.ndarray, hw: tuple[int, int]) -> Tensor:
        """tokens (B, N) int with MASK sentinel; phi (B, N, d_model); returns (B, N, V) logits."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
            phi = phi[None, ...]
        b, n = tokens.shape
        if hw[0] * hw[1] != n:
            raise ValueError(f"token count {n} does not match scale {hw}")
        ids = np.where(tokens == self.MASK, cfg.vocab_size, tokens).astype(np.int64)
        emb = nn.embedding(self.params["mask.tok_emb"], ids)
        x = nn.concat([emb, nn.as_tensor(np.asarray(phi, dtype=np.float32))], axis=-1)
        x = nn.add(nn.matmul(x, self.params["mask.in_proj"]), self.params["mask.in_bias"])
        cos, sin = self._rope(*hw)
        hd = self.width // self.n_heads
        from .rope import apply_rope

        for blk in range(self.depth):
            pre = f"mask.blk{blk}."
            p = self.params
            h_in = nn.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = nn.transpose(nn.reshape(nn.matmul(h_in, p[pre + "attn.wq"]), (b, n, self.n_heads, hd)), (0, 2, 1, 3))
            k = nn.transpose(nn.reshape(nn.matmul(h_in, p[pre + "attn.wk"]), (b, n, self.n_heads, hd)), (0, 2, 1, 3))
            v = nn.transpose(nn.reshape(nn.matmul(h_in, p[pre + "attn.wv"]), (b, n, self.n_heads, hd)), (0, 2, 1, 3))
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
            scores = nn.mul(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
            attn = nn.softmax(scores)
            mixed = nn.reshape(nn.transpose(nn.matmul(attn, v), (0, 2, 1, 3)), (b, n, self.width))
            x = nn.add(x, nn.add(nn.matmul(mixed, p[pre + "attn.wo"]), p[pre + "attn.bias"]))
            h_in = nn.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h_mid = nn.gelu(nn.add(nn.matmul(h_in, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
            x = nn.add(x, nn.add(nn.matmul(h_mid, p[pre + "mlp.w2"]), p[pre + "mlp.b2"]))
        x = nn.layer_norm(x, self.params["mask.final.g"], self.params["mask.final.b"])
        return nn.add(nn.matmul(x, self.params["mask.head.w"]), self.params["mask.head.b"])


def mask_head_loss(head: MaskHead, tokens: np.ndarray, phi: np.ndarray, visible: np.ndarray) -> Tensor:
    """Mean NLL of the true tokens at masked positions (visible==0 means masked).

    tokens (B, N) ground truth; visible (B, N) in {0,1}; masked inputs are replaced
    by the [MASK] embedding.
    """
    tokens = np.asarray(tokens)
    visible = np.asarray(visible).astype(bool)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
        visible = visible[None, :]
        phi = phi[None, ...]
    if visible.shape != tokens.shape:
        raise ValueError("mask shape must match token grid")
    if visible.all():
        raise ValueError("no masked positions to supervise")
    inputs = np.where(visible, tokens, MaskHead.MASK)
    h, w = _square_hw(tokens.shape[1])
    logits = head.forward(inputs, phi, (h, w))
    b, n, v = logits.shape
    return nn.cross_entropy(
        nn.reshape(logits, (b * n, v)), tokens.reshape(-1).astype(np.int64), select=~visible.reshape(-1)
    )


def _square_hw(n: int) -> tuple[int, int]:
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ValueError(f"scale token count {n} is not square")
    return side, side


@dataclass
class ScaleTrace:
    scale: int
    seed: int
    tokens: list[int]
    conf: list[float]
    iterations: int


@dataclass
class SampleTrace:
    """Replayable record of one generation: same seed and config give the same trace."""

    seed: int
    records: list[ScaleTrace] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for r in self.records:
            conf = "[" + ", ".join(f"{c:.6f}" for c in r.conf) + "]"
            toks = "[" + ", ".join(str(t) for t in r.tokens) + "]"
            lines.append(f"scale {r.scale}: seed={r.seed} tokens={toks} conf={conf} iters={r.iterations}")
        return "\n".join(lines) + "\n"


def cosine_masked_counts(initial_masked: int, steps: int) -> list[int]:
    """Masked-position counts after each of `steps` iterations; ends at zero."""
    return [int(math.floor(initial_masked * math.cos(math.pi / 2 * t / steps))) for t in range(1, steps + 1)]


def causal_stable_sample(
    logits: np.ndarray,
    phi: np.ndarray,
    hw: tuple[int, int],
    head: MaskHead,
    config: SamplerConfig,
    rng: np.random.Generator,
    steps: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Multi-step within-scale sampling; returns (tokens, confidences, iterations_run).

    1) provisional top-k/top-p draw, 2) retain the ceil(keep_ratio*N) most confident
    as fixed context, 3) `steps` mask-head iterations argmax-fill the rest, fixing the
    most confident predictions first on a cosine schedule. Fixed positions are never
    resampled; with nothing masked the provisional draw is returned unchanged.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n, v = logits.shape
    provisional = top_k_top_p(logits, config.top_k, config.top_p, config.temperature, rng)
    probs = softmax_probs(logits, config.temperature)
    conf = probs[np.arange(n), provisional]
    keep_n = math.ceil(config.keep_ratio * n)
    order = np.argsort(-conf, kind="stable")
    kept_idx = order[:keep_n]
    tokens = np.full(n, MaskHead.MASK, dtype=np.int64)
    tokens[kept_idx] = provisional[kept_idx]
    final_conf = np.zeros(n, dtype=np.float64)
    final_conf[kept_idx] = conf[kept_idx]
    masked = int(n - keep_n)
    if masked == 0:
        return provisional.astype(np.int64), conf, 0
    schedule = cosine_masked_counts(masked, steps)
    iterations = 0
    for target_masked in schedule:
        iterations += 1
        with nn.no_grad():
            head_logits = head.forward(tokens, phi, hw).data[0]
        head_probs = softmax_probs(head_logits)
        pred = head_probs.argmax(axis=-1)
        pred_conf = head_probs[np.arange(n), pred]
        is_masked = tokens == MaskHead.MASK
        to_fix = masked - target_masked
        if to_fix <= 0:
            continue
        cand = np.nonzero(is_masked)[0]
        pick = cand[np.argsort(-pred_conf[cand], kind="stable")[:to_fix]]
        tokens[pick] = pred[pick]
        final_conf[pick] = pred_conf[pick]
        masked = target_masked
    assert masked == 0 and not np.any(tokens == MaskHead.MASK)
    return tokens, final_conf, iterations


def generate(
    model: StarTransformer,
    encoder: PromptEncoder,
    caption_ids: list[int],
    codebook: Codebook,
    config: SamplerConfig,
    seed: int,
    head: MaskHead | None = None,
    schedule: ScaleSchedule | None = None,
) -> tuple[TokenPyramid, SampleTrace]:
    """Sample a full token pyramid for one prompt; deterministic given `seed`."""
    sched = schedule or model.config.schedule
    num_scales = sched.num_scales
    if config.kind == "causal" and head is None:
        raise ValueError("causal sampling requires a trained mask head")
    rng = nn.make_rng(seed, "sample")
    sigmas = config.sigma_for(num_scales) if config.kind == "gumbel" else None
    first_causal = config.first_causal_scale(num_scales)

    pooled, tokens_t, valid = encoder.embed_batch([caption_ids])
    if config.cfg_scale > 0:
        null_pooled, null_tokens, null_valid = encoder.embed_batch([[encoder.vocab.null_id]])

    latent = sched.latent
    cum = np.zeros(latent + (codebook.dim,), dtype=np.float32)
    maps: list[np.ndarray] = []
    trace = SampleTrace(seed=seed)
    feats_rows: list[np.ndarray] = []

    for s in range(1, num_scales + 1):
        h, w = sched.sides[s - 1]
        if s >= 2:
            feats_rows.append(resize_bilinear(cum, (h, w)).reshape(-1, codebook.dim))
        layout = build_layout(sched, upto_scale=s)
        fb = np.stack([np.concatenate(feats_rows, axis=0)]) if feats_rows else None
        with nn.no_grad():
            logits_t, phi_t, _ = model.forward(fb, pooled, tokens_t, valid, layout)
        sl = layout.scale_slice(s)
        logits = logits_t.data[0, sl].astype(np.float64)
        phi = phi_t.data[0, sl]
        if config.cfg_scale > 0:
            with nn.no_grad():
                null_logits, _, _ = model.forward(fb, null_pooled, null_tokens, null_valid, layout)
            logits = (1 + config.cfg_scale) * logits - config.cfg_scale * null_logits.data[0, sl].astype(np.float64)

        iterations = 0
        if config.kind == "gumbel":
            toks = gumbel_smooth([logits], sigmas[s - 1 : s], rng)[0]
            conf = softmax_probs(logits)[np.arange(len(toks)), toks]
        elif config.kind == "causal" and s >= first_causal:
            toks, conf, iterations = causal_stable_sample(
                logits, phi, (h, w), head, config, rng, config.steps_for(s, num_scales)
            )
        else:
            toks = np.atleast_1d(top_k_top_p(logits, config.top_k, config.top_p, config.temperature, rng))
            conf = softmax_probs(logits, config.temperature)[np.arange(len(toks)), toks]
        grid = toks.reshape(h, w).astype(np.int32)
        maps.append(grid)
        trace.records.append(
            ScaleTrace(scale=s, seed=seed, tokens=[int(t) for t in toks], conf=[float(c) for c in conf], iterations=iterations)
        )
        cum += resize_bilinear(codebook.vectors[grid], latent)

    return TokenPyramid(tuple(maps)), trace
