"""Patch-based transformer forecaster whose every linear layer is maskable.

Every linear transformation carries binary input/output channel masks with
the identity h = f(x ⊙ m_in) ⊙ m_out = x (W ⊙ m_inᵀm_out) + b ⊙ m_out.
Forward passes can run bare (numpy only), on a gradient tape, and/or with
capture hooks that expose the intermediates needed for per-sample mask
gradients and sparsity diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ShapeError

NORM_KINDS = ("layernorm", "rmsnorm")
ACTIVATIONS = ("relu", "gelu")
ATTENTION_STYLES = ("bidirectional", "causal")

STD_FLOOR = 1e-8
NORM_EPS = 1e-5
NEG_INF = -1e30


@dataclass
class ForecasterConfig:
    layers: int
    heads: int
    d_model: int
    d_ffn: int
    patch_len: int
    context_len: int
    horizon: int
    norm: str = "layernorm"
    activation: str = "gelu"
    attention: str = "bidirectional"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.context_len % self.patch_len != 0:
            raise ValueError(f"context_len={self.context_len} not divisible by "
                             f"patch_len={self.patch_len}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.attention not in ATTENTION_STYLES:
            raise ValueError(f"attention must be one of {ATTENTION_STYLES}")

    @property
    def tokens(self) -> int:
        return self.context_len // self.patch_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "layers", "heads", "d_model", "d_ffn", "patch_len",
            "context_len", "horizon", "norm", "activation", "attention")}

    @classmethod
    def from_dict(cls, d: dict) -> "ForecasterConfig":
        return cls(**d)


class LinearCapture:
    """Per-forward handles a MaskedLinear leaves behind for gradient extraction."""

    __slots__ = ("x", "xm", "y", "h")

    def __init__(self, x: Tensor, xm: Tensor, y: Tensor, h: Tensor):
        self.x = x      # input before the in-mask
        self.xm = xm    # x ⊙ m_in (gradient of this is dL/d(x_i m_i))
        self.y = y      # affine output before the out-mask, f(x ⊙ m_in)
        self.h = h      # y ⊙ m_out


class ForwardContext:
    """Carries the tape and collects leaves/captures during one forward pass."""

    def __init__(self, tape: Tape | None = None, capture_grads: bool = False):
        self.tape = tape
        self.capture_grads = capture_grads and tape is not None
        self.param_leaves: dict[str, Tensor] = {}
        self.mask_leaves: dict[str, tuple[Tensor, Tensor]] = {}
        self.captures: dict[str, LinearCapture] = {}

    def lift(self, name: str, array: np.ndarray) -> Tensor:
        if self.tape is None:
            return ad.constant(array)
        leaf = self.param_leaves.get(name)
        if leaf is None:
            leaf = self.tape.watch(array)
            self.param_leaves[name] = leaf
        return leaf


class MaskedLinear:
    """Weight matrix + optional bias + binary input/output channel masks."""

    def __init__(self, layer_id: str, w: np.ndarray, b: np.ndarray | None):
        self.layer_id = layer_id
        self.w = np.asarray(w, dtype=np.float64)
        self.b = None if b is None else np.asarray(b, dtype=np.float64)
        self.m_in = np.ones(self.w.shape[0])
        self.m_out = np.ones(self.w.shape[1])

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.layer_id}: input width {x.shape[-1]} != d_in {self.d_in}")
        if ctx.tape is None:
            out = x.data
            if not (self.m_in == 1.0).all():
                out = out * self.m_in
            out = out @ self.w
            if self.b is not None:
                out = out + self.b
            if not (self.m_out == 1.0).all():
                out = out * self.m_out
            return ad.constant(out)

        if self.layer_id not in ctx.mask_leaves:
            ctx.mask_leaves[self.layer_id] = (ctx.tape.watch(self.m_in),
                                              ctx.tape.watch(self.m_out))
        m_in_t, m_out_t = ctx.mask_leaves[self.layer_id]
        xm = ad.mul(x, m_in_t)
        y = ad.matmul(xm, ctx.lift(f"{self.layer_id}.w", self.w))
        if self.b is not None:
            y = ad.add(y, ctx.lift(f"{self.layer_id}.b", self.b))
        h = ad.mul(y, m_out_t)
        if ctx.capture_grads:
            ctx.captures[self.layer_id] = LinearCapture(x, xm, y, h)
        return h

    def folded_forward(self, x: np.ndarray) -> np.ndarray:
        """The right-hand side of the mask identity: x(W ⊙ m_inᵀm_out) + b ⊙ m_out."""
        w = self.w * np.outer(self.m_in, self.m_out)
        out = x @ w
        if self.b is not None:
            out = out + self.b * self.m_out
        return out

    def surviving_weights(self) -> int:
        n = int(self.m_in.sum()) * int(self.m_out.sum())
        if self.b is not None:
            n += int(self.m_out.sum())
        return n

    def total_weights(self) -> int:
        return self.w.size + (0 if self.b is None else self.b.size)


class NormParams:
    """LayerNorm (gain+offset) or RMSNorm (gain only) over the model dim."""

    def __init__(self, name: str, kind: str, d: int, eps: float = NORM_EPS):
        self.name = name
        self.kind = kind
        self.eps = eps
        self.gain = np.ones(d)
        self.offset = np.zeros(d) if kind == "layernorm" else None

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        gain = ctx.lift(f"{self.name}.gain", self.gain)
        if self.kind == "layernorm":
            return ad.layer_norm(x, gain, ctx.lift(f"{self.name}.offset", self.offset),
                                 self.eps)
        return ad.rms_norm(x, gain, self.eps)

    def param_count(self) -> int:
        return self.gain.size + (0 if self.offset is None else self.offset.size)


class Block:
    def __init__(self, index: int, cfg: ForecasterConfig, rng: np.random.Generator):
        d = cfg.d_model
        prefix = f"block{index}"
        std = 1.0 / math.sqrt(d)
        self.wq = MaskedLinear(f"{prefix}.attn.q", rng.normal(0, std, (d, d)), None)
        self.wk = MaskedLinear(f"{prefix}.attn.k", rng.normal(0, std, (d, d)), None)
        self.wv = MaskedLinear(f"{prefix}.attn.v", rng.normal(0, std, (d, d)), np.zeros(d))
        self.wo = MaskedLinear(f"{prefix}.attn.o", rng.normal(0, std, (d, d)), np.zeros(d))
        self.norm1 = NormParams(f"{prefix}.norm1", cfg.norm, d)
        self.norm2 = NormParams(f"{prefix}.norm2", cfg.norm, d)
        self.ffn_up = MaskedLinear(f"{prefix}.ffn.up",
                                   rng.normal(0, std, (d, cfg.d_ffn)), np.zeros(cfg.d_ffn))
        self.ffn_down = MaskedLinear(f"{prefix}.ffn.down",
                                     rng.normal(0, 1.0 / math.sqrt(cfg.d_ffn), (cfg.d_ffn, d)),
                                     np.zeros(d))


class AnalysisCapture:
    """Numpy-side intermediates for the sparsity diagnostics."""

    def __init__(self):
        self.residuals: list[np.ndarray] = []      # per layer: (B, T, d) pre-MHA residual
        self.post_attn: list[np.ndarray] = []      # per layer: (B, T, d) after the MHA add
        self.head_outputs: list[np.ndarray] = []   # per layer: (H, B, T, d)
        self.activations: list[np.ndarray] = []    # per layer: (B, T, d_ffn) post-activation


class ForwardPass:
    """Everything one forward produced: predictions, leaves, captures."""

    def __init__(self, pred_norm: Tensor, mu: np.ndarray, sigma: np.ndarray,
                 tokens: np.ndarray, ctx: ForwardContext,
                 analysis: AnalysisCapture | None):
        self.pred_norm = pred_norm
        self.mu = mu
        self.sigma = sigma
        self.tokens = tokens
        self.ctx = ctx
        self.analysis = analysis

    def denormalized(self) -> np.ndarray:
        return self.pred_norm.data * self.sigma + self.mu

    def normalized_targets(self, targets: np.ndarray) -> np.ndarray:
        """Targets on the model's scale, using the context-window statistics."""
        return (np.atleast_2d(np.asarray(targets, dtype=np.float64)) - self.mu) / self.sigma


class Forecaster:
    """Stack of pre-norm transformer blocks over patch tokens."""

    def __init__(self, cfg: ForecasterConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embed = MaskedLinear(
            "embed", rng.normal(0, 1.0 / math.sqrt(cfg.patch_len),
                                (cfg.patch_len, cfg.d_model)),
            np.zeros(cfg.d_model))
        self.blocks = [Block(i, cfg, rng) for i in range(cfg.layers)]
        self.head = MaskedLinear(
            "head", rng.normal(0, 1.0 / math.sqrt(cfg.d_model),
                               (cfg.d_model, cfg.horizon)),
            np.zeros(cfg.horizon))
        self.ledger = None  # attached by the pruner; serialized with checkpoints

    # ------------------------------------------------------------------ layout

    def masked_linears(self) -> list[MaskedLinear]:
        layers = [self.embed]
        for b in self.blocks:
            layers.extend([b.wq, b.wk, b.wv, b.wo, b.ffn_up, b.ffn_down])
        layers.append(self.head)
        return layers

    def layer_by_id(self, layer_id: str) -> MaskedLinear:
        for layer in self.masked_linears():
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)

    def norms(self) -> list[NormParams]:
        out = []
        for b in self.blocks:
            out.extend([b.norm1, b.norm2])
        return out

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Mutable parameter arrays, deterministic order; masks excluded."""
        out = []
        for layer in self.masked_linears():
            out.append((f"{layer.layer_id}.w", layer.w))
            if layer.b is not None:
                out.append((f"{layer.layer_id}.b", layer.b))
        for norm in self.norms():
            out.append((f"{norm.name}.gain", norm.gain))
            if norm.offset is not None:
                out.append((f"{norm.name}.offset", norm.offset))
        return out

    def head_group(self, head: int) -> slice:
        d_h = self.cfg.head_dim
        return slice(head * d_h, (head + 1) * d_h)

    def total_param_count(self) -> int:
        n = sum(l.total_weights() for l in self.masked_linears())
        return n + sum(norm.param_count() for norm in self.norms())

    def surviving_param_count(self) -> int:
        n = sum(l.surviving_weights() for l in self.masked_linears())
        return n + sum(norm.param_count() for norm in self.norms())

    def param_fraction(self) -> float:
        return self.surviving_param_count() / self.total_param_count()

    # ----------------------------------------------------------------- forward

    def normalize_windows(self, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-window instance normalization with a std floor."""
        windows = np.asarray(windows, dtype=np.float64)
        mu = windows.mean(axis=-1, keepdims=True)
        sigma = np.maximum(windows.std(axis=-1, keepdims=True), STD_FLOOR)
        return (windows - mu) / sigma, mu, sigma

    def forward_batch(self, windows: np.ndarray, tape: Tape | None = None,
                      capture_grads: bool = False,
                      analysis: bool = False) -> ForwardPass:
        """Forward a (B, L) batch of context windows.

        Returns normalized-scale predictions; de-normalization stats ride
        along. With a tape, every parameter and mask becomes a watched leaf.
        """
        windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        cfg = self.cfg
        if windows.shape[-1] != cfg.context_len:
            raise ShapeError(f"window length {windows.shape[-1]} != context {cfg.context_len}")
        norm_w, mu, sigma = self.normalize_windows(windows)

        ctx = ForwardContext(tape, capture_grads)
        cap = AnalysisCapture() if analysis else None
        b = windows.shape[0]
        x = ad.constant(norm_w.reshape(b, cfg.tokens, cfg.patch_len))
        x = self.embed.forward(x, ctx)

        causal = None
        if cfg.attention == "causal":
            t = cfg.tokens
            causal = np.triu(np.full((t, t), NEG_INF), k=1)

        for block in self.blocks:
            if cap is not None:
                cap.residuals.append(x.data.copy())
            x = self._attention(block, x, ctx, causal, cap)
            x = self._ffn(block, x, ctx, cap)

        last = ad.take_token(x, cfg.tokens - 1)
        pred = self.head.forward(last, ctx)
        return ForwardPass(pred, mu, sigma, x.data, ctx, cap)

    def mha_forward(self, block: Block, x: Tensor,
                    ctx: ForwardContext | None = None,
                    causal: np.ndarray | None = None,
                    cap: AnalysisCapture | None = None) -> Tensor:
        """Multi-head scaled dot-product attention over (…, T, d) tokens.

        Per-head outputs summed through the output projection; no residual
        add, no pre-normalization; the block wiring supplies those.
        """
        cfg = self.cfg
        ctx = ctx or ForwardContext()
        x = ad.constant(x)
        q = block.wq.forward(x, ctx)
        k = block.wk.forward(x, ctx)
        v = block.wv.forward(x, ctx)
        inv_scale = 1.0 / math.sqrt(cfg.head_dim)
        contexts = []
        for i in range(cfg.heads):
            g = self.head_group(i)
            qi = ad.slice_last(q, g.start, g.stop)
            ki = ad.slice_last(k, g.start, g.stop)
            vi = ad.slice_last(v, g.start, g.stop)
            scores = ad.scale(ad.matmul(qi, ad.transpose_last2(ki)), inv_scale)
            if causal is not None:
                scores = ad.add(scores, ad.constant(causal))
            attn = ad.softmax_rows(scores)
            contexts.append(ad.matmul(attn, vi))
        ctx_cat = ad.concat_last(contexts)
        if cap is not None:
            cap.head_outputs.append(self._head_outputs(block, contexts))
        return block.wo.forward(ctx_cat, ctx)

    def _attention(self, block: Block, x: Tensor, ctx: ForwardContext,
                   causal: np.ndarray | None, cap: AnalysisCapture | None) -> Tensor:
        xn = block.norm1.forward(x, ctx)
        out = ad.add(x, self.mha_forward(block, xn, ctx, causal, cap))
        if cap is not None:
            cap.post_attn.append(out.data.copy())
        return out

    def _head_outputs(self, block: Block, contexts: list[Tensor]) -> np.ndarray:
        """Per-head contributions o_i to the residual, masks applied (numpy side)."""
        outs = []
        for i, ctx_i in enumerate(contexts):
            g = self.head_group(i)
            ci = ctx_i.data * block.wo.m_in[g]
            outs.append((ci @ block.wo.w[g, :]) * block.wo.m_out)
        return np.stack(outs)

    def _ffn(self, block: Block, x: Tensor, ctx: ForwardContext,
             cap: AnalysisCapture | None) -> Tensor:
        xn = block.norm2.forward(x, ctx)
        up = block.ffn_up.forward(xn, ctx)
        act = ad.relu(up) if self.cfg.activation == "relu" else ad.gelu(up)
        if cap is not None:
            cap.activations.append(act.data.copy())
        down = block.ffn_down.forward(act, ctx)
        return ad.add(x, down)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """De-normalized (B, Hz) predictions, no gradients."""
        fp = self.forward_batch(windows)
        return fp.denormalized()

    def forward_window(self, window: np.ndarray) -> np.ndarray:
        """Forecast the next horizon values for a single length-L window."""
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 1:
            raise ShapeError(f"expected a 1-D window, got shape {window.shape}")
        return self.predict(window[None, :])[0]

    # ------------------------------------------------------------------- misc

    def copy_params_from(self, other: "Forecaster") -> None:
        for (_, dst), (_, src) in zip(self.named_params(), other.named_params()):
            dst[...] = src

    def copy_masks_from(self, other: "Forecaster") -> None:
        for dst, src in zip(self.masked_linears(), other.masked_linears()):
            dst.m_in[...] = src.m_in
            dst.m_out[...] = src.m_out

    def clone(self) -> "Forecaster":
        twin = Forecaster(self.cfg, seed=0)
        twin.copy_params_from(self)
        twin.copy_masks_from(self)
        return twin
