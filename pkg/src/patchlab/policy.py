"""Deterministic toy vision-language-action policies with feature/attention taps.

A policy is vision encoder -> projector -> joint transformer backbone ->
linear action head. The vision encoder has two branches (different widths)
whose outputs are concatenated channel-wise; the backbone runs full
bidirectional attention over [vision tokens ; text tokens] and every
post-softmax attention matrix is kept on the trace. All linear maps are
bias-free and weights are drawn from one seeded generator, so construction
is bit-reproducible and two specs with different seeds share nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = [
    "PolicySpec",
    "Instruction",
    "FeaturePair",
    "ForwardTrace",
    "Policy",
    "build_policy",
    "SURROGATE_SPEC",
    "VICTIM_SPEC",
]


@dataclass(frozen=True)
class PolicySpec:
    seed: int
    height: int = 32
    width: int = 32
    grid: int = 8
    branch_dims: tuple[int, int] = (16, 16)
    vision_depth: int = 2
    token_dim: int = 32
    depth: int = 4
    heads: int = 4
    vocab: int = 1024
    action_dim: int = 7

    def validate(self) -> None:
        if self.height % self.grid or self.width % self.grid:
            raise ValueError(
                f"frame {self.height}x{self.width} not divisible by grid {self.grid}"
            )
        if self.token_dim % self.heads:
            raise ValueError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}"
            )
        if min(self.branch_dims) < 2 or self.token_dim < 2 or self.vocab < 2:
            raise ValueError("branch widths, token dim, and vocab must all be >= 2")
        if self.depth < 1 or self.vision_depth < 1 or self.heads < 1 or self.action_dim < 1:
            raise ValueError("depths, heads, and action dim must be positive")

    @property
    def n_vision_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def cell_dim(self) -> int:
        return (self.height // self.grid) * (self.width // self.grid) * 3


SURROGATE_SPEC = PolicySpec(seed=0)
VICTIM_SPEC = PolicySpec(
    seed=1000, branch_dims=(24, 8), vision_depth=3, token_dim=48, depth=3, heads=6
)


@dataclass(frozen=True)
class Instruction:
    text: str
    ids: tuple[int, ...]


class FeaturePair(NamedTuple):
    """Projector output per vision token plus its unnormalized token mean."""

    tokens: Var
    pooled: Var


@dataclass
class ForwardTrace:
    """One forward pass with every tensor the attack losses need."""

    e_v: Var
    z_v: Var
    text_states: Var
    attention: tuple[Var, ...]  # per layer, heads x S x S, post-softmax
    action: Var
    n_vision: int
    n_text: int

    def attention_stack(self) -> np.ndarray:
        return np.stack([a.value for a in self.attention])

    def detach(self) -> "ForwardTrace":
        """Constant copy: same values, no graph links (cheap to mix into losses)."""
        return ForwardTrace(
            e_v=Var(self.e_v.value),
            z_v=Var(self.z_v.value),
            text_states=Var(self.text_states.value),
            attention=tuple(Var(a.value) for a in self.attention),
            action=Var(self.action.value),
            n_vision=self.n_vision,
            n_text=self.n_text,
        )


def _fnv1a(word: str) -> int:
    h = 0xCBF29CE484222325
    for b in word.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _draw_params(spec: PolicySpec) -> dict[str, np.ndarray]:
    """Draw every weight matrix in a fixed, documented order.

    Order: per vision branch (embed, then per block wq wk wv wo w1 w2),
    projector, text embedding table, per backbone layer (wq wk wv wo w1
    w2), action head. Regenerating with the same spec is bit-identical.
    """
    rng = np.random.default_rng(spec.seed)
    params: dict[str, np.ndarray] = {}
    for b, width in enumerate(spec.branch_dims):
        params[f"v{b}.embed"] = _glorot(rng, spec.cell_dim, width)
        for blk in range(spec.vision_depth):
            for name in ("wq", "wk", "wv", "wo"):
                params[f"v{b}.{blk}.{name}"] = _glorot(rng, width, width)
            params[f"v{b}.{blk}.w1"] = _glorot(rng, width, 2 * width)
            params[f"v{b}.{blk}.w2"] = _glorot(rng, 2 * width, width)
    fused = sum(spec.branch_dims)
    params["proj"] = _glorot(rng, fused, spec.token_dim)
    params["embed"] = _glorot(rng, spec.vocab, spec.token_dim)
    for layer in range(spec.depth):
        for name in ("wq", "wk", "wv", "wo"):
            params[f"b{layer}.{name}"] = _glorot(rng, spec.token_dim, spec.token_dim)
        params[f"b{layer}.w1"] = _glorot(rng, spec.token_dim, 2 * spec.token_dim)
        params[f"b{layer}.w2"] = _glorot(rng, 2 * spec.token_dim, spec.token_dim)
    params["act"] = _glorot(rng, spec.token_dim, spec.action_dim)
    return params


def _mlp(x: Var, w1: Var, w2: Var) -> Var:
    h = ad.layer_norm(x, 1.0, 0.0)
    return ad.add(x, ad.matmul(ad.relu(ad.matmul(h, w1)), w2))


def _single_head_block(x: Var, p: dict, prefix: str) -> Var:
    h = ad.layer_norm(x, 1.0, 0.0)
    q, k, v = (ad.matmul(h, p[f"{prefix}.{n}"]) for n in ("wq", "wk", "wv"))
    scale = 1.0 / math.sqrt(q.value.shape[-1])
    attn = ad.softmax(ad.mul(ad.matmul(q, ad.transpose(k, (1, 0))), scale), axis=-1)
    x = ad.add(x, ad.matmul(ad.matmul(attn, v), p[f"{prefix}.wo"]))
    return _mlp(x, p[f"{prefix}.w1"], p[f"{prefix}.w2"])


def _multi_head_layer(x: Var, p: dict, prefix: str, heads: int) -> tuple[Var, Var]:
    seq, dim = x.value.shape
    head_dim = dim // heads
    h = ad.layer_norm(x, 1.0, 0.0)

    def split(m: Var) -> Var:
        return ad.transpose(ad.reshape(m, (seq, heads, head_dim)), (1, 0, 2))

    q, k, v = (split(ad.matmul(h, p[f"{prefix}.{n}"])) for n in ("wq", "wk", "wv"))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(head_dim))
    attn = ad.softmax(scores, axis=-1)  # heads x S x S
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (seq, dim))
    x = ad.add(x, ad.matmul(ctx, p[f"{prefix}.wo"]))
    return _mlp(x, p[f"{prefix}.w1"], p[f"{prefix}.w2"]), attn


class Policy:
    """Immutable toy VLA; use :func:`build_policy` to construct one."""

    def __init__(self, spec: PolicySpec, label: str = "policy"):
        spec.validate()
        self.spec = spec
        self.label = label
        self.params = {k: Var(v) for k, v in _draw_params(spec).items()}
        self.access_count = 0

    def tokenize(self, text: str) -> Instruction:
        """Lowercase, split on whitespace, FNV-1a hash each word into the vocab."""
        words = text.lower().split()
        if not words:
            raise ValueError("cannot tokenize empty instruction")
        return Instruction(text=text, ids=tuple(_fnv1a(w) % self.spec.vocab for w in words))

    def _patchify(self, x: Var) -> Var:
        s = self.spec
        ch, cw = s.height // s.grid, s.width // s.grid
        cells = ad.reshape(x, (s.grid, ch, s.grid, cw, 3))
        cells = ad.transpose(cells, (0, 2, 1, 3, 4))
        return ad.reshape(cells, (s.n_vision_tokens, s.cell_dim))

    def _vision(self, x: Var) -> tuple[Var, Var]:
        """Two-branch encoder plus projector; returns (E_v, Z_v)."""
        self.access_count += 1
        if x.value.shape != (self.spec.height, self.spec.width, 3):
            raise ValueError(
                f"image shape {x.value.shape} does not match spec "
                f"{(self.spec.height, self.spec.width, 3)}"
            )
        cells = self._patchify(x)
        outs = []
        for b in range(len(self.spec.branch_dims)):
            h = ad.matmul(cells, self.params[f"v{b}.embed"])
            for blk in range(self.spec.vision_depth):
                h = _single_head_block(h, self.params, f"v{b}.{blk}")
            outs.append(h)
        e_v = ad.concat(outs, axis=1)
        z_v = ad.matmul(e_v, self.params["proj"])
        return e_v, z_v

    def features(self, x) -> FeaturePair:
        """Projector features and their token mean (instruction-independent)."""
        _, z_v = self._vision(ad.as_var(x))
        return FeaturePair(tokens=z_v, pooled=ad.vmean(z_v, axis=0))

    def forward(self, x, instr: Instruction) -> ForwardTrace:
        """Full pass: vision, joint backbone over [Z_v ; text], action head."""
        s = self.spec
        x = ad.as_var(x)
        if not instr.ids:
            raise ValueError("instruction has no tokens")
        if max(instr.ids) >= s.vocab:
            raise ValueError("token id out of vocabulary range")
        e_v, z_v = self._vision(x)
        text = Var(self.params["embed"].value[np.asarray(instr.ids, dtype=np.intp)])
        seq = ad.concat([z_v, text], axis=0)
        attn_maps = []
        for layer in range(s.depth):
            seq, attn = _multi_head_layer(seq, self.params, f"b{layer}", s.heads)
            attn_maps.append(attn)
        n_text = len(instr.ids)
        text_states = ad.take(seq, np.arange(s.n_vision_tokens, s.n_vision_tokens + n_text), axis=0)
        pooled = ad.reshape(ad.vmean(seq, axis=0), (1, s.token_dim))
        action = ad.reshape(ad.matmul(pooled, self.params["act"]), (s.action_dim,))
        return ForwardTrace(
            e_v=e_v,
            z_v=z_v,
            text_states=text_states,
            attention=tuple(attn_maps),
            action=action,
            n_vision=s.n_vision_tokens,
            n_text=n_text,
        )

    def text_anchor(self, phrase: str) -> np.ndarray:
        """Unit vector for a probe phrase: mean last-layer text states on a
        fixed all-gray frame (the neutral-image convention, recorded in run
        manifests)."""
        instr = self.tokenize(phrase)
        gray = np.full((self.spec.height, self.spec.width, 3), 0.5)
        trace = self.forward(gray, instr)
        anchor = trace.text_states.value.mean(axis=0)
        norm = np.linalg.norm(anchor)
        if norm < 1e-12:
            raise ValueError(f"degenerate text anchor for phrase {phrase!r}")
        return anchor / norm


def build_policy(spec: PolicySpec, label: str = "policy") -> Policy:
    return Policy(spec, label=label)
