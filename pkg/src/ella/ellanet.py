"""Hop-level relation graph transformer.

Per target node: project the LLM-space tokens into model space, mix the
relation tokens of each hop with a shared pre-LN transformer (type block),
read each hop out against the target token, run the resulting K+1 hop tokens
through a second transformer (hop block), and combine them through a gated
readout into the final embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .encoder import TokenTable
from .hetgraph import HeteroGraph
from .pathstats import hop_types_present
from .tensorcore import Tensor

HEAD_PREFIX = "head/"


@dataclass
class ModelConfig:
    d: int = 128
    heads: int = 4
    type_layers: int = 2
    hop_layers: int = 3
    hops: int = 3
    d_llm: int = 64
    ffn_mult: int = 2

    def __post_init__(self) -> None:
        if self.d % self.heads != 0:
            raise ValueError(f"hidden dim {self.d} not divisible by {self.heads} heads")
        if self.type_layers < 1 or self.hop_layers < 1:
            raise ValueError("layer counts must be >= 1")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "heads": self.heads,
            "type_layers": self.type_layers,
            "hop_layers": self.hop_layers,
            "hops": self.hops,
            "d_llm": self.d_llm,
            "ffn_mult": self.ffn_mult,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """Named parameter tensors; heads live under the ``head/`` prefix."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def backbone(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if not n.startswith(HEAD_PREFIX)}

    def heads(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n.startswith(HEAD_PREFIX)}

    def content_hash(self, names: list[str] | None = None) -> str:
        """SHA-256 over (name, shape, raw bytes) of the selected tensors."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.tensors):
            t = self.tensors[name]
            h.update(name.encode("utf-8"))
            h.update(str(t.shape).encode("utf-8"))
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def restore_values(self, values: dict[str, np.ndarray]) -> None:
        for n, arr in values.items():
            self.tensors[n].data[...] = arr


def _layer_names(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    d, f = cfg.d, cfg.d * cfg.ffn_mult
    dk = cfg.d // cfg.heads
    names: list[tuple[str, tuple[int, ...], int]] = []
    names.append((f"{prefix}/ln1/g", (d,), 0))
    names.append((f"{prefix}/ln1/b", (d,), 0))
    for j in range(cfg.heads):
        names.append((f"{prefix}/attn/q{j}", (d, dk), d))
        names.append((f"{prefix}/attn/k{j}", (d, dk), d))
        names.append((f"{prefix}/attn/v{j}", (d, dk), d))
    names.append((f"{prefix}/attn/o", (d, d), d))
    names.append((f"{prefix}/ln2/g", (d,), 0))
    names.append((f"{prefix}/ln2/b", (d,), 0))
    names.append((f"{prefix}/ffn/w1", (d, f), d))
    names.append((f"{prefix}/ffn/b1", (f,), 0))
    names.append((f"{prefix}/ffn/w2", (f, d), f))
    names.append((f"{prefix}/ffn/b2", (d,), 0))
    return names


def init_params(
    cfg: ModelConfig,
    node_types: list[str],
    class_counts: dict[str, int] | None = None,
    seed: int = 0,
) -> ModelParams:
    """Seeded uniform(+-1/sqrt(fan_in)) init; LayerNorm affine at identity;
    classification heads start at zero (uniform class probabilities)."""
    rng = np.random.default_rng(seed)
    spec: list[tuple[str, tuple[int, ...], int]] = [
        ("proj/W", (cfg.d_llm, cfg.d), cfg.d_llm),
        ("proj/b", (cfg.d,), 0),
    ]
    for l in range(cfg.type_layers):
        spec.extend(_layer_names(f"type/{l}", cfg))
    for l in range(cfg.hop_layers):
        spec.extend(_layer_names(f"hop/{l}", cfg))
    spec.append(("readout/w", (2 * cfg.d, 1), 2 * cfg.d))
    for ntype in sorted(node_types):
        spec.append((f"sim/{ntype}", (cfg.d, cfg.d), cfg.d))

    tensors: dict[str, Tensor] = {}
    for name, shape, fan_in in spec:
        if name.endswith("/g"):
            data = np.ones(shape)
        elif fan_in == 0:
            data = np.zeros(shape)
        else:
            data = tc.uniform_init(rng, shape, fan_in)
        tensors[name] = Tensor(data, requires_grad=True)
    for ntype, n_classes in sorted((class_counts or {}).items()):
        tensors[f"{HEAD_PREFIX}{ntype}"] = Tensor(
            np.zeros((cfg.d, n_classes)), requires_grad=True
        )
    return ModelParams(tensors)


@dataclass
class AttentionCapture:
    """Softmax rows recorded during forward passes, for export and invariants."""

    softmax_rows: list[np.ndarray] = field(default_factory=list)
    alpha: dict[tuple[str, int], tuple[list[str], np.ndarray]] = field(default_factory=dict)
    gamma: dict[str, tuple[list[int], np.ndarray]] = field(default_factory=dict)


# -- blocks -------------------------------------------------------------------


def project(params: ModelParams, x: Tensor) -> Tensor:
    """Affine map from encoder space (n, d_llm) into model space (n, d)."""
    W = params["proj/W"]
    if x.shape[-1] != W.shape[0]:
        raise tc.ShapeError(f"project: input dim {x.shape[-1]} != d_llm {W.shape[0]}")
    return tc.add(tc.matmul(x, W), params["proj/b"])


def _mha(
    params: ModelParams, prefix: str, x: Tensor, heads: int, capture: AttentionCapture | None
) -> Tensor:
    dk = params[f"{prefix}/attn/q0"].shape[1]
    inv_sqrt = 1.0 / np.sqrt(dk)
    outs = []
    for j in range(heads):
        q = tc.matmul(x, params[f"{prefix}/attn/q{j}"])
        k = tc.matmul(x, params[f"{prefix}/attn/k{j}"])
        v = tc.matmul(x, params[f"{prefix}/attn/v{j}"])
        attn = tc.softmax(tc.scale(tc.matmul(q, tc.transpose(k)), inv_sqrt))
        if capture is not None:
            capture.softmax_rows.extend(attn.data.copy())
        outs.append(tc.matmul(attn, v))
    return tc.matmul(tc.concat(outs, axis=1), params[f"{prefix}/attn/o"])


def _ffn(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = tc.relu(tc.add(tc.matmul(x, params[f"{prefix}/ffn/w1"]), params[f"{prefix}/ffn/b1"]))
    return tc.add(tc.matmul(h, params[f"{prefix}/ffn/w2"]), params[f"{prefix}/ffn/b2"])


def _encoder_layer(
    params: ModelParams, prefix: str, x: Tensor, heads: int, capture: AttentionCapture | None
) -> Tensor:
    # pre-LN residual form: x + MHA(LN(x)), then x + FFN(LN(x))
    normed = tc.layer_norm(x, params[f"{prefix}/ln1/g"], params[f"{prefix}/ln1/b"])
    x = tc.add(x, _mha(params, prefix, normed, heads, capture))
    normed = tc.layer_norm(x, params[f"{prefix}/ln2/g"], params[f"{prefix}/ln2/b"])
    return tc.add(x, _ffn(params, prefix, normed))


def type_block(
    params: ModelParams, U: Tensor, cfg: ModelConfig, capture: AttentionCapture | None = None
) -> Tensor:
    """Mix the per-type relation tokens of one hop (shared weights across hops)."""
    if U.shape[0] < 1:
        raise tc.ShapeError("type_block needs at least one token")
    x = U
    for l in range(cfg.type_layers):
        x = _encoder_layer(params, f"type/{l}", x, cfg.heads, capture)
    return x


def type_readout(
    u_proj: Tensor,
    U_hat: Tensor,
    capture: AttentionCapture | None = None,
    capture_key: tuple[str, int] | None = None,
    type_names: list[str] | None = None,
) -> Tensor:
    """Attention of the target token over the mixed type tokens; returns
    the hop feature token as a (1, d) row."""
    if U_hat.shape[0] < 1:
        raise tc.ShapeError("type_readout needs at least one token")
    scores = tc.matmul(u_proj, tc.transpose(U_hat))  # (1, m)
    alpha = tc.softmax(scores)
    if capture is not None:
        capture.softmax_rows.extend(alpha.data.copy())
        if capture_key is not None:
            capture.alpha[capture_key] = (list(type_names or []), alpha.data[0].copy())
    return tc.matmul(alpha, U_hat)


def hop_block(
    params: ModelParams, H: Tensor, cfg: ModelConfig, capture: AttentionCapture | None = None
) -> Tensor:
    """Mix the K+1 hop tokens; position 0 is the target node itself."""
    x = H
    for l in range(cfg.hop_layers):
        x = _encoder_layer(params, f"hop/{l}", x, cfg.heads, capture)
    return x


def hop_readout(
    params: ModelParams,
    H_hat: Tensor,
    capture: AttentionCapture | None = None,
    target: str | None = None,
    hop_ids: list[int] | None = None,
) -> Tensor:
    """Gated combination: z = h0 + sum_j gamma_j * h_j with gamma a softmax of
    per-hop scores of the concatenated (h0 || h_j) pairs. Empty sum for K=0."""
    k_eff = H_hat.shape[0] - 1
    h0 = tc.select_rows(H_hat, [0])
    if k_eff == 0:
        if capture is not None and target is not None:
            capture.gamma[target] = ([], np.zeros(0))
        return h0
    rest = tc.select_rows(H_hat, list(range(1, k_eff + 1)))
    ones = Tensor(np.ones((k_eff, 1)))
    pairs = tc.concat([tc.matmul(ones, h0), rest], axis=1)  # (k_eff, 2d)
    scores = tc.transpose(tc.matmul(pairs, params["readout/w"]))  # (1, k_eff)
    gamma = tc.softmax(scores)
    if capture is not None:
        capture.softmax_rows.extend(gamma.data.copy())
        if target is not None:
            capture.gamma[target] = (list(hop_ids or range(1, k_eff + 1)), gamma.data[0].copy())
    return tc.add(h0, tc.matmul(gamma, rest))


def relation_types_in_table(table: TokenTable, s: str, hop: int) -> list[str]:
    return sorted(t for (sid, h, t) in table.relation_tokens if sid == s and h == hop)


def forward(
    s: str,
    table: TokenTable,
    params: ModelParams,
    cfg: ModelConfig,
    capture: AttentionCapture | None = None,
) -> Tensor:
    """Embed one target node; returns z as a (1, d) tensor.

    Hops with no relation tokens are skipped (isolated nodes collapse to the
    projected node token passing through the hop block alone).
    """
    if s not in table.node_tokens:
        raise KeyError(f"no node token for {s!r}")
    u = Tensor(table.node_tokens[s].reshape(1, -1))
    u_proj = project(params, u)

    hop_tokens: list[Tensor] = []
    hop_ids: list[int] = []
    for hop in range(1, cfg.hops + 1):
        types = relation_types_in_table(table, s, hop)
        if not types:
            continue
        rows = np.stack([table.relation_tokens[(s, hop, t)] for t in types])
        U = project(params, Tensor(rows))
        U_hat = type_block(params, U, cfg, capture)
        h = type_readout(u_proj, U_hat, capture, capture_key=(s, hop), type_names=types)
        hop_tokens.append(h)
        hop_ids.append(hop)

    H = tc.concat([u_proj] + hop_tokens, axis=0) if hop_tokens else u_proj
    H_hat = hop_block(params, H, cfg, capture)
    return hop_readout(params, H_hat, capture, target=s, hop_ids=hop_ids)


def validate_table(g: HeteroGraph, table: TokenTable, targets: list[str], K: int) -> None:
    """Check the table covers every (target, hop, present type); raises naming
    the first missing entry."""
    for s in targets:
        if s not in table.node_tokens:
            raise KeyError(f"no node token for {s!r}")
        for hop in range(1, K + 1):
            for t in hop_types_present(g, s, hop):
                if (s, hop, t) not in table.relation_tokens:
                    raise KeyError(f"missing relation token for {s!r} at (hop {hop}, {t!r})")
