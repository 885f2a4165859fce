"""Hierarchical anisotropic message-passing network for mesh dynamics.

The network follows an encode-process-decode layout. On the way down, each
level runs one anisotropic message-passing (AMP) pass whose learned per-edge
importance weights are softmax-normalized over every node's incoming edges;
a probability head drives stochastic node selection (Gumbel-Softmax with a
straight-through estimator) that builds the next, coarser graph level after
K-hop edge enhancement. REDUCE/EXPAND move features between levels reusing
the same importance weights, and a FeatureMixing pass merges the up-sampled
features with the pre-downsampling state through a skip connection.

Ablation variants:
  DHMP  dynamic hierarchy, learned inter-level weights
  M1    static hierarchy (BFS stride-2), uniform inter-level weights
  M2    static hierarchy, learned inter-level weights
  M3    dynamic hierarchy, uniform inter-level weights
  FLAT  single level, a fixed stack of AMP passes, no hierarchy
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, MeshError, ShapeError
from .meshgraph import (
    CoarseGraph,
    GraphView,
    coarse_graph_view,
    compute_edge_offsets,
    k_hop_closure,
    restrict_to_selected,
)

VARIANTS = ("DHMP", "M1", "M2", "M3", "FLAT")
MODES = ("eulerian", "lagrangian")

_GUMBEL_STREAM = 0x67756D62  # stream tag for keep/drop noise


@dataclass
class ModelConfig:
    variant: str = "DHMP"
    levels: int = 3
    hops: int = 2
    width: int = 128
    hidden: Optional[int] = None   # MLP hidden size; defaults to width
    node_in_width: int = 4
    out_width: int = 1
    mode: str = "eulerian"
    passes_per_level: int = 1      # AMP passes per level per direction
    flat_passes: int = 15
    raw_alpha: bool = False        # keep sub-unit inter-level weight mass
    tau0: float = 5.0
    tau_min: float = 0.1
    gamma: float = 0.999

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant == "FLAT" and self.levels != 1:
            raise ConfigError("FLAT forces levels=1")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.hops < 1:
            raise ConfigError(f"hops must be >= 1, got {self.hops}")
        if self.passes_per_level < 1:
            raise ConfigError("passes_per_level must be >= 1")

    @property
    def hidden_width(self) -> int:
        return self.width if self.hidden is None else self.hidden

    @property
    def offset_width(self) -> int:
        return 3 if self.mode == "eulerian" else 6

    @property
    def dynamic_hierarchy(self) -> bool:
        return self.variant in ("DHMP", "M3")

    @property
    def learned_inter_level(self) -> bool:
        return self.variant in ("DHMP", "M2")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "levels": self.levels, "hops": self.hops,
            "width": self.width, "hidden": self.hidden,
            "node_in_width": self.node_in_width, "out_width": self.out_width,
            "mode": self.mode, "passes_per_level": self.passes_per_level,
            "flat_passes": self.flat_passes, "raw_alpha": self.raw_alpha,
            "tau0": self.tau0, "tau_min": self.tau_min, "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


class ParamStore:
    """Ordered, named parameter registry (checkpoint layout authority)."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng([seed])
        self.names: list[str] = []
        self.tensors: list[Tensor] = []

    def _register(self, name: str, tensor: Tensor) -> Tensor:
        self.names.append(name)
        self.tensors.append(tensor)
        return tensor

    def weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return self._register(name, ad.parameter(data))

    def zeros(self, name: str, rows: int, cols: int) -> Tensor:
        return self._register(name, ad.parameter(np.zeros((rows, cols))))

    def ones(self, name: str, rows: int, cols: int) -> Tensor:
        return self._register(name, ad.parameter(np.ones((rows, cols))))


@dataclass
class Mlp:
    """Two-layer MLP with ReLU; layer normalization is applied by callers."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


@dataclass
class AmpLayerParams:
    edge_update: Mlp            # (e, v_dst, v_src) -> edge latent
    edge_norm: LayerNormParams
    node_update: Mlp            # (v, message) -> node latent [+ keep logit]
    node_norm: LayerNormParams  # over the feature columns only
    weight_net: Mlp             # (e, v_dst, v_src) -> scalar, no norm
    with_prob_head: bool


def _make_mlp(store: ParamStore, name: str, n_in: int, hidden: int, n_out: int) -> Mlp:
    return Mlp(
        w1=store.weight(f"{name}.w1", n_in, hidden),
        b1=store.zeros(f"{name}.b1", 1, hidden),
        w2=store.weight(f"{name}.w2", hidden, n_out),
        b2=store.zeros(f"{name}.b2", 1, n_out),
    )


def _make_norm(store: ParamStore, name: str, width: int) -> LayerNormParams:
    return LayerNormParams(
        gain=store.ones(f"{name}.gain", 1, width),
        bias=store.zeros(f"{name}.bias", 1, width),
    )


def _make_amp(store: ParamStore, name: str, width: int, hidden: int,
              with_prob_head: bool) -> AmpLayerParams:
    f = width
    return AmpLayerParams(
        edge_update=_make_mlp(store, f"{name}.edge_update", 3 * f, hidden, f),
        edge_norm=_make_norm(store, f"{name}.edge_norm", f),
        node_update=_make_mlp(store, f"{name}.node_update", 2 * f, hidden,
                              f + (1 if with_prob_head else 0)),
        node_norm=_make_norm(store, f"{name}.node_norm", f),
        weight_net=_make_mlp(store, f"{name}.weight_net", 3 * f, hidden, 1),
        with_prob_head=with_prob_head,
    )


@dataclass
class Model:
    config: ModelConfig
    store: ParamStore
    node_encoder: Mlp
    node_encoder_norm: LayerNormParams
    edge_encoder: Mlp
    edge_encoder_norm: LayerNormParams
    coarse_edge_encoder: Optional[Mlp]
    coarse_edge_encoder_norm: Optional[LayerNormParams]
    down: list    # per level: list of AmpLayerParams (selection pass last)
    bottom: list  # AmpLayerParams stack (FLAT: the whole trunk)
    up: list      # per level: list of AmpLayerParams for feature mixing
    decoder: Mlp

    def parameters(self) -> list[Tensor]:
        return list(self.store.tensors)

    def param_names(self) -> list[str]:
        return list(self.store.names)

    def forward(self, graph, node_fields, temperature, noise=None,
                select_mode="hard", level1_closure=None):
        return forward(self, graph, node_fields, temperature, noise,
                       select_mode, level1_closure)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    store = ParamStore(seed)
    f, hidden = config.width, config.hidden_width
    node_encoder = _make_mlp(store, "node_encoder", config.node_in_width, hidden, f)
    node_encoder_norm = _make_norm(store, "node_encoder_norm", f)
    edge_encoder = _make_mlp(store, "edge_encoder", config.offset_width, hidden, f)
    edge_encoder_norm = _make_norm(store, "edge_encoder_norm", f)

    coarse_enc = coarse_norm = None
    if config.variant != "FLAT" and config.levels > 1:
        coarse_enc = _make_mlp(store, "coarse_edge_encoder", config.offset_width, hidden, f)
        coarse_norm = _make_norm(store, "coarse_edge_encoder_norm", f)

    down, up = [], []
    if config.variant == "FLAT":
        bottom = [_make_amp(store, f"flat{j}", f, hidden, False)
                  for j in range(config.flat_passes)]
    else:
        head = config.dynamic_hierarchy
        for l in range(config.levels - 1):
            stack = [_make_amp(store, f"down{l}_pre{j}", f, hidden, False)
                     for j in range(config.passes_per_level - 1)]
            stack.append(_make_amp(store, f"down{l}", f, hidden, head))
            down.append(stack)
        bottom = [_make_amp(store, f"bottom{j}", f, hidden, False)
                  for j in range(config.passes_per_level)]
        for l in range(config.levels - 1):
            up.append([_make_amp(store, f"up{l}_mix{j}", f, hidden, False)
                       for j in range(config.passes_per_level)])
    decoder = _make_mlp(store, "decoder", f, hidden, config.out_width)
    return Model(config, store, node_encoder, node_encoder_norm,
                 edge_encoder, edge_encoder_norm, coarse_enc, coarse_norm,
                 down, bottom, up, decoder)


# ---------------------------------------------------------------------------
# noise sources: callables (level, fine_ids, n_level1) -> (n, 2) uniforms
# keyed by the original level-1 node id, so permuting a mesh permutes the
# per-node noise stream with it.

def seeded_noise(*key: int) -> Callable:
    def fn(level: int, fine_ids: np.ndarray, n_level1: int):
        rng = np.random.default_rng([_GUMBEL_STREAM, *[int(k) & 0x7FFFFFFF for k in key], level])
        return rng.random((n_level1, 2))[fine_ids]
    return fn


def zero_noise(level: int, fine_ids: np.ndarray, n_level1: int):
    """Exactly zero Gumbel noise: selection becomes a deterministic argmax."""
    return None


# ---------------------------------------------------------------------------


@dataclass
class LatentGraph:
    graph: object   # MeshGraph or GraphView
    nodes: Tensor   # (N, F)
    edges: Tensor   # (E, F)


@dataclass
class HierarchyLevel:
    level: int
    keep_probs: np.ndarray        # (N_fine,)
    keep_mask: np.ndarray         # (N_fine,) bool
    alpha: Tensor                 # (E_fine, 1) in canonical edge order
    z: Tensor                     # (N_fine, 1) selection gate
    coarse: CoarseGraph
    fine_graph: object
    coarse_graph: GraphView
    fine_ids: np.ndarray          # level-1 ancestor ids of fine nodes
    coarse_fine_ids: np.ndarray   # level-1 ancestor ids of coarse nodes


@dataclass
class LayerAlpha:
    label: str
    alpha: Tensor        # canonical edge order
    dst: np.ndarray      # receiving node per edge
    node_count: int


@dataclass
class AmpOut:
    latent: LatentGraph
    alpha: Tensor
    keep_logits: Optional[Tensor]
    keep_probs: Optional[Tensor]


@dataclass
class ForwardResult:
    prediction: Tensor
    levels: list
    layer_alphas: list = field(default_factory=list)


def encode(model: Model, graph, node_fields: np.ndarray, offsets=None) -> LatentGraph:
    """Map raw node fields and edge offsets into the latent space."""
    cfg = model.config
    fields = np.asarray(node_fields, dtype=np.float64)
    if fields.ndim != 2 or fields.shape != (graph.node_count, cfg.node_in_width):
        raise ShapeError(
            f"node fields must be ({graph.node_count}, {cfg.node_in_width}), "
            f"got {fields.shape}"
        )
    if offsets is None:
        offsets = compute_edge_offsets(graph, cfg.mode).values
    v = model.node_encoder_norm(model.node_encoder(Tensor(fields)))
    e = model.edge_encoder_norm(model.edge_encoder(Tensor(offsets)))
    return LatentGraph(graph, v, e)


def _encode_coarse_edges(model: Model, view: GraphView) -> Tensor:
    offsets = compute_edge_offsets(view, model.config.mode).values
    return model.coarse_edge_encoder_norm(model.coarse_edge_encoder(Tensor(offsets)))


def amp_forward(latent: LatentGraph, params: AmpLayerParams) -> AmpOut:
    """One anisotropic message-passing pass with residual connections."""
    graph = latent.graph
    edges = graph.directed_edges
    src, dst = edges[:, 0], edges[:, 1]
    if len(np.unique(dst)) != graph.node_count:
        raise MeshError("every node needs an incident edge (self-loops missing?)")
    f = latent.nodes.data.shape[1]

    mix = ad.concat_cols(latent.edges,
                         ad.gather_rows(latent.nodes, dst),
                         ad.gather_rows(latent.nodes, src))
    e_hat = params.edge_norm(params.edge_update(mix))
    w = params.weight_net(mix)

    # softmax over each node's incoming edges; scatter in dst-sorted order
    order = np.lexsort((src, dst))
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    dst_sorted = dst[order]
    alpha_sorted = ad.segment_softmax(ad.gather_rows(w, order), dst_sorted)
    messages = ad.elementwise_mul(alpha_sorted, ad.gather_rows(e_hat, order))
    m = ad.scatter_add_rows(messages, dst_sorted, graph.node_count)

    out = params.node_update(ad.concat_cols(latent.nodes, m))
    keep_logits = keep_probs = None
    if params.with_prob_head:
        feats = params.node_norm(ad.slice_cols(out, 0, f))
        keep_logits = ad.slice_cols(out, f, f + 1)
        keep_probs = ad.sigmoid(keep_logits)
    else:
        feats = params.node_norm(out)

    nodes = ad.add(latent.nodes, feats)
    e_res = ad.add(latent.edges, e_hat)
    alpha = ad.gather_rows(alpha_sorted, inv)
    return AmpOut(LatentGraph(graph, nodes, e_res), alpha, keep_logits, keep_probs)


def bfs_stride2_mask(edges: np.ndarray, node_count: int) -> np.ndarray:
    """Static selection: keep every other node of a BFS ordering from node 0."""
    nbrs = [[] for _ in range(node_count)]
    for s, d in edges:
        if s != d:
            nbrs[int(s)].append(int(d))
    seen = np.zeros(node_count, dtype=bool)
    order = []
    for root in range(node_count):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in nbrs[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    mask = np.zeros(node_count, dtype=bool)
    mask[np.asarray(order[0::2], dtype=np.int64)] = True
    return mask


def select_and_coarsen(keep_logits: Tensor, keep_probs: np.ndarray, edges: np.ndarray,
                       hops: int, temperature: float, uniforms, select_mode: str,
                       closure=None):
    """Sample a keep mask and build the coarse graph over the K-hop closure.

    Falls back to force-keeping the highest-probability node (lowest index on
    ties) when the sample would drop every node.
    """
    n = keep_logits.data.shape[0]
    out = ad.gumbel_softmax_st(keep_logits, Tensor(np.zeros((n, 1))), temperature,
                               uniforms, hard=(select_mode != "soft"))
    z, mask = out.z, out.keep_mask.copy()
    if not mask.any():
        forced = int(np.argmax(keep_probs))
        mask[forced] = True
        bump = np.zeros((n, 1))
        bump[forced, 0] = 1.0 - z.data[forced, 0]
        z = ad.add(z, Tensor(bump))
    if closure is None:
        closure = k_hop_closure(edges, hops)
    coarse = restrict_to_selected(closure, mask)
    return z, mask, coarse


def _inter_level_weights(level: HierarchyLevel, learned: bool) -> Tensor:
    if learned:
        return level.alpha
    return Tensor(np.ones((level.fine_graph.directed_edges.shape[0], 1)))


def reduce_level(fine: LatentGraph, level: HierarchyLevel, model: Model) -> LatentGraph:
    """Aggregate fine node features into the selected coarse nodes.

    Each coarse node averages its fine in-neighbors' features with weights
    alpha * z renormalized over the contributing (selected) neighbors, so the
    aggregation stays affine while gradients reach the selection gate.
    """
    cfg = model.config
    edges = level.fine_graph.directed_edges
    src, dst = edges[:, 0], edges[:, 1]
    w = _inter_level_weights(level, cfg.learned_inter_level)
    gate = ad.elementwise_mul(w, ad.gather_rows(level.z, src))
    contrib = ad.elementwise_mul(gate, ad.gather_rows(fine.nodes, src))
    num = ad.scatter_add_rows(contrib, dst, level.fine_graph.node_count)
    sel = level.coarse.fine_index_of
    num_c = ad.gather_rows(num, sel)
    if cfg.raw_alpha:
        coarse_nodes = num_c
    else:
        den = ad.scatter_add_rows(gate, dst, level.fine_graph.node_count)
        coarse_nodes = ad.div(num_c, ad.gather_rows(den, sel))
    coarse_edges = _encode_coarse_edges(model, level.coarse_graph)
    return LatentGraph(level.coarse_graph, coarse_nodes, coarse_edges)


def expand_level(coarse_nodes: Tensor, level: HierarchyLevel, model: Model) -> Tensor:
    """Unpool coarse features back to the fine level.

    Fine nodes average the features of their selected in-neighbors with the
    recorded weights; fine nodes with no selected neighbor get zeros (later
    repaired by the FeatureMixing skip connection).
    """
    cfg = model.config
    edges = level.fine_graph.directed_edges
    src, dst = edges[:, 0], edges[:, 1]
    n_fine = level.fine_graph.node_count
    keep = level.keep_mask[src]
    idx = np.flatnonzero(keep)
    coarse_of = np.full(n_fine, -1, dtype=np.int64)
    coarse_of[level.coarse.fine_index_of] = np.arange(level.coarse.node_count)

    w = _inter_level_weights(level, cfg.learned_inter_level)
    gate = ad.elementwise_mul(ad.gather_rows(w, idx),
                              ad.gather_rows(level.z, src[idx]))
    vc = ad.gather_rows(coarse_nodes, coarse_of[src[idx]])
    contrib = ad.elementwise_mul(gate, vc)
    num = ad.scatter_add_rows(contrib, dst[idx], n_fine)
    if cfg.raw_alpha:
        return num
    den = ad.scatter_add_rows(gate, dst[idx], n_fine)
    orphan = (den.data == 0.0).astype(np.float64)  # structural zeros stay zero
    return ad.div(num, ad.add(den, Tensor(orphan)))


def feature_mixing(expanded_nodes: Tensor, pre: LatentGraph,
                   params: AmpLayerParams):
    """AMP pass over the expanded features plus the pre-downsampling skip."""
    if expanded_nodes.data.shape != pre.nodes.data.shape:
        raise ShapeError("feature_mixing: expanded/pre latents differ in shape")
    out = amp_forward(LatentGraph(pre.graph, expanded_nodes, pre.edges), params)
    mixed = ad.add(out.latent.nodes, pre.nodes)
    return LatentGraph(pre.graph, mixed, out.latent.edges), out.alpha


def forward(model: Model, graph, node_fields, temperature: float,
            noise=None, select_mode: str = "hard",
            level1_closure=None) -> ForwardResult:
    """Full pass: encode, down/up over the hierarchy, decode per-node outputs."""
    cfg = model.config
    if select_mode not in ("hard", "soft"):
        raise ConfigError(f"select_mode must be 'hard' or 'soft', got {select_mode!r}")
    if noise is None:
        noise = zero_noise
    latent = encode(model, graph, node_fields)
    alphas: list[LayerAlpha] = []
    n_level1 = graph.node_count

    def log_alpha(label, out_alpha, g):
        alphas.append(LayerAlpha(label, out_alpha, g.directed_edges[:, 1].copy(),
                                 g.node_count))

    if cfg.variant == "FLAT":
        for j, params in enumerate(model.bottom):
            out = amp_forward(latent, params)
            log_alpha(f"flat{j}", out.alpha, latent.graph)
            latent = out.latent
        pred = model.decoder(latent.nodes)
        return ForwardResult(pred, [], alphas)

    levels: list[HierarchyLevel] = []
    skips: list[LatentGraph] = []
    fine_ids = np.arange(graph.node_count, dtype=np.int64)

    for l in range(cfg.levels - 1):
        for j, params in enumerate(model.down[l][:-1]):
            out = amp_forward(latent, params)
            log_alpha(f"down{l}_pre{j}", out.alpha, latent.graph)
            latent = out.latent
        out = amp_forward(latent, model.down[l][-1])
        log_alpha(f"down{l}", out.alpha, latent.graph)
        latent = out.latent
        g = latent.graph

        if cfg.dynamic_hierarchy:
            probs = out.keep_probs.data[:, 0].copy()
            z, mask, coarse = select_and_coarsen(
                out.keep_logits, probs, g.directed_edges, cfg.hops, temperature,
                noise(l + 1, fine_ids, n_level1), select_mode,
                closure=level1_closure if l == 0 else None,
            )
        else:
            closure = level1_closure if l == 0 else None
            if closure is None:
                closure = k_hop_closure(g.directed_edges, cfg.hops)
            mask = bfs_stride2_mask(g.directed_edges, g.node_count)
            probs = np.full(g.node_count, 0.5)
            z = Tensor(mask.astype(np.float64).reshape(-1, 1))
            coarse = restrict_to_selected(closure, mask)

        level = HierarchyLevel(
            level=l + 1, keep_probs=probs, keep_mask=mask, alpha=out.alpha, z=z,
            coarse=coarse, fine_graph=g,
            coarse_graph=coarse_graph_view(g, coarse),
            fine_ids=fine_ids, coarse_fine_ids=fine_ids[coarse.fine_index_of],
        )
        levels.append(level)
        skips.append(latent)
        latent = reduce_level(latent, level, model)
        fine_ids = level.coarse_fine_ids

    for j, params in enumerate(model.bottom):
        out = amp_forward(latent, params)
        log_alpha(f"bottom{j}", out.alpha, latent.graph)
        latent = out.latent

    for l in range(cfg.levels - 2, -1, -1):
        expanded = expand_level(latent.nodes, levels[l], model)
        latent, mix_alpha = feature_mixing(expanded, skips[l], model.up[l][0])
        log_alpha(f"up{l}_mix0", mix_alpha, latent.graph)
        for j, params in enumerate(model.up[l][1:], start=1):
            out = amp_forward(latent, params)
            log_alpha(f"up{l}_mix{j}", out.alpha, latent.graph)
            latent = out.latent

    pred = model.decoder(latent.nodes)
    return ForwardResult(pred, levels, alphas)
