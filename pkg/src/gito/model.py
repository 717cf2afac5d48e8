"""End-to-end model assembly and its configuration schema.

A configured model owns per-branch graph specs, one node/edge encoder pair
per input function plus one for the query branch, a stack of hybrid graph
transformer blocks on the query branch, the transformer neural operator,
and the decoder.  Construction is deterministic in the seed.

Graph topology is built on raw coordinates (so k/radius keep dataset
units); features and gating consume z-scored coordinates and values.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field, fields, replace

import numpy as np

from gito.autodiff import Tensor, no_grad
from gito.graphs import GraphSpec, PointCloud, build_knn_graph, build_radius_graph, compute_features
from gito.hgt import HgtBlock
from gito.layers import MLP, Module, ModuleList
from gito.tno import Decoder, TnoStack

__all__ = ["ModelConfig", "Sample", "NormStats", "GitoModel", "build_model",
           "NS_CONFIG", "HEAT_CONFIG", "AIRFOIL_CONFIG", "no_fusion_variant"]

_BOOL_FIELDS = {"apply_hgt_to_inputs", "use_fusion", "tno_self_attention", "hgt_moe"}


@dataclass
class ModelConfig:
    """All architecture hyperparameters plus graph-construction strategy."""

    hidden_size: int = 32
    n_heads: int = 4
    n_experts: int = 2
    n_attention_layers: int = 2
    n_hgt_blocks: int | None = None          # defaults to n_attention_layers
    mlp_layers: int = 2
    mlp_hidden: int | None = None            # defaults to hidden_size
    activation: str = "gelu"
    query_graph: str = "knn:4"
    input_graph: str = "knn:4"
    apply_hgt_to_inputs: bool = False
    input_function_count: int = 1
    input_channels: tuple = (1,)             # value channels per input function
    output_field_count: int = 1
    precision: str = "float32"
    coord_dim: int = 2
    fusion_ffn_mult: int = 7
    use_fusion: bool = True
    tno_self_attention: bool = True
    hgt_moe: bool = True

    def __post_init__(self):
        if isinstance(self.input_channels, (list, tuple)):
            self.input_channels = tuple(int(c) for c in self.input_channels)
        else:
            self.input_channels = (int(self.input_channels),)
        self.validate()

    def validate(self):
        counts = {
            "hidden_size": self.hidden_size,
            "n_heads": self.n_heads,
            "n_experts": self.n_experts,
            "n_attention_layers": self.n_attention_layers,
            "mlp_layers": self.mlp_layers,
            "input_function_count": self.input_function_count,
            "output_field_count": self.output_field_count,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.hidden_size % self.n_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} must be divisible by n_heads {self.n_heads}"
            )
        if self.activation != "gelu":
            raise ValueError("activation is fixed to gelu")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if len(self.input_channels) != self.input_function_count:
            raise ValueError(
                f"input_channels has {len(self.input_channels)} entries for "
                f"{self.input_function_count} input functions"
            )
        if self.coord_dim not in (2, 3):
            raise ValueError(f"coord_dim must be 2 or 3, got {self.coord_dim}")
        GraphSpec.parse(self.query_graph)
        GraphSpec.parse(self.input_graph)

    @property
    def hgt_blocks(self):
        return self.n_attention_layers if self.n_hgt_blocks is None else self.n_hgt_blocks

    @property
    def ffn_hidden(self):
        return self.hidden_size if self.mlp_hidden is None else self.mlp_hidden

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name}={v}")
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            if key in _BOOL_FIELDS:
                kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes")
            elif key == "input_channels":
                kwargs[key] = tuple(int(x) for x in str(raw).split(",") if x != "")
            elif key in ("activation", "precision", "query_graph", "input_graph"):
                kwargs[key] = str(raw)
            else:
                kwargs[key] = int(raw)
        return cls(**kwargs)

    def config_keys(self):
        return {f.name for f in fields(self)}


def no_fusion_variant(cfg: ModelConfig) -> ModelConfig:
    """Ablation twin: fusion replaced by a sum-MLP, hidden width doubled."""
    return replace(
        cfg,
        hidden_size=2 * cfg.hidden_size,
        mlp_hidden=2 * cfg.ffn_hidden,
        use_fusion=False,
    )


# Paper-scale presets (desk-scale training is configured separately).
NS_CONFIG = ModelConfig(
    hidden_size=96, n_heads=8, n_experts=2, n_attention_layers=2, mlp_layers=2,
    mlp_hidden=96, input_function_count=1, input_channels=(0,), output_field_count=3,
)
HEAT_CONFIG = ModelConfig(
    hidden_size=128, n_heads=8, n_experts=3, n_attention_layers=3, mlp_layers=3,
    mlp_hidden=128, input_function_count=5, input_channels=(1, 1, 1, 1, 1),
    output_field_count=1,
)
AIRFOIL_CONFIG = ModelConfig(
    hidden_size=96, n_heads=8, n_experts=2, n_attention_layers=2, mlp_layers=2,
    mlp_hidden=96, query_graph="knn:16", input_graph="knn:16",
    input_function_count=1, input_channels=(0,), output_field_count=1,
)


@dataclass
class Sample:
    """One record: input function clouds, query points, target fields."""

    input_functions: list
    query_points: PointCloud
    targets: np.ndarray
    dense_queries: PointCloud | None = None
    dense_targets: np.ndarray | None = None

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.targets.shape[0] != self.query_points.n_points:
            raise ValueError(
                f"targets rows ({self.targets.shape[0]}) do not match query points "
                f"({self.query_points.n_points})"
            )
        if self.dense_targets is not None:
            self.dense_targets = np.asarray(self.dense_targets, dtype=np.float64)
            if self.dense_targets.ndim == 1:
                self.dense_targets = self.dense_targets[:, None]

    @property
    def n_queries(self):
        return self.query_points.n_points


@dataclass
class NormStats:
    """z-score statistics: coordinates and per-function value channels.

    Targets keep physical units through the model (the relative-L2 loss is
    scale-invariant per channel); their stats are still recorded for the
    dataset-level normalize/denormalize utilities and the checkpoint.
    """

    coord_mean: np.ndarray
    coord_std: np.ndarray
    fn_means: list
    fn_stds: list
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def identity(cls, coord_dim, input_channels, n_out):
        return cls(
            np.zeros(coord_dim), np.ones(coord_dim),
            [np.zeros(c) for c in input_channels], [np.ones(c) for c in input_channels],
            np.zeros(n_out), np.ones(n_out),
        )

    def norm_coords(self, coords):
        return (coords - self.coord_mean) / self.coord_std

    def norm_values(self, values, fn_index):
        return (values - self.fn_means[fn_index]) / self.fn_stds[fn_index]


class GitoModel(Module):
    """Encoders -> HGT (query branch) -> TNO -> decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = config
        dt = cfg.dtype
        h, mh, d = cfg.hidden_size, cfg.ffn_hidden, cfg.coord_dim
        hgt_experts = cfg.n_experts if cfg.hgt_moe else 1
        enc_hidden = 2 * mh

        self.query_node_enc = MLP(d, enc_hidden, h, cfg.mlp_layers, rng, dt)
        self.query_edge_enc = MLP(d + 1, enc_hidden, h, cfg.mlp_layers, rng, dt)
        self.fn_node_encs = ModuleList(
            MLP(d + c, enc_hidden, h, cfg.mlp_layers, rng, dt) for c in cfg.input_channels
        )
        self.fn_edge_encs = ModuleList(
            MLP(d + 1 + c, enc_hidden, h, cfg.mlp_layers, rng, dt) for c in cfg.input_channels
        )
        self.hgt_blocks = ModuleList(
            HgtBlock(h, cfg.n_heads, hgt_experts, mh, cfg.mlp_layers, d, rng,
                     use_fusion=cfg.use_fusion,
                     fusion_ffn_hidden=cfg.fusion_ffn_mult * mh, dtype=dt)
            for _ in range(cfg.hgt_blocks)
        )
        self.input_hgt_blocks = (
            ModuleList(
                HgtBlock(h, cfg.n_heads, hgt_experts, mh, cfg.mlp_layers, d, rng,
                         use_fusion=cfg.use_fusion,
                         fusion_ffn_hidden=cfg.fusion_ffn_mult * mh, dtype=dt)
                for _ in range(cfg.hgt_blocks)
            )
            if cfg.apply_hgt_to_inputs
            else None
        )
        self.tno = TnoStack(cfg.n_attention_layers, h, cfg.n_heads, cfg.n_experts, mh,
                            cfg.mlp_layers, d, rng, cfg.tno_self_attention, dt)
        self.decoder = Decoder(h, mh, cfg.output_field_count, cfg.mlp_layers, rng, dt)
        self.norm = NormStats.identity(d, cfg.input_channels, cfg.output_field_count)
        self._query_spec = GraphSpec.parse(cfg.query_graph)
        self._input_spec = GraphSpec.parse(cfg.input_graph)
        # topology/features per cloud are pure in (cloud, spec, stats); reuse
        # them across epochs, invalidating when the stats object is swapped
        self._branch_cache = weakref.WeakKeyDictionary()

    # -- forward -------------------------------------------------------------

    def _build_topology(self, cloud, spec):
        if spec.strategy == "knn":
            # clouds smaller than k+1 still evaluate: clamp k, down to no edges
            k = min(spec.k, cloud.n_points - 1)
            if k < 1:
                from gito.graphs import SpatialGraph

                empty = np.empty(0, dtype=np.int64)
                return SpatialGraph(empty, empty, cloud.n_points,
                                    meta={"strategy": "knn", "k": 0})
            return build_knn_graph(cloud, k)
        return build_radius_graph(cloud, spec.radius)

    def _branch_arrays(self, cloud, spec, fn_index, run_hgt):
        key = (str(spec), fn_index, run_hgt)
        entry = self._branch_cache.get(cloud)
        if entry is not None and entry.get("norm") is self.norm and key in entry:
            return entry[key]
        dt = self.config.dtype
        coords_n = self.norm.norm_coords(cloud.coords)
        if cloud.values is not None and fn_index is not None:
            values_n = self.norm.norm_values(cloud.values, fn_index)
        else:
            values_n = cloud.values
        if run_hgt:
            graph = self._build_topology(cloud, spec)
            node_feats, edge_feats = compute_features(graph, PointCloud(coords_n, values_n))
            edge_feats = edge_feats.astype(dt)
        else:
            graph = None
            node_feats = coords_n if values_n is None else np.hstack([coords_n, values_n])
            edge_feats = None
        result = (graph, coords_n.astype(dt), node_feats.astype(dt), edge_feats)
        if entry is None or entry.get("norm") is not self.norm:
            entry = {"norm": self.norm}
            self._branch_cache[cloud] = entry
        entry[key] = result
        return result

    def _encode_branch(self, cloud, spec, node_enc, edge_enc, fn_index=None, run_hgt=False):
        graph, coords_n, node_feats, edge_feats = self._branch_arrays(
            cloud, spec, fn_index, run_hgt
        )
        coords_t = Tensor(coords_n)
        nodes = node_enc(Tensor(node_feats))
        if not run_hgt:
            return nodes, coords_t
        edges = edge_enc(Tensor(edge_feats))
        blocks = self.hgt_blocks if fn_index is None else self.input_hgt_blocks
        for block in blocks:
            nodes, edges = block(nodes, edges, graph.senders, graph.receivers,
                                 cloud.n_points, coords_t)
        return nodes, coords_t

    def forward(self, sample: Sample, query_cloud: PointCloud | None = None):
        """Predictions (physical units) at the sample's query points.

        ``query_cloud`` overrides the query set, e.g. for super-resolution.
        """
        cfg = self.config
        if len(sample.input_functions) != cfg.input_function_count:
            raise ValueError(
                f"sample has {len(sample.input_functions)} input functions, "
                f"model expects {cfg.input_function_count}"
            )
        for i, (fn, c) in enumerate(zip(sample.input_functions, cfg.input_channels)):
            if fn.n_channels != c:
                raise ValueError(
                    f"input function {i} carries {fn.n_channels} channels, expected {c}"
                )
        queries = query_cloud if query_cloud is not None else sample.query_points
        q_emb, q_coords = self._encode_branch(
            queries, self._query_spec, self.query_node_enc, self.query_edge_enc,
            fn_index=None, run_hgt=True,
        )
        sources = []
        for i, fn in enumerate(sample.input_functions):
            emb, _ = self._encode_branch(
                fn, self._input_spec, self.fn_node_encs[i], self.fn_edge_encs[i],
                fn_index=i, run_hgt=cfg.apply_hgt_to_inputs,
            )
            sources.append(emb)
        enriched = self.tno(q_emb, q_coords, sources)
        return self.decoder(enriched)

    def predict(self, sample: Sample, query_cloud: PointCloud | None = None):
        with no_grad():
            return self.forward(sample, query_cloud).data.astype(np.float64)


def build_model(config: ModelConfig, seed: int = 0) -> GitoModel:
    """Deterministically initialized model; same seed, same bits."""
    config.validate()
    return GitoModel(config, seed)
