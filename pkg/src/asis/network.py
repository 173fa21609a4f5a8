"""Two-branch per-point network over fixed-size point blocks.

A shared encoder lifts each point's 9 features through a per-point MLP,
max-pools a global descriptor over the block, and concatenates it back
onto every point. Two parallel decoders produce a semantic feature
matrix and an instance feature matrix of equal width. The branches are
then cross-wired:

* the semantic features, passed through a small adapter, are added onto
  the instance features before the embedding head (``use_sa``);
* each point's semantic features are replaced by the channel-wise max
  over its K nearest neighbors in embedding space before the class head
  (``use_if``). Neighbor indices are constants for differentiation.

With both toggles off the graph degenerates to two independent decoder
heads on the shared encoder.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import DataFormatError, NumericError


@dataclass(frozen=True)
class NetworkConfig:
    """Widths, margins and toggles; serializable to JSON."""

    n_classes: int = 4
    embedding_dim: int = 5
    encoder_widths: tuple[int, ...] = (32, 64, 128)
    decoder_widths: tuple[int, ...] = (128, 64)
    use_sa: bool = True
    use_if: bool = True
    knn_k: int = 30
    delta_v: float = 0.5
    delta_d: float = 1.5
    alpha: float = 0.001
    ce_weight: float = 1.0
    disc_weight: float = 1.0
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9
    input_dim: int = 9

    def __post_init__(self):
        if self.n_classes < 2 or self.embedding_dim < 1 or self.knn_k < 1:
            raise ValueError("n_classes >= 2, embedding_dim >= 1, knn_k >= 1 required")
        if not self.encoder_widths or not self.decoder_widths:
            raise ValueError("encoder and decoder need at least one layer each")

    @property
    def feature_dim(self) -> int:
        """Width of each decoder's output feature matrix."""
        return self.decoder_widths[-1]

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["encoder_widths"] = list(self.encoder_widths)
        out["decoder_widths"] = list(self.decoder_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DataFormatError(f"unknown network config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("encoder_widths", "decoder_widths"):
            if key in kwargs:
                kwargs[key] = tuple(int(w) for w in kwargs[key])
        return cls(**kwargs)


def load_network_config(path) -> NetworkConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"{path}: network config must be a JSON object")
    return NetworkConfig.from_dict(data)


class PointLayer:
    """Per-point linear map, batch normalization, then ReLU."""

    def __init__(self, weight: Tensor, bias: Tensor, bn_scale: Tensor, bn_shift: Tensor,
                 bn_state: BatchNormState):
        self.weight = weight
        self.bias = bias
        self.bn_scale = bn_scale
        self.bn_shift = bn_shift
        self.bn_state = bn_state

    @classmethod
    def create(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "PointLayer":
        bound = 1.0 / np.sqrt(fan_in)
        weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        bias = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
        bn_scale = Tensor(np.ones(fan_out), requires_grad=True)
        bn_shift = Tensor(np.zeros(fan_out), requires_grad=True)
        return cls(weight, bias, bn_scale, bn_shift, BatchNormState(fan_out))

    def apply(self, x: Tensor, config: NetworkConfig, training: bool) -> Tensor:
        h = ad.add(ad.matmul(x, self.weight), self.bias)
        h = ad.batchnorm(
            h, self.bn_scale, self.bn_shift, self.bn_state,
            epsilon=config.bn_epsilon, momentum=config.bn_momentum, training=training,
        )
        return ad.relu(h)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.weight": self.weight,
            f"{prefix}.bias": self.bias,
            f"{prefix}.bn_scale": self.bn_scale,
            f"{prefix}.bn_shift": self.bn_shift,
        }


class Head:
    """Plain linear map without normalization or activation."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "Head":
        bound = 1.0 / np.sqrt(fan_in)
        weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        bias = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
        return cls(weight, bias)

    def apply(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class NetworkParams:
    """All learned tensors and batch-norm running statistics."""

    def __init__(self, config: NetworkConfig, seed: int | np.random.SeedSequence = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        widths = [config.input_dim, *config.encoder_widths]
        self.encoder = [
            PointLayer.create(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)
        ]
        shared_dim = 2 * config.encoder_widths[-1]
        dec = [shared_dim, *config.decoder_widths]
        self.semantic_decoder = [
            PointLayer.create(rng, dec[i], dec[i + 1]) for i in range(len(dec) - 1)
        ]
        self.instance_decoder = [
            PointLayer.create(rng, dec[i], dec[i + 1]) for i in range(len(dec) - 1)
        ]
        self.sa_adapter = PointLayer.create(rng, config.feature_dim, config.feature_dim)
        self.semantic_head = Head.create(rng, config.feature_dim, config.n_classes)
        self.embedding_head = Head.create(rng, config.feature_dim, config.embedding_dim)

    def _layer_map(self) -> dict[str, PointLayer | Head]:
        layers: dict[str, PointLayer | Head] = {}
        for i, layer in enumerate(self.encoder):
            layers[f"encoder.{i}"] = layer
        for i, layer in enumerate(self.semantic_decoder):
            layers[f"semantic_decoder.{i}"] = layer
        for i, layer in enumerate(self.instance_decoder):
            layers[f"instance_decoder.{i}"] = layer
        layers["sa_adapter"] = self.sa_adapter
        layers["semantic_head"] = self.semantic_head
        layers["embedding_head"] = self.embedding_head
        return layers

    def named_parameters(self) -> dict[str, Tensor]:
        """Learned tensors in a stable order."""
        out: dict[str, Tensor] = {}
        for prefix, layer in self._layer_map().items():
            out.update(layer.named(prefix))
        return out

    def named_stats(self) -> dict[str, np.ndarray]:
        """Batch-norm running statistics in a stable order."""
        out: dict[str, np.ndarray] = {}
        for prefix, layer in self._layer_map().items():
            if isinstance(layer, PointLayer):
                out[f"{prefix}.bn_mean"] = layer.bn_state.mean
                out[f"{prefix}.bn_var"] = layer.bn_state.var
        return out

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.values for name, t in self.named_parameters().items()}
        arrays.update(self.named_stats())
        return arrays

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path, config: NetworkConfig) -> "NetworkParams":
        arrays = ad.load_checkpoint(path)
        params = cls(config, seed=0)
        own_params = params.named_parameters()
        own_stats = params.named_stats()
        expected = set(own_params) | set(own_stats)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise DataFormatError(
                f"{path}: array names do not match the config (missing {missing}, extra {extra})"
            )
        for name, tensor in own_params.items():
            if arrays[name].shape != tensor.shape:
                raise DataFormatError(
                    f"{path}: {name} has shape {arrays[name].shape}, config wants {tensor.shape}"
                )
            tensor.values = arrays[name]
        for prefix, layer in params._layer_map().items():
            if isinstance(layer, PointLayer):
                layer.bn_state.mean = arrays[f"{prefix}.bn_mean"]
                layer.bn_state.var = arrays[f"{prefix}.bn_var"]
        return params


@dataclass
class ForwardOutputs:
    """All intermediate and final per-point matrices of one forward pass."""

    semantic_features: Tensor        # (N, F) decoder output, semantic branch
    instance_features: Tensor        # (N, F) decoder output, instance branch
    fused_instance_features: Tensor  # (N, F) instance features after adapter add
    fused_semantic_features: Tensor  # (N, F) semantic features after neighbor max
    semantic_logits: Tensor          # (N, C)
    embeddings: Tensor               # (N, E)
    neighbor_indices: np.ndarray | None = None  # (N, K) when use_if is on


def encode(features: np.ndarray, params: NetworkParams, training: bool) -> Tensor:
    """Per-point MLP, global max pool, concat of local and global features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.config.input_dim:
        raise ValueError(f"encode expects (N, {params.config.input_dim}) features")
    if not np.isfinite(features).all():
        raise NumericError("encode: non-finite input features")
    h = Tensor(features)
    for layer in params.encoder:
        h = layer.apply(h, params.config, training)
    pooled = ad.global_max_pool(h)
    tiled = ad.broadcast_rows(pooled, h.shape[0])
    return ad.concat_cols(h, tiled)


def decode_branches(shared: Tensor, params: NetworkParams, training: bool) -> tuple[Tensor, Tensor]:
    """Run both decoder stacks on the shared features."""
    sem = shared
    for layer in params.semantic_decoder:
        sem = layer.apply(sem, params.config, training)
    ins = shared
    for layer in params.instance_decoder:
        ins = layer.apply(ins, params.config, training)
    return sem, ins


def semantic_awareness(
    semantic_features: Tensor,
    instance_features: Tensor,
    params: NetworkParams,
    training: bool,
) -> Tensor:
    """Add adapted semantic features onto the instance features."""
    adapted = params.sa_adapter.apply(semantic_features, params.config, training)
    return ad.add(instance_features, adapted)


def knn_embedding(
    embeddings: np.ndarray,
    k: int,
    delta_v: float,
    chunk_size: int = 512,
) -> np.ndarray:
    """Indices of each point's K nearest neighbors in L1 embedding distance.

    Row i always starts with i itself. Candidates farther than
    2 * delta_v are dropped; short rows are padded with i. Distance ties
    break toward the smaller point index.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ValueError("knn_embedding expects (N, D) embeddings")
    n, dim = embeddings.shape
    if k < 1:
        raise ValueError("k must be positive")
    limit = 2.0 * delta_v
    out = np.empty((n, k), dtype=np.int64)
    out[:, 0] = np.arange(n)
    if k == 1:
        return out
    m = k - 1
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        rows = stop - start
        dists = np.abs(np.subtract.outer(embeddings[start:stop, 0], embeddings[:, 0]))
        for f in range(1, dim):
            dists += np.abs(np.subtract.outer(embeddings[start:stop, f], embeddings[:, f]))
        dists[np.arange(rows), np.arange(start, stop)] = np.inf
        # The m-th smallest distance per row bounds the candidate pool;
        # keeping every point at or under it retains all boundary ties so
        # the (distance, index) ordering below stays exact.
        tau = np.partition(dists, min(m - 1, n - 1), axis=1)[:, min(m - 1, n - 1)]
        mask = dists <= np.minimum(tau, limit)[:, None]
        for row in range(rows):
            i = start + row
            cand = np.flatnonzero(mask[row])
            if cand.size > 1:
                cand = cand[np.argsort(dists[row, cand], kind="stable")]
            cand = cand[:m]
            out[i, 1:1 + cand.size] = cand
            out[i, 1 + cand.size:] = i
    return out


def instance_fusion(semantic_features: Tensor, neighbor_indices: np.ndarray) -> Tensor:
    """Channel-wise max of each point's neighborhood in the semantic features."""
    return ad.group_max(semantic_features, neighbor_indices)


def forward(
    features: np.ndarray,
    params: NetworkParams,
    training: bool = True,
) -> ForwardOutputs:
    """Full pass: encoder, decoders, branch coupling, heads.

    The embedding head runs before instance fusion because fusion needs
    the embedding-space neighborhoods. All outputs are checked finite.
    """
    config = params.config
    shared = encode(features, params, training)
    semantic_features, instance_features = decode_branches(shared, params, training)

    if config.use_sa:
        fused_instance = semantic_awareness(semantic_features, instance_features, params, training)
    else:
        fused_instance = instance_features
    embeddings = params.embedding_head.apply(fused_instance)

    neighbor_indices = None
    if config.use_if:
        neighbor_indices = knn_embedding(embeddings.values, config.knn_k, config.delta_v)
        fused_semantic = instance_fusion(semantic_features, neighbor_indices)
    else:
        fused_semantic = semantic_features
    semantic_logits = params.semantic_head.apply(fused_semantic)

    for name, tensor in (("logits", semantic_logits), ("embeddings", embeddings)):
        if not np.isfinite(tensor.values).all():
            raise NumericError(f"forward produced non-finite {name}")
    return ForwardOutputs(
        semantic_features=semantic_features,
        instance_features=instance_features,
        fused_instance_features=fused_instance,
        fused_semantic_features=fused_semantic,
        semantic_logits=semantic_logits,
        embeddings=embeddings,
        neighbor_indices=neighbor_indices,
    )
