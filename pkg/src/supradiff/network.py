"""Multilayer network containers and supra-Laplacian assembly.

Nodes are addressed globally in layer-major order: all nodes of layer 1,
then all nodes of layer 2, and so on.  Layer ids and local node numbers
are 1-based at the API surface (matching the JSON file format); global
indices are 0-based.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence, Union

import numpy as np

from .errors import ValidationError

ConstantKey = Union[int, tuple[int, int]]

_SYMMETRY_TOL = 1e-12


def _as_weights(a: Any, what: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"{what} must be a 2-D matrix, got shape {arr.shape}")
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        i, j = bad[0]
        raise ValidationError(f"{what}[{i},{j}] is not finite")
    bad = np.argwhere(arr < 0)
    if bad.size:
        i, j = bad[0]
        raise ValidationError(f"{what}[{i},{j}] = {arr[i, j]} is negative")
    arr.setflags(write=False)
    return arr


def _check_constant(d: float, what: str) -> float:
    d = float(d)
    if not np.isfinite(d) or d < 0:
        raise ValidationError(f"{what} must be finite and >= 0, got {d}")
    return d


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer: a symmetric weighted graph plus its diffusion constant."""

    layer_id: int
    adjacency: np.ndarray
    diffusion_constant: float = 1.0

    def __post_init__(self):
        what = f"layer {self.layer_id} adjacency"
        adj = _as_weights(self.adjacency, what)
        n, m = adj.shape
        if n != m or n == 0:
            raise ValidationError(f"{what} must be square and non-empty, got {adj.shape}")
        diag = np.flatnonzero(np.diag(adj))
        if diag.size:
            i = diag[0]
            raise ValidationError(f"{what}[{i},{i}] is a self-loop")
        asym = np.argwhere(np.abs(adj - adj.T) > _SYMMETRY_TOL)
        if asym.size:
            i, j = asym[0]
            raise ValidationError(
                f"{what} is not symmetric: [{i},{j}]={adj[i, j]} vs [{j},{i}]={adj[j, i]}"
            )
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(
            self,
            "diffusion_constant",
            _check_constant(self.diffusion_constant, f"layer {self.layer_id} diffusion constant"),
        )

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True, eq=False)
class InterCoupling:
    """Weighted links from the nodes of one layer to the nodes of another.

    ``weights`` has shape ``(N_from, N_to)``.  When the reverse coupling is
    not stored, it is implied as the transpose with the same constant.
    """

    from_layer: int
    to_layer: int
    weights: np.ndarray
    diffusion_constant: float = 1.0

    def __post_init__(self):
        if self.from_layer == self.to_layer:
            raise ValidationError(
                f"coupling {self.from_layer}->{self.to_layer} must join two different layers"
            )
        what = f"coupling {self.from_layer}->{self.to_layer} weights"
        object.__setattr__(self, "weights", _as_weights(self.weights, what))
        object.__setattr__(
            self,
            "diffusion_constant",
            _check_constant(
                self.diffusion_constant,
                f"coupling {self.from_layer}->{self.to_layer} diffusion constant",
            ),
        )

    @property
    def key(self) -> tuple[int, int]:
        return (self.from_layer, self.to_layer)


@dataclass(frozen=True, eq=False)
class MultilayerNetwork:
    layers: tuple[LayerSpec, ...]
    couplings: tuple[InterCoupling, ...] = field(default_factory=tuple)

    def __post_init__(self):
        layers = tuple(self.layers)
        couplings = tuple(self.couplings)
        if not layers:
            raise ValidationError("at least one layer required")
        for pos, layer in enumerate(layers, start=1):
            if layer.layer_id != pos:
                raise ValidationError(
                    f"layer ids must be 1..M in order; position {pos} has id {layer.layer_id}"
                )
        sizes = {layer.layer_id: layer.node_count for layer in layers}
        seen: dict[tuple[int, int], InterCoupling] = {}
        for c in couplings:
            for lid in c.key:
                if lid not in sizes:
                    raise ValidationError(f"coupling {c.from_layer}->{c.to_layer} references unknown layer {lid}")
            expected = (sizes[c.from_layer], sizes[c.to_layer])
            if c.weights.shape != expected:
                raise ValidationError(
                    f"coupling {c.from_layer}->{c.to_layer} weights have shape "
                    f"{c.weights.shape}, expected {expected}"
                )
            if c.key in seen:
                raise ValidationError(f"duplicate coupling {c.from_layer}->{c.to_layer}")
            seen[c.key] = c
        for (a, b), c in seen.items():
            rev = seen.get((b, a))
            if rev is not None and np.max(np.abs(rev.weights - c.weights.T)) > _SYMMETRY_TOL:
                raise ValidationError(
                    f"couplings {a}->{b} and {b}->{a} are both given but are not transposes"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "couplings", couplings)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(layer.node_count for layer in self.layers)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def n_total(self) -> int:
        return int(sum(self.sizes))

    def directed_couplings(self) -> list[InterCoupling]:
        """All couplings in both directions, with implied transposes made explicit."""
        stored = {c.key: c for c in self.couplings}
        out = list(self.couplings)
        for (a, b), c in stored.items():
            if (b, a) not in stored:
                out.append(InterCoupling(b, a, c.weights.T, c.diffusion_constant))
        return out

    def constants(self) -> dict[ConstantKey, float]:
        """Diffusion constants keyed by layer id or ``(from, to)`` coupling key.

        Implied reverse couplings share their constant with the stored
        direction, so they do not get a key of their own.
        """
        out: dict[ConstantKey, float] = {l.layer_id: l.diffusion_constant for l in self.layers}
        for c in self.couplings:
            out[c.key] = c.diffusion_constant
        return out

    def with_constants(self, values: Mapping[ConstantKey, float]) -> "MultilayerNetwork":
        known = self.constants()
        for k in values:
            if k not in known:
                raise ValidationError(f"unknown diffusion constant key {k!r}")
        layers = tuple(
            replace(l, diffusion_constant=values.get(l.layer_id, l.diffusion_constant))
            for l in self.layers
        )
        couplings = tuple(
            replace(c, diffusion_constant=values.get(c.key, c.diffusion_constant))
            for c in self.couplings
        )
        return MultilayerNetwork(layers, couplings)

    def flattened_adjacency(self) -> np.ndarray:
        """Diffusion-weighted adjacency of the flattened graph (row ``i`` -> col ``j``)."""
        n = self.n_total
        off = self.offsets
        W = np.zeros((n, n))
        for layer in self.layers:
            s = off[layer.layer_id - 1]
            k = layer.node_count
            W[s:s + k, s:s + k] = layer.diffusion_constant * layer.adjacency
        for c in self.directed_couplings():
            sa, sb = off[c.from_layer - 1], off[c.to_layer - 1]
            na, nb = c.weights.shape
            W[sa:sa + na, sb:sb + nb] += c.diffusion_constant * c.weights
        return W


@dataclass(frozen=True, eq=False)
class SupraLaplacian:
    """The assembled operator with its layer-major index map."""

    matrix: np.ndarray
    sizes: tuple[int, ...]

    @property
    def n_total(self) -> int:
        return self.matrix.shape[0]

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def index(self, layer: int, local: int) -> int:
        return _index(self.sizes, layer, local)

    def node(self, index: int) -> tuple[int, int]:
        return _node(self.sizes, index)

    def index_map(self) -> list[dict[str, int]]:
        return [
            {"global": g, "layer": a, "local": i}
            for g, (a, i) in ((g, self.node(g)) for g in range(self.n_total))
        ]


def _index(sizes: Sequence[int], layer: int, local: int) -> int:
    if not 1 <= layer <= len(sizes):
        raise ValidationError(f"layer {layer} out of range 1..{len(sizes)}")
    if not 1 <= local <= sizes[layer - 1]:
        raise ValidationError(f"node {local} out of range 1..{sizes[layer - 1]} in layer {layer}")
    return int(sum(sizes[: layer - 1])) + local - 1


def _node(sizes: Sequence[int], index: int) -> tuple[int, int]:
    total = int(sum(sizes))
    if not 0 <= index < total:
        raise ValidationError(f"global index {index} out of range 0..{total - 1}")
    for layer, n in enumerate(sizes, start=1):
        if index < n:
            return layer, index + 1
        index -= n
    raise AssertionError("unreachable")


def node_index(network: MultilayerNetwork, layer: int, local: int) -> int:
    """Global 0-based index of 1-based ``(layer, local)``."""
    return _index(network.sizes, layer, local)


def node_of(network: MultilayerNetwork, index: int) -> tuple[int, int]:
    """Inverse of :func:`node_index`."""
    return _node(network.sizes, index)


def build_intra_laplacian(layer: LayerSpec) -> np.ndarray:
    """Scaled graph Laplacian ``D * (K - W)`` of one layer."""
    W = layer.adjacency
    return layer.diffusion_constant * (np.diag(W.sum(axis=1)) - W)


def assemble_supra(network: MultilayerNetwork) -> SupraLaplacian:
    """Assemble the supra-Laplacian by direct block placement.

    The intra-layer part is the direct sum of the scaled layer Laplacians.
    Each directed coupling ``(a, b)`` adds ``D * K`` (``K`` = row sums of
    its weights) to the ``(a, a)`` block and ``-D * W`` to the ``(a, b)``
    block.  Layers may have different sizes.
    """
    n = network.n_total
    off = network.offsets
    L = np.zeros((n, n))
    for layer in network.layers:
        s = off[layer.layer_id - 1]
        k = layer.node_count
        L[s:s + k, s:s + k] = build_intra_laplacian(layer)
    for c in network.directed_couplings():
        sa, sb = off[c.from_layer - 1], off[c.to_layer - 1]
        na, nb = c.weights.shape
        d = c.diffusion_constant
        idx = np.arange(sa, sa + na)
        L[idx, idx] += d * c.weights.sum(axis=1)
        L[sa:sa + na, sb:sb + nb] -= d * c.weights
    L.setflags(write=False)
    return SupraLaplacian(L, network.sizes)


# -- JSON ------------------------------------------------------------------

_TOP_KEYS = {"layers", "couplings"}
_LAYER_KEYS = {"id", "n", "edges", "d"}
_COUPLING_KEYS = {"from", "to", "edges", "d"}


def _strict_keys(obj: Any, allowed: set[str], required: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: expected an object")
    for k in obj:
        if k not in allowed:
            raise ValidationError(f"{path}: unknown key {k!r}")
    for k in sorted(required):
        if k not in obj:
            raise ValidationError(f"{path}: missing key {k!r}")


def _int_field(v: Any, path: str, minimum: int = 1) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ValidationError(f"{path}: expected an integer >= {minimum}, got {v!r}")
    return v


def _edge_list(edges: Any, n_rows: int, n_cols: int, path: str, symmetric: bool) -> np.ndarray:
    if not isinstance(edges, list):
        raise ValidationError(f"{path}: expected an array of [i, j, w] triples")
    W = np.zeros((n_rows, n_cols))
    for k, e in enumerate(edges):
        p = f"{path}[{k}]"
        if not isinstance(e, list) or len(e) != 3:
            raise ValidationError(f"{p}: expected [i, j, w]")
        i = _int_field(e[0], f"{p}[0]")
        j = _int_field(e[1], f"{p}[1]")
        if isinstance(e[2], bool) or not isinstance(e[2], (int, float)):
            raise ValidationError(f"{p}[2]: weight must be a number")
        w = float(e[2])
        if i > n_rows or j > n_cols:
            raise ValidationError(f"{p}: index out of range")
        if not np.isfinite(w) or w < 0:
            raise ValidationError(f"{p}[2]: weight must be finite and >= 0")
        if symmetric and i == j:
            raise ValidationError(f"{p}: self-loop")
        if W[i - 1, j - 1] != 0:
            raise ValidationError(f"{p}: duplicate edge")
        W[i - 1, j - 1] = w
        if symmetric:
            W[j - 1, i - 1] = w
    return W


def network_from_dict(data: Any) -> MultilayerNetwork:
    """Parse the JSON network format (strict; unknown keys are rejected)."""
    _strict_keys(data, _TOP_KEYS, {"layers"}, "$")
    raw_layers = data["layers"]
    if not isinstance(raw_layers, list):
        raise ValidationError("$.layers: expected an array")
    if not raw_layers:
        raise ValidationError("$.layers: at least one layer required")
    layers = []
    for k, raw in enumerate(raw_layers):
        p = f"$.layers[{k}]"
        _strict_keys(raw, _LAYER_KEYS, {"id", "n", "d"}, p)
        lid = _int_field(raw["id"], f"{p}.id")
        n = _int_field(raw["n"], f"{p}.n")
        W = _edge_list(raw.get("edges", []), n, n, f"{p}.edges", symmetric=True)
        try:
            layers.append(LayerSpec(lid, W, raw["d"]))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{p}: {exc}") from None
    sizes = {l.layer_id: l.node_count for l in layers}
    couplings = []
    raw_couplings = data.get("couplings", [])
    if not isinstance(raw_couplings, list):
        raise ValidationError("$.couplings: expected an array")
    for k, raw in enumerate(raw_couplings):
        p = f"$.couplings[{k}]"
        _strict_keys(raw, _COUPLING_KEYS, {"from", "to", "d"}, p)
        a = _int_field(raw["from"], f"{p}.from")
        b = _int_field(raw["to"], f"{p}.to")
        if a not in sizes or b not in sizes:
            raise ValidationError(f"{p}: references unknown layer")
        W = _edge_list(raw.get("edges", []), sizes[a], sizes[b], f"{p}.edges", symmetric=False)
        try:
            couplings.append(InterCoupling(a, b, W, raw["d"]))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{p}: {exc}") from None
    try:
        return MultilayerNetwork(tuple(layers), tuple(couplings))
    except ValidationError as exc:
        raise ValidationError(f"$: {exc}") from None


def network_to_dict(network: MultilayerNetwork) -> dict:
    layers = []
    for l in network.layers:
        iu = np.argwhere(np.triu(l.adjacency, 1) > 0)
        edges = [[int(i) + 1, int(j) + 1, float(l.adjacency[i, j])] for i, j in iu]
        layers.append({"id": l.layer_id, "n": l.node_count, "edges": edges, "d": l.diffusion_constant})
    couplings = []
    for c in network.couplings:
        nz = np.argwhere(c.weights > 0)
        edges = [[int(i) + 1, int(j) + 1, float(c.weights[i, j])] for i, j in nz]
        couplings.append(
            {"from": c.from_layer, "to": c.to_layer, "edges": edges, "d": c.diffusion_constant}
        )
    return {"layers": layers, "couplings": couplings}


def load_network(path: Union[str, Path]) -> MultilayerNetwork:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return network_from_dict(data)


def save_network(network: MultilayerNetwork, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(network), fh, indent=1)
        fh.write("\n")
