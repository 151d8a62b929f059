"""Core feature-learning engine.

Kernels are estimated directly from user-drawn markers: patches around
marker voxels are normalized with marker statistics, grouped by K-means,
and each group centroid becomes a unit-norm kernel.  When more candidate
kernels exist than requested, PCA keeps the dominant orthogonal
directions.  The forward pass per layer is: channel normalization,
dilated convolution (zero padded, same dims), ReLU, max-pool.

Patch flattening order is fixed everywhere: z-major, then y, then x,
channel innermost.  Patch shape (h, w, d) spans (x, y, z) respectively.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChannelMismatch,
    EmptyPatchSet,
    InvalidCoord,
    MalformedModelFile,
    RankDeficient,
    TooFewPatches,
    ZeroCentroid,
)
from .preprocess import StandardizerConfig
from .volcore import Volume, _atomic_write_bytes

MARKER_LABELS = ("normal", "abnormal")


@dataclass
class Marker:
    label: str
    voxels: list[tuple[int, int, int]]

    def __post_init__(self):
        if self.label not in MARKER_LABELS:
            raise ValueError(f"marker label must be one of {MARKER_LABELS}")
        if not self.voxels:
            raise ValueError("marker has no voxels")
        self.voxels = [tuple(int(c) for c in v) for v in self.voxels]


@dataclass
class MarkerSet:
    volume_id: str
    markers: list[Marker]

    def __post_init__(self):
        self.markers = [m if isinstance(m, Marker) else Marker(**m)
                        for m in self.markers]
        if not self.markers:
            raise ValueError("marker set is empty")

    def validate_dims(self, dims: tuple[int, int, int]) -> None:
        dx, dy, dz = dims
        for m in self.markers:
            for (x, y, z) in m.voxels:
                if not (0 <= x < dx and 0 <= y < dy and 0 <= z < dz):
                    raise InvalidCoord(f"voxel {(x, y, z)} outside dims {dims}")

    def to_dict(self) -> dict:
        return {"volume_id": self.volume_id,
                "markers": [{"label": m.label,
                             "voxels": [list(v) for v in m.voxels]}
                            for m in self.markers]}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkerSet":
        return cls(volume_id=d["volume_id"], markers=d["markers"])

    def save(self, path: str) -> None:
        _atomic_write_bytes(path, json.dumps(self.to_dict(), sort_keys=True).encode())

    @classmethod
    def load(cls, path: str) -> "MarkerSet":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class PatchSpec:
    shape: tuple[int, int, int] = (3, 3, 3)   # (h, w, d) along (x, y, z)
    dilation: int = 1

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if any(s < 1 or s % 2 == 0 for s in self.shape):
            raise ValueError(f"patch shape must be odd, got {self.shape}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")

    def n_taps(self) -> int:
        h, w, d = self.shape
        return h * w * d


@dataclass
class NormalizationStats:
    mu: np.ndarray        # per-channel mean, (m,)
    sigma: np.ndarray     # per-channel population std, (m,)
    epsilon: float = 1e-7

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same length")
        if (self.sigma < 0).any() or self.epsilon <= 0:
            raise ValueError("sigma must be >= 0 and epsilon > 0")

    @property
    def channels(self) -> int:
        return len(self.mu)


@dataclass
class ConvLayerSpec:
    n_kernels: int = 2
    patch: PatchSpec = field(default_factory=lambda: PatchSpec((3, 3, 3), 3))
    pool_stride: int = 4
    pool_size: int | None = None   # defaults to pool_stride
    kmeans_k: int = 2              # clusters per marker
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.patch, dict):
            self.patch = PatchSpec(**self.patch)
        if self.pool_size is None:
            self.pool_size = self.pool_stride
        if self.n_kernels < 1 or self.pool_stride < 1 or self.pool_size < 1:
            raise ValueError("n_kernels, pool_stride, pool_size must be >= 1")
        if self.kmeans_k < 1:
            raise ValueError("kmeans_k must be >= 1")

    def to_dict(self) -> dict:
        return {"n_kernels": self.n_kernels,
                "patch": {"shape": list(self.patch.shape),
                          "dilation": self.patch.dilation},
                "pool_stride": self.pool_stride,
                "pool_size": self.pool_size,
                "kmeans_k": self.kmeans_k,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvLayerSpec":
        d = dict(d)
        d["patch"] = PatchSpec(tuple(d["patch"]["shape"]), d["patch"]["dilation"])
        return cls(**d)


@dataclass
class ConvLayer:
    spec: ConvLayerSpec
    stats: NormalizationStats
    kernels: np.ndarray     # (k_l, h*w*d*m), rows unit-norm
    biases: np.ndarray      # (k_l,)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if self.kernels.shape[0] != self.spec.n_kernels:
            raise ValueError("kernel count != spec.n_kernels")
        if len(self.biases) != self.kernels.shape[0]:
            raise ValueError("bias count != kernel count")
        norms = np.linalg.norm(self.kernels, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("kernels must be unit-norm")

    @property
    def input_channels(self) -> int:
        return self.kernels.shape[1] // self.spec.patch.n_taps()


@dataclass
class FlimModel:
    layers: list[ConvLayer]
    standardizer: StandardizerConfig | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.input_channels != prev.spec.n_kernels:
                raise ValueError("layer channel chaining broken")

    @property
    def input_channels(self) -> int:
        return self.layers[0].input_channels


# ---------------------------------------------------------------------------
# patch extraction and normalization
# ---------------------------------------------------------------------------

def patch_offsets(spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Dilated (oz, oy, ox) offsets in flattening order (z-major, y, x)."""
    h, w, d = spec.shape
    dil = spec.dilation
    return [(oz * dil, oy * dil, ox * dil)
            for oz in range(-(d // 2), d // 2 + 1)
            for oy in range(-(w // 2), w // 2 + 1)
            for ox in range(-(h // 2), h // 2 + 1)]


def extract_patches(vol: Volume, voxels: list[tuple[int, int, int]],
                    spec: PatchSpec) -> np.ndarray:
    """One flattened patch per voxel; out-of-bounds taps are zero.

    Returns (n_voxels, h*w*d*m) rows in the fixed flattening order.
    """
    dx, dy, dz = vol.dims
    m = vol.channels
    offs = patch_offsets(spec)
    rows = np.zeros((len(voxels), len(offs) * m), dtype=np.float64)
    data = vol.data
    for r, (x, y, z) in enumerate(voxels):
        if not (0 <= x < dx and 0 <= y < dy and 0 <= z < dz):
            raise InvalidCoord(f"voxel {(x, y, z)} outside dims {vol.dims}")
        for t, (oz, oy, ox) in enumerate(offs):
            zz, yy, xx = z + oz, y + oy, x + ox
            if 0 <= xx < dx and 0 <= yy < dy and 0 <= zz < dz:
                rows[r, t * m:(t + 1) * m] = data[zz, yy, xx, :]
    return rows


def compute_norm_stats(patches: np.ndarray, channels: int,
                       epsilon: float = 1e-7) -> NormalizationStats:
    """Per-channel mean/std over all rows and spatial offsets."""
    if patches.size == 0:
        raise EmptyPatchSet("no patches")
    per_channel = patches.reshape(patches.shape[0], -1, channels)
    mu = per_channel.mean(axis=(0, 1))
    sigma = per_channel.std(axis=(0, 1))   # population std
    return NormalizationStats(mu=mu, sigma=sigma, epsilon=epsilon)


def normalize_patches(patches: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    m = stats.channels
    shaped = patches.reshape(patches.shape[0], -1, m)
    out = (shaped - stats.mu) / (stats.sigma + stats.epsilon)
    return out.reshape(patches.shape)


def normalize_map(vol: Volume, stats: NormalizationStats) -> Volume:
    if vol.channels != stats.channels:
        raise ChannelMismatch(
            f"map has {vol.channels} channels, stats have {stats.channels}")
    data = (vol.data.astype(np.float64) - stats.mu) / (stats.sigma + stats.epsilon)
    return Volume(data=data, spacing=vol.spacing)


# ---------------------------------------------------------------------------
# kernel estimation
# ---------------------------------------------------------------------------

def kmeans(patches: np.ndarray, k: int, seed: int, max_iters: int = 100,
           tol: float = 1e-6) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; deterministic per seed."""
    X = np.asarray(patches, dtype=np.float64)
    n = X.shape[0]
    if n < k:
        raise TooFewPatches(f"{n} patches for k={k}")
    rng = np.random.default_rng(seed)

    # k-means++ initialization
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            centroids[j] = X[rng.integers(n)]
        else:
            centroids[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))

    for _ in range(max_iters):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = X[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        movement = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if movement < tol:
            break
    return centroids


def centroids_to_kernels(centroids: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(centroids, axis=1)
    if (norms == 0).any():
        raise ZeroCentroid("cannot normalize a zero centroid")
    return centroids / norms[:, None]


def reduce_kernels_pca(candidates: np.ndarray, k_l: int) -> np.ndarray:
    """Keep the k_l dominant orthogonal directions of the candidate set.

    Candidates are mean-centered; the top-k_l covariance eigenvectors are
    returned unit-norm with the largest-magnitude component made positive.
    """
    X = np.asarray(candidates, dtype=np.float64)
    if X.shape[0] < k_l or k_l < 1:
        raise RankDeficient(f"{X.shape[0]} candidates for k_l={k_l}")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    rank = int((s > s[0] * 1e-9).sum()) if s.size and s[0] > 0 else 0
    if rank < k_l:
        raise RankDeficient(f"only {rank} nonzero eigenvalues, need {k_l}")
    kernels = vt[:k_l]
    kernels = kernels / np.linalg.norm(kernels, axis=1)[:, None]
    for row in kernels:
        i = np.abs(row).argmax()
        if row[i] < 0:
            row *= -1.0
    return kernels


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _shifted(arr: np.ndarray, oz: int, oy: int, ox: int) -> np.ndarray:
    """out[z,y,x] = arr[z+oz, y+oy, x+ox], zero where out of bounds."""
    dz, dy, dx = arr.shape[:3]
    out = np.zeros_like(arr)

    def rng(n, o):
        return (max(0, -o), min(n, n - o)), (max(0, o), min(n, n + o))

    (z0, z1), (sz0, sz1) = rng(dz, oz)
    (y0, y1), (sy0, sy1) = rng(dy, oy)
    (x0, x1), (sx0, sx1) = rng(dx, ox)
    if z0 < z1 and y0 < y1 and x0 < x1:
        out[z0:z1, y0:y1, x0:x1] = arr[sz0:sz1, sy0:sy1, sx0:sx1]
    return out


def dilated_conv(data: np.ndarray, kernels: np.ndarray,
                 spec: PatchSpec) -> np.ndarray:
    """Dilated cross-correlation, zero padded, same spatial dims.

    data: (dz, dy, dx, m); kernels: (k, taps*m).  Output (dz, dy, dx, k).
    Equals a per-voxel dot product between each kernel and the flattened
    patch at that voxel.
    """
    m = data.shape[3]
    offs = patch_offsets(spec)
    k = kernels.shape[0]
    weights = kernels.reshape(k, len(offs), m)
    out = np.zeros(data.shape[:3] + (k,), dtype=np.float64)
    d = data.astype(np.float64, copy=False)
    for t, (oz, oy, ox) in enumerate(offs):
        shifted = _shifted(d, oz, oy, ox)          # (dz, dy, dx, m)
        out += shifted @ weights[:, t, :].T        # sum over channels
    return out


def max_pool(data: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Max pool each spatial axis; window truncated at borders.

    Output spatial dims are ceil(dim / stride).
    """
    if size == 1 and stride == 1:
        return data
    out = data
    for axis in range(3):
        n = out.shape[axis]
        n_out = -(-n // stride)
        pieces = np.full(out.shape[:axis] + (n_out,) + out.shape[axis + 1:],
                         -np.inf, dtype=np.float64)
        for off in range(size):
            idx = np.arange(n_out) * stride + off
            valid = idx < n
            if not valid.any():
                continue
            taken = np.take(out, idx[valid], axis=axis)
            sel = [slice(None)] * pieces.ndim
            sel[axis] = valid
            pieces[tuple(sel)] = np.maximum(pieces[tuple(sel)], taken)
        out = pieces
    return out


def conv_forward(vol: Volume, layer: ConvLayer) -> Volume:
    """Normalize, convolve with the kernel bank, ReLU, max-pool."""
    normed = normalize_map(vol, layer.stats)
    acts = dilated_conv(normed.data, layer.kernels, layer.spec.patch)
    acts += layer.biases
    np.maximum(acts, 0.0, out=acts)
    pooled = max_pool(acts, layer.spec.pool_size, layer.spec.pool_stride)
    s = layer.spec.pool_stride
    spacing = tuple(v * s for v in vol.spacing)
    return Volume(data=pooled, spacing=spacing)


def map_coords_through_layer(voxels: list[tuple[int, int, int]],
                             layer: ConvLayer,
                             input_dims: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Marker coordinates after the layer's pooling (floor division, clamped)."""
    s = layer.spec.pool_stride
    out_dims = tuple(-(-d // s) for d in input_dims)
    return [tuple(min(c // s, od - 1) for c, od in zip(v, out_dims))
            for v in voxels]


def forward(model: FlimModel, vol: Volume) -> Volume:
    out = vol
    for layer in model.layers:
        out = conv_forward(out, layer)
    return out


def extract_descriptor(model: FlimModel, lungs: list[Volume]) -> np.ndarray:
    """Flattened last-layer activations, lungs concatenated in fixed order."""
    if not 1 <= len(lungs) <= 2:
        raise ValueError("expected one or two lung volumes per patient")
    parts = [forward(model, v).data.reshape(-1) for v in lungs]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# layer training
# ---------------------------------------------------------------------------

def train_layer(images: list[Volume], markers: list[MarkerSet],
                spec: ConvLayerSpec, prior: list[ConvLayer] | None = None,
                epsilon: float = 1e-7) -> ConvLayer:
    """Estimate one layer's kernel bank from marked images.

    Marker patches from all images share one set of normalization stats;
    K-means runs per (image, marker); centroid kernels from all markers
    are pooled and PCA-reduced only when they exceed spec.n_kernels.
    """
    if not images or len(images) != len(markers):
        raise ValueError("need equally many images and marker sets")
    prior = prior or []

    # forward each image through the accepted prefix, tracking marker coords
    maps, marker_voxels = [], []   # per image; per (image, marker) voxel lists
    for vol, mset in zip(images, markers):
        mset.validate_dims(vol.dims)
        fmap = vol
        per_marker = [list(mk.voxels) for mk in mset.markers]
        for layer in prior:
            per_marker = [map_coords_through_layer(c, layer, fmap.dims)
                          for c in per_marker]
            fmap = conv_forward(fmap, layer)
        maps.append(fmap)
        marker_voxels.append(per_marker)

    all_patches = []
    per_marker_patches = []      # (img_idx, marker_idx, rows)
    for i, (fmap, per_marker) in enumerate(zip(maps, marker_voxels)):
        for j, coords in enumerate(per_marker):
            rows = extract_patches(fmap, coords, spec.patch)
            per_marker_patches.append((i, j, rows))
            all_patches.append(rows)
    pooled = np.concatenate(all_patches, axis=0)
    if pooled.shape[0] == 0:
        raise TooFewPatches("no marker patches")
    stats = compute_norm_stats(pooled, maps[0].channels, epsilon=epsilon)

    candidates = []
    for i, j, rows in per_marker_patches:
        normed = normalize_patches(rows, stats)
        sub_seed = int(np.random.SeedSequence([spec.seed, i, j]).generate_state(1)[0])
        cents = kmeans(normed, spec.kmeans_k, seed=sub_seed)
        candidates.append(cents)
    union = np.concatenate(candidates, axis=0)

    if union.shape[0] > spec.n_kernels:
        kernels = centroids_to_kernels(union)
        kernels = reduce_kernels_pca(kernels, spec.n_kernels)
    else:
        if union.shape[0] < spec.n_kernels:
            raise TooFewPatches(
                f"{union.shape[0]} candidate kernels for n_kernels={spec.n_kernels}")
        kernels = centroids_to_kernels(union)
    return ConvLayer(spec=spec, stats=stats, kernels=kernels,
                     biases=np.zeros(spec.n_kernels))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: FlimModel) -> dict:
    d = {
        "input_channels": model.input_channels,
        "layers": [{
            "spec": layer.spec.to_dict(),
            "stats": {"mu": layer.stats.mu.tolist(),
                      "sigma": layer.stats.sigma.tolist(),
                      "epsilon": layer.stats.epsilon},
            "kernels": [k.tolist() for k in layer.kernels],
            "biases": layer.biases.tolist(),
        } for layer in model.layers],
    }
    if model.standardizer is not None:
        d["standardizer"] = json.loads(model.standardizer.to_json())
    return d


def model_from_dict(d: dict) -> FlimModel:
    try:
        layers = []
        for ld in d["layers"]:
            layers.append(ConvLayer(
                spec=ConvLayerSpec.from_dict(ld["spec"]),
                stats=NormalizationStats(mu=ld["stats"]["mu"],
                                         sigma=ld["stats"]["sigma"],
                                         epsilon=ld["stats"]["epsilon"]),
                kernels=np.array(ld["kernels"], dtype=np.float64),
                biases=np.array(ld["biases"], dtype=np.float64),
            ))
        std = None
        if "standardizer" in d:
            std = StandardizerConfig.from_json(json.dumps(d["standardizer"]))
        return FlimModel(layers=layers, standardizer=std)
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise MalformedModelFile(str(e)) from e


def save_model(model: FlimModel, path: str) -> None:
    payload = json.dumps(model_to_dict(model), sort_keys=True).encode()
    _atomic_write_bytes(path, payload)


def load_model(path: str) -> FlimModel:
    if not os.path.isfile(path):
        raise MalformedModelFile(f"missing file {path}")
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedModelFile(f"{path}: {e}") from e
    return model_from_dict(d)
