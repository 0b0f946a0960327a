"""Embedding views, linear toy encoders and the synthetic paired dataset.

Per-item views are ``n x d``; patches are ``n x M_p x d`` and stimuli
``n x 3 x d``. Where a flat grid is needed, stimuli flatten item-major to
``3n x d`` (item ``i`` owns rows ``3i .. 3i+2``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Tensor
from .rng import stream
from .tensorio import load_mdt, save_mdt

N_STIMULI = 3

VIEWS = ("image_global", "image_patches", "text_full", "text_summary", "text_stimuli")


class EmbeddingError(ValueError):
    pass


class ZeroRowError(EmbeddingError):
    def __init__(self, view: str, item: int, row: int):
        self.view, self.item, self.row = view, item, row
        super().__init__(f"zero-norm embedding in view {view!r}, item {item} (row {row})")


@dataclass
class EmbeddingBatch:
    """All embedding views for ``n`` items, as tensors on one graph."""

    image_global: Tensor
    image_patches: Tensor  # n x M_p x d
    text_full: Tensor
    text_summary: Tensor
    text_stimuli: Tensor  # n x 3 x d
    tau: float = 0.07

    def __post_init__(self):
        n, d = self.image_global.shape
        if self.tau <= 0:
            raise EmbeddingError(f"temperature must be positive, got {self.tau}")
        patches = self.image_patches.shape
        if len(patches) != 3 or patches[1] < 1:
            raise EmbeddingError(f"image_patches must be n x M_p x d with M_p >= 1, got {patches}")
        expected = {
            "image_patches": (n, patches[1], d),
            "text_full": (n, d),
            "text_summary": (n, d),
            "text_stimuli": (n, N_STIMULI, d),
        }
        for view, shape in expected.items():
            got = getattr(self, view).shape
            if got != shape:
                raise EmbeddingError(f"{view} has shape {got}, expected {shape}")

    @property
    def n(self) -> int:
        return self.image_global.shape[0]

    @property
    def d(self) -> int:
        return self.image_global.shape[1]

    @property
    def n_patches(self) -> int:
        return self.image_patches.shape[1]

    @property
    def graph(self) -> Graph:
        return self.image_global.graph

    @classmethod
    def from_arrays(cls, arrays: dict, tau: float = 0.07, graph: Graph | None = None) -> "EmbeddingBatch":
        """Build a constant batch from ``{view: array}``; patches ``n x M_p x d``, stimuli ``n x 3 x d``."""
        g = graph if graph is not None else Graph()
        return cls(**{view: g.const(arrays[view]) for view in VIEWS}, tau=tau)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {view: np.array(getattr(self, view).value) for view in VIEWS}


def normalize_batch(batch: EmbeddingBatch) -> EmbeddingBatch:
    """Unit-normalise every embedding row. Idempotent up to roundoff."""
    per_item = {"image_patches": batch.n_patches, "text_stimuli": N_STIMULI}
    out = {}
    for view in VIEWS:
        try:
            out[view] = dc.l2_normalize_rows(getattr(batch, view))
        except dc.ZeroNormError as exc:
            row = exc.rows[0]
            raise ZeroRowError(view, row // per_item.get(view, 1), row) from None
    return replace(batch, **out)


def cosine_similarity_matrix(A, B, atol: float = 1e-6):
    """``S[i, j] = <A_i, B_j>`` for unit rows. Works on arrays or tensors."""
    a_val = A.value if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    b_val = B.value if isinstance(B, Tensor) else np.asarray(B, dtype=np.float64)
    if a_val.ndim != 2 or b_val.ndim != 2 or a_val.shape[1] != b_val.shape[1]:
        raise dc.ShapeError("cosine_similarity_matrix", a_val.shape, b_val.shape)
    for name, v in (("A", a_val), ("B", b_val)):
        if v.size and np.max(np.abs(np.einsum("ij,ij->i", v, v) - 1.0)) > atol:
            raise EmbeddingError(f"cosine_similarity_matrix: rows of {name} are not unit-normalised")
    if isinstance(A, Tensor) or isinstance(B, Tensor):
        g = A.graph if isinstance(A, Tensor) else B.graph
        A = A if isinstance(A, Tensor) else g.const(a_val)
        B = B if isinstance(B, Tensor) else g.const(b_val)
        return A @ B.T
    return a_val @ b_val.T


@dataclass
class ToyEncoder:
    """Single linear layer ``d_in -> d``; stands in for an image or text tower."""

    weight: np.ndarray
    role: str = "visual"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.role not in ("visual", "text"):
            raise EmbeddingError(f"unknown encoder role {self.role!r}")
        if self.weight.ndim != 2 or not np.all(np.isfinite(self.weight)):
            raise EmbeddingError("encoder weight must be a finite 2-D matrix")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, d_in: int, d: int, role: str, seed: int) -> "ToyEncoder":
        rng = stream(seed, f"encoder/{role}")
        return cls(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d)), role)


def encode(enc, raw, graph: Graph | None = None) -> Tensor:
    """Project ``raw`` (``... x d_in``) through the encoder and unit-normalise the rows.

    ``enc`` is either a ToyEncoder (weights enter as constants) or a weight
    Tensor already on a graph, in which case gradients flow to it.
    """
    if isinstance(enc, Tensor):
        weight = enc
        g = enc.graph
    else:
        g = graph if graph is not None else Graph()
        weight = g.const(enc.weight)
    x = raw if isinstance(raw, Tensor) else g.const(raw)
    try:
        return dc.l2_normalize_rows(x @ weight)
    except dc.ZeroNormError as exc:
        raise EmbeddingError(f"encode: projection produced zero rows {exc.rows}") from None


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticDataset:
    """Paired raw views drawn from shared latent structure.

    Latents have a global block (cluster anchor plus item offset) and a
    stimulus block (three per-item stimulus vectors). Images and texts see the
    same latents through different fixed mixing matrices with orthonormal
    rows, so the two blocks stay orthogonal in raw space too. Item ``i``'s
    image pairs with text ``i``.
    """

    image_global: np.ndarray  # n x d_raw
    image_patches: np.ndarray  # n x M_p x d_raw
    text_full: np.ndarray  # n x d_raw
    text_summary: np.ndarray  # n x d_raw
    text_stimuli: np.ndarray  # n x 3 x d_raw
    class_prompts: np.ndarray  # n_clusters x d_raw
    labels: np.ndarray  # cluster id per item
    stimulus_slots: np.ndarray  # n x 3, patch index holding each stimulus
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.image_global.shape[0]

    @property
    def d_raw(self) -> int:
        return self.image_global.shape[1]

    @property
    def n_patches(self) -> int:
        return self.image_patches.shape[1]

    @property
    def pairing(self) -> np.ndarray:
        return np.arange(self.n)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            image_global=self.image_global[idx],
            image_patches=self.image_patches[idx],
            text_full=self.text_full[idx],
            text_summary=self.text_summary[idx],
            text_stimuli=self.text_stimuli[idx],
            labels=self.labels[idx],
            stimulus_slots=self.stimulus_slots[idx],
        )

    _ARRAYS = (
        "image_global",
        "image_patches",
        "text_full",
        "text_summary",
        "text_stimuli",
        "class_prompts",
        "labels",
        "stimulus_slots",
    )

    def save(self, directory) -> None:
        """One MDT1 file per array plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in self._ARRAYS:
            files[name] = f"{name}.mdt"
            save_mdt(directory / files[name], getattr(self, name))
        manifest = {"format": "affectkit-synthetic-v1", "params": self.params, "files": files}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "SyntheticDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = {name: load_mdt(directory / rel) for name, rel in manifest["files"].items()}
        for name in ("labels", "stimulus_slots"):
            arrays[name] = arrays[name].astype(np.int64)
        return cls(params=manifest.get("params", {}), **arrays)


def _orthonormal_rows(rng, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(cols, rows)))
    return q.T


def make_synthetic_dataset(
    n_items: int,
    d_raw: int = 64,
    d: int = 32,
    n_clusters: int = 8,
    sigma: float = 0.0,
    seed: int = 0,
    n_patches: int = 16,
    offset_scale: float = 0.3,
) -> SyntheticDataset:
    """Paired image/text raw vectors with cluster labels and stimulus structure.

    The latent space has ``d`` dimensions split evenly into a global block and
    a stimulus block. ``sigma`` is the std of isotropic raw-space noise added
    independently to every view; with ``sigma == 0`` and distinct items an
    ideal linear encoder retrieves perfectly.
    """
    if not 1 <= n_clusters <= n_items:
        raise EmbeddingError(f"need 1 <= n_clusters <= n_items, got {n_clusters} and {n_items}")
    if sigma < 0:
        raise EmbeddingError("sigma must be non-negative")
    if d_raw < d:
        raise EmbeddingError("d_raw must be at least the latent dimension d")
    if n_patches < N_STIMULI:
        raise EmbeddingError(f"need at least {N_STIMULI} patches to host the stimuli")
    rng = stream(seed, "dataset")
    d_g = d // 2
    d_u = d - d_g

    mix_v = _orthonormal_rows(rng, d, d_raw)
    mix_t = _orthonormal_rows(rng, d, d_raw)

    anchors = rng.normal(size=(n_clusters, d_g))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    labels = np.arange(n_items) % n_clusters
    rng.shuffle(labels)
    offsets = rng.normal(scale=offset_scale / np.sqrt(d_g), size=(n_items, d_g))
    glob = anchors[labels] + offsets

    stim = rng.normal(scale=1.0 / np.sqrt(d_u), size=(n_items, N_STIMULI, d_u))

    def lat_g(x):
        return np.concatenate([x, np.zeros(x.shape[:-1] + (d_u,))], axis=-1)

    def lat_u(x):
        return np.concatenate([np.zeros(x.shape[:-1] + (d_g,)), x], axis=-1)

    # background patches repeat a damped copy of the global content
    patch_lat = lat_g(0.5 * glob[:, None, :] + rng.normal(scale=0.5 / np.sqrt(d_g), size=(n_items, n_patches, d_g)))
    slots = np.stack([rng.permutation(n_patches)[:N_STIMULI] for _ in range(n_items)])
    for j in range(N_STIMULI):
        patch_lat[np.arange(n_items), slots[:, j]] = lat_u(stim[:, j])

    def noisy(x):
        return x + rng.normal(scale=sigma, size=x.shape) if sigma > 0 else x

    # whole-image and full-caption views both carry a damped trace of the stimuli
    trace = 0.3 * lat_u(stim.mean(axis=1))
    data = SyntheticDataset(
        image_global=noisy((lat_g(glob) + trace) @ mix_v),
        image_patches=noisy(patch_lat @ mix_v),
        text_full=noisy((lat_g(glob) + trace) @ mix_t),
        text_summary=noisy(lat_g(glob) @ mix_t),
        text_stimuli=noisy(lat_u(stim) @ mix_t),
        class_prompts=lat_g(anchors) @ mix_t,
        labels=labels.astype(np.int64),
        stimulus_slots=slots.astype(np.int64),
        params={
            "n_items": n_items,
            "d_raw": d_raw,
            "d": d,
            "n_clusters": n_clusters,
            "sigma": sigma,
            "seed": seed,
            "n_patches": n_patches,
            "offset_scale": offset_scale,
        },
    )
    return data


def encode_dataset(data: SyntheticDataset, w_visual, w_text, tau: float = 0.07, graph: Graph | None = None) -> EmbeddingBatch:
    """Encode every view of ``data`` with the two encoders into an EmbeddingBatch."""
    if graph is None:
        graph = next((w.graph for w in (w_visual, w_text) if isinstance(w, Tensor)), None) or Graph()
    return EmbeddingBatch(
        image_global=encode(w_visual, data.image_global, graph),
        image_patches=encode(w_visual, data.image_patches, graph),
        text_full=encode(w_text, data.text_full, graph),
        text_summary=encode(w_text, data.text_summary, graph),
        text_stimuli=encode(w_text, data.text_stimuli, graph),
        tau=tau,
    )


# ---------------------------------------------------------------------------
# batch files


def save_batch_jsonl(path, batch: EmbeddingBatch, ids=None) -> None:
    arrays = batch.to_arrays()
    ids = list(range(batch.n)) if ids is None else list(ids)
    with open(path, "w") as fh:
        for i, item_id in enumerate(ids):
            rec = {"id": item_id}
            rec.update({view: arrays[view][i].tolist() for view in VIEWS})
            fh.write(json.dumps(rec) + "\n")


def load_batch_jsonl(path, tau: float = 0.07, graph: Graph | None = None) -> tuple[EmbeddingBatch, list]:
    ids, cols = [], {view: [] for view in VIEWS}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [k for k in ("id",) + VIEWS if k not in rec]
            if missing:
                raise EmbeddingError(f"{path}:{lineno}: missing fields {missing}")
            ids.append(rec["id"])
            for view in VIEWS:
                cols[view].append(rec[view])
    arrays = {view: np.array(v, dtype=np.float64) for view, v in cols.items()}
    return EmbeddingBatch.from_arrays(arrays, tau=tau, graph=graph), ids


def save_batch_mdt(directory, batch: EmbeddingBatch) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = batch.to_arrays()
    for view in VIEWS:
        save_mdt(directory / f"{view}.mdt", arrays[view])
    manifest = {"n": batch.n, "d": batch.d, "n_patches": batch.n_patches, "tau": batch.tau,
                "files": {view: f"{view}.mdt" for view in VIEWS}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_batch_mdt(directory, graph: Graph | None = None) -> EmbeddingBatch:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {view: load_mdt(directory / rel) for view, rel in manifest["files"].items()}
    return EmbeddingBatch.from_arrays(arrays, tau=manifest["tau"], graph=graph)
