"""Masked emotional editing with attention blending over a pluggable denoiser.

Two trajectories run side by side from the inverted source latent. The
source pass is unconditioned; the target pass is conditioned on the emotion
prompt and has its cross-attention replaced by a blend of both passes' maps.
After every step the emotion mask splices target pixels into the source
latent, so pixels outside the mask follow the source trajectory exactly.

Shapes: latents and images are ``H x W x C``; attention maps are ``P x K``
with ``P = H * W`` pixels in row-major order and ``K`` prompt tokens; masks
are ``H x W`` with values in {0, 1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .rng import stream
from .tensorio import TensorFormatError, load_mdt, save_mdt

ROW_TOL = 1e-9


class EditError(ValueError):
    """Contract violation during editing; ``step`` is the offending timestep when known."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step t={step}: {message}")


class PromptFileError(ValueError):
    pass


def _mask_rows(mask: np.ndarray, n_rows: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.size != n_rows:
        raise EditError(f"mask with {m.size} pixels does not match {n_rows} attention rows")
    return m.reshape(-1) > 0


def check_mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise EditError("emotion mask must be binary (values 0 or 1)")
    return m


def check_attention(M: np.ndarray, step: int | None = None) -> np.ndarray:
    """Raise unless ``M`` is a finite, nonnegative, row-stochastic matrix."""
    M = np.asarray(M)
    if M.ndim != 2:
        raise EditError(f"attention map must be P x K, got shape {M.shape}", step)
    if not np.all(np.isfinite(M)) or np.any(M < 0):
        raise EditError("attention map has negative or non-finite entries", step)
    err = np.max(np.abs(M.sum(axis=1) - 1.0)) if M.size else 0.0
    if err > ROW_TOL:
        raise EditError(f"attention rows deviate from 1 by {err:.3g}", step)
    return M


# ---------------------------------------------------------------------------
# blending


def refine(M_src, M_tgt, mask) -> np.ndarray:
    """Row splice: pixels inside ``mask`` take the target row, the rest keep the source row.

    The mask is spatial, so a selected pixel takes every token column of its
    target row. Rows are renormalised only if the result drifts off the
    simplex by more than 1e-9 (it cannot when both inputs are stochastic).
    """
    M_src = np.asarray(M_src, dtype=np.float64)
    M_tgt = np.asarray(M_tgt, dtype=np.float64)
    if M_src.shape != M_tgt.shape or M_src.ndim != 2:
        raise EditError(f"attention shapes differ: {M_src.shape} vs {M_tgt.shape}")
    rows = _mask_rows(check_mask(mask), M_src.shape[0])
    out = np.where(rows[:, None], M_tgt, M_src)
    sums = out.sum(axis=1, keepdims=True)
    if out.size and np.max(np.abs(sums - 1.0)) > ROW_TOL:
        out = out / sums
    return out


def blend_maps(M_src, M_tgt, mask, t: int, tau_c: int) -> np.ndarray:
    """Refined map while ``t >= tau_c`` (early, noisy steps), plain target map afterwards."""
    if np.shape(M_src) != np.shape(M_tgt):
        raise EditError(f"attention shapes differ: {np.shape(M_src)} vs {np.shape(M_tgt)}")
    if t >= tau_c:
        return refine(M_src, M_tgt, mask)
    return np.array(M_tgt, dtype=np.float64)


def latent_blend(z_src, z_tgt, mask) -> np.ndarray:
    """Per-pixel selection across all channels: target where ``mask > 0``, else source."""
    z_src = np.asarray(z_src, dtype=np.float64)
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    if z_src.shape != z_tgt.shape:
        raise EditError(f"latent shapes differ: {z_src.shape} vs {z_tgt.shape}")
    m = check_mask(mask)
    if m.shape != z_src.shape[:2]:
        raise EditError(f"mask {m.shape} does not match latent grid {z_src.shape[:2]}")
    return np.where((m > 0)[:, :, None], z_tgt, z_src)


# ---------------------------------------------------------------------------
# denoisers


@runtime_checkable
class Denoiser(Protocol):
    """One denoising step with exposed cross-attention, plus inversion."""

    def step(self, z_t: np.ndarray, prompt: np.ndarray | None, t: int) -> tuple[np.ndarray, np.ndarray]: ...

    def step_with_override(self, z_t: np.ndarray, prompt: np.ndarray | None, t: int, M: np.ndarray) -> np.ndarray: ...

    def invert(self, V: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ToyDenoiserParams:
    H: int = 8
    W: int = 8
    C: int = 2
    d: int = 16  # prompt embedding width
    K: int = 4  # tokens per prompt
    d_k: int = 8
    T: int = 10
    alpha: float = 0.9
    beta: float = 0.1
    bias_scale: float = 0.1
    mix: float = 0.5  # weight of the 4-neighbour average in the attention output

    def __post_init__(self):
        for name in ("H", "W", "C", "d", "K", "d_k", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.alpha == 0 or not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite and nonzero; the step would not be invertible")
        if not 0 <= self.mix <= 1:
            raise ValueError("mix must lie in [0, 1]")


class ToyDenoiser:
    """Affine toy flow with one cross-attention site.

    ``z_{t-1} = alpha * z_t + beta * (b_t + [N(M_t @ (P W_v))])``; the bracket is
    present only for a real prompt. ``M_t = softmax(q(z_t) (P W_k)^T / sqrt(d_k))``
    with pixel queries built from the latent channels and a fixed positional
    code. ``N`` blends each pixel's attention output with the mean of its four
    neighbours (weight ``mix``), so attention rows near a pixel also shape it. The unconditioned update is affine in ``z_t`` with a known offset,
    so inversion is closed-form.
    """

    def __init__(self, params: ToyDenoiserParams | None = None, seed: int = 0):
        self.params = p = params or ToyDenoiserParams()
        self.seed = seed
        rng = stream(seed, "toy_denoiser")
        P = p.H * p.W
        self.pos = rng.normal(size=(P, p.d_k))
        self.w_q = rng.normal(scale=1.0 / np.sqrt(p.C), size=(p.C, p.d_k))
        self.w_k = rng.normal(scale=1.0 / np.sqrt(p.d), size=(p.d, p.d_k))
        self.w_v = rng.normal(scale=1.0 / np.sqrt(p.d), size=(p.d, p.C))
        self.null_tokens = rng.normal(scale=1.0 / np.sqrt(p.d), size=(p.K, p.d))
        self.bias = rng.normal(scale=p.bias_scale, size=(p.T + 1, p.H, p.W, p.C))
        for a in (self.pos, self.w_q, self.w_k, self.w_v, self.null_tokens, self.bias):
            a.flags.writeable = False

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.params.H, self.params.W, self.params.C)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.params.T:
            raise EditError(f"timestep must lie in [1, {self.params.T}]", t)

    def _check_latent(self, z: np.ndarray, t: int | None = None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.latent_shape:
            raise EditError(f"latent shape {z.shape} != {self.latent_shape}", t)
        if not np.all(np.isfinite(z)):
            raise EditError("latent has non-finite values", t)
        return z

    def _tokens(self, prompt) -> np.ndarray:
        if prompt is None:
            return self.null_tokens
        P_E = np.asarray(prompt, dtype=np.float64)
        if P_E.shape != (self.params.K, self.params.d):
            raise EditError(f"prompt must be {self.params.K} x {self.params.d}, got {P_E.shape}")
        return P_E

    def attention(self, z_t, prompt, t: int) -> np.ndarray:
        z = self._check_latent(z_t, t)
        q = z.reshape(-1, self.params.C) @ self.w_q + self.pos
        logits = q @ (self._tokens(prompt) @ self.w_k).T / np.sqrt(self.params.d_k)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def _advance(self, z: np.ndarray, prompt, t: int, M: np.ndarray) -> np.ndarray:
        p = self.params
        drift = self.bias[t]
        if prompt is not None:
            drift = drift + self._neighbour_mix((M @ (self._tokens(prompt) @ self.w_v)).reshape(self.latent_shape))
        return p.alpha * z + p.beta * drift

    def _neighbour_mix(self, x: np.ndarray) -> np.ndarray:
        if self.params.mix == 0:
            return x
        pad = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = (pad[:-2, 1:-1] + pad[2:, 1:-1] + pad[1:-1, :-2] + pad[1:-1, 2:]) / 4.0
        return (1.0 - self.params.mix) * x + self.params.mix * avg

    def step(self, z_t, prompt, t: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_t(t)
        z = self._check_latent(z_t, t)
        M = self.attention(z, prompt, t)
        return self._advance(z, prompt, t, M), M

    def step_with_override(self, z_t, prompt, t: int, M) -> np.ndarray:
        self._check_t(t)
        z = self._check_latent(z_t, t)
        M = check_attention(M, t)
        if M.shape != (z.shape[0] * z.shape[1], self.params.K):
            raise EditError(f"override map shape {M.shape} does not fit the latent and prompt", t)
        return self._advance(z, prompt, t, M)

    def invert(self, V) -> np.ndarray:
        """Closed-form inverse of ``T`` unconditioned steps: returns ``z_T`` with ``z_0 = V``."""
        p = self.params
        z = self._check_latent(V)
        for t in range(1, p.T + 1):
            z = (z - p.beta * self.bias[t]) / p.alpha
        return z


def toy_denoiser(params: ToyDenoiserParams | None = None, seed: int = 0) -> ToyDenoiser:
    return ToyDenoiser(params, seed)


# ---------------------------------------------------------------------------
# editing loop


@dataclass(frozen=True)
class EditConfig:
    """``tau_c`` is the crossover step: blending uses refined maps while ``t >= tau_c``."""

    T: int = 10
    tau_c: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not 0 <= self.tau_c <= self.T + 1:
            raise ValueError(f"tau_c must lie in [0, {self.T + 1}], got {self.tau_c}")


@dataclass
class StepRecord:
    t: int
    M_src: np.ndarray
    M_tgt: np.ndarray
    M_blend: np.ndarray
    z_src: np.ndarray  # unconditioned z_{t-1}
    z_tgt: np.ndarray  # blended z*_{t-1}


@dataclass
class EditTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def attention_maps(self):
        for r in self.records:
            yield from (r.M_src, r.M_tgt, r.M_blend)

    def max_row_error(self) -> float:
        return max((float(np.max(np.abs(M.sum(axis=1) - 1.0))) for M in self.attention_maps()), default=0.0)


def edit(V, prompt, mask, cfg: EditConfig, denoiser: Denoiser) -> tuple[np.ndarray, EditTrace]:
    """Edit image ``V`` toward ``prompt`` inside ``mask``; returns ``(z*_0, trace)``."""
    mask = check_mask(mask)
    V = np.asarray(V, dtype=np.float64)
    if mask.shape != V.shape[:2]:
        raise EditError(f"mask {mask.shape} does not match image grid {V.shape[:2]}")
    z = denoiser.invert(V)
    z_star = z
    trace = EditTrace()
    for t in range(cfg.T, 0, -1):
        z_prev, M_src = denoiser.step(z, None, t)
        _, M_tgt = denoiser.step(z_star, prompt, t)
        check_attention(M_src, t)
        check_attention(M_tgt, t)
        M_blend = check_attention(blend_maps(M_src, M_tgt, mask, t, cfg.tau_c), t)
        z_star_prev = denoiser.step_with_override(z_star, prompt, t, M_blend)
        z_star_prev = latent_blend(z_prev, z_star_prev, mask)
        if not (np.all(np.isfinite(z_prev)) and np.all(np.isfinite(z_star_prev))):
            raise EditError("non-finite latent", t)
        trace.records.append(StepRecord(t, M_src, M_tgt, M_blend, z_prev, z_star_prev))
        z, z_star = z_prev, z_star_prev
    return z_star, trace


def generate(z_T, prompt, T: int, denoiser: Denoiser) -> np.ndarray:
    """Plain prompted trajectory from ``z_T`` without any attention control."""
    z = np.asarray(z_T, dtype=np.float64)
    for t in range(T, 0, -1):
        z, _ = denoiser.step(z, prompt, t)
    return z


# ---------------------------------------------------------------------------
# prompt files
#
# A prompt file is a JSON manifest {"K", "d", "H", "W", "embedding", "mask"}
# whose last two entries name MDT1 tensors relative to the manifest.


def write_prompt(path, embedding, mask, embedding_file: str = "prompt_embedding.mdt", mask_file: str = "prompt_mask.mdt") -> None:
    path = Path(path)
    emb = np.asarray(embedding, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if emb.ndim != 2 or m.ndim != 2:
        raise PromptFileError(f"embedding must be K x d and mask H x W, got {emb.shape} and {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise PromptFileError("mask must be binary")
    save_mdt(path.parent / embedding_file, emb)
    save_mdt(path.parent / mask_file, m)
    manifest = {"K": emb.shape[0], "d": emb.shape[1], "H": m.shape[0], "W": m.shape[1], "embedding": embedding_file, "mask": mask_file}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_prompt(path, latent_shape: tuple[int, ...] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read ``(P_E, M_E)`` from a manifest; optionally check the mask against a latent's grid."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PromptFileError(f"cannot read prompt manifest {path}: {exc}") from None
    keys = {"K", "d", "H", "W", "embedding", "mask"}
    if not isinstance(manifest, dict) or not keys <= manifest.keys():
        raise PromptFileError(f"prompt manifest needs keys {sorted(keys)}")
    try:
        emb = load_mdt(path.parent / manifest["embedding"])
        mask = load_mdt(path.parent / manifest["mask"])
    except (OSError, TensorFormatError) as exc:
        raise PromptFileError(f"cannot read prompt tensors: {exc}") from None
    if emb.shape != (manifest["K"], manifest["d"]):
        raise PromptFileError(f"embedding shape {emb.shape} != manifest ({manifest['K']}, {manifest['d']})")
    if mask.shape != (manifest["H"], manifest["W"]):
        raise PromptFileError(f"mask shape {mask.shape} != manifest ({manifest['H']}, {manifest['W']})")
    if not np.all((mask == 0) | (mask == 1)):
        raise PromptFileError("mask must be binary (values 0 or 1)")
    if latent_shape is not None and tuple(latent_shape[:2]) != mask.shape:
        raise PromptFileError(f"mask {mask.shape} does not match latent grid {tuple(latent_shape[:2])}")
    return emb, mask


prompt_provider = load_prompt
