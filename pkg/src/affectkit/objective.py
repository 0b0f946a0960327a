"""Weighted four-part objective, toy gradient-descent training and the FG/OT ablation grid."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .contrastive import (
    NEGATIVE_POOLS,
    POOLING_RULES,
    ContrastiveConfig,
    block_mask,
    global_loss,
    pool_regions,
    region_contrastive_loss,
    region_similarity,
    summary_loss,
)
from .diffcore import Graph, Tensor
from .embedding import N_STIMULI, EmbeddingBatch, EmbeddingError, SyntheticDataset, ToyEncoder, encode, encode_dataset
from .evalkit import classification_metrics, kfold_splits, recall_at_k, retrieval_metrics
from .rng import stream
from .transport import TransportPlan, cost_from_similarity, ot_loss, sinkhorn

log = logging.getLogger(__name__)

COMPONENTS = ("l_f", "l_s", "l_fg", "l_ot")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 0.1
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    tau: float = 0.07
    # per-loss temperatures; None falls back to the shared tau
    tau_f: float | None = None
    tau_s: float | None = None
    tau_fg: float | None = None
    tau_ot: float | None = None
    pool_tau: float | None = 0.2
    epsilon: float = 0.05
    negative_pool: str = "within_image"
    pooling_rule: str = "softmax_over_patches"
    ot_mode: str = "batch"
    use_fg: bool = True
    use_ot: bool = True
    folds: int = 5
    d: int | None = None  # embedding width; None = dataset latent width
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if len(self.lambdas) != 4 or any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas must be four non-negative weights")
        for name in ("tau", "tau_f", "tau_s", "tau_fg", "tau_ot", "pool_tau", "epsilon"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.negative_pool not in NEGATIVE_POOLS:
            raise ValueError(f"negative_pool must be one of {NEGATIVE_POOLS}")
        if self.pooling_rule not in POOLING_RULES:
            raise ValueError(f"pooling_rule must be one of {POOLING_RULES}")
        if self.ot_mode not in ("batch", "per_image"):
            raise ValueError("ot_mode must be 'batch' or 'per_image'")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def effective_lambdas(self) -> tuple[float, float, float, float]:
        lf, ls, lfg, lot = self.lambdas
        return (lf, ls, lfg if self.use_fg else 0.0, lot if self.use_ot else 0.0)

    def temperature(self, component: str) -> float:
        override = {"l_f": self.tau_f, "l_s": self.tau_s, "l_fg": self.tau_fg, "l_ot": self.tau_ot}[component]
        return self.tau if override is None else override

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature("l_fg"), self.negative_pool, self.pooling_rule, self.pool_tau)


@dataclass
class LossBreakdown:
    l_f: float
    l_s: float
    l_fg: float
    l_ot: float
    total: float
    lambdas: tuple[float, float, float, float]
    gradients: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    total_tensor: Tensor | None = field(default=None, repr=False)
    plan: TransportPlan | None = field(default=None, repr=False)

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in COMPONENTS}

    def to_record(self) -> dict:
        return {**self.components(), "total": self.total}


def transport_plan(
    S: np.ndarray, cfg: TrainConfig, init: np.ndarray | None = None
) -> tuple[np.ndarray, TransportPlan | None]:
    """Sinkhorn plan for a region grid, batch-wide or one 3 x 3 problem per item."""
    if cfg.ot_mode == "batch":
        plan = sinkhorn(cost_from_similarity(S), cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol, init=init)
        return plan.values, plan
    n = S.shape[0] // N_STIMULI
    P = np.zeros_like(S)
    for i in range(n):
        sl = slice(N_STIMULI * i, N_STIMULI * (i + 1))
        P[sl, sl] = sinkhorn(cost_from_similarity(S[sl, sl]), cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol).values
    return P, None


def moodifyclip_loss(
    batch: EmbeddingBatch,
    cfg: TrainConfig | None = None,
    warm_start: np.ndarray | None = None,
    plan: np.ndarray | None = None,
) -> LossBreakdown:
    """All four components plus their weighted total, with gradients for every graph parameter.

    Components are always evaluated so the breakdown does not depend on the
    weights; terms whose weight is zero are left out of the total's graph.
    For the transport term the plan is rescaled so its rows sum to one and
    the logits are divided by the OT temperature. ``warm_start`` seeds the
    batch-mode Sinkhorn solve with a previous plan's column scaling; ``plan``
    skips the solve and uses the given ``3n x 3n`` plan as is.
    """
    cfg = cfg or TrainConfig()
    terms: dict[str, Tensor] = {
        "l_f": global_loss(batch, cfg.temperature("l_f")),
        "l_s": summary_loss(batch, cfg.temperature("l_s")),
    }
    ccfg = cfg.contrastive()
    regions = pool_regions(batch.image_patches, batch.text_stimuli, ccfg)
    terms["l_fg"] = region_contrastive_loss(regions.values, batch.text_stimuli, ccfg)
    S = region_similarity(regions.values, batch.text_stimuli)
    if plan is None:
        P, solved = transport_plan(S.value, cfg, warm_start)
    else:
        P, solved = np.asarray(plan, dtype=np.float64), None
        if P.shape != S.shape:
            raise ValueError(f"fixed plan shape {P.shape} does not match the region grid {S.shape}")
    rows = S.shape[0] if cfg.ot_mode == "batch" else N_STIMULI
    mask = None if cfg.ot_mode == "batch" else block_mask(batch.n, N_STIMULI, N_STIMULI)
    terms["l_ot"] = ot_loss(P, S, scale=rows / cfg.temperature("l_ot"), mask=mask)

    lambdas = cfg.effective_lambdas
    weighted = [term * lam for lam, term in zip(lambdas, terms.values()) if lam > 0]
    g = batch.graph
    if weighted:
        total = weighted[0]
        for w in weighted[1:]:
            total = total + w
    else:
        total = g.const(0.0)
    grads = {p.name or str(p.id): v for p, v in dc.backward(total).items()} if g.params else {}
    return LossBreakdown(
        **{k: t.item() for k, t in terms.items()},
        total=total.item(),
        lambdas=lambdas,
        gradients=grads,
        total_tensor=total,
        plan=solved,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate_encoders(
    visual: ToyEncoder, text: ToyEncoder, data: SyntheticDataset, cfg: TrainConfig | None = None
) -> dict[str, float]:
    """Retrieval R@1/R@5, zero-shot cluster Top-1/2/3 and region-alignment R@1 on ``data``."""
    cfg = cfg or TrainConfig()
    g = Graph(cfg.seed)
    batch = encode_dataset(data, visual, text, cfg.tau, graph=g)
    S = batch.image_global.value @ batch.text_full.value.T
    prompts = encode(text, data.class_prompts, graph=g).value
    cls = classification_metrics(batch.image_global.value @ prompts.T, data.labels)
    regions = pool_regions(batch.image_patches, batch.text_stimuli, cfg.contrastive())
    R = region_similarity(regions.values, batch.text_stimuli).value
    region_r1 = 0.5 * (recall_at_k(R, 1, "i2t") + recall_at_k(R, 1, "t2i"))
    return {**retrieval_metrics(S).to_dict(), **cls.to_dict(), "region_r1": region_r1}


# ---------------------------------------------------------------------------
# training


@dataclass
class FoldResult:
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    visual: ToyEncoder
    text: ToyEncoder
    trace: list[LossBreakdown]
    metrics: dict[str, float]
    initial_metrics: dict[str, float]


@dataclass
class TrainResult:
    config: TrainConfig
    folds: list[FoldResult]
    metrics: dict[str, float]
    metrics_std: dict[str, float]

    @property
    def visual(self) -> ToyEncoder:
        return self.folds[0].visual

    @property
    def text(self) -> ToyEncoder:
        return self.folds[0].text

    @property
    def trace(self) -> list[LossBreakdown]:
        return self.folds[0].trace

    def trace_records(self) -> list[dict]:
        return [
            {"fold": f.fold, "step": step, **br.to_record()} for f in self.folds for step, br in enumerate(f.trace)
        ]

    def report(self) -> dict:
        return {
            "config": config_to_dict(self.config),
            "metrics": self.metrics,
            "metrics_std": self.metrics_std,
            "folds": [
                {
                    "fold": f.fold,
                    "n_train": int(f.train_idx.size),
                    "n_test": int(f.test_idx.size),
                    "initial_metrics": f.initial_metrics,
                    "metrics": f.metrics,
                    "final_loss": f.trace[-1].to_record() if f.trace else None,
                }
                for f in self.folds
            ],
        }


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lambdas"] = list(cfg.lambdas)
    return d


def _fit(data: SyntheticDataset, cfg: TrainConfig, fold: int) -> tuple[ToyEncoder, ToyEncoder, list[LossBreakdown]]:
    d = cfg.d or int(data.params.get("d", 32))
    visual = ToyEncoder.init(data.d_raw, d, "visual", cfg.seed)
    text = ToyEncoder.init(data.d_raw, d, "text", cfg.seed)
    batch_rng = stream(cfg.seed, f"minibatch/{fold}")
    trace: list[LossBreakdown] = []
    warm = None
    for step in range(cfg.steps):
        sub = data
        if cfg.batch_size is not None and cfg.batch_size < data.n:
            sub = data.subset(np.sort(batch_rng.choice(data.n, cfg.batch_size, replace=False)))
        g = Graph(cfg.seed)
        wv = g.param(visual.weight, "visual")
        wt = g.param(text.weight, "text")
        try:
            br = moodifyclip_loss(encode_dataset(sub, wv, wt, cfg.tau, graph=g), cfg, warm)
        except (dc.DiffcoreError, EmbeddingError) as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if not np.isfinite(br.total):
            raise TrainingDiverged(step, "non-finite total loss")
        grads = br.gradients
        # full-batch steps see the same items, so the previous scaling is a good start
        if cfg.batch_size is None and br.plan is not None:
            warm = br.plan.scaling
        trace.append(replace(br, gradients={}, total_tensor=None, plan=None))
        with np.errstate(over="ignore", invalid="ignore"):
            new_v = visual.weight - cfg.lr * grads["visual"]
            new_t = text.weight - cfg.lr * grads["text"]
        if not (np.all(np.isfinite(new_v)) and np.all(np.isfinite(new_t))):
            raise TrainingDiverged(step, "non-finite encoder weights")
        visual = replace(visual, weight=new_v)
        text = replace(text, weight=new_t)
    return visual, text, trace


def train_toy(data: SyntheticDataset, cfg: TrainConfig | None = None) -> TrainResult:
    """Plain gradient descent on the two linear encoders, evaluated on held-out folds.

    With ``cfg.folds == 1`` the model is trained and evaluated on all items.
    Every fold starts from the same seeded initialisation.
    """
    cfg = cfg or TrainConfig()
    if cfg.folds == 1:
        splits = [(np.arange(data.n), np.arange(data.n))]
    else:
        splits = kfold_splits(data.n, cfg.folds, cfg.seed)
    folds = []
    for k, (train_idx, test_idx) in enumerate(splits):
        train, test = data.subset(train_idx), data.subset(test_idx)
        d = cfg.d or int(data.params.get("d", 32))
        init_metrics = evaluate_encoders(
            ToyEncoder.init(data.d_raw, d, "visual", cfg.seed), ToyEncoder.init(data.d_raw, d, "text", cfg.seed), test, cfg
        )
        visual, text, trace = _fit(train, cfg, k)
        metrics = evaluate_encoders(visual, text, test, cfg)
        log.info("fold %d: %s", k, json.dumps(metrics, sort_keys=True))
        folds.append(FoldResult(k, train_idx, test_idx, visual, text, trace, metrics, init_metrics))
    keys = folds[0].metrics.keys()
    mean = {k: float(np.mean([f.metrics[k] for f in folds])) for k in keys}
    std = {k: float(np.std([f.metrics[k] for f in folds])) for k in keys}
    return TrainResult(cfg, folds, mean, std)


ABLATION_CELLS = ((False, False), (True, False), (False, True), (True, True))


def ablation_grid(data: SyntheticDataset, cfg: TrainConfig | None = None) -> list[dict]:
    """Train the four FG/OT on-off cells with shared seed and data."""
    cfg = cfg or TrainConfig()
    rows = []
    for use_fg, use_ot in ABLATION_CELLS:
        res = train_toy(data, replace(cfg, use_fg=use_fg, use_ot=use_ot))
        rows.append(
            {
                "fg": use_fg,
                "ot": use_ot,
                "steps": cfg.steps,
                "r1_i2t": res.metrics["i2t_r1"],
                "r1_t2i": res.metrics["t2i_r1"],
                "top1": res.metrics["top1"],
                "region_r1": res.metrics["region_r1"],
                "metrics": res.metrics,
                "metrics_std": res.metrics_std,
                "trace_total": [br.total for br in res.trace],
            }
        )
    return rows
