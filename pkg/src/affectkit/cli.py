"""``affectkit`` command line.

Every subcommand takes ``--seed``, ``--config`` and ``--out``. A config file
is JSON with a ``"command"`` key naming the subcommand; its other keys are
flag names (``n_items`` or ``n-items``) and explicit flags override them.
Each run prints a one-line JSON header with the seed and a hash of the
resolved configuration, writes its files under ``--out`` and reports errors
as JSON on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .captions import (
    EMOTIONS,
    CaptionError,
    filter_bottom_quantile,
    parse_caption_rows,
    read_jsonl,
    save_records,
    validate_taxonomy,
    write_jsonl,
)
from .edit_engine import EditConfig, ToyDenoiserParams, edit, load_prompt, toy_denoiser
from .embedding import SyntheticDataset, make_synthetic_dataset
from .evalkit import classification_metrics, image_metrics, kfold_splits, recall_at_k
from .objective import TrainConfig, ablation_grid, config_to_dict, train_toy
from .tensorio import load_tensor, save_mdt
from .transport import CostMatrix, cost_from_similarity, sinkhorn

# flags that locate files rather than describe the run; left out of the config hash
_PATH_KEYS = ("config", "out")


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _existing(path: str | None, flag: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: {path} does not exist")
    return p


# ---------------------------------------------------------------------------
# argument definitions


def _add_data_flags(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-items", type=int, default=256, help="number of paired items (default: 256)")
    g.add_argument("--d-raw", type=int, default=64, help="raw feature width (default: 64)")
    g.add_argument("--d", type=int, default=32, help="latent and embedding width (default: 32)")
    g.add_argument("--n-clusters", type=int, default=8, help="emotion clusters (default: 8)")
    g.add_argument("--sigma", type=float, default=0.0, help="raw-space noise std (default: 0)")
    g.add_argument("--n-patches", type=int, default=16, help="patches per image (default: 16)")
    g.add_argument("--offset-scale", type=float, default=0.3, help="within-cluster spread (default: 0.3)")


def _add_train_flags(p):
    _add_data_flags(p)
    p.add_argument("--data", help="dataset directory from gen-data; generated from the data flags if omitted")
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--steps", type=int, default=d.steps, help=f"gradient steps per fold (default: {d.steps})")
    g.add_argument("--lr", type=float, default=d.lr, help=f"learning rate (default: {d.lr})")
    g.add_argument("--batch-size", type=int, default=None, help="minibatch size (default: full batch)")
    g.add_argument("--lambdas", type=float, nargs=4, default=list(d.lambdas), metavar=("F", "S", "FG", "OT"),
                   help="loss weights (default: 1 1 1 1)")  # fmt: skip
    g.add_argument("--tau", type=float, default=d.tau, help=f"shared temperature (default: {d.tau})")
    for name in ("tau_f", "tau_s", "tau_fg", "tau_ot"):
        g.add_argument("--" + name.replace("_", "-"), type=float, default=None, help=f"override tau for {name[4:]}")
    g.add_argument("--pool-tau", type=float, default=d.pool_tau, help=f"cross-attention temperature (default: {d.pool_tau})")
    g.add_argument("--epsilon", type=float, default=d.epsilon, help=f"Sinkhorn regularisation (default: {d.epsilon})")
    g.add_argument("--negative-pool", choices=("within_image", "batch_wide"), default=d.negative_pool)
    g.add_argument("--pooling-rule", choices=("softmax_over_patches", "paper_literal"), default=d.pooling_rule)
    g.add_argument("--ot-mode", choices=("batch", "per_image"), default=d.ot_mode)
    g.add_argument("--folds", type=int, default=d.folds, help=f"cross-validation folds; 1 = train and test on all (default: {d.folds})")
    g.add_argument("--sinkhorn-max-iters", type=int, default=d.sinkhorn_max_iters)
    g.add_argument("--sinkhorn-tol", type=float, default=d.sinkhorn_tol)


def build_parser() -> JsonArgumentParser:
    parser = JsonArgumentParser(prog="affectkit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = JsonArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="run seed (default: 0)")
    common.add_argument("--config", help="JSON config file with a 'command' key")
    common.add_argument("--out", default="affectkit_out", help="output directory (default: affectkit_out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic paired dataset")
    _add_data_flags(p)

    p = sub.add_parser("train", parents=[common], help="train the toy encoders with k-fold evaluation")
    _add_train_flags(p)
    p.add_argument("--no-fg", dest="use_fg", action="store_false", help="drop the fine-grained loss")
    p.add_argument("--no-ot", dest="use_ot", action="store_false", help="drop the transport loss")

    p = sub.add_parser("ablate", parents=[common], help="run the four FG/OT on-off cells")
    _add_train_flags(p)

    p = sub.add_parser("sinkhorn", parents=[common], help="solve entropic transport for a cost or similarity matrix")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--cost", help="cost matrix file (.mdt, .json or .pgm)")
    src.add_argument("--similarity", help="similarity matrix file; cost = 1 - S")
    p.add_argument("--epsilon", type=float, default=0.05, help="regularisation (default: 0.05)")
    p.add_argument("--max-iters", type=int, default=1000, help="iteration cap (default: 1000)")
    p.add_argument("--tol", type=float, default=1e-9, help="marginal tolerance (default: 1e-9)")
    p.add_argument("--log-domain", choices=("auto", "on", "off"), default="auto", help="solver form (default: auto)")

    p = sub.add_parser("edit", parents=[common], help="edit an image grid toward a prompt inside a mask")
    p.add_argument("--image", help="H x W or H x W x C source grid (.mdt, .json or .pgm)")
    p.add_argument("--prompt", help="prompt manifest JSON (embedding + mask)")
    p.add_argument("--T", dest="T", type=int, default=10, help="denoising steps (default: 10)")
    p.add_argument("--tau-c", type=int, default=5, help="crossover step; refined maps while t >= tau_c (default: 5)")
    p.add_argument("--d-k", type=int, default=8, help="toy attention width (default: 8)")
    p.add_argument("--alpha", type=float, default=0.9, help="toy latent decay, nonzero (default: 0.9)")
    p.add_argument("--beta", type=float, default=0.1, help="toy drift scale (default: 0.1)")
    p.add_argument("--mix", type=float, default=0.5, help="toy neighbour mixing of attention output in [0, 1] (default: 0.5)")

    p = sub.add_parser("captions", parents=[common], help="parse, validate and filter structured captions")
    p.add_argument("--input", help="JSONL of {image_id, caption_text}")
    p.add_argument("--scores", help="JSONL of {image_id, score} for the bottom-quantile filter")
    p.add_argument("--q", type=float, default=0.2, help="fraction dropped by the filter (default: 0.2)")
    p.add_argument("--taxonomy", help="JSON list of labels to validate against the 27 emotions")

    p = sub.add_parser("eval", parents=[common], help="retrieval, classification and image metrics")
    p.add_argument("--similarity", help="n x n image-text similarity (rows = images)")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 5], help="recall cut-offs (default: 1 5)")
    p.add_argument("--scores", help="n x C class scores")
    p.add_argument("--labels", help="length-n integer labels")
    p.add_argument("--image-a", help="reference image in [0, 1]")
    p.add_argument("--image-b", help="test image in [0, 1]")
    p.add_argument("--kfold-n", type=int, help="also emit k-fold splits for this many items")
    p.add_argument("--kfold-k", type=int, default=5, help="folds for --kfold-n (default: 5)")

    parser._subparsers_by_name = sub.choices
    return parser


def parse_args(parser: JsonArgumentParser, argv) -> argparse.Namespace:
    """Parse flags, merging a ``--config`` file underneath them."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise UsageError(f"--config: cannot read {args.config}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: invalid JSON ({exc.msg})") from None
    if not isinstance(cfg, dict) or cfg.get("command") != args.command:
        raise UsageError(f"--config: 'command' must be {args.command!r}")
    sub = parser._subparsers_by_name[args.command]
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    for key, value in cfg.items():
        if key == "command":
            continue
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"--config: unknown key {key!r} for {args.command}")
        action = dests[dest]
        if action.type is not None and value is not None:
            try:
                value = [action.type(v) for v in value] if isinstance(value, list) else action.type(value)
            except (TypeError, ValueError):
                raise UsageError(f"--config: bad value for {key!r}: {value!r}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"--config: {key!r} must be one of {list(action.choices)}")
        values[dest] = value
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def run_header(args: argparse.Namespace) -> dict:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in _PATH_KEYS and k != "verbose"}
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]
    return {"command": args.command, "seed": args.seed, "config_hash": digest, "version": __version__}


# ---------------------------------------------------------------------------
# commands


def _dataset(args) -> SyntheticDataset:
    if getattr(args, "data", None):
        return SyntheticDataset.load(_existing(args.data, "--data"))
    return make_synthetic_dataset(
        args.n_items, args.d_raw, args.d, args.n_clusters, args.sigma, args.seed, args.n_patches, args.offset_scale
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        steps=args.steps,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        lambdas=tuple(args.lambdas),
        tau=args.tau,
        tau_f=args.tau_f,
        tau_s=args.tau_s,
        tau_fg=args.tau_fg,
        tau_ot=args.tau_ot,
        pool_tau=args.pool_tau,
        epsilon=args.epsilon,
        negative_pool=args.negative_pool,
        pooling_rule=args.pooling_rule,
        ot_mode=args.ot_mode,
        use_fg=getattr(args, "use_fg", True),
        use_ot=getattr(args, "use_ot", True),
        folds=args.folds,
        sinkhorn_max_iters=args.sinkhorn_max_iters,
        sinkhorn_tol=args.sinkhorn_tol,
    )


def cmd_gen_data(args, out: Path, header: dict) -> dict:
    data = _dataset(args)
    data.save(out)
    return {"n_items": data.n, "d_raw": data.d_raw, "n_patches": data.n_patches, "path": "manifest.json"}


def cmd_train(args, out: Path, header: dict) -> dict:
    data = _dataset(args)
    res = train_toy(data, _train_config(args))
    for f in res.folds:
        save_mdt(out / f"visual_fold{f.fold}.mdt", f.visual.weight)
        save_mdt(out / f"text_fold{f.fold}.mdt", f.text.weight)
    write_jsonl(out / "trace.jsonl", res.trace_records())
    _dump(out / "report.json", {"header": header, **res.report()})
    return {"metrics": res.metrics}


def cmd_ablate(args, out: Path, header: dict) -> dict:
    data = _dataset(args)
    cfg = _train_config(args)
    rows = ablation_grid(data, cfg)
    cells = [{k: v for k, v in r.items() if k != "trace_total"} for r in rows]
    _dump(out / "ablation.json", {"header": header, "config": config_to_dict(cfg), "cells": cells})
    with open(out / "ablation_traces.jsonl", "w") as fh:
        for r in rows:
            for step, total in enumerate(r["trace_total"]):
                fh.write(json.dumps({"fg": r["fg"], "ot": r["ot"], "step": step, "total": total}, sort_keys=True) + "\n")
    return {"cells": [{"fg": r["fg"], "ot": r["ot"], "region_r1": r["region_r1"], "r1_i2t": r["r1_i2t"], "top1": r["top1"]} for r in rows]}


def cmd_sinkhorn(args, out: Path, header: dict) -> dict:
    if args.cost is None and args.similarity is None:
        raise UsageError("sinkhorn: one of --cost or --similarity is required")
    if args.cost is not None:
        cost = CostMatrix.uniform(load_tensor(_existing(args.cost, "--cost")))
    else:
        cost = cost_from_similarity(load_tensor(_existing(args.similarity, "--similarity")))
    log_domain = {"auto": None, "on": True, "off": False}[args.log_domain]
    plan = sinkhorn(cost, args.epsilon, args.max_iters, args.tol, log_domain)
    _dump(out / "plan.json", {"header": header, **plan.to_dict(), "transport_cost": plan.cost(cost.values)})
    return {"iterations": plan.iterations, "converged": plan.converged, "violation": plan.violation}


def cmd_edit(args, out: Path, header: dict) -> dict:
    if args.image is None or args.prompt is None:
        raise UsageError("edit: --image and --prompt are required")
    image_path = _existing(args.image, "--image")
    prompt_path = _existing(args.prompt, "--prompt")
    V = load_tensor(image_path)
    flat = V.ndim == 2
    if flat:
        V = V[:, :, None]
    if V.ndim != 3:
        raise ValueError(f"--image must be H x W or H x W x C, got shape {V.shape}")
    P_E, M_E = load_prompt(prompt_path, V.shape)
    cfg = EditConfig(args.T, args.tau_c, args.seed)
    params = ToyDenoiserParams(H=V.shape[0], W=V.shape[1], C=V.shape[2], d=P_E.shape[1], K=P_E.shape[0],
                               d_k=args.d_k, T=args.T, alpha=args.alpha, beta=args.beta, mix=args.mix)  # fmt: skip
    result, trace = edit(V, P_E, M_E, cfg, toy_denoiser(params, args.seed))
    save_mdt(out / "edited.mdt", result[:, :, 0] if flat else result)
    steps = [
        {
            "t": r.t,
            "refined": bool(r.t >= cfg.tau_c),
            "max_row_error": float(max(np.max(np.abs(M.sum(axis=1) - 1.0)) for M in (r.M_src, r.M_tgt, r.M_blend))),
            "max_latent_gap": float(np.max(np.abs(r.z_tgt - r.z_src))),
        }
        for r in trace.records
    ]
    masked = int(M_E.sum())
    _dump(out / "trace.json", {"header": header, "T": cfg.T, "tau_c": cfg.tau_c, "masked_pixels": masked, "steps": steps})
    return {"max_abs_change": float(np.max(np.abs(result - V))), "masked_pixels": masked}


def cmd_captions(args, out: Path, header: dict) -> dict:
    if args.input is None and args.scores is None and args.taxonomy is None:
        raise UsageError("captions: give at least one of --input, --scores or --taxonomy")
    paths = {k: _existing(getattr(args, k), f"--{k}") for k in ("input", "scores", "taxonomy")}
    report: dict = {"header": header}
    if paths["input"] is not None:
        records, rejected = parse_caption_rows(read_jsonl(paths["input"]))
        save_records(out / "records.jsonl", records)
        write_jsonl(out / "rejected.jsonl", rejected)
        counts = {e: 0 for e in EMOTIONS}
        for r in records:
            counts[r.emotion] += 1
        report["parsed"] = len(records)
        report["rejected"] = len(rejected)
        report["emotion_counts"] = {e: c for e, c in counts.items() if c}
    if paths["scores"] is not None:
        rows = read_jsonl(paths["scores"])
        try:
            pairs = [(r["image_id"], r["score"]) for r in rows]
        except KeyError as exc:
            raise CaptionError(f"--scores rows need 'image_id' and 'score' (missing {exc.args[0]!r})") from None
        kept = filter_bottom_quantile(pairs, args.q)
        write_jsonl(out / "kept.jsonl", ({"image_id": i} for i in kept))
        report["filter"] = {"q": args.q, "n": len(pairs), "kept": len(kept), "dropped": len(pairs) - len(kept)}
    if paths["taxonomy"] is not None:
        labels = json.loads(paths["taxonomy"].read_text())
        if not isinstance(labels, list):
            raise CaptionError("--taxonomy must hold a JSON list of labels")
        report["taxonomy"] = validate_taxonomy(labels).to_dict()
    _dump(out / "captions_report.json", report)
    return {k: v for k, v in report.items() if k in ("parsed", "rejected", "filter", "taxonomy")}


def cmd_eval(args, out: Path, header: dict) -> dict:
    metrics: dict = {}
    if args.similarity is not None:
        S = load_tensor(_existing(args.similarity, "--similarity"))
        metrics["retrieval"] = {
            f"{d}_r{k}": recall_at_k(S, k, d) for d in ("i2t", "t2i") for k in args.ks
        }
    if (args.scores is None) != (args.labels is None):
        raise UsageError("eval: --scores and --labels go together")
    if args.scores is not None:
        scores = load_tensor(_existing(args.scores, "--scores"))
        labels = load_tensor(_existing(args.labels, "--labels"))
        if not np.all(labels == np.round(labels)):
            raise ValueError("--labels must hold integers")
        metrics["classification"] = classification_metrics(scores, labels.astype(np.int64)).to_dict()
    if (args.image_a is None) != (args.image_b is None):
        raise UsageError("eval: --image-a and --image-b go together")
    if args.image_a is not None:
        A = load_tensor(_existing(args.image_a, "--image-a"))
        B = load_tensor(_existing(args.image_b, "--image-b"))
        metrics["image"] = image_metrics(A, B).to_dict()
    if args.kfold_n is not None:
        metrics["kfold"] = [
            {"train": tr.tolist(), "test": te.tolist()} for tr, te in kfold_splits(args.kfold_n, args.kfold_k, args.seed)
        ]
    if not metrics:
        raise UsageError("eval: nothing to evaluate; give --similarity, --scores/--labels, --image-a/--image-b or --kfold-n")
    _dump(out / "metrics.json", {"header": header, **metrics})
    return {k: v for k, v in metrics.items() if k != "kfold"}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sinkhorn": cmd_sinkhorn,
    "edit": cmd_edit,
    "captions": cmd_captions,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    header = run_header(args)
    print(json.dumps(header, sort_keys=True))
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, out, header)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    except FileNotFoundError as exc:
        _emit_error("missing_file", str(exc))
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
